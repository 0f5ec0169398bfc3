//! Truncation rules as active-set constructors, and the per-step chain that
//! composes them.
//!
//! Every masking rule in a chain sees the same post-temperature distribution;
//! their sets are intersected with a single greedy fallback, then the kept
//! tokens are renormalized and sampled. The entropy-dependent temperature
//! rule (EDT) does not mask: it replaces the distribution the masks see.

use std::fmt;
use std::sync::Arc;

use rand::Rng;

use crate::calibrated::{calibrated_epsilon_set, calibrated_topk_set, TopKTable};
use crate::calibration::{bin_index, LogLogFit, TraceStep, DEFAULT_BINS};
use crate::error::{Error, Result};
use crate::prob::{
    intersect, renormalize_and_sample, temp_softmax, ActiveSet, Logits, ProbDist, SortedDist,
};

/// Temperature used by EDT when the base distribution has zero entropy.
pub const NEAR_GREEDY_TEMPERATURE: f64 = 1e-4;

pub fn top_k_set(sd: &SortedDist, k: usize) -> Result<ActiveSet> {
    if k == 0 {
        return Err(Error::param("top_k.k", "must be at least 1"));
    }
    Ok(ActiveSet::top_ranks(sd, k, "top_k"))
}

/// Smallest rank prefix whose cumulative probability reaches `p`.
pub fn top_p_set(sd: &SortedDist, p: f64) -> Result<ActiveSet> {
    if !(p > 0.0 && p <= 1.0) {
        return Err(Error::param("top_p.p", format!("must lie in (0, 1], got {p}")));
    }
    let probs = sd.sorted_probs();
    let mut cumulative = 0.0;
    let mut k = probs.len();
    for (i, &q) in probs.iter().enumerate() {
        cumulative += q;
        if cumulative >= p {
            k = i + 1;
            break;
        }
    }
    // an unreached p = 1 (rounding) keeps every token with mass
    if k == probs.len() {
        k = probs.iter().rposition(|&q| q > 0.0).map_or(1, |i| i + 1);
    }
    Ok(ActiveSet::top_ranks(sd, k, "top_p"))
}

/// Tokens with `p ≥ p_base · p_max`.
pub fn min_p_set(sd: &SortedDist, p_base: f64) -> Result<ActiveSet> {
    if !(p_base > 0.0 && p_base < 1.0) {
        return Err(Error::param("min_p.p_base", format!("must lie in (0, 1), got {p_base}")));
    }
    let threshold = p_base * sd.confidence();
    let argmax = sd.argmax();
    Ok(ActiveSet::filter_or_greedy(sd, "min_p", |v, p| v == argmax || p >= threshold))
}

/// Tokens with `p ≥ eps`; `{argmax}` if none.
pub fn epsilon_set(sd: &SortedDist, eps: f64) -> Result<ActiveSet> {
    if !(0.0..1.0).contains(&eps) {
        return Err(Error::param("epsilon.eps", format!("must lie in [0, 1), got {eps}")));
    }
    Ok(ActiveSet::filter_or_greedy(sd, "epsilon", |_, p| p >= eps))
}

/// η-sampling cutoff `min(η, √η · e^{-H})`.
pub fn eta_threshold(eta: f64, entropy: f64) -> f64 {
    eta.min(eta.sqrt() * (-entropy).exp())
}

/// Tokens with `p ≥ min(η, √η · e^{-H})`; `{argmax}` if none.
pub fn eta_set(sd: &SortedDist, eta: f64, entropy: f64) -> Result<ActiveSet> {
    if !(eta > 0.0 && eta < 1.0) {
        return Err(Error::param("eta.eta", format!("must lie in (0, 1), got {eta}")));
    }
    let threshold = eta_threshold(eta, entropy);
    Ok(ActiveSet::filter_or_greedy(sd, "eta", |_, p| p >= threshold))
}

/// Parameters of entropy-dependent temperature scaling.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EdtParams {
    pub t0: f64,
    pub n: f64,
    pub theta: f64,
}

impl Default for EdtParams {
    fn default() -> Self {
        Self {
            t0: 0.7,
            n: 0.8,
            theta: 1.0,
        }
    }
}

impl EdtParams {
    fn validate(&self) -> Result<()> {
        if !(self.t0.is_finite() && self.t0 > 0.0) {
            return Err(Error::param("edt.t0", format!("must be positive, got {}", self.t0)));
        }
        if !(self.n > 0.0 && self.n < 1.0) {
            return Err(Error::param("edt.n", format!("must lie in (0, 1), got {}", self.n)));
        }
        if !(self.theta.is_finite() && self.theta > 0.0) {
            return Err(Error::param("edt.theta", format!("must be positive, got {}", self.theta)));
        }
        Ok(())
    }

    /// `T0 · N^(θ / H)`, floored at [`NEAR_GREEDY_TEMPERATURE`] (which is
    /// also the value at `H = 0`).
    pub fn effective_temperature(&self, entropy: f64) -> f64 {
        if entropy <= 0.0 {
            NEAR_GREEDY_TEMPERATURE
        } else {
            (self.t0 * self.n.powf(self.theta / entropy)).max(NEAR_GREEDY_TEMPERATURE)
        }
    }
}

/// Rescales `logits` by the entropy-dependent temperature, with the entropy
/// taken from the `T = 1` distribution.
pub fn edt_distribution(logits: &Logits, params: &EdtParams) -> Result<ProbDist> {
    params.validate()?;
    let base = temp_softmax(logits, 1.0)?;
    temp_softmax(logits, params.effective_temperature(base.entropy()))
}

/// [`edt_distribution`] for a distribution already at `T = 1`.
pub fn edt_from_dist(base: &ProbDist, params: &EdtParams) -> Result<ProbDist> {
    params.validate()?;
    base.tempered(params.effective_temperature(base.entropy()))
}

/// `{argmax}` when `p_max < p_gt`, otherwise the full vocabulary.
pub fn greedy_threshold_set(sd: &SortedDist, p_gt: f64) -> Result<ActiveSet> {
    if !(p_gt > 0.0 && p_gt < 1.0) {
        return Err(Error::param(
            "greedy_threshold.p_gt",
            format!("must lie in (0, 1), got {p_gt}"),
        ));
    }
    Ok(if sd.confidence() < p_gt {
        ActiveSet::singleton(sd.vocab_size(), sd.argmax(), "greedy_threshold")
    } else {
        ActiveSet::full(sd.vocab_size(), "greedy_threshold")
    })
}

/// One truncation rule with its parameters.
#[derive(Debug, Clone, PartialEq)]
pub enum SamplerRule {
    TopK(usize),
    TopP(f64),
    MinP(f64),
    Epsilon(f64),
    Eta(f64),
    Edt(EdtParams),
    GreedyThreshold(f64),
    CalibratedTopK(Arc<TopKTable>),
    CalibratedEpsilon { fit: Arc<LogLogFit>, threshold: f64 },
}

impl SamplerRule {
    /// Config-file name of the rule.
    pub fn name(&self) -> &'static str {
        match self {
            SamplerRule::TopK(_) => "top_k",
            SamplerRule::TopP(_) => "top_p",
            SamplerRule::MinP(_) => "min_p",
            SamplerRule::Epsilon(_) => "epsilon",
            SamplerRule::Eta(_) => "eta",
            SamplerRule::Edt(_) => "edt",
            SamplerRule::GreedyThreshold(_) => "greedy_threshold",
            SamplerRule::CalibratedTopK(_) => "calibrated_topk",
            SamplerRule::CalibratedEpsilon { .. } => "calibrated_epsilon",
        }
    }

    pub fn validate(&self) -> Result<()> {
        let unit = |name: &str, v: f64, lo_open: bool, hi_open: bool| {
            let lo_ok = if lo_open { v > 0.0 } else { v >= 0.0 };
            let hi_ok = if hi_open { v < 1.0 } else { v <= 1.0 };
            if lo_ok && hi_ok {
                Ok(())
            } else {
                let lo = if lo_open { '(' } else { '[' };
                let hi = if hi_open { ')' } else { ']' };
                Err(Error::param(name, format!("{v} outside {lo}0, 1{hi}")))
            }
        };
        match self {
            SamplerRule::TopK(0) => Err(Error::param("top_k.k", "must be at least 1")),
            SamplerRule::TopK(_) => Ok(()),
            SamplerRule::TopP(p) => unit("top_p.p", *p, true, false),
            SamplerRule::MinP(p) => unit("min_p.p_base", *p, true, true),
            SamplerRule::Epsilon(e) => unit("epsilon.eps", *e, false, true),
            SamplerRule::Eta(e) => unit("eta.eta", *e, true, true),
            SamplerRule::Edt(p) => p.validate(),
            SamplerRule::GreedyThreshold(p) => unit("greedy_threshold.p_gt", *p, true, true),
            SamplerRule::CalibratedTopK(t) => t.validate(),
            SamplerRule::CalibratedEpsilon { fit, threshold } => {
                unit("calibrated_epsilon.c_eps", *threshold, true, true)?;
                if !(fit.a.is_finite() && fit.b.is_finite()) {
                    return Err(Error::Configuration("log-log fit has non-finite coefficients".into()));
                }
                Ok(())
            }
        }
    }

    /// Active set on `sd`; `None` for EDT, which rescales instead of masking.
    /// `entropy` is the entropy of the distribution `sd` was built from.
    pub fn active_set(&self, sd: &SortedDist, entropy: f64) -> Result<Option<ActiveSet>> {
        let set = match self {
            SamplerRule::TopK(k) => top_k_set(sd, *k)?,
            SamplerRule::TopP(p) => top_p_set(sd, *p)?,
            SamplerRule::MinP(p) => min_p_set(sd, *p)?,
            SamplerRule::Epsilon(e) => epsilon_set(sd, *e)?,
            SamplerRule::Eta(e) => eta_set(sd, *e, entropy)?,
            SamplerRule::Edt(_) => return Ok(None),
            SamplerRule::GreedyThreshold(p) => greedy_threshold_set(sd, *p)?,
            SamplerRule::CalibratedTopK(t) => calibrated_topk_set(sd, t)?,
            SamplerRule::CalibratedEpsilon { fit, threshold } => {
                calibrated_epsilon_set(sd, fit, *threshold)?
            }
        };
        Ok(Some(set))
    }
}

impl fmt::Display for SamplerRule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            SamplerRule::TopK(k) => write!(f, "top_k {k}"),
            SamplerRule::TopP(p) => write!(f, "top_p {p}"),
            SamplerRule::MinP(p) => write!(f, "min_p {p}"),
            SamplerRule::Epsilon(e) => write!(f, "epsilon {e}"),
            SamplerRule::Eta(e) => write!(f, "eta {e}"),
            SamplerRule::Edt(p) => write!(f, "edt {} {} {}", p.t0, p.n, p.theta),
            SamplerRule::GreedyThreshold(p) => write!(f, "greedy_threshold {p}"),
            SamplerRule::CalibratedTopK(t) => write!(f, "calibrated_topk c_ct={}", t.threshold),
            SamplerRule::CalibratedEpsilon { fit, threshold } => write!(
                f,
                "calibrated_epsilon c_eps={threshold} a={} b={}",
                fit.a, fit.b
            ),
        }
    }
}

/// What happened at one decoding step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepDiagnostics {
    pub token: usize,
    /// `p_max` of the distribution the masks saw.
    pub confidence: f64,
    /// 1-based confidence bin.
    pub bin: usize,
    pub active_size: usize,
    pub fallback: bool,
    pub sampled_rank: usize,
    pub sampled_prob: f64,
}

/// Temperature, ordered rules, and seed for one decoding configuration.
/// An empty rule list samples from the full distribution.
#[derive(Debug, Clone, PartialEq)]
pub struct SamplerChain {
    temperature: f64,
    rules: Vec<SamplerRule>,
    seed: u64,
}

impl Default for SamplerChain {
    fn default() -> Self {
        Self {
            temperature: 1.0,
            rules: Vec::new(),
            seed: 0,
        }
    }
}

impl SamplerChain {
    pub fn new(temperature: f64, rules: Vec<SamplerRule>, seed: u64) -> Result<Self> {
        if !(temperature.is_finite() && temperature > 0.0) {
            return Err(Error::param(
                "temperature",
                format!("must be a positive finite number, got {temperature}"),
            ));
        }
        for (i, rule) in rules.iter().enumerate() {
            rule.validate().map_err(|e| match e {
                Error::InvalidParameter { name, message } => Error::InvalidParameter {
                    name: format!("rules[{i}].{name}"),
                    message,
                },
                other => other,
            })?;
        }
        if rules.iter().filter(|r| matches!(r, SamplerRule::Edt(_))).count() > 1 {
            return Err(Error::Configuration("a chain may hold at most one edt rule".into()));
        }
        let chain = Self {
            temperature,
            rules,
            seed,
        };
        chain.check_calibration_temperature()?;
        Ok(chain)
    }

    pub fn unrestricted() -> Self {
        Self::default()
    }

    pub fn with_rules(rules: Vec<SamplerRule>) -> Result<Self> {
        Self::new(1.0, rules, 0)
    }

    pub fn temperature(&self) -> f64 {
        self.temperature
    }

    pub fn rules(&self) -> &[SamplerRule] {
        &self.rules
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    fn edt(&self) -> Option<&EdtParams> {
        self.rules.iter().find_map(|r| match r {
            SamplerRule::Edt(p) => Some(p),
            _ => None,
        })
    }

    /// Calibration artifacts must come from the temperature the chain samples at.
    fn check_calibration_temperature(&self) -> Result<()> {
        if self.edt().is_some() {
            return Ok(());
        }
        for rule in &self.rules {
            let t = match rule {
                SamplerRule::CalibratedTopK(table) => table.temperature,
                SamplerRule::CalibratedEpsilon { fit, .. } => fit.temperature,
                _ => continue,
            };
            if t != self.temperature {
                return Err(Error::Configuration(format!(
                    "{} was calibrated at temperature {t} but the chain samples at {}",
                    rule.name(),
                    self.temperature
                )));
            }
        }
        Ok(())
    }

    /// Bin count used for diagnostics: the calibrated table's, else the default.
    pub fn n_bins(&self) -> usize {
        self.rules
            .iter()
            .find_map(|r| match r {
                SamplerRule::CalibratedTopK(t) => Some(t.n_bins),
                _ => None,
            })
            .unwrap_or(DEFAULT_BINS)
    }

    /// The distribution the masks see, from raw logits.
    pub fn distribution(&self, logits: &Logits) -> Result<ProbDist> {
        match self.edt() {
            Some(p) => edt_distribution(logits, p),
            None => temp_softmax(logits, self.temperature),
        }
    }

    /// The distribution the masks see, from a `T = 1` distribution.
    pub fn distribution_from(&self, base: &ProbDist) -> Result<ProbDist> {
        match self.edt() {
            Some(p) => edt_from_dist(base, p),
            None if self.temperature == 1.0 => Ok(base.clone()),
            None => base.tempered(self.temperature),
        }
    }

    /// Intersection of every masking rule's set on `dist`, with greedy fallback.
    pub fn active_set(&self, dist: &ProbDist, sd: &SortedDist) -> Result<ActiveSet> {
        let entropy = dist.entropy();
        let mut sets = Vec::with_capacity(self.rules.len());
        for rule in &self.rules {
            if let Some(set) = rule.active_set(sd, entropy)? {
                sets.push(set);
            }
        }
        if sets.is_empty() {
            return Ok(ActiveSet::full(sd.vocab_size(), "unrestricted"));
        }
        intersect(&sets, sd.argmax())
    }

    /// Truncates and samples from a distribution that is already at the
    /// chain's temperature (or EDT-rescaled).
    pub fn sample_prepared<R: Rng + ?Sized>(
        &self,
        dist: &ProbDist,
        rng: &mut R,
    ) -> Result<StepDiagnostics> {
        let sd = dist.sorted();
        let set = self.active_set(dist, &sd)?;
        let draw = renormalize_and_sample(&sd, &set, rng)?;
        Ok(StepDiagnostics {
            token: draw.token,
            confidence: sd.confidence(),
            bin: bin_index(sd.confidence(), self.n_bins())?,
            active_size: set.len(),
            fallback: set.is_fallback(),
            sampled_rank: draw.rank,
            sampled_prob: draw.prob,
        })
    }

    /// One decoding step from a `T = 1` distribution.
    pub fn sample_dist<R: Rng + ?Sized>(&self, base: &ProbDist, rng: &mut R) -> Result<StepDiagnostics> {
        self.sample_prepared(&self.distribution_from(base)?, rng)
    }
}

/// Config syntax, e.g. `temperature 1; min_p 0.1; greedy_threshold 0.3`.
impl fmt::Display for SamplerChain {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "temperature {}", self.temperature)?;
        for rule in &self.rules {
            write!(f, "; {rule}")?;
        }
        Ok(())
    }
}

/// One decoding step from raw logits: temperature (or EDT), every mask on the
/// same distribution, intersection with greedy fallback, renormalized draw.
pub fn apply_chain<R: Rng + ?Sized>(
    chain: &SamplerChain,
    logits: &Logits,
    rng: &mut R,
) -> Result<(usize, StepDiagnostics)> {
    let dist = chain.distribution(logits)?;
    let diag = chain.sample_prepared(&dist, rng)?;
    Ok((diag.token, diag))
}

/// The `T = 1` distribution over a recorded step's top ranks, renormalized.
/// Token `i` is the token at rank `i + 1`.
pub fn replay_distribution(step: &TraceStep) -> Result<ProbDist> {
    let dist = ProbDist::from_weights(step.sorted_probs())?;
    if step.temperature() == 1.0 {
        Ok(dist)
    } else {
        dist.tempered(1.0 / step.temperature())
    }
}

/// One chain step over a recorded distribution.
pub fn replay_step<R: Rng + ?Sized>(chain: &SamplerChain, step: &TraceStep, rng: &mut R) -> Result<StepDiagnostics> {
    chain.sample_dist(&replay_distribution(step)?, rng)
}
