//! Next-token distributions and the operations every sampler shares:
//! temperature softmax, ranking, entropy, active-set intersection, and
//! renormalized sampling.
//!
//! Vocabulary indices are 0-based. Ranks are 1-based: rank 1 is the most
//! probable token, ties broken by ascending vocabulary index.

use std::fmt;

use rand::Rng;

use crate::error::{Error, Result};

/// Tolerance on `Σ p = 1` accepted by [`ProbDist::new`].
pub const SUM_TOLERANCE: f64 = 1e-6;

/// Raw scores, one per vocabulary index.
#[derive(Debug, Clone, PartialEq)]
pub struct Logits(Vec<f64>);

impl Logits {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::InvalidInput("logits must be non-empty".into()));
        }
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::InvalidInput(format!(
                "logit at index {i} is not finite ({})",
                values[i]
            )));
        }
        Ok(Self(values))
    }

    pub fn values(&self) -> &[f64] {
        &self.0
    }

    pub fn vocab_size(&self) -> usize {
        self.0.len()
    }
}

/// A categorical distribution over the vocabulary.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbDist(Vec<f64>);

impl ProbDist {
    pub fn new(probs: Vec<f64>) -> Result<Self> {
        if probs.is_empty() {
            return Err(Error::InvalidInput("distribution must be non-empty".into()));
        }
        if let Some(i) = probs.iter().position(|p| !p.is_finite() || *p < 0.0) {
            return Err(Error::InvalidInput(format!(
                "probability at index {i} is invalid ({})",
                probs[i]
            )));
        }
        let total: f64 = probs.iter().sum();
        if (total - 1.0).abs() > SUM_TOLERANCE {
            return Err(Error::InvalidInput(format!(
                "probabilities sum to {total}, expected 1"
            )));
        }
        Ok(Self(probs))
    }

    /// Normalizes non-negative weights into a distribution.
    pub fn from_weights(weights: &[f64]) -> Result<Self> {
        if weights.iter().any(|w| !w.is_finite() || *w < 0.0) {
            return Err(Error::InvalidInput("weights must be finite and non-negative".into()));
        }
        let total: f64 = weights.iter().sum();
        if !(total > 0.0) {
            return Err(Error::InvalidInput("weights carry no mass".into()));
        }
        Self::new(weights.iter().map(|w| w / total).collect())
    }

    pub fn probs(&self) -> &[f64] {
        &self.0
    }

    pub fn vocab_size(&self) -> usize {
        self.0.len()
    }

    pub fn get(&self, index: usize) -> f64 {
        self.0[index]
    }

    /// Highest-probability index, lowest index on ties.
    pub fn argmax(&self) -> usize {
        let mut best = 0;
        for (i, &p) in self.0.iter().enumerate().skip(1) {
            if p > self.0[best] {
                best = i;
            }
        }
        best
    }

    pub fn max_prob(&self) -> f64 {
        self.0[self.argmax()]
    }

    /// Shannon entropy in nats, with `0 ln 0 = 0`.
    pub fn entropy(&self) -> f64 {
        let h: f64 = self
            .0
            .iter()
            .filter(|&&p| p > 0.0)
            .map(|&p| -p * p.ln())
            .sum();
        h.max(0.0)
    }

    pub fn sorted(&self) -> SortedDist {
        SortedDist::new(self)
    }

    /// Re-applies a temperature to this distribution: `p^(1/T)` renormalized,
    /// computed in log space. Zero-probability tokens stay at zero.
    pub fn tempered(&self, temperature: f64) -> Result<ProbDist> {
        check_temperature(temperature)?;
        let scaled: Vec<f64> = self
            .0
            .iter()
            .map(|&p| if p > 0.0 { p.ln() / temperature } else { f64::NEG_INFINITY })
            .collect();
        softmax_scaled(&scaled)
    }
}

/// Probabilities in rank order with the rank ↔ vocabulary mapping.
#[derive(Debug, Clone, PartialEq)]
pub struct SortedDist {
    sorted: Vec<f64>,
    /// `perm[r - 1]` is the vocabulary index at rank `r`.
    perm: Vec<usize>,
    /// `ranks[v]` is the 1-based rank of vocabulary index `v`.
    ranks: Vec<usize>,
}

impl SortedDist {
    pub fn new(dist: &ProbDist) -> Self {
        let probs = dist.probs();
        let mut perm: Vec<usize> = (0..probs.len()).collect();
        // stable: equal probabilities keep ascending index order
        perm.sort_by(|&a, &b| probs[b].total_cmp(&probs[a]));
        let sorted = perm.iter().map(|&i| probs[i]).collect();
        let mut ranks = vec![0; probs.len()];
        for (r, &v) in perm.iter().enumerate() {
            ranks[v] = r + 1;
        }
        Self { sorted, perm, ranks }
    }

    pub fn vocab_size(&self) -> usize {
        self.sorted.len()
    }

    pub fn sorted_probs(&self) -> &[f64] {
        &self.sorted
    }

    pub fn perm(&self) -> &[usize] {
        &self.perm
    }

    /// Probability at a 1-based rank.
    pub fn prob_at_rank(&self, rank: usize) -> f64 {
        self.sorted[rank - 1]
    }

    pub fn token_at_rank(&self, rank: usize) -> usize {
        self.perm[rank - 1]
    }

    pub fn rank_of(&self, token: usize) -> usize {
        self.ranks[token]
    }

    pub fn prob_of(&self, token: usize) -> f64 {
        self.sorted[self.ranks[token] - 1]
    }

    pub fn argmax(&self) -> usize {
        self.perm[0]
    }

    /// `p_max`.
    pub fn confidence(&self) -> f64 {
        self.sorted[0]
    }

    /// Reconstructs the distribution in vocabulary order.
    pub fn unsorted(&self) -> ProbDist {
        let mut probs = vec![0.0; self.sorted.len()];
        for (r, &v) in self.perm.iter().enumerate() {
            probs[v] = self.sorted[r];
        }
        ProbDist(probs)
    }
}

/// Tokens a truncation rule permits at one decoding step.
#[derive(Clone, PartialEq, Eq)]
pub struct ActiveSet {
    mask: Vec<bool>,
    provenance: Vec<String>,
    fallback: bool,
}

impl ActiveSet {
    pub fn from_mask(mask: Vec<bool>, label: impl Into<String>) -> Self {
        Self {
            mask,
            provenance: vec![label.into()],
            fallback: false,
        }
    }

    pub fn from_indices(vocab_size: usize, indices: &[usize], label: impl Into<String>) -> Self {
        let mut mask = vec![false; vocab_size];
        for &i in indices {
            mask[i] = true;
        }
        Self::from_mask(mask, label)
    }

    pub fn full(vocab_size: usize, label: impl Into<String>) -> Self {
        Self::from_mask(vec![true; vocab_size], label)
    }

    pub fn singleton(vocab_size: usize, token: usize, label: impl Into<String>) -> Self {
        Self::from_indices(vocab_size, &[token], label)
    }

    /// The tokens at ranks `1..=k` (clamped to the vocabulary).
    pub fn top_ranks(sd: &SortedDist, k: usize, label: impl Into<String>) -> Self {
        let k = k.min(sd.vocab_size());
        Self::from_indices(sd.vocab_size(), &sd.perm()[..k], label)
    }

    /// Greedy fallback: `{argmax}` flagged as a fallback.
    pub(crate) fn greedy_fallback(vocab_size: usize, argmax: usize, label: impl Into<String>) -> Self {
        let mut set = Self::singleton(vocab_size, argmax, label);
        set.fallback = true;
        set
    }

    /// Keeps tokens satisfying `keep`; empty results fall back to `{argmax}`.
    pub(crate) fn filter_or_greedy(
        sd: &SortedDist,
        label: &str,
        mut keep: impl FnMut(usize, f64) -> bool,
    ) -> Self {
        let mask: Vec<bool> = (0..sd.vocab_size()).map(|v| keep(v, sd.prob_of(v))).collect();
        if mask.iter().any(|&m| m) {
            Self::from_mask(mask, label)
        } else {
            Self::greedy_fallback(sd.vocab_size(), sd.argmax(), label)
        }
    }

    pub fn vocab_size(&self) -> usize {
        self.mask.len()
    }

    pub fn mask(&self) -> &[bool] {
        &self.mask
    }

    pub fn contains(&self, token: usize) -> bool {
        self.mask.get(token).copied().unwrap_or(false)
    }

    pub fn len(&self) -> usize {
        self.mask.iter().filter(|&&m| m).count()
    }

    pub fn is_empty(&self) -> bool {
        !self.mask.iter().any(|&m| m)
    }

    pub fn indices(&self) -> Vec<usize> {
        self.mask
            .iter()
            .enumerate()
            .filter_map(|(i, &m)| m.then_some(i))
            .collect()
    }

    pub fn provenance(&self) -> &[String] {
        &self.provenance
    }

    /// Whether the set is `{argmax}` because a rule or the intersection came up empty.
    pub fn is_fallback(&self) -> bool {
        self.fallback
    }

    pub fn is_subset_of(&self, other: &ActiveSet) -> bool {
        self.mask.len() == other.mask.len()
            && self.mask.iter().zip(&other.mask).all(|(&a, &b)| !a || b)
    }
}

impl fmt::Debug for ActiveSet {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("ActiveSet")
            .field("indices", &self.indices())
            .field("provenance", &self.provenance)
            .field("fallback", &self.fallback)
            .finish()
    }
}

fn check_temperature(temperature: f64) -> Result<()> {
    if temperature.is_finite() && temperature > 0.0 {
        Ok(())
    } else {
        Err(Error::param(
            "temperature",
            format!("must be a positive finite number, got {temperature}"),
        ))
    }
}

/// Softmax of already-scaled scores; `-inf` entries get zero mass.
fn softmax_scaled(scaled: &[f64]) -> Result<ProbDist> {
    let max = scaled.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        return Err(Error::InvalidInput("no finite score to normalize".into()));
    }
    let exps: Vec<f64> = scaled.iter().map(|&s| (s - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    Ok(ProbDist(exps.into_iter().map(|e| e / total).collect()))
}

/// `p[j] = exp(z[j]/T) / Σ_v exp(z[v]/T)`, computed with max-subtraction.
pub fn temp_softmax(logits: &Logits, temperature: f64) -> Result<ProbDist> {
    check_temperature(temperature)?;
    let scaled: Vec<f64> = logits.values().iter().map(|z| z / temperature).collect();
    softmax_scaled(&scaled)
}

/// Elementwise intersection; an empty result becomes `{argmax}`.
pub fn intersect(sets: &[ActiveSet], argmax: usize) -> Result<ActiveSet> {
    let Some(first) = sets.first() else {
        return Err(Error::InvalidInput("intersect needs at least one set".into()));
    };
    let vocab = first.vocab_size();
    if argmax >= vocab {
        return Err(Error::InvalidInput(format!(
            "argmax {argmax} outside vocabulary of size {vocab}"
        )));
    }
    if let Some(bad) = sets.iter().find(|s| s.vocab_size() != vocab) {
        return Err(Error::InvalidInput(format!(
            "active sets over different vocabularies ({} vs {vocab})",
            bad.vocab_size()
        )));
    }
    let mut mask = first.mask.clone();
    for set in &sets[1..] {
        for (m, &other) in mask.iter_mut().zip(&set.mask) {
            *m &= other;
        }
    }
    let provenance: Vec<String> = sets.iter().flat_map(|s| s.provenance.iter().cloned()).collect();
    let rule_fallback = sets.iter().any(|s| s.fallback);
    let mut result = ActiveSet {
        mask,
        provenance,
        fallback: rule_fallback,
    };
    if result.is_empty() {
        result.mask[argmax] = true;
        result.fallback = true;
    }
    Ok(result)
}

/// A token drawn from the renormalized distribution, with its rank and
/// original probability.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Draw {
    pub token: usize,
    pub rank: usize,
    pub prob: f64,
}

/// Draws from `p(v) / Σ_{w∈set} p(w)` over the active set.
pub fn renormalize_and_sample<R: Rng + ?Sized>(
    sd: &SortedDist,
    set: &ActiveSet,
    rng: &mut R,
) -> Result<Draw> {
    if set.vocab_size() != sd.vocab_size() {
        return Err(Error::InvalidInput(format!(
            "active set over {} tokens, distribution over {}",
            set.vocab_size(),
            sd.vocab_size()
        )));
    }
    // walk in rank order so the draw is a function of the sorted view only
    let kept: Vec<(usize, f64)> = sd
        .perm()
        .iter()
        .filter(|&&v| set.contains(v))
        .map(|&v| (v, sd.prob_of(v)))
        .collect();
    let total: f64 = kept.iter().map(|&(_, p)| p).sum();
    if !(total > 0.0) {
        return Err(Error::DegenerateSet(format!(
            "active set {:?} has zero probability mass",
            set.indices()
        )));
    }
    let token = if kept.len() == 1 {
        kept[0].0
    } else {
        let target = rng.gen::<f64>() * total;
        let mut cumulative = 0.0;
        let mut chosen = None;
        for &(v, p) in &kept {
            cumulative += p;
            if target < cumulative {
                chosen = Some(v);
                break;
            }
        }
        // rounding can leave target == total; take the last token with mass
        chosen.unwrap_or_else(|| kept.iter().rev().find(|&&(_, p)| p > 0.0).unwrap().0)
    };
    Ok(Draw {
        token,
        rank: sd.rank_of(token),
        prob: sd.prob_of(token),
    })
}

/// `p'(v) = p(v) / Σ_{w∈set} p(w)` for kept tokens, zero elsewhere.
pub fn renormalized(dist: &ProbDist, set: &ActiveSet) -> Result<ProbDist> {
    let total: f64 = set.indices().iter().map(|&v| dist.get(v)).sum();
    if !(total > 0.0) {
        return Err(Error::DegenerateSet("active set has zero probability mass".into()));
    }
    Ok(ProbDist(
        dist.probs()
            .iter()
            .enumerate()
            .map(|(v, &p)| if set.contains(v) { p / total } else { 0.0 })
            .collect(),
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn dist(p: &[f64]) -> ProbDist {
        ProbDist::new(p.to_vec()).unwrap()
    }

    #[test]
    fn softmax_examples() {
        let uniform = temp_softmax(&Logits::new(vec![0.0; 3]).unwrap(), 1.0).unwrap();
        for &p in uniform.probs() {
            assert!((p - 1.0 / 3.0).abs() < 1e-15);
        }
        let two = Logits::new(vec![2f64.ln(), 0.0]).unwrap();
        let p = temp_softmax(&two, 1.0).unwrap();
        assert!((p.get(0) - 2.0 / 3.0).abs() < 1e-15);
        assert!((p.get(1) - 1.0 / 3.0).abs() < 1e-15);
        let p = temp_softmax(&two, 0.5).unwrap();
        assert!((p.get(0) - 0.8).abs() < 1e-15);
        assert!((p.get(1) - 0.2).abs() < 1e-15);
    }

    #[test]
    fn softmax_errors() {
        let logits = Logits::new(vec![1.0, 2.0]).unwrap();
        assert!(matches!(temp_softmax(&logits, 0.0), Err(Error::InvalidParameter { .. })));
        assert!(matches!(temp_softmax(&logits, -1.0), Err(Error::InvalidParameter { .. })));
        assert!(matches!(Logits::new(vec![0.0, f64::NAN]), Err(Error::InvalidInput(_))));
        assert!(matches!(Logits::new(vec![]), Err(Error::InvalidInput(_))));
    }

    #[test]
    fn softmax_survives_huge_logits() {
        let p = temp_softmax(&Logits::new(vec![1000.0, 999.0, -1000.0]).unwrap(), 1.0).unwrap();
        assert!((p.probs().iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert!(p.get(0) > p.get(1));
    }

    #[test]
    fn sort_examples() {
        let sd = dist(&[0.2, 0.5, 0.3]).sorted();
        assert_eq!(sd.sorted_probs(), &[0.5, 0.3, 0.2]);
        assert_eq!(sd.perm(), &[1, 2, 0]);
        assert_eq!(sd.confidence(), 0.5);

        let sd = dist(&[0.25; 4]).sorted();
        assert_eq!(sd.perm(), &[0, 1, 2, 3]);

        let sd = dist(&[0.0, 1.0, 0.0]).sorted();
        assert_eq!(sd.confidence(), 1.0);
        assert_eq!(sd.rank_of(1), 1);
        assert_eq!(sd.argmax(), 1);
    }

    #[test]
    fn entropy_examples() {
        assert_eq!(dist(&[0.0, 1.0, 0.0]).entropy(), 0.0);
        assert!((dist(&[0.25; 4]).entropy() - 4f64.ln()).abs() < 1e-12);
        assert!((dist(&[0.5, 0.5, 0.0, 0.0]).entropy() - 2f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn intersect_examples() {
        let a = ActiveSet::from_indices(5, &[1, 2, 3], "a");
        let b = ActiveSet::from_indices(5, &[2, 3, 4], "b");
        let both = intersect(&[a.clone(), b], 0).unwrap();
        assert_eq!(both.indices(), vec![2, 3]);
        assert!(!both.is_fallback());
        assert_eq!(both.provenance(), &["a".to_string(), "b".to_string()]);

        let c = ActiveSet::from_indices(5, &[2], "c");
        let d = ActiveSet::from_indices(5, &[3], "d");
        let fb = intersect(&[c, d], 1).unwrap();
        assert_eq!(fb.indices(), vec![1]);
        assert!(fb.is_fallback());

        assert_eq!(intersect(&[a.clone()], 0).unwrap().indices(), a.indices());

        let short = ActiveSet::full(3, "short");
        assert!(matches!(intersect(&[a, short], 0), Err(Error::InvalidInput(_))));
    }

    #[test]
    fn sample_from_restricted_set() {
        let sd = dist(&[0.5, 0.3, 0.2]).sorted();
        let only_argmax = ActiveSet::singleton(3, 0, "greedy");
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..100 {
            assert_eq!(renormalize_and_sample(&sd, &only_argmax, &mut rng).unwrap().token, 0);
        }
        let zero_mass = dist(&[1.0, 0.0]).sorted();
        let set = ActiveSet::singleton(2, 1, "bad");
        assert!(matches!(
            renormalize_and_sample(&zero_mass, &set, &mut rng),
            Err(Error::DegenerateSet(_))
        ));
    }

    #[test]
    fn sampling_is_seed_deterministic() {
        let sd = dist(&[0.4, 0.3, 0.2, 0.1]).sorted();
        let set = ActiveSet::full(4, "all");
        let draws = |seed| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            (0..50)
                .map(|_| renormalize_and_sample(&sd, &set, &mut rng).unwrap().token)
                .collect::<Vec<_>>()
        };
        assert_eq!(draws(9), draws(9));
        assert_ne!(draws(9), draws(10));
    }

    #[test]
    fn tempered_matches_softmax_of_log_probs() {
        let p = dist(&[0.6, 0.3, 0.1, 0.0]);
        let t = p.tempered(0.5).unwrap();
        let expected = [0.36, 0.09, 0.01];
        let total: f64 = expected.iter().sum();
        for (i, e) in expected.iter().enumerate() {
            assert!((t.get(i) - e / total).abs() < 1e-12);
        }
        assert_eq!(t.get(3), 0.0);
    }

    fn arb_logits() -> impl Strategy<Value = Vec<f64>> {
        prop::collection::vec(-20.0f64..20.0, 1..64)
    }

    proptest! {
        #[test]
        fn softmax_shift_invariant(z in arb_logits(), c in -50.0f64..50.0, t in 0.1f64..5.0) {
            let a = temp_softmax(&Logits::new(z.clone()).unwrap(), t).unwrap();
            let b = temp_softmax(&Logits::new(z.iter().map(|v| v + c).collect()).unwrap(), t).unwrap();
            for (x, y) in a.probs().iter().zip(b.probs()) {
                prop_assert!((x - y).abs() < 1e-9);
            }
            prop_assert!((a.probs().iter().sum::<f64>() - 1.0).abs() < 1e-6);
        }

        #[test]
        fn low_temperature_is_greedy(z in prop::collection::hash_set(-2000i32..2000, 2..32)) {
            // distinct logits at least 0.01 apart
            let z: Vec<f64> = z.into_iter().map(|v| v as f64 / 100.0).collect();
            let p = temp_softmax(&Logits::new(z).unwrap(), 1e-4).unwrap();
            prop_assert!(p.max_prob() > 1.0 - 1e-6);
        }

        #[test]
        fn sort_then_unsort_is_identity(z in arb_logits()) {
            let p = temp_softmax(&Logits::new(z).unwrap(), 1.0).unwrap();
            let sd = p.sorted();
            prop_assert_eq!(sd.unsorted(), p.clone());
            prop_assert!(sd.sorted_probs().windows(2).all(|w| w[0] >= w[1]));
            prop_assert_eq!(sd.confidence(), p.max_prob());
            prop_assert_eq!(sd.argmax(), p.argmax());
            let h = p.entropy();
            prop_assert!(h >= 0.0 && h <= (p.vocab_size() as f64).ln() + 1e-12);
        }

        #[test]
        fn intersect_keeps_argmax(
            z in arb_logits(),
            masks in prop::collection::vec(prop::collection::vec(any::<bool>(), 64), 1..4),
        ) {
            let p = temp_softmax(&Logits::new(z).unwrap(), 1.0).unwrap();
            let v = p.vocab_size();
            let am = p.argmax();
            // every rule set contains the argmax
            let sets: Vec<ActiveSet> = masks
                .iter()
                .map(|m| {
                    let mut m = m[..v].to_vec();
                    m[am] = true;
                    ActiveSet::from_mask(m, "r")
                })
                .collect();
            let out = intersect(&sets, am).unwrap();
            prop_assert!(out.contains(am));
            prop_assert!(!out.is_empty());
        }

        #[test]
        fn renormalize_preserves_ratios(z in arb_logits(), keep in prop::collection::vec(any::<bool>(), 64)) {
            let p = temp_softmax(&Logits::new(z).unwrap(), 1.0).unwrap();
            let v = p.vocab_size();
            let mut mask = keep[..v].to_vec();
            mask[p.argmax()] = true;
            let set = ActiveSet::from_mask(mask, "r");
            let q = renormalized(&p, &set).unwrap();
            let kept = set.indices();
            for &a in &kept {
                for &b in &kept {
                    if p.get(b) > 1e-300 && q.get(b) > 0.0 {
                        let lhs = q.get(a) / q.get(b);
                        let rhs = p.get(a) / p.get(b);
                        prop_assert!((lhs - rhs).abs() <= 1e-9 * rhs.max(1.0));
                    }
                }
            }
        }
    }
}
