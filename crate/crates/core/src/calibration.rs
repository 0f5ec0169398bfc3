//! Confidence-bin × rank calibration grids built from teacher-forced traces.
//!
//! A step lands in bin `m` when its top probability falls in
//! `((m-1)/n, m/n]`. Each bin accumulates, per rank `r ≤ R`, the sum of the
//! rank-`r` probability and the number of steps whose gold token sat at rank
//! `r`. Finalizing divides by the bin count to give the average probability
//! `p̂[m][r]` and correctness `ĉ[m][r]`.
//!
//! Probability sums are exact (see [`ExactSum`]), so shard order and merge
//! grouping never change a finalized grid.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::exact::ExactSum;

pub const DEFAULT_BINS: usize = 10;
pub const DEFAULT_MAX_RANK: usize = 20;

/// Confidence bin of `p_max`, 1-based: `p_max ∈ ((m-1)/n, m/n]`.
pub fn bin_index(p_max: f64, n_bins: usize) -> Result<usize> {
    if n_bins == 0 {
        return Err(Error::param("n_bins", "must be at least 1"));
    }
    if !(p_max > 0.0 && p_max <= 1.0) {
        return Err(Error::InvalidInput(format!(
            "confidence {p_max} outside (0, 1]"
        )));
    }
    let n = n_bins as f64;
    let upper = |m: usize| m as f64 / n;
    let mut m = ((p_max * n).ceil() as usize).clamp(1, n_bins);
    // edges are the f64 values m/n; correct for rounding in p_max * n
    while m > 1 && p_max <= upper(m - 1) {
        m -= 1;
    }
    while m < n_bins && p_max > upper(m) {
        m += 1;
    }
    Ok(m)
}

/// One teacher-forced decoding step.
#[derive(Debug, Clone, PartialEq)]
pub struct TraceStep {
    sorted_probs: Vec<f64>,
    gold_rank: Option<usize>,
    temperature: f64,
}

impl TraceStep {
    /// `gold_rank` is 1-based; `None` means the gold token was beyond the
    /// recorded ranks or unknown.
    pub fn new(sorted_probs: Vec<f64>, gold_rank: Option<usize>, temperature: f64) -> Result<Self> {
        if sorted_probs.is_empty() {
            return Err(Error::InvalidInput("step has no probabilities".into()));
        }
        if let Some(i) = sorted_probs
            .iter()
            .position(|p| !p.is_finite() || !(0.0..=1.0).contains(p))
        {
            return Err(Error::InvalidInput(format!(
                "probability at rank {} is outside [0, 1] ({})",
                i + 1,
                sorted_probs[i]
            )));
        }
        if let Some(i) = sorted_probs.windows(2).position(|w| w[1] > w[0]) {
            return Err(Error::InvalidInput(format!(
                "probabilities increase from rank {} to {}",
                i + 1,
                i + 2
            )));
        }
        if !(sorted_probs[0] > 0.0) {
            return Err(Error::InvalidInput("top probability must be positive".into()));
        }
        if let Some(r) = gold_rank {
            if r == 0 || r > sorted_probs.len() {
                return Err(Error::InvalidInput(format!(
                    "gold rank {r} outside 1..={}",
                    sorted_probs.len()
                )));
            }
        }
        if !(temperature.is_finite() && temperature > 0.0) {
            return Err(Error::param("temperature", format!("must be positive, got {temperature}")));
        }
        Ok(Self {
            sorted_probs,
            gold_rank,
            temperature,
        })
    }

    pub fn sorted_probs(&self) -> &[f64] {
        &self.sorted_probs
    }

    pub fn gold_rank(&self) -> Option<usize> {
        self.gold_rank
    }

    pub fn p_max(&self) -> f64 {
        self.sorted_probs[0]
    }

    pub fn temperature(&self) -> f64 {
        self.temperature
    }
}

/// Finalized averages for one non-empty bin. Index `r - 1` holds rank `r`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BinEstimate {
    pub p_hat: Vec<f64>,
    pub c_hat: Vec<f64>,
}

impl BinEstimate {
    /// `C_m = Σ_r p̂[m][r] · ĉ[m][r]`.
    pub fn expected_accuracy(&self) -> f64 {
        self.p_hat.iter().zip(&self.c_hat).map(|(p, c)| p * c).sum()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CalibrationGrid {
    n_bins: usize,
    max_rank: usize,
    temperature: f64,
    counts: Vec<u64>,
    /// Row-major `[bin][rank]`.
    sum_probs: Vec<ExactSum>,
    sum_correct: Vec<u64>,
    estimates: Option<Vec<Option<BinEstimate>>>,
}

impl CalibrationGrid {
    pub fn new(n_bins: usize, max_rank: usize, temperature: f64) -> Result<Self> {
        if n_bins == 0 {
            return Err(Error::param("n_bins", "must be at least 1"));
        }
        if max_rank == 0 {
            return Err(Error::param("max_rank", "must be at least 1"));
        }
        if !(temperature.is_finite() && temperature > 0.0) {
            return Err(Error::param("temperature", format!("must be positive, got {temperature}")));
        }
        let cells = n_bins * max_rank;
        Ok(Self {
            n_bins,
            max_rank,
            temperature,
            counts: vec![0; n_bins],
            sum_probs: vec![ExactSum::zero(); cells],
            sum_correct: vec![0; cells],
            estimates: None,
        })
    }

    /// Rebuilds a grid from stored accumulators (used by the file reader).
    pub(crate) fn from_parts(
        n_bins: usize,
        max_rank: usize,
        temperature: f64,
        counts: Vec<u64>,
        sum_probs: Vec<ExactSum>,
        sum_correct: Vec<u64>,
    ) -> Result<Self> {
        let mut grid = Self::new(n_bins, max_rank, temperature)?;
        let cells = n_bins * max_rank;
        if counts.len() != n_bins || sum_probs.len() != cells || sum_correct.len() != cells {
            return Err(Error::InvalidInput("grid accumulator shapes do not match n_bins × max_rank".into()));
        }
        for m in 0..n_bins {
            let row = m * max_rank..(m + 1) * max_rank;
            let credited: u64 = sum_correct[row].iter().sum();
            if credited > counts[m] {
                return Err(Error::InvalidInput(format!(
                    "bin {} credits {credited} gold ranks but holds {} steps",
                    m + 1,
                    counts[m]
                )));
            }
        }
        grid.counts = counts;
        grid.sum_probs = sum_probs;
        grid.sum_correct = sum_correct;
        Ok(grid)
    }

    pub fn n_bins(&self) -> usize {
        self.n_bins
    }

    pub fn max_rank(&self) -> usize {
        self.max_rank
    }

    pub fn temperature(&self) -> f64 {
        self.temperature
    }

    /// `N_m` for each bin.
    pub fn counts(&self) -> &[u64] {
        &self.counts
    }

    pub fn total_steps(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn sum_probs(&self, bin: usize, rank: usize) -> &ExactSum {
        &self.sum_probs[self.cell(bin, rank)]
    }

    pub fn sum_correct(&self, bin: usize, rank: usize) -> u64 {
        self.sum_correct[self.cell(bin, rank)]
    }

    fn cell(&self, bin: usize, rank: usize) -> usize {
        assert!((1..=self.n_bins).contains(&bin) && (1..=self.max_rank).contains(&rank));
        (bin - 1) * self.max_rank + (rank - 1)
    }

    fn same_shape(&self, other: &CalibrationGrid) -> Result<()> {
        if self.n_bins != other.n_bins || self.max_rank != other.max_rank {
            return Err(Error::Configuration(format!(
                "grid shapes differ: {}×{} vs {}×{}",
                self.n_bins, self.max_rank, other.n_bins, other.max_rank
            )));
        }
        if self.temperature != other.temperature {
            return Err(Error::Configuration(format!(
                "grid temperatures differ: {} vs {}",
                self.temperature, other.temperature
            )));
        }
        Ok(())
    }

    /// Adds one step. Ranks beyond `max_rank` are ignored; a gold token
    /// beyond `max_rank` (or unknown) counts toward `N_m` with no credit.
    pub fn accumulate(&mut self, step: &TraceStep) -> Result<()> {
        if step.temperature != self.temperature {
            return Err(Error::Configuration(format!(
                "step recorded at temperature {} but grid is calibrated at {}",
                step.temperature, self.temperature
            )));
        }
        let bin = bin_index(step.p_max(), self.n_bins)?;
        self.estimates = None;
        self.counts[bin - 1] += 1;
        let base = (bin - 1) * self.max_rank;
        for (r, &p) in step.sorted_probs.iter().take(self.max_rank).enumerate() {
            self.sum_probs[base + r].add(p);
        }
        if let Some(g) = step.gold_rank.filter(|&g| g <= self.max_rank) {
            self.sum_correct[base + g - 1] += 1;
        }
        Ok(())
    }

    pub fn accumulate_all<'a>(&mut self, steps: impl IntoIterator<Item = &'a TraceStep>) -> Result<()> {
        steps.into_iter().try_for_each(|s| self.accumulate(s))
    }

    /// Accumulator-wise sum of two grids with identical shape and temperature.
    /// The result is not finalized.
    pub fn merge(&self, other: &CalibrationGrid) -> Result<CalibrationGrid> {
        self.same_shape(other)?;
        let mut out = self.clone();
        out.estimates = None;
        for (a, b) in out.counts.iter_mut().zip(&other.counts) {
            *a += b;
        }
        for (a, b) in out.sum_probs.iter_mut().zip(&other.sum_probs) {
            a.merge(b);
        }
        for (a, b) in out.sum_correct.iter_mut().zip(&other.sum_correct) {
            *a += b;
        }
        Ok(out)
    }

    /// Computes `p̂` and `ĉ`. Bins with `N_m = 0` are marked empty.
    pub fn finalize(&mut self) {
        let estimates = (1..=self.n_bins)
            .map(|m| {
                let n = self.counts[m - 1];
                (n > 0).then(|| {
                    let n = n as f64;
                    BinEstimate {
                        p_hat: (1..=self.max_rank)
                            .map(|r| self.sum_probs[self.cell(m, r)].to_f64() / n)
                            .collect(),
                        c_hat: (1..=self.max_rank)
                            .map(|r| self.sum_correct[self.cell(m, r)] as f64 / n)
                            .collect(),
                    }
                })
            })
            .collect();
        self.estimates = Some(estimates);
    }

    pub fn finalized(mut self) -> Self {
        self.finalize();
        self
    }

    pub fn is_finalized(&self) -> bool {
        self.estimates.is_some()
    }

    /// Per-bin estimates, `None` for empty bins.
    pub fn estimates(&self) -> Result<&[Option<BinEstimate>]> {
        self.estimates
            .as_deref()
            .ok_or_else(|| Error::State("calibration grid has not been finalized".into()))
    }

    pub fn bin(&self, bin: usize) -> Result<Option<&BinEstimate>> {
        if !(1..=self.n_bins).contains(&bin) {
            return Err(Error::InvalidInput(format!("bin {bin} outside 1..={}", self.n_bins)));
        }
        Ok(self.estimates()?[bin - 1].as_ref())
    }

    /// `C_m` per bin; `None` marks an empty bin.
    pub fn expected_accuracy(&self) -> Result<Vec<Option<f64>>> {
        Ok(self
            .estimates()?
            .iter()
            .map(|e| e.as_ref().map(BinEstimate::expected_accuracy))
            .collect())
    }

    /// Share of steps per bin, `N_m / Σ N`. All zeros for an empty grid.
    pub fn frequencies(&self) -> Vec<f64> {
        let total = self.total_steps();
        self.counts
            .iter()
            .map(|&n| if total == 0 { 0.0 } else { n as f64 / total as f64 })
            .collect()
    }

    /// SHA-256 over the accumulators; identifies the data a fit or table came from.
    pub fn digest(&self) -> String {
        let mut hasher = Sha256::new();
        hasher.update(b"calitrunc-grid-v1\n");
        hasher.update(format!("{} {} {:016x}\n", self.n_bins, self.max_rank, self.temperature.to_bits()));
        for n in &self.counts {
            hasher.update(format!("{n}\n"));
        }
        for s in &self.sum_probs {
            hasher.update(s.to_hex());
            hasher.update(b"\n");
        }
        for c in &self.sum_correct {
            hasher.update(format!("{c}\n"));
        }
        hex::encode(hasher.finalize())
    }
}

/// Filters and weighting for [`fit_loglog`].
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct FitOptions {
    /// Bins with fewer steps are left out of the fit.
    pub min_count: u64,
    /// Weight each point by its bin count instead of equally.
    pub count_weighted: bool,
}

/// One `(p̂, ĉ)` cell admitted into the fit.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FitPoint {
    pub bin: usize,
    pub rank: usize,
    pub p_hat: f64,
    pub c_hat: f64,
    pub count: u64,
}

/// `log10 ĉ ≈ a + b · log10 p̂`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogLogFit {
    pub a: f64,
    pub b: f64,
    /// Mean squared residual in log10 space.
    pub mse: f64,
    pub n_points: usize,
    pub temperature: f64,
    /// Digest of the grid the fit was computed from, if any.
    pub grid_digest: Option<String>,
}

impl LogLogFit {
    /// A fit not tied to any grid.
    pub fn from_coefficients(a: f64, b: f64) -> Self {
        Self {
            a,
            b,
            mse: 0.0,
            n_points: 2,
            temperature: 1.0,
            grid_digest: None,
        }
    }

    /// `ĉ = 10^a · p^b`.
    pub fn predict(&self, p: f64) -> Result<f64> {
        if !(p > 0.0) || !p.is_finite() {
            return Err(Error::InvalidInput(format!("probability {p} must be positive")));
        }
        Ok(self.predict_unchecked(p))
    }

    pub(crate) fn predict_unchecked(&self, p: f64) -> f64 {
        10f64.powf(self.a) * p.powf(self.b)
    }
}

/// Cells eligible for the fit: non-empty bins meeting `min_count` with
/// `p̂ > 0` and `ĉ > 0`.
pub fn fit_points(grid: &CalibrationGrid, opts: &FitOptions) -> Result<Vec<FitPoint>> {
    let mut points = Vec::new();
    for (m, est) in grid.estimates()?.iter().enumerate() {
        let Some(est) = est else { continue };
        let count = grid.counts()[m];
        if count < opts.min_count {
            continue;
        }
        for (r, (&p, &c)) in est.p_hat.iter().zip(&est.c_hat).enumerate() {
            if p > 0.0 && c > 0.0 {
                points.push(FitPoint {
                    bin: m + 1,
                    rank: r + 1,
                    p_hat: p,
                    c_hat: c,
                    count,
                });
            }
        }
    }
    Ok(points)
}

/// Least-squares line through `(log10 p̂, log10 ĉ)` over the grid's
/// admissible cells.
pub fn fit_loglog(grid: &CalibrationGrid, opts: &FitOptions) -> Result<LogLogFit> {
    let points = fit_points(grid, opts)?;
    let weights: Vec<f64> = points
        .iter()
        .map(|p| if opts.count_weighted { p.count as f64 } else { 1.0 })
        .collect();
    let xy: Vec<(f64, f64)> = points.iter().map(|p| (p.p_hat.log10(), p.c_hat.log10())).collect();
    let (a, b, mse) = weighted_line(&xy, &weights)?;
    Ok(LogLogFit {
        a,
        b,
        mse,
        n_points: points.len(),
        temperature: grid.temperature(),
        grid_digest: Some(grid.digest()),
    })
}

/// Weighted ordinary least squares `y = a + b x`, returning `(a, b, mse)`.
pub(crate) fn weighted_line(xy: &[(f64, f64)], weights: &[f64]) -> Result<(f64, f64, f64)> {
    if xy.len() < 2 {
        return Err(Error::InsufficientData(format!(
            "log-log fit needs at least 2 admissible points, found {}",
            xy.len()
        )));
    }
    let w_total: f64 = weights.iter().sum();
    let x_mean = xy.iter().zip(weights).map(|((x, _), w)| w * x).sum::<f64>() / w_total;
    let y_mean = xy.iter().zip(weights).map(|((_, y), w)| w * y).sum::<f64>() / w_total;
    let mut sxx = 0.0;
    let mut sxy = 0.0;
    for ((x, y), w) in xy.iter().zip(weights) {
        sxx += w * (x - x_mean) * (x - x_mean);
        sxy += w * (x - x_mean) * (y - y_mean);
    }
    if !(sxx > 0.0) {
        return Err(Error::InsufficientData(
            "log-log fit needs at least two distinct probabilities".into(),
        ));
    }
    let b = sxy / sxx;
    let a = y_mean - b * x_mean;
    let mse = xy
        .iter()
        .zip(weights)
        .map(|((x, y), w)| {
            let r = y - (a + b * x);
            w * r * r
        })
        .sum::<f64>()
        / w_total;
    Ok((a, b, mse))
}
