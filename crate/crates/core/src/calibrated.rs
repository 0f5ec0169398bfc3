//! Truncation rules driven by calibration data: a per-bin rank cap looked up
//! from the grid (Calibrated-TopK), and a per-token correctness predictor from
//! the log-log fit (Calibrated-ε).

use serde::{Deserialize, Serialize};

use crate::calibration::{bin_index, CalibrationGrid, LogLogFit};
use crate::error::{Error, Result};
use crate::prob::{ActiveSet, SortedDist};

/// Rank cap used for bins that held no calibration steps.
pub const EMPTY_BIN_K: usize = 1;

/// How ranks are selected from a bin's correctness row.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RankCapMode {
    /// Largest rank whose correctness clears the threshold, even if a lower
    /// rank does not.
    #[default]
    MaxRank,
    /// Longest prefix of ranks that all clear the threshold.
    Contiguous,
}

/// Per-bin rank caps `K_m` for one threshold.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TopKTable {
    pub n_bins: usize,
    pub max_rank: usize,
    pub temperature: f64,
    pub threshold: f64,
    pub mode: RankCapMode,
    /// `k[m - 1]` is the cap for bin `m`, in `0..=max_rank`.
    pub k: Vec<usize>,
    pub grid_digest: Option<String>,
}

impl TopKTable {
    pub fn cap_for_bin(&self, bin: usize) -> usize {
        self.k[bin - 1]
    }

    pub(crate) fn validate(&self) -> Result<()> {
        if self.n_bins == 0 || self.k.len() != self.n_bins {
            return Err(Error::Configuration(format!(
                "top-k table lists {} caps for {} bins",
                self.k.len(),
                self.n_bins
            )));
        }
        if let Some(k) = self.k.iter().find(|&&k| k > self.max_rank) {
            return Err(Error::Configuration(format!(
                "top-k table cap {k} exceeds max rank {}",
                self.max_rank
            )));
        }
        Ok(())
    }
}

fn check_threshold(name: &str, value: f64) -> Result<()> {
    if value > 0.0 && value < 1.0 {
        Ok(())
    } else {
        Err(Error::param(name, format!("must lie in (0, 1), got {value}")))
    }
}

/// `K_m = max{r : ĉ[m][r] ≥ c_CT}`, or 0 when no rank qualifies. Empty bins
/// get [`EMPTY_BIN_K`].
pub fn build_topk_table(grid: &CalibrationGrid, c_ct: f64, mode: RankCapMode) -> Result<TopKTable> {
    check_threshold("c_ct", c_ct)?;
    let estimates = grid.estimates()?;
    let k = estimates
        .iter()
        .map(|est| match est {
            None => EMPTY_BIN_K,
            Some(est) => match mode {
                RankCapMode::MaxRank => est
                    .c_hat
                    .iter()
                    .rposition(|&c| c >= c_ct)
                    .map_or(0, |i| i + 1),
                RankCapMode::Contiguous => est.c_hat.iter().take_while(|&&c| c >= c_ct).count(),
            },
        })
        .collect();
    Ok(TopKTable {
        n_bins: grid.n_bins(),
        max_rank: grid.max_rank(),
        temperature: grid.temperature(),
        threshold: c_ct,
        mode,
        k,
        grid_digest: Some(grid.digest()),
    })
}

/// Ranks `1..=K_m` for the step's confidence bin; `{argmax}` when `K_m = 0`.
pub fn calibrated_topk_set(sd: &SortedDist, table: &TopKTable) -> Result<ActiveSet> {
    table.validate()?;
    let bin = bin_index(sd.confidence(), table.n_bins)?;
    let k = table.cap_for_bin(bin);
    Ok(if k == 0 {
        ActiveSet::greedy_fallback(sd.vocab_size(), sd.argmax(), "calibrated_topk")
    } else {
        ActiveSet::top_ranks(sd, k, "calibrated_topk")
    })
}

/// `ĉ = 10^A · p^B`.
pub fn predict_correctness(p: f64, fit: &LogLogFit) -> Result<f64> {
    fit.predict(p)
}

/// Tokens with predicted correctness `≥ c_eps`; `{argmax}` if none.
/// Zero-probability tokens are never kept.
pub fn calibrated_epsilon_set(sd: &SortedDist, fit: &LogLogFit, c_eps: f64) -> Result<ActiveSet> {
    check_threshold("c_eps", c_eps)?;
    Ok(ActiveSet::filter_or_greedy(sd, "calibrated_epsilon", |_, p| {
        p > 0.0 && fit.predict_unchecked(p) >= c_eps
    }))
}

/// The probability cutoff Calibrated-ε reduces to when `B > 0`:
/// `(c_eps / 10^A)^(1/B)`.
pub fn equivalent_epsilon(fit: &LogLogFit, c_eps: f64) -> Option<f64> {
    (fit.b > 0.0).then(|| (c_eps / 10f64.powf(fit.a)).powf(1.0 / fit.b))
}
