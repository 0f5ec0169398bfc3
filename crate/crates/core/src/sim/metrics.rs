//! Self-consistency metrics, sequence diagnostics, and paired significance.

use std::collections::HashMap;

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::run::{derive_seed, QuestionResult, RunResult, SampleRecord};
use crate::error::{Error, Result};

pub const DEFAULT_SUBSETS: usize = 100;
pub const DEFAULT_RESAMPLES: usize = 10_000;
/// Sampled tokens below this probability count as low-probability events.
pub const LOW_PROB: f64 = 0.1;
/// Steps whose `p_max` is below this count as low-confidence states.
pub const LOW_CONFIDENCE: f64 = 0.3;

/// Upper edges of the mean-sampled-rank bins; the last bin is open.
pub const MEAN_RANK_EDGES: &[f64] = &[1.0, 1.25, 1.5, 2.0];

fn check_k(k: usize, n: usize) -> Result<()> {
    if k == 0 || k > n {
        return Err(Error::param("k", format!("must be in 1..={n}, got {k}")));
    }
    Ok(())
}

/// Whether the plurality answer among `picked` (sample indices) is correct.
/// Ties go to the answer whose earliest-drawn sample comes first.
fn plurality_correct(samples: &[SampleRecord], picked: &mut [usize]) -> bool {
    picked.sort_unstable();
    let mut counts: HashMap<&[u32], (usize, usize)> = HashMap::with_capacity(picked.len());
    for &i in picked.iter() {
        counts.entry(samples[i].tokens.as_slice()).or_insert((0, i)).0 += 1;
    }
    let (_, first) = counts
        .values()
        .copied()
        .max_by(|a, b| a.0.cmp(&b.0).then(b.1.cmp(&a.1)))
        .expect("k ≥ 1");
    samples[first].correct
}

/// Per-question maj@k. With `k == n` the full sample set is voted once.
pub fn maj_at_k_per_question(run: &RunResult, k: usize, m_subsets: usize, seed: u64) -> Result<Vec<f64>> {
    let n = run.n_samples();
    check_k(k, n)?;
    if m_subsets == 0 {
        return Err(Error::param("m_subsets", "must be positive"));
    }
    Ok(run
        .questions
        .iter()
        .map(|q| {
            if k == n {
                let mut all: Vec<usize> = (0..n).collect();
                return plurality_correct(&q.samples, &mut all) as u8 as f64;
            }
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, q.question as u64, k as u64));
            let hits = (0..m_subsets)
                .filter(|_| {
                    let mut picked = index::sample(&mut rng, n, k).into_vec();
                    plurality_correct(&q.samples, &mut picked)
                })
                .count();
            hits as f64 / m_subsets as f64
        })
        .collect())
}

pub fn maj_at_k(run: &RunResult, k: usize, m_subsets: usize, seed: u64) -> Result<f64> {
    Ok(mean(&maj_at_k_per_question(run, k, m_subsets, seed)?))
}

fn binomial(n: u64, k: u64) -> Option<u128> {
    let k = k.min(n - k);
    let mut acc: u128 = 1;
    for i in 0..k {
        acc = acc.checked_mul((n - i) as u128)? / (i + 1) as u128;
    }
    Some(acc)
}

/// Unbiased pass@k for one question with `c` of `n` samples correct:
/// `1 - C(n-c, k) / C(n, k)`.
pub fn pass_at_k_single(n: usize, c: usize, k: usize) -> Result<f64> {
    check_k(k, n)?;
    if c > n {
        return Err(Error::param("c", format!("{c} correct out of {n} samples")));
    }
    if n - c < k {
        return Ok(1.0);
    }
    let (n64, c64, k64) = (n as u64, c as u64, k as u64);
    match (binomial(n64, k64), binomial(n64 - c64, k64)) {
        (Some(total), Some(fail)) => Ok((total - fail) as f64 / total as f64),
        _ => {
            let keep: f64 = ((n - c + 1)..=n).map(|i| 1.0 - k as f64 / i as f64).product();
            Ok(1.0 - keep)
        }
    }
}

pub fn pass_at_k_per_question(run: &RunResult, k: usize) -> Result<Vec<f64>> {
    let n = run.n_samples();
    run.questions
        .iter()
        .map(|q| pass_at_k_single(n, q.n_correct(), k))
        .collect()
}

pub fn pass_at_k(run: &RunResult, k: usize) -> Result<f64> {
    Ok(mean(&pass_at_k_per_question(run, k)?))
}

fn distinct_answers(q: &QuestionResult) -> usize {
    let mut seen: Vec<&[u32]> = q.samples.iter().map(|s| s.tokens.as_slice()).collect();
    seen.sort_unstable();
    seen.dedup();
    seen.len()
}

/// Mean number of distinct answers per question.
pub fn unique_answers(run: &RunResult) -> f64 {
    let v: Vec<f64> = run.questions.iter().map(|q| distinct_answers(q) as f64).collect();
    mean(&v)
}

fn mean(v: &[f64]) -> f64 {
    if v.is_empty() {
        return 0.0;
    }
    v.iter().sum::<f64>() / v.len() as f64
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SequenceStats {
    pub question: usize,
    pub sample: usize,
    pub mean_rank: f64,
    pub low_prob_tokens: usize,
    pub low_confidence_steps: usize,
    pub correct: bool,
}

/// One point of an accuracy curve.
#[derive(Debug, Clone, PartialEq)]
pub struct CurveRow {
    pub view: &'static str,
    pub bin: String,
    pub accuracy: f64,
    pub count: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SequenceDiagnostics {
    pub sequences: Vec<SequenceStats>,
    pub rows: Vec<CurveRow>,
}

impl SequenceDiagnostics {
    pub fn curve(&self, view: &str) -> Vec<&CurveRow> {
        self.rows.iter().filter(|r| r.view == view).collect()
    }
}

fn mean_rank_bin(x: f64) -> usize {
    MEAN_RANK_EDGES.iter().position(|&e| x <= e).unwrap_or(MEAN_RANK_EDGES.len())
}

fn mean_rank_label(bin: usize) -> String {
    match bin {
        0 => format!("{}", MEAN_RANK_EDGES[0]),
        b if b < MEAN_RANK_EDGES.len() => format!("({},{}]", MEAN_RANK_EDGES[b - 1], MEAN_RANK_EDGES[b]),
        _ => format!(">{}", MEAN_RANK_EDGES[MEAN_RANK_EDGES.len() - 1]),
    }
}

fn curve_from<F: Fn(&SequenceStats) -> usize>(
    view: &'static str,
    seqs: &[SequenceStats],
    n_bins: usize,
    key: F,
    label: impl Fn(usize) -> String,
) -> Vec<CurveRow> {
    let mut correct = vec![0usize; n_bins];
    let mut count = vec![0usize; n_bins];
    for s in seqs {
        let b = key(s);
        count[b] += 1;
        correct[b] += s.correct as usize;
    }
    (0..n_bins)
        .filter(|&b| count[b] > 0)
        .map(|b| CurveRow {
            view,
            bin: label(b),
            accuracy: correct[b] as f64 / count[b] as f64,
            count: count[b],
        })
        .collect()
}

/// Per-sequence mean sampled rank, low-probability token count, and
/// low-confidence step count, with accuracy curves over each.
pub fn sequence_diagnostics(run: &RunResult) -> SequenceDiagnostics {
    let sequences: Vec<SequenceStats> = run
        .questions
        .iter()
        .flat_map(|q| {
            q.samples.iter().map(move |s| SequenceStats {
                question: q.question,
                sample: s.sample,
                mean_rank: s.mean_rank(),
                low_prob_tokens: s.probs.iter().filter(|&&p| p < LOW_PROB).count(),
                low_confidence_steps: s.confidences.iter().filter(|&&p| p < LOW_CONFIDENCE).count(),
                correct: s.correct,
            })
        })
        .collect();
    let steps = run
        .questions
        .first()
        .and_then(|q| q.samples.first())
        .map_or(0, |s| s.tokens.len());
    let mut rows = curve_from(
        "mean_rank",
        &sequences,
        MEAN_RANK_EDGES.len() + 1,
        |s| mean_rank_bin(s.mean_rank),
        mean_rank_label,
    );
    rows.extend(curve_from(
        "low_prob_tokens",
        &sequences,
        steps + 1,
        |s| s.low_prob_tokens,
        |b| b.to_string(),
    ));
    rows.extend(curve_from(
        "low_confidence_steps",
        &sequences,
        steps + 1,
        |s| s.low_confidence_steps,
        |b| b.to_string(),
    ));
    SequenceDiagnostics { sequences, rows }
}

fn check_paired(a: &RunResult, b: &RunResult) -> Result<()> {
    let ids = |r: &RunResult| r.questions.iter().map(|q| q.question).collect::<Vec<_>>();
    if a.header.task != b.header.task || ids(a) != ids(b) {
        return Err(Error::InvalidInput(format!(
            "runs `{}` and `{}` cover different question sets",
            a.header.label, b.header.label
        )));
    }
    Ok(())
}

/// Two-sided paired bootstrap p-value for `mean(b) - mean(a)` over
/// questions. Counts resampled differences at least as far from the
/// observed one as the observed one is from zero.
pub fn paired_bootstrap(a: &[f64], b: &[f64], resamples: usize, seed: u64) -> Result<f64> {
    if a.len() != b.len() || a.is_empty() {
        return Err(Error::InvalidInput(format!(
            "paired samples need equal non-zero lengths, got {} and {}",
            a.len(),
            b.len()
        )));
    }
    if resamples == 0 {
        return Err(Error::param("resamples", "must be positive"));
    }
    let diffs: Vec<f64> = a.iter().zip(b).map(|(x, y)| y - x).collect();
    let n = diffs.len();
    let observed = mean(&diffs);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut extreme = 0usize;
    for _ in 0..resamples {
        let total: f64 = (0..n).map(|_| diffs[rng.gen_range(0..n)]).sum();
        if (total / n as f64 - observed).abs() >= observed.abs() {
            extreme += 1;
        }
    }
    Ok((extreme + 1) as f64 / (resamples + 1) as f64)
}

/// Which per-question metric a significance test compares.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Metric {
    Accuracy,
    Maj(usize),
    Pass(usize),
}

pub fn per_question(run: &RunResult, metric: Metric, seed: u64) -> Result<Vec<f64>> {
    match metric {
        Metric::Accuracy => {
            let n = run.n_samples() as f64;
            Ok(run.questions.iter().map(|q| q.n_correct() as f64 / n).collect())
        }
        Metric::Maj(k) => maj_at_k_per_question(run, k, DEFAULT_SUBSETS, seed),
        Metric::Pass(k) => pass_at_k_per_question(run, k),
    }
}

/// Paired bootstrap p-value of `metric(b) - metric(a)` over shared questions.
pub fn paired_significance(a: &RunResult, b: &RunResult, metric: Metric, seed: u64) -> Result<f64> {
    check_paired(a, b)?;
    paired_bootstrap(&per_question(a, metric, seed)?, &per_question(b, metric, seed)?, DEFAULT_RESAMPLES, seed)
}

/// Centered 3-point moving average; endpoints average their one neighbour.
pub fn smooth3(v: &[f64]) -> Vec<f64> {
    (0..v.len())
        .map(|i| {
            let lo = i.saturating_sub(1);
            let hi = (i + 1).min(v.len() - 1);
            v[lo..=hi].iter().sum::<f64>() / (hi - lo + 1) as f64
        })
        .collect()
}

/// True when the curve never rises again after it has fallen.
pub fn is_single_peaked(v: &[f64]) -> bool {
    let mut fallen = false;
    for w in v.windows(2) {
        if w[1] < w[0] {
            fallen = true;
        } else if w[1] > w[0] && fallen {
            return false;
        }
    }
    true
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sim::run::RunHeader;

    fn sample(i: usize, tokens: Vec<u32>, correct: bool) -> SampleRecord {
        let len = tokens.len();
        SampleRecord {
            sample: i,
            seed: 0,
            tokens,
            correct,
            ranks: vec![1; len],
            probs: vec![0.5; len],
            confidences: vec![0.5; len],
            bins: vec![5; len],
            fallbacks: vec![false; len],
        }
    }

    fn run(label: &str, questions: Vec<Vec<(Vec<u32>, bool)>>) -> RunResult {
        let n = questions[0].len();
        RunResult {
            header: RunHeader {
                label: label.into(),
                chain: String::new(),
                task: "t".into(),
                seed: 0,
                n_samples: n,
                n_questions: questions.len(),
                sweep: None,
            },
            questions: questions
                .into_iter()
                .enumerate()
                .map(|(q, s)| QuestionResult {
                    question: q,
                    samples: s.into_iter().enumerate().map(|(i, (t, c))| sample(i, t, c)).collect(),
                })
                .collect(),
        }
    }

    fn exhaustive_pass(n: usize, c: usize, k: usize) -> f64 {
        let (mut hit, mut total) = (0u64, 0u64);
        for mask in 0u32..(1 << n) {
            if mask.count_ones() as usize == k {
                total += 1;
                // Samples 0..c are the correct ones.
                hit += (mask & ((1u32 << c) - 1) != 0) as u64;
            }
        }
        hit as f64 / total as f64
    }

    #[test]
    fn pass_at_k_matches_enumeration() {
        for n in 1..=8 {
            for k in 1..=n {
                for c in 0..=n {
                    assert_eq!(pass_at_k_single(n, c, k).unwrap(), exhaustive_pass(n, c, k), "n={n} c={c} k={k}");
                }
            }
        }
        assert_eq!(pass_at_k_single(2, 1, 2).unwrap(), 1.0);
        assert_eq!(pass_at_k_single(4, 2, 2).unwrap(), 5.0 / 6.0);
        assert!(pass_at_k_single(3, 1, 4).is_err());
    }

    #[test]
    fn pass_at_k_large_n_uses_product_form() {
        let exact = pass_at_k_single(100, 7, 32).unwrap();
        let keep: f64 = (94..=100).map(|i| 1.0 - 32.0 / i as f64).product();
        assert!((exact - (1.0 - keep)).abs() < 1e-12);
        let big = pass_at_k_single(400, 3, 200).unwrap();
        assert!((big - (1.0 - (200.0 * 199.0 * 198.0) / (400.0 * 399.0 * 398.0))).abs() < 1e-12);
    }

    #[test]
    fn all_correct_gives_one() {
        let r = run("a", vec![vec![(vec![1, 2], true); 6]; 3]);
        for k in 1..=6 {
            assert_eq!(maj_at_k(&r, k, 20, 0).unwrap(), 1.0);
            assert_eq!(pass_at_k(&r, k).unwrap(), 1.0);
        }
        assert_eq!(unique_answers(&r), 1.0);
        assert!(maj_at_k(&r, 7, 20, 0).is_err());
    }

    #[test]
    fn plurality_tie_goes_to_earliest_sample() {
        // Two answers with two votes each; the wrong one was drawn first.
        let r = run(
            "a",
            vec![vec![(vec![9], false), (vec![1], true), (vec![9], false), (vec![1], true)]],
        );
        assert_eq!(maj_at_k(&r, 4, 1, 0).unwrap(), 0.0);
        let r = run(
            "a",
            vec![vec![(vec![1], true), (vec![9], false), (vec![9], false), (vec![1], true), (vec![5], false)]],
        );
        assert_eq!(maj_at_k(&r, 5, 1, 0).unwrap(), 1.0);
    }

    #[test]
    fn majority_beats_scattered_wrong_answers() {
        let r = run(
            "a",
            vec![vec![(vec![1], true), (vec![2], false), (vec![1], true), (vec![3], false), (vec![4], false)]],
        );
        assert_eq!(maj_at_k(&r, 5, 1, 0).unwrap(), 1.0);
        assert_eq!(unique_answers(&r), 4.0);
        let m = maj_at_k(&r, 3, 2000, 1).unwrap();
        // Exact value: correct iff both correct samples are drawn, or exactly
        // one is drawn and it is the earliest of three distinct answers.
        let mut expected = 0.0;
        let mut total = 0.0;
        for a in 0..5 {
            for b in a + 1..5 {
                for c in b + 1..5 {
                    total += 1.0;
                    let picked = [a, b, c];
                    let correct: Vec<_> = picked.iter().filter(|&&i| i == 0 || i == 2).collect();
                    if correct.len() == 2 || (correct.len() == 1 && *correct[0] == a) {
                        expected += 1.0;
                    }
                }
            }
        }
        expected /= total;
        assert!((m - expected).abs() < 0.04, "{m} vs {expected}");
    }

    #[test]
    fn maj_at_n_is_deterministic() {
        let r = run("a", vec![vec![(vec![1], true), (vec![2], false), (vec![2], false)]]);
        assert_eq!(maj_at_k(&r, 3, 1, 0).unwrap(), maj_at_k(&r, 3, 50, 99).unwrap());
    }

    #[test]
    fn identical_runs_have_p_one() {
        let r = run("a", vec![vec![(vec![1], true), (vec![2], false)]; 20]);
        assert_eq!(paired_significance(&r, &r, Metric::Accuracy, 0).unwrap(), 1.0);
    }

    #[test]
    fn extreme_separation_is_significant() {
        let a = run("a", vec![vec![(vec![1], false); 4]; 50]);
        let b = run("b", vec![vec![(vec![1], true); 4]; 50]);
        let p = paired_significance(&a, &b, Metric::Accuracy, 0).unwrap();
        assert!(p < 0.001, "{p}");
    }

    #[test]
    fn mismatched_questions_are_rejected() {
        let a = run("a", vec![vec![(vec![1], true)]; 3]);
        let b = run("b", vec![vec![(vec![1], true)]; 4]);
        assert!(matches!(paired_significance(&a, &b, Metric::Accuracy, 0), Err(Error::InvalidInput(_))));
    }

    #[test]
    fn null_p_values_are_roughly_uniform() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let reps = 200;
        let mut below = [0usize; 3];
        for rep in 0..reps {
            let a: Vec<f64> = (0..60).map(|_| rng.gen::<f64>()).collect();
            let b: Vec<f64> = (0..60).map(|_| rng.gen::<f64>()).collect();
            let p = paired_bootstrap(&a, &b, 999, rep).unwrap();
            for (i, t) in [0.1, 0.5, 0.9].iter().enumerate() {
                below[i] += (p <= *t) as usize;
            }
        }
        for (i, t) in [0.1, 0.5, 0.9].iter().enumerate() {
            let f = below[i] as f64 / reps as f64;
            let sigma = (t * (1.0 - t) / reps as f64).sqrt();
            assert!((f - t).abs() < 4.0 * sigma + 0.03, "P(p ≤ {t}) = {f}");
        }
    }

    #[test]
    fn diagnostics_counts_agree_with_raw_records() {
        let mut r = run("a", vec![vec![(vec![1, 2, 3], true), (vec![4, 5, 6], false)]]);
        let s = &mut r.questions[0].samples[1];
        s.ranks = vec![1, 3, 2];
        s.probs = vec![0.6, 0.05, 0.09];
        s.confidences = vec![0.6, 0.2, 0.25];
        let d = sequence_diagnostics(&r);
        assert_eq!(d.sequences[0].mean_rank, 1.0);
        assert_eq!(d.sequences[1].mean_rank, 2.0);
        assert_eq!(d.sequences[1].low_prob_tokens, 2);
        assert_eq!(d.sequences[1].low_confidence_steps, 2);
        let ranks = d.curve("mean_rank");
        assert_eq!(ranks.len(), 2);
        assert_eq!((ranks[0].bin.as_str(), ranks[0].accuracy), ("1", 1.0));
        assert_eq!((ranks[1].bin.as_str(), ranks[1].accuracy), ("(1.5,2]", 0.0));
    }

    #[test]
    fn single_peak_detection() {
        assert!(is_single_peaked(&[1.0, 2.0, 3.0, 3.0, 2.0]));
        assert!(is_single_peaked(&[3.0, 2.0, 1.0]));
        assert!(is_single_peaked(&[1.0, 1.0, 1.0]));
        assert!(!is_single_peaked(&[1.0, 3.0, 2.0, 3.0]));
        assert_eq!(smooth3(&[0.0, 3.0, 0.0]), vec![1.5, 1.0, 1.5]);
    }
}
