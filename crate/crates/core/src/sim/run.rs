//! Sampling many answers per question and the line-delimited results format.

use std::io::{BufRead, Write};
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::task::SyntheticTask;
use crate::error::{Error, Result};
use crate::io::{to_json_line, write_atomic};
use crate::prob::ProbDist;
use crate::samplers::SamplerChain;

pub const RESULTS_FORMAT: &str = "calitrunc-results";
pub const RESULTS_VERSION: u32 = 1;

/// Domain separator so sampling streams never coincide with task generation.
const SAMPLING_STREAM: u64 = 0x5eed_5a3b_1e00_0001;

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Seed of one sample's stream; depends only on its coordinates, never on
/// scheduling.
pub fn derive_seed(seed: u64, question: u64, sample: u64) -> u64 {
    splitmix(splitmix(splitmix(seed ^ SAMPLING_STREAM) ^ question) ^ sample)
}

#[derive(Debug, Clone, PartialEq)]
pub struct SampleRecord {
    pub sample: usize,
    pub seed: u64,
    pub tokens: Vec<u32>,
    pub correct: bool,
    pub ranks: Vec<u32>,
    pub probs: Vec<f64>,
    pub confidences: Vec<f64>,
    pub bins: Vec<u16>,
    pub fallbacks: Vec<bool>,
}

impl SampleRecord {
    pub fn mean_rank(&self) -> f64 {
        self.ranks.iter().map(|&r| r as f64).sum::<f64>() / self.ranks.len() as f64
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct QuestionResult {
    pub question: usize,
    pub samples: Vec<SampleRecord>,
}

impl QuestionResult {
    pub fn n_correct(&self) -> usize {
        self.samples.iter().filter(|s| s.correct).count()
    }
}

/// Identifies what produced a run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunHeader {
    pub label: String,
    /// The chain in config syntax.
    pub chain: String,
    pub task: String,
    pub seed: u64,
    pub n_samples: usize,
    pub n_questions: usize,
    /// Rule and threshold when the run is one point of a sweep.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sweep: Option<SweepPoint>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepPoint {
    pub rule: String,
    pub value: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunResult {
    pub header: RunHeader,
    pub questions: Vec<QuestionResult>,
}

impl RunResult {
    pub fn n_samples(&self) -> usize {
        self.header.n_samples
    }

    /// Fraction of all samples that are correct.
    pub fn accuracy(&self) -> f64 {
        let total: usize = self.questions.iter().map(|q| q.samples.len()).sum();
        let correct: usize = self.questions.iter().map(|q| q.n_correct()).sum();
        correct as f64 / total as f64
    }
}

fn sample_question(
    dists: &[ProbDist],
    gold: &[usize],
    chain: &SamplerChain,
    question: usize,
    n_samples: usize,
    seed: u64,
) -> Result<QuestionResult> {
    let mut samples = Vec::with_capacity(n_samples);
    for i in 0..n_samples {
        let s = derive_seed(seed, question as u64, i as u64);
        let mut rng = ChaCha8Rng::seed_from_u64(s);
        let mut rec = SampleRecord {
            sample: i,
            seed: s,
            tokens: Vec::with_capacity(dists.len()),
            correct: true,
            ranks: Vec::with_capacity(dists.len()),
            probs: Vec::with_capacity(dists.len()),
            confidences: Vec::with_capacity(dists.len()),
            bins: Vec::with_capacity(dists.len()),
            fallbacks: Vec::with_capacity(dists.len()),
        };
        for (dist, &g) in dists.iter().zip(gold) {
            let d = chain.sample_prepared(dist, &mut rng)?;
            rec.correct &= d.token == g;
            rec.tokens.push(d.token as u32);
            rec.ranks.push(d.sampled_rank as u32);
            rec.probs.push(d.sampled_prob);
            rec.confidences.push(d.confidence);
            rec.bins.push(d.bin as u16);
            rec.fallbacks.push(d.fallback);
        }
        samples.push(rec);
    }
    Ok(QuestionResult { question, samples })
}

/// Draws `n_samples` answers per question. Questions run in parallel; the
/// output is identical for any thread count.
pub fn simulate(task: &SyntheticTask, chain: &SamplerChain, n_samples: usize, seed: u64) -> Result<RunResult> {
    if n_samples == 0 {
        return Err(Error::param("n_samples", "must be positive"));
    }
    let questions = task
        .questions()
        .par_iter()
        .enumerate()
        .map(|(q, steps)| {
            let dists = steps
                .iter()
                .map(|s| chain.distribution_from(&s.dist))
                .collect::<Result<Vec<_>>>()?;
            let gold: Vec<usize> = steps.iter().map(|s| s.gold).collect();
            sample_question(&dists, &gold, chain, q, n_samples, seed)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(RunResult {
        header: RunHeader {
            label: String::new(),
            chain: chain.to_string(),
            task: task.fingerprint(),
            seed,
            n_samples,
            n_questions: task.n_questions(),
            sweep: None,
        },
        questions,
    })
}

#[derive(Serialize, Deserialize)]
struct HeaderLine {
    record: String,
    format: String,
    version: u32,
    #[serde(flatten)]
    run: RunHeader,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct SampleLine {
    record: String,
    question: usize,
    sample: usize,
    seed: u64,
    correct: bool,
    tokens: Vec<u32>,
    ranks: Vec<u32>,
    probs: Vec<f64>,
    confidences: Vec<f64>,
    bins: Vec<u16>,
    fallbacks: Vec<bool>,
}

pub fn write_results<W: Write>(run: &RunResult, mut sink: W) -> Result<W> {
    let header = HeaderLine {
        record: "header".into(),
        format: RESULTS_FORMAT.into(),
        version: RESULTS_VERSION,
        run: run.header.clone(),
    };
    let io_err = |e| Error::io("<results>", e);
    writeln!(sink, "{}", to_json_line(&header)?).map_err(io_err)?;
    for q in &run.questions {
        for s in &q.samples {
            let line = SampleLine {
                record: "sample".into(),
                question: q.question,
                sample: s.sample,
                seed: s.seed,
                correct: s.correct,
                tokens: s.tokens.clone(),
                ranks: s.ranks.clone(),
                probs: s.probs.clone(),
                confidences: s.confidences.clone(),
                bins: s.bins.clone(),
                fallbacks: s.fallbacks.clone(),
            };
            writeln!(sink, "{}", to_json_line(&line)?).map_err(io_err)?;
        }
    }
    Ok(sink)
}

pub fn write_results_file(path: &Path, run: &RunResult) -> Result<()> {
    let bytes = write_results(run, Vec::new())?;
    write_atomic(path, &bytes)
}

pub fn read_results<R: BufRead>(source: R, source_name: &str) -> Result<RunResult> {
    let fmt = |line: usize, message: String| Error::Format {
        source_name: source_name.to_string(),
        line,
        message,
    };
    let mut lines = source.lines().enumerate();
    let (_, first) = lines.next().ok_or_else(|| fmt(1, "empty results file".into()))?;
    let first = first.map_err(|e| Error::io(source_name, e))?;
    let header: HeaderLine = serde_json::from_str(&first).map_err(|e| fmt(1, e.to_string()))?;
    if header.record != "header" || header.format != RESULTS_FORMAT {
        return Err(fmt(1, format!("not a {RESULTS_FORMAT} header")));
    }
    if header.version != RESULTS_VERSION {
        return Err(Error::VersionMismatch {
            found: header.version,
            expected: RESULTS_VERSION,
        });
    }
    let run = header.run;
    let mut questions: Vec<QuestionResult> = Vec::with_capacity(run.n_questions);
    for (i, line) in lines {
        let n = i + 1;
        let line = line.map_err(|e| Error::io(source_name, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let s: SampleLine = serde_json::from_str(&line).map_err(|e| fmt(n, e.to_string()))?;
        if s.record != "sample" {
            return Err(fmt(n, format!("unexpected record `{}`", s.record)));
        }
        let len = s.tokens.len();
        if [s.ranks.len(), s.probs.len(), s.confidences.len(), s.bins.len(), s.fallbacks.len()]
            .iter()
            .any(|&l| l != len)
        {
            return Err(fmt(n, "per-step arrays differ in length".into()));
        }
        let expected_q = match questions.last() {
            Some(q) if q.samples.len() < run.n_samples => q.question,
            Some(q) => q.question + 1,
            None => 0,
        };
        let expected_s = match questions.last() {
            Some(q) if q.question == expected_q => q.samples.len(),
            _ => 0,
        };
        if s.question != expected_q || s.sample != expected_s {
            return Err(fmt(
                n,
                format!(
                    "expected question {expected_q} sample {expected_s}, found question {} sample {}",
                    s.question, s.sample
                ),
            ));
        }
        if expected_s == 0 {
            questions.push(QuestionResult {
                question: s.question,
                samples: Vec::with_capacity(run.n_samples),
            });
        }
        questions.last_mut().expect("pushed above").samples.push(SampleRecord {
            sample: s.sample,
            seed: s.seed,
            tokens: s.tokens,
            correct: s.correct,
            ranks: s.ranks,
            probs: s.probs,
            confidences: s.confidences,
            bins: s.bins,
            fallbacks: s.fallbacks,
        });
    }
    let complete = questions.len() == run.n_questions
        && questions.iter().all(|q| q.samples.len() == run.n_samples);
    if !complete {
        return Err(Error::InvalidInput(format!(
            "{source_name}: expected {} questions × {} samples",
            run.n_questions, run.n_samples
        )));
    }
    Ok(RunResult { header: run, questions })
}

pub fn read_results_file(path: &Path) -> Result<RunResult> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    read_results(std::io::BufReader::new(file), &path.display().to_string())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::samplers::SamplerRule;
    use crate::sim::task::{generate_task, ConfidenceLevel, TaskParams};

    fn task(v: usize, steps: usize, questions: usize, p: f64, rho: f64) -> SyntheticTask {
        let params = TaskParams {
            vocab_size: v,
            steps,
            questions,
            levels: vec![ConfidenceLevel {
                p_max: p,
                weight: 1.0,
                corruption: None,
            }],
            corruption_rate: rho,
            demoted_rank: 2,
            tail_exponent: 1.0,
            p_max_jitter: 0.0,
        };
        generate_task(&params, 9).unwrap()
    }

    #[test]
    fn greedy_on_clean_task_is_always_right() {
        let t = task(16, 6, 20, 0.4, 0.0);
        let chain = SamplerChain::with_rules(vec![SamplerRule::TopK(1)]).unwrap();
        let run = simulate(&t, &chain, 8, 1).unwrap();
        assert_eq!(run.accuracy(), 1.0);
        for q in &run.questions {
            assert!(q.samples.iter().all(|s| s.tokens == q.samples[0].tokens));
            assert!(q.samples.iter().all(|s| s.mean_rank() == 1.0));
        }
    }

    #[test]
    fn greedy_on_fully_corrupted_task_is_always_wrong() {
        let t = task(16, 3, 20, 0.6, 1.0);
        let chain = SamplerChain::with_rules(vec![SamplerRule::TopK(1)]).unwrap();
        assert_eq!(simulate(&t, &chain, 4, 1).unwrap().accuracy(), 0.0);
    }

    #[test]
    fn unrestricted_accuracy_matches_product_of_gold_probabilities() {
        let t = task(3, 2, 1, 0.6, 0.0);
        let q = &t.questions()[0];
        let expected: f64 = q.iter().map(|s| s.dist.get(s.gold)).product();
        let n = 200_000;
        let run = simulate(&t, &SamplerChain::unrestricted(), n, 3).unwrap();
        let c = run.questions[0].n_correct() as f64;
        let sigma = (n as f64 * expected * (1.0 - expected)).sqrt();
        assert!((c - n as f64 * expected).abs() <= 3.0 * sigma, "{c} vs {}", n as f64 * expected);
    }

    #[test]
    fn thread_count_does_not_change_results() {
        let t = task(16, 5, 30, 0.5, 0.2);
        let chain = SamplerChain::with_rules(vec![SamplerRule::Epsilon(0.02)]).unwrap();
        let one = rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap();
        let four = rayon::ThreadPoolBuilder::new().num_threads(4).build().unwrap();
        let a = one.install(|| simulate(&t, &chain, 6, 5)).unwrap();
        let b = four.install(|| simulate(&t, &chain, 6, 5)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn results_round_trip() {
        let t = task(8, 3, 4, 0.5, 0.3);
        let mut run = simulate(&t, &SamplerChain::unrestricted(), 3, 2).unwrap();
        run.header.label = "unrestricted".into();
        run.header.sweep = Some(SweepPoint {
            rule: "epsilon".into(),
            value: 0.05,
        });
        let bytes = write_results(&run, Vec::new()).unwrap();
        let back = read_results(&bytes[..], "mem").unwrap();
        assert_eq!(back, run);
        let text = String::from_utf8(bytes).unwrap();
        let truncated: String = text.lines().take(5).map(|l| format!("{l}\n")).collect();
        assert!(read_results(truncated.as_bytes(), "mem").is_err());
    }
}
