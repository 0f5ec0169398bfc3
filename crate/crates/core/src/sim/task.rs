//! Synthetic question/answer tasks with planted gold tokens.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::calibration::TraceStep;
use crate::error::{Error, Result};
use crate::io::{to_json_line, TraceFile, TraceHeader, TraceRecord};
use crate::prob::ProbDist;

/// Rank-1 probability relative to which tail tokens are capped, keeping the
/// argmax unique.
const TAIL_CAP: f64 = 1.0 - 1e-6;

fn default_demoted_rank() -> usize {
    2
}

fn default_tail_exponent() -> f64 {
    1.0
}

/// One component of the per-step confidence mixture.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConfidenceLevel {
    pub p_max: f64,
    pub weight: f64,
    /// Overrides the task-wide corruption rate for steps at this level.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub corruption: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskParams {
    pub vocab_size: usize,
    pub steps: usize,
    pub questions: usize,
    pub levels: Vec<ConfidenceLevel>,
    /// Probability that a step's gold token is moved to `demoted_rank`.
    #[serde(default)]
    pub corruption_rate: f64,
    #[serde(default = "default_demoted_rank")]
    pub demoted_rank: usize,
    /// Power-law exponent of the distractor mass over ranks 2..V.
    #[serde(default = "default_tail_exponent")]
    pub tail_exponent: f64,
    /// Half-width of uniform noise added to each step's `p_max`.
    #[serde(default)]
    pub p_max_jitter: f64,
}

impl TaskParams {
    pub fn validate(&self) -> Result<()> {
        let bad = |field: &str, msg: String| Error::Configuration(format!("task.{field}: {msg}"));
        if self.vocab_size < 2 {
            return Err(bad("vocab_size", format!("needs at least 2 tokens, got {}", self.vocab_size)));
        }
        if self.steps == 0 {
            return Err(bad("steps", "must be positive".into()));
        }
        if self.questions == 0 {
            return Err(bad("questions", "must be positive".into()));
        }
        if self.levels.is_empty() {
            return Err(bad("levels", "at least one confidence level is required".into()));
        }
        let rate_ok = |r: f64| (0.0..=1.0).contains(&r);
        if !rate_ok(self.corruption_rate) {
            return Err(bad("corruption_rate", format!("{} not in [0, 1]", self.corruption_rate)));
        }
        if !(self.tail_exponent.is_finite() && self.tail_exponent >= 0.0) {
            return Err(bad("tail_exponent", format!("{} must be finite and ≥ 0", self.tail_exponent)));
        }
        if !(self.p_max_jitter.is_finite() && self.p_max_jitter >= 0.0) {
            return Err(bad("p_max_jitter", format!("{} must be finite and ≥ 0", self.p_max_jitter)));
        }
        // Smallest p_max for which the tail fits under the cap.
        let floor = 1.0 / (1.0 + (self.vocab_size - 1) as f64 * TAIL_CAP);
        let mut total_weight = 0.0;
        let mut any_corruption = self.corruption_rate > 0.0;
        for (i, level) in self.levels.iter().enumerate() {
            let field = format!("levels[{i}]");
            let lo = level.p_max - self.p_max_jitter;
            let hi = level.p_max + self.p_max_jitter;
            if !(level.p_max.is_finite() && hi < 1.0 && lo > 0.0) {
                return Err(bad(
                    &format!("{field}.p_max"),
                    format!("{} ± {} must stay inside (0, 1)", level.p_max, self.p_max_jitter),
                ));
            }
            if lo < floor {
                return Err(bad(
                    &format!("{field}.p_max"),
                    format!(
                        "{lo} cannot be the largest probability over {} tokens (needs ≥ {floor:.6})",
                        self.vocab_size
                    ),
                ));
            }
            if !(level.weight.is_finite() && level.weight >= 0.0) {
                return Err(bad(&format!("{field}.weight"), format!("{} must be ≥ 0", level.weight)));
            }
            if let Some(c) = level.corruption {
                if !rate_ok(c) {
                    return Err(bad(&format!("{field}.corruption"), format!("{c} not in [0, 1]")));
                }
                any_corruption |= c > 0.0;
            }
            total_weight += level.weight;
        }
        if total_weight <= 0.0 {
            return Err(bad("levels", "weights sum to zero".into()));
        }
        if any_corruption && !(2..=self.vocab_size).contains(&self.demoted_rank) {
            return Err(bad(
                "demoted_rank",
                format!("{} not in 2..={}", self.demoted_rank, self.vocab_size),
            ));
        }
        Ok(())
    }

    fn corruption_for(&self, level: usize) -> f64 {
        self.levels[level].corruption.unwrap_or(self.corruption_rate)
    }

    /// Mixture weights normalized to sum to one.
    pub fn level_probabilities(&self) -> Vec<f64> {
        let total: f64 = self.levels.iter().map(|l| l.weight).sum();
        self.levels.iter().map(|l| l.weight / total).collect()
    }
}

/// One decoding position: the model's `T = 1` distribution and the token a
/// correct answer must emit.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticStep {
    pub dist: ProbDist,
    pub gold: usize,
    pub level: usize,
    pub corrupted: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticTask {
    params: TaskParams,
    seed: u64,
    questions: Vec<Vec<SyntheticStep>>,
}

/// Probabilities by rank: `p_max` first, then `1 - p_max` spread over the
/// remaining ranks in proportion to `r^-exponent`, water-filled so no tail
/// token reaches `p_max`.
pub(crate) fn ranked_probs(vocab_size: usize, p_max: f64, exponent: f64) -> Vec<f64> {
    let tail = vocab_size - 1;
    let cap = p_max * TAIL_CAP;
    let weights: Vec<f64> = (1..=tail).map(|r| (r as f64).powf(-exponent)).collect();
    let mut out = vec![0.0; tail];
    let mut mass = 1.0 - p_max;
    let mut first_free = 0;
    // Weights are non-increasing, so capped tokens always form a prefix.
    while first_free < tail {
        let free: f64 = weights[first_free..].iter().sum();
        let scale = mass / free;
        if weights[first_free] * scale <= cap {
            for r in first_free..tail {
                out[r] = weights[r] * scale;
            }
            break;
        }
        out[first_free] = cap;
        mass -= cap;
        first_free += 1;
    }
    let mut probs = Vec::with_capacity(vocab_size);
    probs.push(p_max);
    probs.extend(out);
    probs
}

fn pick_level<R: Rng>(cumulative: &[f64], rng: &mut R) -> usize {
    let u: f64 = rng.gen();
    cumulative.iter().position(|&c| u < c).unwrap_or(cumulative.len() - 1)
}

/// Builds a task deterministically from `seed`.
pub fn generate_task(params: &TaskParams, seed: u64) -> Result<SyntheticTask> {
    params.validate()?;
    let mut cumulative = params.level_probabilities();
    for i in 1..cumulative.len() {
        cumulative[i] += cumulative[i - 1];
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let v = params.vocab_size;
    let mut ids: Vec<usize> = (0..v).collect();
    let mut questions = Vec::with_capacity(params.questions);
    for _ in 0..params.questions {
        let mut steps = Vec::with_capacity(params.steps);
        for _ in 0..params.steps {
            let level = pick_level(&cumulative, &mut rng);
            let jitter = if params.p_max_jitter > 0.0 {
                rng.gen_range(-params.p_max_jitter..=params.p_max_jitter)
            } else {
                0.0
            };
            let ranked = ranked_probs(v, params.levels[level].p_max + jitter, params.tail_exponent);
            let corrupted = rng.gen::<f64>() < params.corruption_for(level);
            ids.shuffle(&mut rng);
            let mut probs = vec![0.0; v];
            for (rank, &token) in ids.iter().enumerate() {
                probs[token] = ranked[rank];
            }
            let gold = if corrupted { ids[params.demoted_rank - 1] } else { ids[0] };
            steps.push(SyntheticStep {
                dist: ProbDist::new(probs)?,
                gold,
                level,
                corrupted,
            });
        }
        questions.push(steps);
    }
    Ok(SyntheticTask {
        params: params.clone(),
        seed,
        questions,
    })
}

impl SyntheticTask {
    pub fn params(&self) -> &TaskParams {
        &self.params
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn questions(&self) -> &[Vec<SyntheticStep>] {
        &self.questions
    }

    pub fn n_questions(&self) -> usize {
        self.questions.len()
    }

    /// Short hash of the parameters and seed; results from different tasks
    /// are never compared.
    pub fn fingerprint(&self) -> String {
        let mut h = Sha256::new();
        h.update(to_json_line(&self.params).expect("task params serialize").as_bytes());
        h.update(self.seed.to_le_bytes());
        hex::encode(&h.finalize()[..8])
    }

    /// Teacher-forced trace of the task: every step's top-`max_rank`
    /// probabilities at `temperature` and the gold token's rank.
    pub fn to_trace(&self, max_rank: usize, temperature: f64) -> Result<TraceFile> {
        let mut records = Vec::new();
        for (q, steps) in self.questions.iter().enumerate() {
            for (s, step) in steps.iter().enumerate() {
                let dist = if temperature == 1.0 {
                    step.dist.clone()
                } else {
                    step.dist.tempered(temperature)?
                };
                let sd = dist.sorted();
                let r = max_rank.min(sd.vocab_size());
                let rank = sd.rank_of(step.gold);
                records.push(TraceRecord {
                    seq: q as u64,
                    step: s as u64,
                    data: TraceStep::new(
                        sd.sorted_probs()[..r].to_vec(),
                        (rank <= max_rank).then_some(rank),
                        temperature,
                    )?,
                });
            }
        }
        Ok(TraceFile {
            header: TraceHeader {
                model: format!("synthetic-{}", self.fingerprint()),
                dataset: "synthetic".into(),
                temperature,
                max_rank,
                prompt_masked: true,
            },
            records,
            warnings: Vec::new(),
        })
    }
}

/// Low-confidence steps are where unrestricted sampling derails answers;
/// a few confident steps carry a demoted gold token.
pub fn mixed_task() -> TaskParams {
    TaskParams {
        vocab_size: 32,
        steps: 8,
        questions: 300,
        levels: vec![
            ConfidenceLevel {
                p_max: 0.95,
                weight: 0.5,
                corruption: Some(0.0),
            },
            ConfidenceLevel {
                p_max: 0.7,
                weight: 0.25,
                corruption: Some(0.15),
            },
            ConfidenceLevel {
                p_max: 0.25,
                weight: 0.25,
                corruption: Some(0.0),
            },
        ],
        corruption_rate: 0.0,
        demoted_rank: 2,
        tail_exponent: 1.0,
        p_max_jitter: 0.04,
    }
}

/// Gold tokens often sit at rank 3 with less than 5% of the mass, so any
/// cutoff above that removes them.
pub fn diversity_harm_task() -> TaskParams {
    TaskParams {
        vocab_size: 32,
        steps: 4,
        questions: 300,
        levels: vec![ConfidenceLevel {
            p_max: 0.8,
            weight: 1.0,
            corruption: None,
        }],
        corruption_rate: 0.3,
        demoted_rank: 3,
        tail_exponent: 1.0,
        p_max_jitter: 0.0,
    }
}

pub const BUILTIN_TASKS: &[&str] = &["mixed", "diversity-harm"];

pub fn builtin_task(name: &str) -> Option<TaskParams> {
    match name {
        "mixed" => Some(mixed_task()),
        "diversity-harm" => Some(diversity_harm_task()),
        _ => None,
    }
}
