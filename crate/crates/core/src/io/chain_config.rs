//! Textual sampler-chain configuration.
//!
//! Statements are separated by `;`, `+`, or newlines; `#` starts a comment.
//! Each statement is a keyword followed by positional or `key=value`
//! arguments:
//!
//! ```text
//! temperature 1.0; seed 7
//! min_p 0.1 + greedy_threshold 0.3
//! calibrated_topk grid.json c_ct=0.05
//! calibrated_epsilon fit.json 0.05 grid=grid.json
//! edt t0=0.7 n=0.8 theta=1
//! ```
//!
//! Omitted parameters take the values in [`RuleDefaults`]. Relative paths
//! resolve against the directory passed to [`parse_chain_config`].

use std::path::{Path, PathBuf};
use std::sync::Arc;

use super::artifacts::{read_fit, read_fit_checked, read_grid, read_topk_source};
use crate::calibrated::RankCapMode;
use crate::error::{Error, Result};
use crate::samplers::{EdtParams, SamplerChain, SamplerRule};

pub const RULE_NAMES: &[&str] = &[
    "top_k",
    "top_p",
    "min_p",
    "epsilon",
    "eta",
    "edt",
    "greedy_threshold",
    "calibrated_topk",
    "calibrated_epsilon",
];

const SETTINGS: &[&str] = &["temperature", "seed", "unrestricted"];

/// Values used when a config omits a parameter.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RuleDefaults {
    pub temperature: f64,
    pub top_k: usize,
    pub top_p: f64,
    pub min_p: f64,
    pub epsilon: f64,
    pub eta: f64,
    pub edt: EdtParams,
    pub p_gt: f64,
    pub c_ct: f64,
    pub c_eps: f64,
}

impl Default for RuleDefaults {
    fn default() -> Self {
        Self {
            temperature: 1.0,
            top_k: 10,
            top_p: 0.95,
            min_p: 0.1,
            epsilon: 0.05,
            eta: 0.0009,
            edt: EdtParams::default(),
            p_gt: 0.3,
            c_ct: 0.05,
            c_eps: 0.05,
        }
    }
}

impl RuleDefaults {
    /// Lower temperature with thresholds lowered to match.
    pub fn low_temp() -> Self {
        Self {
            temperature: 0.6,
            epsilon: 0.01,
            p_gt: 0.1,
            c_ct: 0.01,
            ..Self::default()
        }
    }
}

struct Statement<'a> {
    line: usize,
    col: usize,
    words: Vec<&'a str>,
}

fn statements(source: &str) -> Vec<Statement<'_>> {
    let mut out = Vec::new();
    for (i, raw_line) in source.lines().enumerate() {
        let line = raw_line.split('#').next().unwrap_or("");
        let mut start = 0;
        for (pos, ch) in line.char_indices().chain(std::iter::once((line.len(), ';'))) {
            if ch == ';' || ch == '+' {
                let piece = &line[start..pos];
                let words: Vec<&str> = piece.split_whitespace().collect();
                if !words.is_empty() {
                    let col = start + piece.len() - piece.trim_start().len() + 1;
                    out.push(Statement {
                        line: i + 1,
                        col,
                        words,
                    });
                }
                start = pos + ch.len_utf8();
            }
        }
    }
    out
}

/// Arguments of one statement, split into positional and named.
struct Args<'a> {
    rule: &'a str,
    index: usize,
    positional: Vec<&'a str>,
    named: Vec<(&'a str, &'a str)>,
    used_named: Vec<bool>,
    next_positional: usize,
}

impl<'a> Args<'a> {
    fn new(rule: &'a str, index: usize, words: &[&'a str]) -> Self {
        let mut positional = Vec::new();
        let mut named = Vec::new();
        for w in words {
            match w.split_once('=') {
                Some((k, v)) => named.push((k, v)),
                None => positional.push(*w),
            }
        }
        let used_named = vec![false; named.len()];
        Self {
            rule,
            index,
            positional,
            named,
            used_named,
            next_positional: 0,
        }
    }

    fn field(&self, key: &str) -> String {
        format!("rules[{}].{}.{}", self.index, self.rule, key)
    }

    /// Takes `key=value` if present, else the next positional argument.
    fn take(&mut self, key: &str) -> Option<&'a str> {
        if let Some(i) = self.named.iter().position(|(k, _)| *k == key) {
            self.used_named[i] = true;
            return Some(self.named[i].1);
        }
        let v = self.positional.get(self.next_positional).copied();
        if v.is_some() {
            self.next_positional += 1;
        }
        v
    }

    fn take_named(&mut self, key: &str) -> Option<&'a str> {
        let i = self.named.iter().position(|(k, _)| *k == key)?;
        self.used_named[i] = true;
        Some(self.named[i].1)
    }

    fn number(&mut self, key: &str, default: f64) -> std::result::Result<f64, String> {
        match self.take(key) {
            None => Ok(default),
            Some(v) => v
                .parse::<f64>()
                .ok()
                .filter(|x| x.is_finite())
                .ok_or_else(|| format!("{}: `{v}` is not a number", self.field(key))),
        }
    }

    fn finish(&self) -> std::result::Result<(), String> {
        if self.next_positional < self.positional.len() {
            return Err(format!(
                "rules[{}].{}: unexpected argument `{}`",
                self.index, self.rule, self.positional[self.next_positional]
            ));
        }
        if let Some(i) = self.used_named.iter().position(|u| !u) {
            return Err(format!(
                "rules[{}].{}: unknown parameter `{}`",
                self.index, self.rule, self.named[i].0
            ));
        }
        Ok(())
    }
}

fn in_range(field: String, v: f64, ok: bool, range: &str) -> std::result::Result<f64, String> {
    if ok {
        Ok(v)
    } else {
        Err(format!("{field}: {v} out of range {range}"))
    }
}

fn resolve(base: &Path, p: &str) -> PathBuf {
    let path = Path::new(p);
    if path.is_absolute() {
        path.to_path_buf()
    } else {
        base.join(path)
    }
}

fn parse_rule(args: &mut Args<'_>, defaults: &RuleDefaults, base: &Path) -> std::result::Result<SamplerRule, String> {
    let rule = match args.rule {
        "top_k" => {
            let k = args.number("k", defaults.top_k as f64)?;
            if k < 1.0 || k.fract() != 0.0 {
                return Err(format!("{}: {k} must be a positive integer", args.field("k")));
            }
            SamplerRule::TopK(k as usize)
        }
        "top_p" => {
            let p = args.number("p", defaults.top_p)?;
            SamplerRule::TopP(in_range(args.field("p"), p, p > 0.0 && p <= 1.0, "(0, 1]")?)
        }
        "min_p" => {
            let p = args.number("p_base", defaults.min_p)?;
            SamplerRule::MinP(in_range(args.field("p_base"), p, p > 0.0 && p < 1.0, "(0, 1)")?)
        }
        "epsilon" => {
            let e = args.number("eps", defaults.epsilon)?;
            SamplerRule::Epsilon(in_range(args.field("eps"), e, (0.0..1.0).contains(&e), "[0, 1)")?)
        }
        "eta" => {
            let e = args.number("eta", defaults.eta)?;
            SamplerRule::Eta(in_range(args.field("eta"), e, e > 0.0 && e < 1.0, "(0, 1)")?)
        }
        "edt" => {
            let t0 = args.number("t0", defaults.edt.t0)?;
            let n = args.number("n", defaults.edt.n)?;
            let theta = args.number("theta", defaults.edt.theta)?;
            SamplerRule::Edt(EdtParams {
                t0: in_range(args.field("t0"), t0, t0 > 0.0, "(0, ∞)")?,
                n: in_range(args.field("n"), n, n > 0.0 && n < 1.0, "(0, 1)")?,
                theta: in_range(args.field("theta"), theta, theta > 0.0, "(0, ∞)")?,
            })
        }
        "greedy_threshold" => {
            let p = args.number("p_gt", defaults.p_gt)?;
            SamplerRule::GreedyThreshold(in_range(args.field("p_gt"), p, p > 0.0 && p < 1.0, "(0, 1)")?)
        }
        "calibrated_topk" => {
            let path = args
                .take("path")
                .ok_or_else(|| format!("{}: missing grid or table path", args.field("path")))?;
            let c_ct = match args.take("c_ct") {
                None => None,
                Some(v) => {
                    let c: f64 = v
                        .parse()
                        .map_err(|_| format!("{}: `{v}` is not a number", args.field("c_ct")))?;
                    Some(in_range(args.field("c_ct"), c, c > 0.0 && c < 1.0, "(0, 1)")?)
                }
            };
            let mode = match args.take_named("mode") {
                None | Some("max_rank") => RankCapMode::MaxRank,
                Some("contiguous") => RankCapMode::Contiguous,
                Some(other) => {
                    return Err(format!(
                        "{}: `{other}` is not one of max_rank, contiguous",
                        args.field("mode")
                    ))
                }
            };
            let table = read_topk_source(&resolve(base, path), c_ct, mode, defaults.c_ct)
                .map_err(|e| format!("{}: {e}", args.field("path")))?;
            SamplerRule::CalibratedTopK(Arc::new(table))
        }
        "calibrated_epsilon" => {
            let path = args
                .take("path")
                .ok_or_else(|| format!("{}: missing fit path", args.field("path")))?;
            let c = args.number("c_eps", defaults.c_eps)?;
            let c = in_range(args.field("c_eps"), c, c > 0.0 && c < 1.0, "(0, 1)")?;
            let fit_path = resolve(base, path);
            let fit = match args.take_named("grid") {
                Some(grid) => {
                    let grid = read_grid(&resolve(base, grid)).map_err(|e| format!("{}: {e}", args.field("grid")))?;
                    read_fit_checked(&fit_path, &grid)
                }
                None => read_fit(&fit_path),
            }
            .map_err(|e| format!("{}: {e}", args.field("path")))?;
            if fit.b <= 0.0 {
                log::warn!(
                    "{}: fit slope {} ≤ 0; the kept set is no longer a probability cutoff",
                    fit_path.display(),
                    fit.b
                );
            }
            SamplerRule::CalibratedEpsilon {
                fit: Arc::new(fit),
                threshold: c,
            }
        }
        other => {
            return Err(format!(
                "unknown rule `{other}`; valid rules: {}",
                RULE_NAMES.join(", ")
            ))
        }
    };
    args.finish()?;
    Ok(rule)
}

/// Parses a chain config. `source_name` labels error locations; relative
/// artifact paths resolve against `base_dir`.
pub fn parse_chain_config(
    source: &str,
    source_name: &str,
    base_dir: &Path,
    defaults: &RuleDefaults,
) -> Result<SamplerChain> {
    let mut temperature = defaults.temperature;
    let mut seed = 0u64;
    let mut rules = Vec::new();
    for st in statements(source) {
        let at = |message: String| Error::Configuration(format!("{source_name}:{}:{}: {message}", st.line, st.col));
        let keyword = st.words[0];
        match keyword {
            "temperature" | "seed" => {
                let [_, value] = st.words[..] else {
                    return Err(at(format!("`{keyword}` takes exactly one value")));
                };
                if keyword == "temperature" {
                    temperature = value
                        .parse::<f64>()
                        .ok()
                        .filter(|t| t.is_finite() && *t > 0.0)
                        .ok_or_else(|| at(format!("temperature: `{value}` must be a positive number")))?;
                } else {
                    seed = value
                        .parse()
                        .map_err(|_| at(format!("seed: `{value}` is not a non-negative integer")))?;
                }
            }
            "unrestricted" | "none" => {
                if st.words.len() > 1 {
                    return Err(at(format!("`{keyword}` takes no arguments")));
                }
            }
            _ => {
                let mut args = Args::new(keyword, rules.len(), &st.words[1..]);
                let rule = parse_rule(&mut args, defaults, base_dir).map_err(|m| {
                    if RULE_NAMES.contains(&keyword) || SETTINGS.contains(&keyword) {
                        at(m)
                    } else {
                        at(format!(
                            "unknown rule `{keyword}`; valid rules: {}",
                            RULE_NAMES.join(", ")
                        ))
                    }
                })?;
                rules.push(rule);
            }
        }
    }
    SamplerChain::new(temperature, rules, seed)
        .map_err(|e| Error::Configuration(format!("{source_name}: {e}")))
}

/// Reads and parses a config file; artifact paths resolve against its directory.
pub fn parse_chain_file(path: &Path, defaults: &RuleDefaults) -> Result<SamplerChain> {
    let text = super::read_to_string(path)?;
    let base = path.parent().unwrap_or(Path::new("."));
    parse_chain_config(&text, &path.display().to_string(), base, defaults)
}
