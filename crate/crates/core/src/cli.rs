//! Command-line interface: calibrate → fit → table → sample / simulate → report.

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::calibrated::{build_topk_table, RankCapMode};
use crate::calibration::{fit_loglog, CalibrationGrid, FitOptions, DEFAULT_BINS, DEFAULT_MAX_RANK};
use crate::error::{Error, Result};
use crate::io::{
    parse_chain_config, parse_chain_file, read_grid, read_trace_file, to_json_line, to_json_pretty, write_atomic,
    write_fit, write_grid, write_table, write_trace, ReadMode, RuleDefaults, RULE_NAMES,
};
use crate::samplers::{replay_step, SamplerChain};
use crate::sim::{
    builtin_task, derive_seed, generate_task, maj_at_k, paired_significance, pass_at_k, read_results_file,
    sequence_diagnostics, simulate, unique_answers, write_results_file, Metric, RunResult, SweepPoint,
    TaskParams, BUILTIN_TASKS, DEFAULT_SUBSETS,
};

/// Default directory for outputs when `--out` is omitted.
pub const OUT_DIR_ENV: &str = "CALITRUNC_OUT_DIR";

#[derive(Debug, Parser)]
#[command(name = "calitrunc", version, about = "Correctness-calibrated truncation sampling")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Build a calibration grid from trace files.
    Calibrate(CalibrateArgs),
    /// Fit log(correctness) against log(probability) over a grid.
    Fit(FitArgs),
    /// Derive a calibrated top-k rank table from a grid.
    Table(TableArgs),
    /// Replay a sampler chain over recorded step distributions.
    Sample(SampleArgs),
    /// Run sampler chains on a synthetic task.
    Simulate(SimulateArgs),
    /// Summarize simulation results as CSV.
    Report(ReportArgs),
    /// Write the teacher-forced trace of a synthetic task.
    SynthTrace(SynthTraceArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Preset {
    Standard,
    LowTemp,
}

impl Preset {
    fn defaults(self) -> RuleDefaults {
        match self {
            Preset::Standard => RuleDefaults::default(),
            Preset::LowTemp => RuleDefaults::low_temp(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ModeArg {
    MaxRank,
    Contiguous,
}

impl From<ModeArg> for RankCapMode {
    fn from(m: ModeArg) -> Self {
        match m {
            ModeArg::MaxRank => RankCapMode::MaxRank,
            ModeArg::Contiguous => RankCapMode::Contiguous,
        }
    }
}

#[derive(Debug, Args)]
pub struct CalibrateArgs {
    #[arg(long, num_args = 1.., required = true)]
    pub traces: Vec<PathBuf>,
    #[arg(long, default_value_t = DEFAULT_BINS)]
    pub bins: usize,
    #[arg(long, default_value_t = DEFAULT_MAX_RANK)]
    pub max_rank: usize,
    /// Skip a torn final line instead of failing.
    #[arg(long)]
    pub recover_torn_tail: bool,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct FitArgs {
    #[arg(long)]
    pub grid: PathBuf,
    #[arg(long, default_value_t = 0)]
    pub min_count: u64,
    /// Weight each cell by its bin's step count.
    #[arg(long)]
    pub weighted: bool,
    /// Warn when the fit's mean squared error exceeds this.
    #[arg(long, default_value_t = 0.05)]
    pub mse_warn: f64,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct TableArgs {
    #[arg(long)]
    pub grid: PathBuf,
    /// Correctness threshold; defaults to the preset's.
    #[arg(long)]
    pub c_ct: Option<f64>,
    #[arg(long, value_enum, default_value_t = ModeArg::MaxRank)]
    pub mode: ModeArg,
    #[arg(long, value_enum, default_value_t = Preset::Standard)]
    pub preset: Preset,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct SampleArgs {
    /// Chain config file or built-in `@name`.
    #[arg(long)]
    pub chain: String,
    #[arg(long)]
    pub trace: PathBuf,
    /// Overrides the chain's seed.
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long, value_enum, default_value_t = Preset::Standard)]
    pub preset: Preset,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct SimulateArgs {
    /// Task parameter file (JSON) or built-in `@mixed` / `@diversity-harm`.
    #[arg(long)]
    pub task: String,
    /// Chain config files or built-in `@name`s.
    #[arg(long, num_args = 1..)]
    pub chains: Vec<String>,
    /// `rule=start:stop:step` or `rule=v1,v2,...`; one run per value.
    #[arg(long)]
    pub sweep: Vec<String>,
    #[arg(long, default_value_t = 32)]
    pub samples: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, value_enum, default_value_t = Preset::Standard)]
    pub preset: Preset,
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Overwrite existing result files.
    #[arg(long)]
    pub force: bool,
}

#[derive(Debug, Args)]
pub struct ReportArgs {
    #[arg(long = "in")]
    pub input: PathBuf,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long, value_delimiter = ',', default_values_t = vec![8, 16, 32])]
    pub k: Vec<usize>,
    /// Label of the run the others are tested against.
    #[arg(long)]
    pub baseline: Option<String>,
    #[arg(long, default_value_t = DEFAULT_SUBSETS)]
    pub subsets: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub force: bool,
}

#[derive(Debug, Args)]
pub struct SynthTraceArgs {
    #[arg(long)]
    pub task: String,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = DEFAULT_MAX_RANK)]
    pub max_rank: usize,
    #[arg(long, default_value_t = 1.0)]
    pub temperature: f64,
    /// Split questions round-robin over this many files.
    #[arg(long, default_value_t = 1)]
    pub shards: usize,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

/// Outcome of a command: text for stdout.
pub type Output = String;

pub fn run(cli: Cli) -> Result<Output> {
    match cli.command {
        Command::Calibrate(a) => cmd_calibrate(a),
        Command::Fit(a) => cmd_fit(a),
        Command::Table(a) => cmd_table(a),
        Command::Sample(a) => cmd_sample(a),
        Command::Simulate(a) => cmd_simulate(a),
        Command::Report(a) => cmd_report(a),
        Command::SynthTrace(a) => cmd_synth_trace(a),
    }
}

fn out_path(given: Option<PathBuf>, default_name: &str) -> PathBuf {
    given.unwrap_or_else(|| {
        std::env::var_os(OUT_DIR_ENV)
            .map(PathBuf::from)
            .unwrap_or_else(|| PathBuf::from("."))
            .join(default_name)
    })
}

fn ensure_parent(path: &Path) -> Result<()> {
    match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => std::fs::create_dir_all(p).map_err(|e| Error::io(p, e)),
        _ => Ok(()),
    }
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(|| "-".into(), |x| format!("{x:.6}"))
}

pub fn cmd_calibrate(a: CalibrateArgs) -> Result<Output> {
    if a.traces.is_empty() {
        return Err(Error::param("traces", "at least one trace file is required"));
    }
    let mode = if a.recover_torn_tail {
        ReadMode::RecoverTornTail
    } else {
        ReadMode::Strict
    };
    let mut grid: Option<CalibrationGrid> = None;
    for path in &a.traces {
        let trace = read_trace_file(path, mode)?;
        for w in &trace.warnings {
            log::warn!("{}: {w}", path.display());
        }
        let mut shard = CalibrationGrid::new(a.bins, a.max_rank, trace.header.temperature)?;
        shard
            .accumulate_all(trace.steps())
            .map_err(|e| Error::Configuration(format!("{}: {e}", path.display())))?;
        grid = Some(match grid {
            None => shard,
            Some(g) => g
                .merge(&shard)
                .map_err(|e| Error::Configuration(format!("{}: {e}", path.display())))?,
        });
    }
    let grid = grid.expect("non-empty").finalized();
    let out = out_path(a.out, "grid.json");
    ensure_parent(&out)?;
    write_grid(&out, &grid)?;

    let mut s = String::new();
    let acc = grid.expected_accuracy()?;
    let freq = grid.frequencies();
    writeln!(s, "grid {} ({} steps, T={})", out.display(), grid.total_steps(), grid.temperature()).unwrap();
    writeln!(s, "{:>4} {:>12} {:>10} {:>10} {:>10}", "bin", "range", "N", "freq", "C").unwrap();
    let n = grid.n_bins();
    for m in 0..n {
        let range = format!("({:.2},{:.2}]", m as f64 / n as f64, (m + 1) as f64 / n as f64);
        writeln!(
            s,
            "{:>4} {:>12} {:>10} {:>10.6} {:>10}",
            m + 1,
            range,
            grid.counts()[m],
            freq[m],
            fmt_opt(acc[m])
        )
        .unwrap();
    }
    Ok(s)
}

pub fn cmd_fit(a: FitArgs) -> Result<Output> {
    let grid = read_grid(&a.grid)?;
    let fit = fit_loglog(
        &grid,
        &FitOptions {
            min_count: a.min_count,
            count_weighted: a.weighted,
        },
    )?;
    if fit.mse > a.mse_warn {
        log::warn!("fit mse {} exceeds {}; the log-log line describes this grid poorly", fit.mse, a.mse_warn);
    }
    if fit.b <= 0.0 {
        log::warn!("fit slope {} ≤ 0; calibrated-epsilon will not act as a probability cutoff", fit.b);
    }
    let out = out_path(a.out, "fit.json");
    ensure_parent(&out)?;
    write_fit(&out, &fit)?;
    Ok(format!(
        "fit {}\nA = {}\nB = {}\nmse = {}\nn_points = {}\n",
        out.display(),
        fit.a,
        fit.b,
        fit.mse,
        fit.n_points
    ))
}

pub fn cmd_table(a: TableArgs) -> Result<Output> {
    let c_ct = a.c_ct.unwrap_or(a.preset.defaults().c_ct);
    if !(c_ct > 0.0 && c_ct < 1.0) {
        return Err(Error::param("c_ct", format!("must lie in (0, 1), got {c_ct}")));
    }
    let grid = read_grid(&a.grid)?;
    let table = build_topk_table(&grid, c_ct, a.mode.into())?;
    let out = out_path(a.out, "table.json");
    ensure_parent(&out)?;
    write_table(&out, &table)?;
    let ks: Vec<String> = table.k.iter().map(|k| k.to_string()).collect();
    Ok(format!("table {}\nc_ct = {c_ct}\nK = [{}]\n", out.display(), ks.join(", ")))
}

/// Built-in chains, by name, as config text.
pub const BUILTIN_CHAINS: &[(&str, &str)] = &[
    ("unrestricted", "unrestricted"),
    ("greedy", "top_k 1"),
    ("top_k", "top_k"),
    ("top_p", "top_p"),
    ("min_p", "min_p"),
    ("epsilon", "epsilon"),
    ("eta", "eta"),
    ("edt", "edt"),
    ("greedy_threshold", "greedy_threshold"),
    ("epsilon+greedy_threshold", "epsilon + greedy_threshold"),
    ("min_p+greedy_threshold", "min_p + greedy_threshold"),
    ("top_p+greedy_threshold", "top_p + greedy_threshold"),
];

/// Resolves a chain argument to (label, chain).
pub fn load_chain(spec: &str, defaults: &RuleDefaults) -> Result<(String, SamplerChain)> {
    if let Some(name) = spec.strip_prefix('@') {
        let Some((_, text)) = BUILTIN_CHAINS.iter().find(|(n, _)| *n == name) else {
            let names: Vec<&str> = BUILTIN_CHAINS.iter().map(|(n, _)| *n).collect();
            return Err(Error::Configuration(format!(
                "unknown chain `@{name}`; built-in chains: {}",
                names.join(", ")
            )));
        };
        let chain = parse_chain_config(text, spec, Path::new("."), defaults)?;
        return Ok((name.to_string(), chain));
    }
    let path = Path::new(spec);
    if !path.is_file() {
        return Err(Error::Configuration(format!(
            "unknown chain `{spec}`: not a file and not a built-in `@name`"
        )));
    }
    let label = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| spec.to_string());
    Ok((label, parse_chain_file(path, defaults)?))
}

#[derive(Serialize)]
struct SampleHeader<'a> {
    record: &'static str,
    format: &'static str,
    version: u32,
    chain: String,
    seed: u64,
    trace: &'a str,
}

#[derive(Serialize)]
struct SampleLine {
    record: &'static str,
    seq: u64,
    step: u64,
    token: usize,
    rank: usize,
    prob: f64,
    confidence: f64,
    bin: usize,
    active_size: usize,
    fallback: bool,
    gold_rank: Option<usize>,
    correct: bool,
}

pub const SAMPLES_FORMAT: &str = "calitrunc-samples";

pub fn cmd_sample(a: SampleArgs) -> Result<Output> {
    let (_, chain) = load_chain(&a.chain, &a.preset.defaults())?;
    let seed = a.seed.unwrap_or(chain.seed());
    let trace = read_trace_file(&a.trace, ReadMode::Strict)?;
    let trace_name = a
        .trace
        .file_name()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    let mut buf = to_json_line(&SampleHeader {
        record: "header",
        format: SAMPLES_FORMAT,
        version: 1,
        chain: chain.to_string(),
        seed,
        trace: &trace_name,
    })?;
    buf.push('\n');
    let mut correct = 0usize;
    for rec in &trace.records {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, rec.seq, rec.step));
        let d = replay_step(&chain, &rec.data, &mut rng)?;
        let ok = rec.data.gold_rank() == Some(d.sampled_rank);
        correct += ok as usize;
        buf.push_str(&to_json_line(&SampleLine {
            record: "step",
            seq: rec.seq,
            step: rec.step,
            token: d.token,
            rank: d.sampled_rank,
            prob: d.sampled_prob,
            confidence: d.confidence,
            bin: d.bin,
            active_size: d.active_size,
            fallback: d.fallback,
            gold_rank: rec.data.gold_rank(),
            correct: ok,
        })?);
        buf.push('\n');
    }
    let out = out_path(a.out, "samples.jsonl");
    ensure_parent(&out)?;
    write_atomic(&out, buf.as_bytes())?;
    Ok(format!(
        "samples {}\nsteps = {}\ngold sampled = {}\n",
        out.display(),
        trace.records.len(),
        correct
    ))
}

fn load_task(spec: &str) -> Result<TaskParams> {
    if let Some(name) = spec.strip_prefix('@') {
        return builtin_task(name).ok_or_else(|| {
            Error::Configuration(format!(
                "unknown task `@{name}`; built-in tasks: {}",
                BUILTIN_TASKS.join(", ")
            ))
        });
    }
    let text = std::fs::read_to_string(spec).map_err(|e| Error::io(spec, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Configuration(format!("{spec}: {e}")))
}

/// Expands `rule=start:stop:step` or `rule=v1,v2` into (rule, values).
pub fn parse_sweep(spec: &str) -> Result<(String, Vec<f64>)> {
    let bad = |m: String| Error::Configuration(format!("sweep `{spec}`: {m}"));
    let (rule, values) = spec
        .split_once('=')
        .ok_or_else(|| bad("expected rule=values".into()))?;
    if !RULE_NAMES.contains(&rule) {
        return Err(bad(format!("unknown rule; valid rules: {}", RULE_NAMES.join(", "))));
    }
    let num = |s: &str| {
        s.trim()
            .parse::<f64>()
            .ok()
            .filter(|x| x.is_finite())
            .ok_or_else(|| bad(format!("`{s}` is not a number")))
    };
    let vals = if let [start, stop, step] = values.split(':').collect::<Vec<_>>()[..] {
        let (start, stop, step) = (num(start)?, num(stop)?, num(step)?);
        if !(step > 0.0) || stop < start {
            return Err(bad("need start ≤ stop and step > 0".into()));
        }
        let n = ((stop - start) / step + 1e-9).floor() as usize;
        // Round to 12 decimals so 0.01 + 6·0.01 prints as 0.07.
        (0..=n)
            .map(|i| ((start + i as f64 * step) * 1e12).round() / 1e12)
            .collect()
    } else {
        values.split(',').map(num).collect::<Result<Vec<_>>>()?
    };
    if vals.is_empty() {
        return Err(bad("no values".into()));
    }
    Ok((rule.to_string(), vals))
}

#[derive(Serialize)]
struct TaskRecord<'a> {
    seed: u64,
    fingerprint: String,
    params: &'a TaskParams,
}

pub fn cmd_simulate(a: SimulateArgs) -> Result<Output> {
    if a.samples == 0 {
        return Err(Error::param("samples", "must be positive"));
    }
    if a.chains.is_empty() && a.sweep.is_empty() {
        return Err(Error::param("chains", "give at least one --chains or --sweep"));
    }
    let defaults = a.preset.defaults();
    let params = load_task(&a.task)?;
    let task = generate_task(&params, a.seed)?;

    let mut runs: Vec<(String, SamplerChain, Option<SweepPoint>)> = Vec::new();
    for spec in &a.chains {
        let (label, chain) = load_chain(spec, &defaults)?;
        runs.push((label, chain, None));
    }
    for spec in &a.sweep {
        let (rule, values) = parse_sweep(spec)?;
        for v in values {
            let text = format!("{rule} {v}");
            let chain = parse_chain_config(&text, spec, Path::new("."), &defaults)?;
            runs.push((format!("sweep-{rule}-{v}"), chain, Some(SweepPoint { rule: rule.clone(), value: v })));
        }
    }
    let mut seen = BTreeSet::new();
    for (label, _, _) in &runs {
        if !seen.insert(label.clone()) {
            return Err(Error::Configuration(format!("duplicate chain label `{label}`")));
        }
    }

    let dir = out_path(a.out, "runs");
    std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    let target = |label: &str| dir.join(format!("{label}.jsonl"));
    if !a.force {
        if let Some((label, _, _)) = runs.iter().find(|(l, _, _)| target(l).exists()) {
            return Err(Error::Configuration(format!(
                "{} exists; pass --force to overwrite",
                target(label).display()
            )));
        }
    }
    write_atomic(
        &dir.join("task.json"),
        to_json_pretty(&TaskRecord {
            seed: a.seed,
            fingerprint: task.fingerprint(),
            params: &params,
        })?
        .as_bytes(),
    )?;

    let mut s = String::new();
    writeln!(s, "task {} ({} questions, seed {})", task.fingerprint(), task.n_questions(), a.seed).unwrap();
    for (label, chain, sweep) in runs {
        let mut run = simulate(&task, &chain, a.samples, a.seed)?;
        run.header.label = label.clone();
        run.header.sweep = sweep;
        let path = target(&label);
        write_results_file(&path, &run)?;
        writeln!(
            s,
            "{label}: accuracy {:.4}, maj@{n} {:.4}, pass@{n} {:.4} -> {}",
            run.accuracy(),
            maj_at_k(&run, a.samples, 1, 0)?,
            pass_at_k(&run, a.samples)?,
            path.display(),
            n = a.samples
        )
        .unwrap();
    }
    Ok(s)
}

fn csv_err(e: csv::Error) -> Error {
    Error::InvalidInput(format!("csv: {e}"))
}

fn write_csv(path: &Path, header: &[&str], rows: &[Vec<String>]) -> Result<()> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(header).map_err(csv_err)?;
    for r in rows {
        w.write_record(r).map_err(csv_err)?;
    }
    let bytes = w.into_inner().map_err(|e| Error::InvalidInput(format!("csv: {e}")))?;
    write_atomic(path, &bytes)
}

fn with_suffix(path: &Path, suffix: &str) -> PathBuf {
    let stem = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    path.with_file_name(format!("{stem}_{suffix}.csv"))
}

pub fn cmd_report(a: ReportArgs) -> Result<Output> {
    let entries = std::fs::read_dir(&a.input).map_err(|e| Error::io(&a.input, e))?;
    let mut paths: Vec<PathBuf> = entries
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "jsonl"))
        .collect();
    paths.sort();
    if paths.is_empty() {
        return Err(Error::InsufficientData(format!("no .jsonl results in {}", a.input.display())));
    }
    let runs = paths
        .iter()
        .map(|p| read_results_file(p))
        .collect::<Result<Vec<RunResult>>>()?;

    let out = out_path(a.out, "report.csv");
    let sweep_out = with_suffix(&out, "sweep");
    let diag_out = with_suffix(&out, "diagnostics");
    if !a.force {
        if let Some(p) = [&out, &sweep_out, &diag_out].into_iter().find(|p| p.exists()) {
            return Err(Error::Configuration(format!("{} exists; pass --force to overwrite", p.display())));
        }
    }
    ensure_parent(&out)?;

    let baseline = match &a.baseline {
        None => None,
        Some(b) => Some(
            runs.iter()
                .find(|r| &r.header.label == b)
                .ok_or_else(|| Error::Configuration(format!("baseline `{b}` not among the results")))?,
        ),
    };

    let mut rows = Vec::new();
    let mut sweep_rows = Vec::new();
    let mut diag_rows = Vec::new();
    let f = |x: f64| x.to_string();
    for run in &runs {
        let label = &run.header.label;
        let n = run.n_samples();
        let ks: Vec<usize> = a.k.iter().copied().filter(|&k| k >= 1 && k <= n).collect();
        let mut push = |metric: &str, k: usize, v: f64| rows.push(vec![label.clone(), metric.into(), k.to_string(), f(v)]);
        push("accuracy", 1, run.accuracy());
        for &k in &ks {
            push("maj", k, maj_at_k(run, k, a.subsets, a.seed)?);
        }
        for &k in &ks {
            push("pass", k, pass_at_k(run, k)?);
        }
        push("unique_answers", n, unique_answers(run));
        let diag = sequence_diagnostics(run);
        let mean_rank = diag.sequences.iter().map(|s| s.mean_rank).sum::<f64>() / diag.sequences.len() as f64;
        push("mean_sampled_rank", 1, mean_rank);
        if let Some(base) = baseline.filter(|b| b.header.label != *label) {
            for &k in &ks {
                push("maj_p_value", k, paired_significance(base, run, Metric::Maj(k), a.seed)?);
                push("pass_p_value", k, paired_significance(base, run, Metric::Pass(k), a.seed)?);
            }
        }
        for r in &diag.rows {
            diag_rows.push(vec![label.clone(), r.view.into(), r.bin.clone(), f(r.accuracy), r.count.to_string()]);
        }
        if let Some(sw) = &run.header.sweep {
            for &k in &ks {
                sweep_rows.push(vec![
                    sw.rule.clone(),
                    f(sw.value),
                    k.to_string(),
                    f(maj_at_k(run, k, a.subsets, a.seed)?),
                    f(pass_at_k(run, k)?),
                ]);
            }
        }
    }
    write_csv(&out, &["sampler", "metric", "k", "value"], &rows)?;
    write_csv(&diag_out, &["sampler", "view", "bin", "accuracy", "count"], &diag_rows)?;
    let mut s = format!("report {} ({} runs)\n", out.display(), runs.len());
    writeln!(s, "diagnostics {}", diag_out.display()).unwrap();
    if !sweep_rows.is_empty() {
        sweep_rows.sort_by(|x, y| {
            (x[0].as_str(), x[2].parse::<usize>().unwrap_or(0), x[1].parse::<f64>().unwrap_or(0.0))
                .partial_cmp(&(y[0].as_str(), y[2].parse::<usize>().unwrap_or(0), y[1].parse::<f64>().unwrap_or(0.0)))
                .expect("finite thresholds")
        });
        write_csv(&sweep_out, &["rule", "threshold", "k", "maj", "pass"], &sweep_rows)?;
        writeln!(s, "sweep {}", sweep_out.display()).unwrap();
    }
    Ok(s)
}

pub fn cmd_synth_trace(a: SynthTraceArgs) -> Result<Output> {
    if a.shards == 0 {
        return Err(Error::param("shards", "must be positive"));
    }
    let task = generate_task(&load_task(&a.task)?, a.seed)?;
    let trace = task.to_trace(a.max_rank, a.temperature)?;
    let out = out_path(a.out, "trace.jsonl");
    ensure_parent(&out)?;
    let mut written = Vec::new();
    for shard in 0..a.shards {
        let mut part = crate::io::TraceFile::new(trace.header.clone());
        part.records = trace
            .records
            .iter()
            .filter(|r| r.seq as usize % a.shards == shard)
            .cloned()
            .collect();
        let path = if a.shards == 1 {
            out.clone()
        } else {
            with_extension_index(&out, shard)
        };
        write_atomic(&path, &write_trace(&part, Vec::new())?)?;
        written.push(path);
    }
    let mut s = format!("{} steps from task {}\n", trace.records.len(), task.fingerprint());
    for p in written {
        writeln!(s, "{}", p.display()).unwrap();
    }
    Ok(s)
}

fn with_extension_index(path: &Path, i: usize) -> PathBuf {
    let stem = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    let ext = path.extension().map(|s| s.to_string_lossy().into_owned()).unwrap_or_else(|| "jsonl".into());
    path.with_file_name(format!("{stem}.{i}.{ext}"))
}
