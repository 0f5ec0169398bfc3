use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use calitrunc::calibration::TraceStep;
use calitrunc::io::{parse_chain_config, read_trace_file, ReadMode, RuleDefaults, TraceHeader, TraceWriter};
use calitrunc::prob::Logits;
use calitrunc::samplers::{apply_chain, replay_distribution};
use calitrunc::sim::derive_seed;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde_json::Value;
use tempfile::TempDir;

const SMALL_TASK: &str = r#"{
  "vocab_size": 16, "steps": 4, "questions": 20,
  "levels": [
    {"p_max": 0.9, "weight": 0.5},
    {"p_max": 0.25, "weight": 0.5}
  ],
  "corruption_rate": 0.1
}"#;

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_calitrunc"));
    c.env_remove("CALITRUNC_OUT_DIR");
    c
}

fn run_in(dir: &Path, args: &[&str]) -> Output {
    bin().current_dir(dir).args(args).output().unwrap()
}

fn ok(dir: &Path, args: &[&str]) -> String {
    let out = run_in(dir, args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn code(out: &Output) -> i32 {
    out.status.code().unwrap()
}

fn fixture(name: &str) -> String {
    PathBuf::from(env!("CARGO_MANIFEST_DIR"))
        .join("tests/fixtures")
        .join(name)
        .display()
        .to_string()
}

fn setup() -> TempDir {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("task.json"), SMALL_TASK).unwrap();
    dir
}

fn write_trace(path: &Path, temperature: f64, steps: &[(Vec<f64>, Option<usize>)]) {
    let header = TraceHeader {
        model: "m".into(),
        dataset: "d".into(),
        temperature,
        max_rank: 3,
        prompt_masked: true,
    };
    let mut w = TraceWriter::new(Vec::new(), &header).unwrap();
    for (i, (p, g)) in steps.iter().enumerate() {
        w.write_step(i as u64, 0, &TraceStep::new(p.clone(), *g, temperature).unwrap())
            .unwrap();
    }
    fs::write(path, w.into_inner()).unwrap();
}

#[test]
fn sharded_calibration_equals_single_run() {
    let dir = setup();
    let d = dir.path();
    ok(d, &["synth-trace", "--task", "task.json", "--out", "all.jsonl"]);
    ok(d, &["synth-trace", "--task", "task.json", "--shards", "2", "--out", "part.jsonl"]);
    ok(d, &["calibrate", "--traces", "all.jsonl", "--out", "a.json"]);
    let printed = ok(d, &["calibrate", "--traces", "part.0.jsonl", "part.1.jsonl", "--out", "b.json"]);
    assert_eq!(fs::read(d.join("a.json")).unwrap(), fs::read(d.join("b.json")).unwrap());
    assert!(printed.contains("(0.80,0.90]") && printed.contains("80 steps"), "{printed}");
}

#[test]
fn calibrate_rejects_mixed_temperatures_and_empty_input() {
    let dir = setup();
    let d = dir.path();
    write_trace(&d.join("t1.jsonl"), 1.0, &[(vec![0.5, 0.3, 0.2], Some(1))]);
    write_trace(&d.join("t2.jsonl"), 0.6, &[(vec![0.5, 0.3, 0.2], Some(1))]);
    let out = run_in(d, &["calibrate", "--traces", "t1.jsonl", "t2.jsonl", "--out", "g.json"]);
    assert_ne!(code(&out), 0);
    assert!(String::from_utf8_lossy(&out.stderr).contains("temperature"));
    assert!(!d.join("g.json").exists());
    assert_eq!(code(&run_in(d, &["calibrate"])), 2);
}

#[test]
fn fit_reports_coefficients_and_flags_noisy_grids() {
    let dir = setup();
    let d = dir.path();
    let probs = vec![0.5, 0.25, 0.125];
    // Correctness proportional to probability: an exact line in log-log space.
    let mut linear = Vec::new();
    for (rank, n) in [(Some(1), 4), (Some(2), 2), (Some(3), 1), (None, 1)] {
        linear.extend(std::iter::repeat((probs.clone(), rank)).take(n));
    }
    let mut noisy = Vec::new();
    for (rank, n) in [(Some(1), 2), (Some(2), 4), (Some(3), 1), (None, 1)] {
        noisy.extend(std::iter::repeat((probs.clone(), rank)).take(n));
    }
    write_trace(&d.join("lin.jsonl"), 1.0, &linear);
    write_trace(&d.join("noisy.jsonl"), 1.0, &noisy);
    ok(d, &["calibrate", "--traces", "lin.jsonl", "--max-rank", "3", "--out", "lin.grid"]);
    ok(d, &["calibrate", "--traces", "noisy.jsonl", "--max-rank", "3", "--out", "noisy.grid"]);

    let out = run_in(d, &["fit", "--grid", "lin.grid", "--mse-warn", "0.01", "--out", "lin.fit"]);
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(out.status.success());
    assert!(stdout.contains("n_points = 3"), "{stdout}");
    assert!(!String::from_utf8_lossy(&out.stderr).contains("mse"));
    let fit: Value = serde_json::from_str(&fs::read_to_string(d.join("lin.fit")).unwrap()).unwrap();
    assert!(fit["mse"].as_f64().unwrap() < 1e-24);
    assert!((fit["b"].as_f64().unwrap() - 1.0).abs() < 1e-12);
    assert!(fit["a"].as_f64().unwrap().abs() < 1e-12);

    let out = run_in(d, &["fit", "--grid", "noisy.grid", "--mse-warn", "0.01", "--out", "noisy.fit"]);
    assert!(out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("mse"));

    let out = run_in(d, &["fit", "--grid", "missing.grid"]);
    assert_eq!(code(&out), 3);
    assert!(String::from_utf8_lossy(&out.stderr).contains("missing.grid"));
}

#[test]
fn fit_needs_two_points() {
    let dir = setup();
    let d = dir.path();
    write_trace(&d.join("one.jsonl"), 1.0, &[(vec![0.5, 0.3, 0.2], Some(1))]);
    ok(d, &["calibrate", "--traces", "one.jsonl", "--out", "g.json"]);
    assert_eq!(code(&run_in(d, &["fit", "--grid", "g.json"])), 4);
}

fn step_lines(path: &Path) -> Vec<Value> {
    fs::read_to_string(path)
        .unwrap()
        .lines()
        .skip(1)
        .map(|l| serde_json::from_str(l).unwrap())
        .collect()
}

#[test]
fn sample_is_reproducible_and_greedy_ignores_seed() {
    let dir = setup();
    let d = dir.path();
    let trace = fixture("five_steps.jsonl");
    fs::write(d.join("greedy.cfg"), "top_k 1\n").unwrap();
    ok(d, &["sample", "--chain", "greedy.cfg", "--trace", &trace, "--seed", "1", "--out", "g1.jsonl"]);
    ok(d, &["sample", "--chain", "greedy.cfg", "--trace", &trace, "--seed", "2", "--out", "g2.jsonl"]);
    assert_eq!(step_lines(&d.join("g1.jsonl")), step_lines(&d.join("g2.jsonl")));
    assert!(step_lines(&d.join("g1.jsonl")).iter().all(|s| s["rank"] == 1));

    ok(d, &["sample", "--chain", "@epsilon", "--trace", &trace, "--seed", "7", "--out", "e1.jsonl"]);
    ok(d, &["sample", "--chain", "@epsilon", "--trace", &trace, "--seed", "7", "--out", "e2.jsonl"]);
    assert_eq!(fs::read(d.join("e1.jsonl")).unwrap(), fs::read(d.join("e2.jsonl")).unwrap());
}

#[test]
fn sample_diagnostics_match_library_chain() {
    let dir = setup();
    let d = dir.path();
    let config = "temperature 0.8; epsilon 0.05 + greedy_threshold 0.3";
    fs::write(d.join("c.cfg"), config).unwrap();
    let trace_path = fixture("five_steps.jsonl");
    ok(d, &["sample", "--chain", "c.cfg", "--trace", &trace_path, "--seed", "11", "--out", "s.jsonl"]);
    let lines = step_lines(&d.join("s.jsonl"));

    let chain = parse_chain_config(config, "c", Path::new("."), &RuleDefaults::default()).unwrap();
    let trace = read_trace_file(Path::new(&trace_path), ReadMode::Strict).unwrap();
    assert_eq!(lines.len(), 5);
    for (rec, line) in trace.records.iter().zip(&lines) {
        let base = replay_distribution(&rec.data).unwrap();
        let logits = Logits::new(base.probs().iter().map(|p| p.ln()).collect()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(11, rec.seq, rec.step));
        let (token, diag) = apply_chain(&chain, &logits, &mut rng).unwrap();
        assert_eq!(line["token"].as_u64().unwrap() as usize, token);
        assert_eq!(line["rank"].as_u64().unwrap() as usize, diag.sampled_rank);
        assert_eq!(line["bin"].as_u64().unwrap() as usize, diag.bin);
        assert_eq!(line["active_size"].as_u64().unwrap() as usize, diag.active_size);
        assert_eq!(line["fallback"].as_bool().unwrap(), diag.fallback);
        assert!((line["prob"].as_f64().unwrap() - diag.sampled_prob).abs() < 1e-12);
        assert!((line["confidence"].as_f64().unwrap() - diag.confidence).abs() < 1e-12);
    }
}

#[test]
fn low_temp_preset_changes_defaults() {
    let dir = setup();
    let d = dir.path();
    let trace = fixture("five_steps.jsonl");
    ok(d, &["sample", "--chain", "@epsilon+greedy_threshold", "--trace", &trace, "--preset", "low-temp", "--out", "s.jsonl"]);
    let header: Value =
        serde_json::from_str(fs::read_to_string(d.join("s.jsonl")).unwrap().lines().next().unwrap()).unwrap();
    assert_eq!(header["chain"], "temperature 0.6; epsilon 0.01; greedy_threshold 0.1");
}

fn dir_bytes(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut v: Vec<_> = fs::read_dir(dir)
        .unwrap()
        .map(|e| {
            let p = e.unwrap().path();
            (p.file_name().unwrap().to_string_lossy().into_owned(), fs::read(&p).unwrap())
        })
        .collect();
    v.sort();
    v
}

#[test]
fn simulate_and_report_are_deterministic_across_thread_counts() {
    let dir = setup();
    let d = dir.path();
    let args = |out: &'static str| {
        vec![
            "simulate", "--task", "task.json", "--chains", "@unrestricted", "@greedy_threshold", "--sweep",
            "epsilon=0.02,0.04", "--seed", "3", "--out", out,
        ]
    };
    let one = bin().current_dir(d).env("RAYON_NUM_THREADS", "1").args(args("r1")).output().unwrap();
    let four = bin().current_dir(d).env("RAYON_NUM_THREADS", "4").args(args("r4")).output().unwrap();
    assert!(one.status.success() && four.status.success());
    assert_eq!(dir_bytes(&d.join("r1")), dir_bytes(&d.join("r4")));
    assert_eq!(dir_bytes(&d.join("r1")).len(), 5);

    ok(d, &["report", "--in", "r1", "--out", "a.csv", "--baseline", "unrestricted"]);
    ok(d, &["report", "--in", "r4", "--out", "b.csv", "--baseline", "unrestricted"]);
    for suffix in ["", "_sweep", "_diagnostics"] {
        assert_eq!(
            fs::read(d.join(format!("a{suffix}.csv"))).unwrap(),
            fs::read(d.join(format!("b{suffix}.csv"))).unwrap()
        );
    }
    let report = fs::read_to_string(d.join("a.csv")).unwrap();
    assert!(report.starts_with("sampler,metric,k,value\n"));
    assert!(report.contains("greedy_threshold,maj,32,"));
    assert!(report.contains("greedy_threshold,maj_p_value,32,"));
    let sweep = fs::read_to_string(d.join("a_sweep.csv")).unwrap();
    assert!(sweep.contains("epsilon,0.02,32,") && sweep.contains("epsilon,0.04,32,"));
}

#[test]
fn simulate_defaults_to_32_samples_and_env_out_dir() {
    let dir = setup();
    let d = dir.path();
    let out = bin()
        .current_dir(d)
        .env("CALITRUNC_OUT_DIR", d.join("envout"))
        .args(["simulate", "--task", "task.json", "--chains", "@greedy"])
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let text = fs::read_to_string(d.join("envout/runs/greedy.jsonl")).unwrap();
    let header: Value = serde_json::from_str(text.lines().next().unwrap()).unwrap();
    assert_eq!(header["n_samples"], 32);
    assert_eq!(text.lines().count(), 1 + 20 * 32);
}

#[test]
fn simulate_and_report_errors() {
    let dir = setup();
    let d = dir.path();
    let out = run_in(d, &["simulate", "--task", "task.json", "--chains", "@typical", "--out", "r"]);
    assert_eq!(code(&out), 2);
    assert!(String::from_utf8_lossy(&out.stderr).contains("unknown chain"));
    assert_eq!(code(&run_in(d, &["simulate", "--task", "@nope", "--chains", "@greedy"])), 2);

    ok(d, &["simulate", "--task", "task.json", "--chains", "@greedy", "--samples", "4", "--out", "r"]);
    let again = run_in(d, &["simulate", "--task", "task.json", "--chains", "@greedy", "--samples", "4", "--out", "r"]);
    assert_eq!(code(&again), 2);
    assert!(String::from_utf8_lossy(&again.stderr).contains("--force"));
    ok(d, &["simulate", "--task", "task.json", "--chains", "@greedy", "--samples", "4", "--out", "r", "--force"]);

    fs::create_dir(d.join("empty")).unwrap();
    assert_eq!(code(&run_in(d, &["report", "--in", "empty", "--out", "x.csv"])), 4);
    ok(d, &["report", "--in", "r", "--out", "x.csv", "--k", "1,4"]);
    assert_eq!(code(&run_in(d, &["report", "--in", "r", "--out", "x.csv"])), 2);
    ok(d, &["report", "--in", "r", "--out", "x.csv", "--force"]);
    assert_eq!(code(&run_in(d, &["report", "--in", "r", "--out", "y.csv", "--baseline", "nope"])), 2);
}

#[test]
fn calibrated_chains_run_end_to_end() {
    let dir = setup();
    let d = dir.path();
    ok(d, &["synth-trace", "--task", "task.json", "--seed", "5", "--out", "t.jsonl"]);
    ok(d, &["calibrate", "--traces", "t.jsonl", "--out", "grid.json"]);
    ok(d, &["fit", "--grid", "grid.json", "--out", "fit.json"]);
    let table = ok(d, &["table", "--grid", "grid.json", "--out", "table.json"]);
    assert!(table.contains("K = ["), "{table}");
    fs::write(d.join("ct.cfg"), "calibrated_topk table.json").unwrap();
    fs::write(d.join("ce.cfg"), "calibrated_epsilon fit.json c_eps=0.05 grid=grid.json").unwrap();
    fs::write(d.join("bad.cfg"), "temperature 0.6; calibrated_topk grid.json").unwrap();
    ok(d, &["simulate", "--task", "task.json", "--chains", "ct.cfg", "ce.cfg", "--samples", "4", "--out", "r"]);
    let out = run_in(d, &["simulate", "--task", "task.json", "--chains", "bad.cfg", "--out", "r2"]);
    assert_eq!(code(&out), 2);
    assert!(String::from_utf8_lossy(&out.stderr).contains("temperature"));
}
