//! Teacher-forced trace files.
//!
//! One JSON object per line. The first line is the header:
//!
//! ```text
//! {"record":"header","format":"calitrunc-trace","version":1,"model":"…","dataset":"…",
//!  "temperature":1.0,"max_rank":20,"prompt_masked":true}
//! ```
//!
//! and every following line is a step:
//!
//! ```text
//! {"record":"step","seq":0,"step":0,"p_max":0.6,"probs":[0.6,0.3,0.1],"gold_rank":1}
//! ```
//!
//! `probs` are the top-`max_rank` probabilities in descending order after
//! temperature scaling, `gold_rank` is 1-based or `null` when the gold token
//! lies beyond the recorded ranks. Steps of one sequence are contiguous with
//! strictly increasing `step`.

use std::collections::{BTreeMap, HashSet};
use std::fs::File;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::json::to_json_line;
use crate::calibration::TraceStep;
use crate::error::{Error, Result};

pub const TRACE_FORMAT: &str = "calitrunc-trace";
pub const TRACE_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceHeader {
    pub model: String,
    pub dataset: String,
    pub temperature: f64,
    pub max_rank: usize,
    pub prompt_masked: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TraceRecord {
    pub seq: u64,
    pub step: u64,
    pub data: TraceStep,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TraceFile {
    pub header: TraceHeader,
    pub records: Vec<TraceRecord>,
    /// Non-fatal findings, e.g. unknown fields. Not written back.
    pub warnings: Vec<String>,
}

impl TraceFile {
    pub fn new(header: TraceHeader) -> Self {
        Self {
            header,
            records: Vec::new(),
            warnings: Vec::new(),
        }
    }

    pub fn steps(&self) -> impl Iterator<Item = &TraceStep> {
        self.records.iter().map(|r| &r.data)
    }
}

#[derive(Serialize, Deserialize)]
struct HeaderLine {
    record: String,
    format: String,
    version: u32,
    #[serde(flatten)]
    header: TraceHeader,
    #[serde(flatten, skip_serializing)]
    extra: BTreeMap<String, serde_json::Value>,
}

#[derive(Serialize)]
struct StepLineOut<'a> {
    record: &'static str,
    seq: u64,
    step: u64,
    p_max: f64,
    probs: &'a [f64],
    gold_rank: Option<usize>,
}

#[derive(Deserialize)]
struct StepLineIn {
    record: String,
    seq: u64,
    step: u64,
    p_max: Option<f64>,
    probs: Vec<f64>,
    gold_rank: Option<usize>,
    #[serde(flatten)]
    extra: BTreeMap<String, serde_json::Value>,
}

/// Streams a trace, one flushed line per record, so a crash leaves a
/// readable prefix.
pub struct TraceWriter<W: Write> {
    sink: W,
    temperature: f64,
    last: Option<(u64, u64)>,
    seen: HashSet<u64>,
}

impl<W: Write> TraceWriter<W> {
    pub fn new(mut sink: W, header: &TraceHeader) -> Result<Self> {
        let line = to_json_line(&HeaderLine {
            record: "header".into(),
            format: TRACE_FORMAT.into(),
            version: TRACE_VERSION,
            header: header.clone(),
            extra: BTreeMap::new(),
        })?;
        writeln!(sink, "{line}").and_then(|_| sink.flush()).map_err(|e| Error::io("<trace sink>", e))?;
        Ok(Self {
            sink,
            temperature: header.temperature,
            last: None,
            seen: HashSet::new(),
        })
    }

    pub fn write_step(&mut self, seq: u64, step: u64, data: &TraceStep) -> Result<()> {
        if data.temperature() != self.temperature {
            return Err(Error::Configuration(format!(
                "step at temperature {} written to a trace at {}",
                data.temperature(),
                self.temperature
            )));
        }
        check_order(&mut self.last, &mut self.seen, seq, step).map_err(Error::InvalidInput)?;
        let line = to_json_line(&StepLineOut {
            record: "step",
            seq,
            step,
            p_max: data.p_max(),
            probs: data.sorted_probs(),
            gold_rank: data.gold_rank(),
        })?;
        writeln!(self.sink, "{line}")
            .and_then(|_| self.sink.flush())
            .map_err(|e| Error::io("<trace sink>", e))
    }

    pub fn into_inner(self) -> W {
        self.sink
    }
}

fn check_order(
    last: &mut Option<(u64, u64)>,
    seen: &mut HashSet<u64>,
    seq: u64,
    step: u64,
) -> std::result::Result<(), String> {
    match *last {
        Some((s, prev)) if s == seq && step <= prev => {
            return Err(format!(
                "step index {step} of sequence {seq} does not increase (previous {prev})"
            ));
        }
        Some((s, _)) if s != seq && seen.contains(&seq) => {
            return Err(format!("sequence {seq} resumes after other sequences"));
        }
        _ => {}
    }
    seen.insert(seq);
    *last = Some((seq, step));
    Ok(())
}

pub fn write_trace<W: Write>(trace: &TraceFile, sink: W) -> Result<W> {
    let mut writer = TraceWriter::new(sink, &trace.header)?;
    for r in &trace.records {
        writer.write_step(r.seq, r.step, &r.data)?;
    }
    Ok(writer.into_inner())
}

/// How to treat a damaged final line.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ReadMode {
    /// Any malformed line is an error.
    #[default]
    Strict,
    /// A malformed last line without a trailing newline (a torn write) is
    /// dropped with a warning.
    RecoverTornTail,
}

pub fn read_trace<R: BufRead>(mut source: R, source_name: &str, mode: ReadMode) -> Result<TraceFile> {
    let fmt_err = |line: usize, message: String| Error::Format {
        source_name: source_name.to_string(),
        line,
        message,
    };
    let mut raw = String::new();
    let mut line_no = 0;
    let mut trace: Option<TraceFile> = None;
    let mut last = None;
    let mut seen = HashSet::new();
    loop {
        raw.clear();
        let n = source
            .read_line(&mut raw)
            .map_err(|e| Error::io(source_name, e))?;
        if n == 0 {
            break;
        }
        line_no += 1;
        let terminated = raw.ends_with('\n');
        let text = raw.trim_end_matches(['\n', '\r']);
        if text.trim().is_empty() {
            continue;
        }
        let parsed = match trace.as_mut() {
            None => parse_header(text).map(|t| trace = Some(t)),
            Some(t) => parse_step(text, t, &mut last, &mut seen),
        };
        if let Err(message) = parsed {
            if mode == ReadMode::RecoverTornTail && !terminated && trace.is_some() {
                let t = trace.as_mut().unwrap();
                t.warnings
                    .push(format!("line {line_no}: dropped torn final record ({message})"));
                break;
            }
            let message = if terminated {
                message
            } else {
                format!("{message} (final line is truncated)")
            };
            return Err(fmt_err(line_no, message));
        }
    }
    trace.ok_or_else(|| fmt_err(line_no.max(1), "missing trace header".into()))
}

fn parse_header(text: &str) -> std::result::Result<TraceFile, String> {
    let h: HeaderLine = serde_json::from_str(text).map_err(|e| format!("malformed header: {e}"))?;
    if h.record != "header" {
        return Err(format!("expected a header record, found `{}`", h.record));
    }
    if h.format != TRACE_FORMAT {
        return Err(format!("unknown trace format `{}`", h.format));
    }
    if h.version != TRACE_VERSION {
        return Err(Error::VersionMismatch {
            found: h.version,
            expected: TRACE_VERSION,
        }
        .to_string());
    }
    if !(h.header.temperature.is_finite() && h.header.temperature > 0.0) {
        return Err(format!("header temperature {} must be positive", h.header.temperature));
    }
    if h.header.max_rank == 0 {
        return Err("header max_rank must be at least 1".into());
    }
    let mut trace = TraceFile::new(h.header);
    for key in h.extra.keys() {
        trace.warnings.push(format!("header: unknown field `{key}`"));
    }
    Ok(trace)
}

fn parse_step(
    text: &str,
    trace: &mut TraceFile,
    last: &mut Option<(u64, u64)>,
    seen: &mut HashSet<u64>,
) -> std::result::Result<(), String> {
    let s: StepLineIn = serde_json::from_str(text).map_err(|e| format!("malformed step: {e}"))?;
    if s.record != "step" {
        return Err(format!("expected a step record, found `{}`", s.record));
    }
    if s.probs.len() > trace.header.max_rank {
        return Err(format!(
            "step lists {} probabilities but the header allows {}",
            s.probs.len(),
            trace.header.max_rank
        ));
    }
    let data = TraceStep::new(s.probs, s.gold_rank, trace.header.temperature).map_err(|e| e.to_string())?;
    if let Some(p_max) = s.p_max {
        if p_max != data.p_max() {
            return Err(format!("p_max {p_max} differs from the top probability {}", data.p_max()));
        }
    }
    check_order(last, seen, s.seq, s.step)?;
    for key in s.extra.keys() {
        trace
            .warnings
            .push(format!("sequence {} step {}: unknown field `{key}`", s.seq, s.step));
    }
    trace.records.push(TraceRecord {
        seq: s.seq,
        step: s.step,
        data,
    });
    Ok(())
}

pub fn read_trace_file(path: &Path, mode: ReadMode) -> Result<TraceFile> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    read_trace(BufReader::new(file), &path.display().to_string(), mode)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn header() -> TraceHeader {
        TraceHeader {
            model: "toy".into(),
            dataset: "unit".into(),
            temperature: 1.0,
            max_rank: 4,
            prompt_masked: true,
        }
    }

    fn step(p: &[f64], gold: Option<usize>) -> TraceStep {
        TraceStep::new(p.to_vec(), gold, 1.0).unwrap()
    }

    fn fixture() -> TraceFile {
        let mut t = TraceFile::new(header());
        t.records = vec![
            TraceRecord {
                seq: 0,
                step: 0,
                data: step(&[0.6, 0.3, 0.1], Some(1)),
            },
            TraceRecord {
                seq: 0,
                step: 1,
                data: step(&[1.0 / 3.0, 0.2, 0.1, 0.05], Some(4)),
            },
            TraceRecord {
                seq: 1,
                step: 0,
                data: step(&[0.25, 0.25, 0.25, 0.25], None),
            },
        ];
        t
    }

    fn to_text(t: &TraceFile) -> String {
        String::from_utf8(write_trace(t, Vec::new()).unwrap()).unwrap()
    }

    fn parse(text: &str) -> Result<TraceFile> {
        read_trace(text.as_bytes(), "mem", ReadMode::Strict)
    }

    #[test]
    fn header_only_round_trips() {
        let t = TraceFile::new(header());
        assert_eq!(parse(&to_text(&t)).unwrap(), t);
    }

    #[test]
    fn fixture_round_trips_bit_exactly() {
        let t = fixture();
        let text = to_text(&t);
        let back = parse(&text).unwrap();
        assert_eq!(back, t);
        assert!(back.warnings.is_empty());
        assert_eq!(to_text(&back), text);
    }

    #[test]
    fn truncated_last_line_names_the_line() {
        let text = to_text(&fixture());
        let cut = &text[..text.len() - 10];
        match parse(cut) {
            Err(Error::Format { line, message, .. }) => {
                assert_eq!(line, 4);
                assert!(message.contains("truncated"), "{message}");
            }
            other => panic!("expected format error, got {other:?}"),
        }
        let recovered = read_trace(cut.as_bytes(), "mem", ReadMode::RecoverTornTail).unwrap();
        assert_eq!(recovered.records.len(), 2);
        assert_eq!(recovered.warnings.len(), 1);
    }

    #[test]
    fn version_and_order_errors() {
        let text = to_text(&fixture()).replacen("\"version\":1", "\"version\":9", 1);
        let err = parse(&text).unwrap_err();
        assert!(err.to_string().contains("version 9"), "{err}");

        let mut lines: Vec<&str> = Vec::new();
        let good = to_text(&fixture());
        lines.extend(good.lines());
        lines.swap(1, 2);
        let err = parse(&(lines.join("\n") + "\n")).unwrap_err();
        assert!(matches!(err, Error::Format { line: 3, .. }), "{err}");

        let resumed = format!(
            "{}\n{}\n{}\n",
            good.lines().next().unwrap(),
            good.lines().nth(3).unwrap(),
            good.lines().nth(1).unwrap()
        )
        .replace("\"seq\":1", "\"seq\":0")
        .replacen("\"seq\":0,\"step\":0", "\"seq\":0,\"step\":5", 1);
        assert!(parse(&resumed).is_err());

        assert!(parse("").is_err());
        assert!(parse("{\"record\":\"step\"}\n").is_err());
    }

    #[test]
    fn rejects_bad_steps() {
        let h = to_text(&TraceFile::new(header()));
        let bad_order = format!("{h}{{\"record\":\"step\",\"seq\":0,\"step\":0,\"probs\":[0.2,0.5],\"gold_rank\":1}}\n");
        assert!(parse(&bad_order).is_err());
        let too_long = format!("{h}{{\"record\":\"step\",\"seq\":0,\"step\":0,\"probs\":[0.2,0.2,0.2,0.2,0.2],\"gold_rank\":1}}\n");
        assert!(parse(&too_long).is_err());
        let bad_pmax = format!("{h}{{\"record\":\"step\",\"seq\":0,\"step\":0,\"p_max\":0.9,\"probs\":[0.5,0.5],\"gold_rank\":1}}\n");
        assert!(parse(&bad_pmax).is_err());
        let extra = format!("{h}{{\"record\":\"step\",\"seq\":0,\"step\":0,\"probs\":[0.5,0.5],\"gold_rank\":null,\"note\":1}}\n");
        let t = parse(&extra).unwrap();
        assert_eq!(t.warnings.len(), 1);
        assert_eq!(t.records[0].data.gold_rank(), None);
    }

    #[test]
    fn writer_enforces_order_and_temperature() {
        let mut w = TraceWriter::new(Vec::new(), &header()).unwrap();
        w.write_step(0, 1, &step(&[0.5, 0.5], Some(1))).unwrap();
        assert!(w.write_step(0, 1, &step(&[0.5, 0.5], Some(1))).is_err());
        let cold = TraceStep::new(vec![0.9, 0.1], Some(1), 0.6).unwrap();
        assert!(w.write_step(0, 2, &cold).is_err());
    }
}
