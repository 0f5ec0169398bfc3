//! Single-document JSON files for grids, fits, and top-k tables.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::json::to_json_pretty;
use super::{read_to_string, write_atomic};
use crate::calibrated::{build_topk_table, RankCapMode, TopKTable};
use crate::calibration::{CalibrationGrid, LogLogFit};
use crate::error::{Error, Result};
use crate::exact::ExactSum;

const GRID_VERSION: u32 = 1;
const FIT_VERSION: u32 = 1;
const TABLE_VERSION: u32 = 1;

/// The `kind` tag every document carries.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ArtifactKind {
    CalibrationGrid,
    LoglogFit,
    TopkTable,
}

#[derive(Deserialize)]
struct KindProbe {
    kind: ArtifactKind,
    version: u32,
}

#[derive(Serialize, Deserialize)]
struct GridDoc {
    kind: ArtifactKind,
    version: u32,
    n_bins: usize,
    max_rank: usize,
    temperature: f64,
    digest: String,
    total_steps: u64,
    counts: Vec<u64>,
    /// Exact probability sums per `[bin][rank]`, as hexadecimal multiples of 2^-1074.
    sum_probs: Vec<Vec<String>>,
    sum_correct: Vec<Vec<u64>>,
    #[serde(default)]
    frequency: Option<Vec<f64>>,
    #[serde(default)]
    p_hat: Option<Vec<Option<Vec<f64>>>>,
    #[serde(default)]
    c_hat: Option<Vec<Option<Vec<f64>>>>,
    #[serde(default)]
    expected_accuracy: Option<Vec<Option<f64>>>,
}

#[derive(Serialize, Deserialize)]
struct FitDoc {
    kind: ArtifactKind,
    version: u32,
    #[serde(flatten)]
    fit: LogLogFit,
}

#[derive(Serialize, Deserialize)]
struct TableDoc {
    kind: ArtifactKind,
    version: u32,
    #[serde(flatten)]
    table: TopKTable,
}

fn schema(source: &str, message: impl Into<String>) -> Error {
    Error::Format {
        source_name: source.to_string(),
        line: 1,
        message: message.into(),
    }
}

fn parse_doc<T: for<'de> Deserialize<'de>>(text: &str, source: &str, kind: ArtifactKind, version: u32) -> Result<T> {
    let probe: KindProbe = serde_json::from_str(text).map_err(|e| Error::Format {
        source_name: source.to_string(),
        line: e.line(),
        message: e.to_string(),
    })?;
    if probe.kind != kind {
        return Err(schema(source, format!("expected a {kind:?} document, found {:?}", probe.kind)));
    }
    if probe.version != version {
        return Err(Error::VersionMismatch {
            found: probe.version,
            expected: version,
        });
    }
    serde_json::from_str(text).map_err(|e| Error::Format {
        source_name: source.to_string(),
        line: e.line(),
        message: e.to_string(),
    })
}

/// Serializes a grid with its accumulators and, when finalized, its estimates.
pub fn grid_to_string(grid: &CalibrationGrid) -> Result<String> {
    let rows = |f: &dyn Fn(usize, usize) -> String| -> Vec<Vec<String>> {
        (1..=grid.n_bins())
            .map(|m| (1..=grid.max_rank()).map(|r| f(m, r)).collect())
            .collect()
    };
    let (p_hat, c_hat, expected_accuracy) = match grid.estimates() {
        Ok(est) => (
            Some(est.iter().map(|e| e.as_ref().map(|e| e.p_hat.clone())).collect()),
            Some(est.iter().map(|e| e.as_ref().map(|e| e.c_hat.clone())).collect()),
            Some(grid.expected_accuracy()?),
        ),
        Err(_) => (None, None, None),
    };
    let doc = GridDoc {
        kind: ArtifactKind::CalibrationGrid,
        version: GRID_VERSION,
        n_bins: grid.n_bins(),
        max_rank: grid.max_rank(),
        temperature: grid.temperature(),
        digest: grid.digest(),
        total_steps: grid.total_steps(),
        counts: grid.counts().to_vec(),
        sum_probs: rows(&|m, r| grid.sum_probs(m, r).to_hex()),
        sum_correct: (1..=grid.n_bins())
            .map(|m| (1..=grid.max_rank()).map(|r| grid.sum_correct(m, r)).collect())
            .collect(),
        frequency: Some(grid.frequencies()),
        p_hat,
        c_hat,
        expected_accuracy,
    };
    to_json_pretty(&doc)
}

/// Parses a grid document. The stored estimates, when present, must equal
/// the ones recomputed from the accumulators.
pub fn grid_from_str(text: &str, source: &str) -> Result<CalibrationGrid> {
    let doc: GridDoc = parse_doc(text, source, ArtifactKind::CalibrationGrid, GRID_VERSION)?;
    let shape_ok = doc.sum_probs.len() == doc.n_bins
        && doc.sum_correct.len() == doc.n_bins
        && doc.sum_probs.iter().all(|r| r.len() == doc.max_rank)
        && doc.sum_correct.iter().all(|r| r.len() == doc.max_rank);
    if !shape_ok {
        return Err(schema(source, "accumulator arrays do not match n_bins × max_rank"));
    }
    let mut sums = Vec::with_capacity(doc.n_bins * doc.max_rank);
    for (m, row) in doc.sum_probs.iter().enumerate() {
        for (r, hex) in row.iter().enumerate() {
            let s = ExactSum::from_hex(hex).ok_or_else(|| {
                schema(source, format!("sum_probs[{m}][{r}] is not a hexadecimal sum: `{hex}`"))
            })?;
            sums.push(s);
        }
    }
    let correct: Vec<u64> = doc.sum_correct.iter().flatten().copied().collect();
    let mut grid = CalibrationGrid::from_parts(doc.n_bins, doc.max_rank, doc.temperature, doc.counts, sums, correct)
        .map_err(|e| schema(source, e.to_string()))?;
    if grid.digest() != doc.digest {
        return Err(Error::DigestMismatch {
            expected: doc.digest,
            found: grid.digest(),
        });
    }
    if doc.total_steps != grid.total_steps() {
        return Err(schema(source, "total_steps does not match the bin counts"));
    }
    if let (Some(p_hat), Some(c_hat)) = (&doc.p_hat, &doc.c_hat) {
        grid.finalize();
        let est = grid.estimates()?;
        let stored_matches = est.len() == p_hat.len()
            && est.len() == c_hat.len()
            && est.iter().zip(p_hat.iter().zip(c_hat)).all(|(e, (p, c))| match e {
                None => p.is_none() && c.is_none(),
                Some(e) => p.as_ref() == Some(&e.p_hat) && c.as_ref() == Some(&e.c_hat),
            });
        if !stored_matches {
            return Err(schema(source, "stored estimates differ from the accumulators"));
        }
    }
    Ok(grid)
}

pub fn write_grid(path: &Path, grid: &CalibrationGrid) -> Result<()> {
    write_atomic(path, grid_to_string(grid)?.as_bytes())
}

pub fn read_grid(path: &Path) -> Result<CalibrationGrid> {
    grid_from_str(&read_to_string(path)?, &path.display().to_string())
}

pub fn fit_to_string(fit: &LogLogFit) -> Result<String> {
    to_json_pretty(&FitDoc {
        kind: ArtifactKind::LoglogFit,
        version: FIT_VERSION,
        fit: fit.clone(),
    })
}

pub fn fit_from_str(text: &str, source: &str) -> Result<LogLogFit> {
    let doc: FitDoc = parse_doc(text, source, ArtifactKind::LoglogFit, FIT_VERSION)?;
    let fit = doc.fit;
    if !(fit.a.is_finite() && fit.b.is_finite() && fit.mse >= 0.0) || fit.n_points < 2 {
        return Err(schema(source, "fit needs finite coefficients, mse ≥ 0, and n_points ≥ 2"));
    }
    Ok(fit)
}

pub fn write_fit(path: &Path, fit: &LogLogFit) -> Result<()> {
    write_atomic(path, fit_to_string(fit)?.as_bytes())
}

pub fn read_fit(path: &Path) -> Result<LogLogFit> {
    fit_from_str(&read_to_string(path)?, &path.display().to_string())
}

/// Reads a fit and checks it was computed from `grid`.
pub fn read_fit_checked(path: &Path, grid: &CalibrationGrid) -> Result<LogLogFit> {
    let fit = read_fit(path)?;
    check_digest(fit.grid_digest.as_deref(), grid)?;
    Ok(fit)
}

fn check_digest(recorded: Option<&str>, grid: &CalibrationGrid) -> Result<()> {
    let found = grid.digest();
    match recorded {
        Some(d) if d == found => Ok(()),
        Some(d) => Err(Error::DigestMismatch {
            expected: d.to_string(),
            found,
        }),
        None => Err(Error::DigestMismatch {
            expected: "<none>".into(),
            found,
        }),
    }
}

pub fn table_to_string(table: &TopKTable) -> Result<String> {
    to_json_pretty(&TableDoc {
        kind: ArtifactKind::TopkTable,
        version: TABLE_VERSION,
        table: table.clone(),
    })
}

pub fn table_from_str(text: &str, source: &str) -> Result<TopKTable> {
    let doc: TableDoc = parse_doc(text, source, ArtifactKind::TopkTable, TABLE_VERSION)?;
    doc.table.validate().map_err(|e| schema(source, e.to_string()))?;
    Ok(doc.table)
}

pub fn write_table(path: &Path, table: &TopKTable) -> Result<()> {
    write_atomic(path, table_to_string(table)?.as_bytes())
}

pub fn read_table(path: &Path) -> Result<TopKTable> {
    table_from_str(&read_to_string(path)?, &path.display().to_string())
}

/// Loads a top-k table from either a table file or a grid file (building
/// the table at `c_ct`). For a table file, `c_ct` must match if given.
pub fn read_topk_source(path: &Path, c_ct: Option<f64>, mode: RankCapMode, default_c_ct: f64) -> Result<TopKTable> {
    let text = read_to_string(path)?;
    let source = path.display().to_string();
    let probe: KindProbe = serde_json::from_str(&text).map_err(|e| Error::Format {
        source_name: source.clone(),
        line: e.line(),
        message: e.to_string(),
    })?;
    match probe.kind {
        ArtifactKind::TopkTable => {
            let table = table_from_str(&text, &source)?;
            if let Some(c) = c_ct.filter(|&c| c != table.threshold) {
                return Err(Error::Configuration(format!(
                    "{source} was built at c_ct={} but the chain asks for {c}",
                    table.threshold
                )));
            }
            Ok(table)
        }
        ArtifactKind::CalibrationGrid => {
            let grid = grid_from_str(&text, &source)?.finalized();
            build_topk_table(&grid, c_ct.unwrap_or(default_c_ct), mode)
        }
        ArtifactKind::LoglogFit => Err(Error::Configuration(format!(
            "{source} is a fit; calibrated_topk needs a grid or a table"
        ))),
    }
}
