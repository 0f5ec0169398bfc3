//! File formats: line-delimited traces and run results, single-document
//! grids, fits, and top-k tables, and the textual sampler-chain config.
//!
//! Every float is written as a decimal with 17 significant digits, which
//! reads back to the identical `f64`.

mod artifacts;
mod chain_config;
mod json;
mod trace;

pub use artifacts::{
    grid_from_str, grid_to_string, read_fit, read_fit_checked, read_grid, read_table, read_topk_source,
    fit_from_str, fit_to_string, table_from_str, table_to_string, write_fit, write_grid, write_table,
    ArtifactKind,
};
pub use chain_config::{parse_chain_config, parse_chain_file, RuleDefaults, RULE_NAMES};
pub use json::{to_json_line, to_json_pretty};
pub use trace::{
    read_trace, read_trace_file, write_trace, ReadMode, TraceFile, TraceHeader, TraceRecord, TraceWriter,
    TRACE_FORMAT, TRACE_VERSION,
};

use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};

/// Writes `contents` to `path` through a temporary file in the same
/// directory and a rename, so readers never see a partial file.
pub fn write_atomic(path: &Path, contents: &[u8]) -> Result<()> {
    let dir = match path.parent() {
        Some(d) if !d.as_os_str().is_empty() => d,
        _ => Path::new("."),
    };
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(|e| Error::io(dir, e))?;
    tmp.write_all(contents).map_err(|e| Error::io(path, e))?;
    tmp.as_file().sync_all().map_err(|e| Error::io(path, e))?;
    tmp.persist(path).map_err(|e| Error::io(path, e.error))?;
    Ok(())
}

pub(crate) fn read_to_string(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).map_err(|e| Error::io(path, e))
}
