//! Correctness-calibrated truncation sampling.
//!
//! Builds confidence-bin × rank calibration grids from teacher-forced
//! probability traces, fits a probability → correctness predictor, and
//! applies calibrated and baseline truncation rules to next-token
//! distributions. A synthetic self-consistency harness exercises the rules
//! end to end without a language model.

pub mod calibrated;
pub mod calibration;
pub mod cli;
pub mod error;
pub mod exact;
pub mod io;
pub mod prob;
pub mod samplers;
pub mod sim;

pub use error::{Error, Result};
