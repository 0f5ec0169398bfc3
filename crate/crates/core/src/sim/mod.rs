//! Synthetic self-consistency harness: planted-gold tasks, repeated
//! sampling under a chain, and maj@k / pass@k / diagnostic metrics.

pub mod metrics;
pub mod run;
pub mod task;

pub use metrics::{
    is_single_peaked, maj_at_k, maj_at_k_per_question, paired_bootstrap, paired_significance, pass_at_k,
    pass_at_k_per_question, pass_at_k_single, per_question, sequence_diagnostics, smooth3, unique_answers,
    CurveRow, Metric, SequenceDiagnostics, SequenceStats, DEFAULT_RESAMPLES, DEFAULT_SUBSETS, LOW_CONFIDENCE,
    LOW_PROB,
};
pub use run::{
    derive_seed, read_results, read_results_file, simulate, write_results, write_results_file, QuestionResult,
    RunHeader, RunResult, SampleRecord, SweepPoint,
};
pub use task::{
    builtin_task, diversity_harm_task, generate_task, mixed_task, ConfidenceLevel, SyntheticStep, SyntheticTask,
    TaskParams, BUILTIN_TASKS,
};
