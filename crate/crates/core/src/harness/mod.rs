//! Leave-one-domain-out experiments: configuration, checkpoints, stream
//! evaluation of every method and report files.

pub mod checkpoint;
mod config;
mod experiment;
mod report;

pub use config::{BaselineConfig, DataConfig, ExperimentConfig, Method, PretrainConfig, StreamConfig, SweepConfig};
pub use experiment::{
    derive_seed, evaluate_method, leave_out, load_domains, prepare_seed, run_leave_one_out, run_prepared, Aggregate,
    CellResult, MethodRun, RunReport, SeedArtifacts,
};
pub use report::{emit_report, CellSummary, Summary};
