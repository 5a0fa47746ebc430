//! Staged experiment protocol: datasets, weak-model profiling, shuffled
//! multi-stage runs against baselines, significance tests, and reports.

pub mod dataset;
pub mod experiment;
pub mod report;
pub mod rng;
pub mod stats;
pub mod synth;

pub use dataset::{load_dataset, read_dataset, save_dataset, DatasetError, DatasetItem};
pub use experiment::{
    profile_failing_subset, run_cross_domain, run_experiment, ArmReport, Baseline, ExperimentConfig, ExperimentError,
    ExperimentOutput, ExperimentReport, StageMetrics, RAR_ARM,
};
pub use report::emit_report;
pub use stats::{chi_square_2x2, ChiSquare, DegenerateTable, CHI2_CRITICAL_95_DF1};
pub use synth::synthetic_dataset;
