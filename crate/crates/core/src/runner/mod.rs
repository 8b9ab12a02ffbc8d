//! Configuration-driven experiments: SGD training, multi-trial medians,
//! paired head comparisons and the finite-difference check harness.

mod config;
mod gradcheck;
mod sgd;
mod train;
mod trials;

pub use config::{
    load_data, DataSource, DataSplits, DatasetConfig, DiagnosticsConfig, ModelConfig, OptimConfig, RunConfig,
    RunSection, DEFAULT_DIVERGENCE_CEILING,
};
pub use gradcheck::{
    check_gradients, check_gradients_with, CheckEntry, DenseBackwardFn, GradCheckReport, HEAD_PAIRS, HEAD_THRESHOLD,
    HESSIAN_POINTS, HESSIAN_THRESHOLD, LAYER_THRESHOLD,
};
pub use sgd::Sgd;
pub use train::{build_network, error_rate, train_run, TrainOutcome, TrialStatus};
pub use trials::{
    compare_heads, compare_heads_on, median, run_trials, run_trials_on, write_trials, Comparison, TrialResult,
    TrialSummary, COMPARISON_CSV, RATIOS_CSV, SUMMARY_CSV,
};
