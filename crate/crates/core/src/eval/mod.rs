//! Evaluation harness: stratified splits, open-set metrics, a synthetic
//! dataset generator, and the multi-seed experiment driver.

pub mod experiment;
pub mod metrics;
pub mod split;
pub mod synth;

pub use experiment::{
    run_experiment, DatasetSource, EvalMode, ExperimentConfig, ExperimentReport, FlowFailure,
    MeanSummary, SeedReport,
};
pub use metrics::{
    evaluate_known, evaluate_openset, ClassMetrics, MetricsReport, OpenSetMetrics,
};
pub use split::{stratified_split, SplitOutcome, SplitSpec};
pub use synth::{generate_synthetic_openset, SynthDataset, SynthSpec};
