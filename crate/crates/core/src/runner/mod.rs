//! Config-driven pipeline: victim, steal, distill, eval, each writing its
//! artifacts into one run directory.

mod compare;
mod config;
mod pipeline;

pub use compare::{compare_runs, Comparison, ComparisonRow};
pub use config::{
    AnchorSpec, DerivedSeeds, EvalSpec, ExperimentConfig, ProxySpec, SelectionSpec, StudentSpec, VictimSpec,
};
pub use pipeline::{
    run_pipeline, EvalReports, RunManifest, RunOptions, RunSummary, Stage, StageFailure, TrainingManifest,
    MANIFEST_FILE, METRICS_FILE,
};
