//! Desk-scale out-of-distribution benchmark.

pub mod corrupt;
pub mod data;
pub mod hessian;
pub mod io;
pub mod metrics;
pub mod pipeline;

pub use corrupt::{corrupt, corrupt_image, CorruptionKind, CorruptionSpec};
pub use data::{generate, generate_dataset, DataConfig, Dataset, SyntheticSample};
pub use hessian::{bench_hessian, ScalingReport, ScalingRow};
pub use metrics::{auroc, auroc_sets, epkl_ratio_report, RatioReport, RatioRow};
pub use pipeline::{run_pipeline, train_models, EvalRecord, ModelKind, PipelineConfig, PipelineOutcome};
