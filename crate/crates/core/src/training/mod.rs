//! Training loop, evaluation and run artifacts.

pub mod checkpoint;
pub mod config;
pub mod data;
pub mod eval;
pub mod experiment;
pub mod metrics;
pub mod optimizer;
pub mod step;

pub use checkpoint::Checkpoint;
pub use config::ExperimentConfig;
pub use data::{Dataset, Frame};
pub use eval::{evaluate, pseudo_labels, EvalReport};
pub use experiment::{run_experiment, RunSummary};
pub use optimizer::AdamW;
pub use step::{BatchItem, StepMetrics, Trainer};
