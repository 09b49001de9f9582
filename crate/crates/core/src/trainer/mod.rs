//! Optimizer, learning-rate schedule, training step, evaluation and
//! experiment runs.

mod config;
pub mod eval;
pub mod experiment;
pub mod optim;
pub mod schedule;
mod step;

pub use config::{lr_at, TrainConfig};
pub use experiment::{run_experiment, ExperimentConfig, ExperimentOutcome, RunOptions};
pub use step::{mask_sequence, StepReport, Trainer};
