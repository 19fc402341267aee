//! Training harness, hyperparameter grids and diagnostics for the
//! `ekfac-core` optimizers on MNIST-style auto-encoders.

pub mod config;
pub mod data;
pub mod diagnose;
pub mod error;
pub mod grid;
pub mod report;
pub mod train;

pub use config::TrainConfig;
pub use error::BenchError;
pub use train::{run_training, run_training_with, RunOptions, RunOutcome, RunStatus};
