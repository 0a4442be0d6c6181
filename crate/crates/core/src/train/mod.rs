//! Training loop, NLL evaluation, the exact GBM oracle, sequential
//! prediction over datasets and the ablation runner.

mod ablation;
mod config;
mod eval;
mod metrics;
mod trainer;

pub use ablation::{run_ablation, AblationCell};
pub use config::TrainConfig;
pub use eval::{evaluate_nll, gbm_oracle_nll, predict_dataset, NllReport, PredictReport};
pub use metrics::{MetricsRow, MetricsTable};
pub use trainer::{build_model, train, train_on, EpochRecord, TrainOutcome};

use std::path::PathBuf;

use thiserror::Error;

use crate::autodiff::AdError;
use crate::model::ModelError;
use crate::processes::ProcessError;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Process(#[from] ProcessError),
    #[error(transparent)]
    Ad(#[from] AdError),
    #[error("config line {line}: {detail}")]
    ConfigSyntax { line: usize, detail: String },
    #[error("invalid training configuration: {0}")]
    Config(String),
    #[error("non-finite loss at step {step} on sequence {sequence}: {detail}")]
    NonFinite { step: u64, sequence: usize, detail: String },
    #[error("{0}")]
    Dataset(String),
    #[error("i/o error on {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, TrainError>;
