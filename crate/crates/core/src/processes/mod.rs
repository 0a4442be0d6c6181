//! Time grids, Wiener paths, Euler–Maruyama integration, exact reference
//! transitions (Ornstein–Uhlenbeck, geometric Brownian motion) and the
//! synthetic benchmark generators with their JSONL dataset format.

mod dataset;
mod grid;
mod reference;
mod sde;

pub use dataset::{
    generate_dataset, read_dataset, write_dataset, CarParams, Dataset, DatasetMeta, GbmParams, LsdeParams,
    ProcessKind, ProcessSpec, SlcParams, GENERATION_STEP, sequence_rng,
};
pub use grid::{sample_poisson_grid, TimeGrid, TimeSeries};
pub use reference::{
    gbm_exact_logpdf, gbm_exact_sample, ou_sample, ou_stationary_logpdf, ou_transition_logpdf, wiener_transition_logpdf,
    DT_MIN,
};
pub use sde::{em_advance, em_steps, euler_maruyama, wiener_path, FnSde, SdeSpec, WienerPath};

use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum ProcessError {
    #[error("invalid parameter: {0}")]
    InvalidParam(String),
    #[error("non-finite state at step {step}")]
    NonFinite { step: usize },
    #[error("unknown process `{0}` (expected gbm, lsde, car or slc)")]
    UnknownProcess(String),
    #[error("dataset i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("malformed dataset at line {line}: {detail}")]
    Malformed { line: usize, detail: String },
}

pub(crate) fn standard_normal<R: rand::Rng + ?Sized>(rng: &mut R) -> f64 {
    rng.sample(rand_distr::StandardNormal)
}
