//! Minimal reverse-mode automatic differentiation over dense `f64` arrays,
//! with the dense and recurrent layers and the Adam optimiser the model uses.

mod array;
pub mod checkpoint;
mod nn;
mod ops;
mod params;
mod tape;

pub use array::{affine, inverse, log_abs_det, matmul, sigmoid, softplus, Array};
pub use nn::{Activation, Gru, GruSpec, Mlp, MlpSpec};
pub use params::{clip_global_norm, AdamConfig, Bound, ParamId, ParamStore};
pub use tape::{Gradients, Tape, Tensor};

use thiserror::Error;

#[derive(Debug, Error)]
pub enum AdError {
    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: [usize; 2],
        rhs: [usize; 2],
    },
    #[error("{op}: {detail}")]
    Domain { op: &'static str, detail: String },
    #[error("non-finite value produced by {op}")]
    NonFinite { op: &'static str },
    #[error("backward root must be a scalar, got shape {0:?}")]
    NonScalarRoot([usize; 2]),
    #[error("tensor is not on the active tape")]
    NotOnTape,
    #[error("singular matrix in {0}")]
    Singular(&'static str),
    #[error("duplicate parameter name `{0}`")]
    DuplicateParam(String),
    #[error("missing gradient for parameter `{0}`")]
    MissingGradient(String),
    #[error("invalid specification: {0}")]
    InvalidSpec(String),
}

/// Central-difference gradient `(f(p + h e_i) - f(p - h e_i)) / 2h`.
pub fn finite_diff_grad<F>(mut f: F, point: &[f64], h: f64) -> Result<Vec<f64>, AdError>
where
    F: FnMut(&[f64]) -> Result<f64, AdError>,
{
    if !(h > 0.0) {
        return Err(AdError::InvalidSpec(format!("finite-difference step must be positive, got {h}")));
    }
    let mut p = point.to_vec();
    let mut grad = Vec::with_capacity(point.len());
    for i in 0..p.len() {
        let orig = p[i];
        p[i] = orig + h;
        let plus = f(&p)?;
        p[i] = orig - h;
        let minus = f(&p)?;
        p[i] = orig;
        if !plus.is_finite() || !minus.is_finite() {
            return Err(AdError::NonFinite { op: "finite_diff_grad" });
        }
        grad.push((plus - minus) / (2.0 * h));
    }
    Ok(grad)
}
