//! Continuously indexed invertible decoders `x = F(o; z, t)`.
//!
//! Two families are provided. [`AnodeFlow`] integrates a neural ODE in an
//! auxiliary time `τ ∈ [0, 1]` with the index appended to the state as a
//! non-evolving augmentation. [`AffineFlow`] stacks blocks
//! `h ← k(h e^{-u} - v)` where `u`, `v` are networks of the index and `k` is a
//! contractive residual block inverted by fixed-point iteration.
//!
//! Every flow is evaluated row-wise on `K x d` batches with a `K x c` context
//! (the caller concatenates the latent state and the rescaled time). Log
//! determinants are exact: the Jacobians are assembled from forward tangents
//! through the networks, which is affordable for the small `d` used here.

mod affine;
mod anode;

pub use affine::{spectral_norm, AffineFlow, AffineSpec};
pub use anode::{AnodeFlow, AnodeSpec};

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{AdError, Bound, ParamStore, Tensor};

#[derive(Debug, Error)]
pub enum FlowError {
    #[error(transparent)]
    Ad(#[from] AdError),
    #[error("fixed-point inversion did not converge: residual {residual:.3e} after {iterations} iterations")]
    NoConvergence { residual: f64, iterations: usize },
    #[error("invalid flow specification: {0}")]
    InvalidSpec(String),
}

pub type Result<T> = std::result::Result<T, FlowError>;

/// Output of a flow map together with `ln |det ∂output/∂input|` per row.
pub struct FlowResult<'t> {
    pub value: Tensor<'t>,
    /// `K x 1`.
    pub logdet: Tensor<'t>,
    /// Total fixed-point iterations spent (zero for ODE flows).
    pub iterations: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FlowKind {
    Anode,
    Affine,
}

impl std::str::FromStr for FlowKind {
    type Err = FlowError;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "anode" => Ok(FlowKind::Anode),
            "affine" => Ok(FlowKind::Affine),
            _ => Err(FlowError::InvalidSpec(format!("unknown flow type `{s}` (anode or affine)"))),
        }
    }
}

impl std::fmt::Display for FlowKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            FlowKind::Anode => "anode",
            FlowKind::Affine => "affine",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum FlowSpec {
    Anode(AnodeSpec),
    Affine(AffineSpec),
}

impl FlowSpec {
    /// Default architecture of the given family for data width `d` and context width `c`.
    pub fn default_for(kind: FlowKind, d: usize, c: usize) -> Self {
        match kind {
            FlowKind::Anode => FlowSpec::Anode(AnodeSpec::new(d, c)),
            FlowKind::Affine => FlowSpec::Affine(AffineSpec::new(d, c)),
        }
    }

    pub fn kind(&self) -> FlowKind {
        match self {
            FlowSpec::Anode(_) => FlowKind::Anode,
            FlowSpec::Affine(_) => FlowKind::Affine,
        }
    }
}

/// A flow whose parameters live in a [`ParamStore`].
#[derive(Debug, Clone)]
pub enum Flow {
    Anode(AnodeFlow),
    Affine(AffineFlow),
}

impl Flow {
    pub fn new<R: Rng>(store: &mut ParamStore, prefix: &str, spec: &FlowSpec, rng: &mut R, zero_last: bool) -> Result<Self> {
        Ok(match spec {
            FlowSpec::Anode(s) => Flow::Anode(AnodeFlow::new(store, prefix, s.clone(), rng, zero_last)?),
            FlowSpec::Affine(s) => Flow::Affine(AffineFlow::new(store, prefix, s.clone(), rng, zero_last)?),
        })
    }

    pub fn dim(&self) -> usize {
        match self {
            Flow::Anode(f) => f.spec().dim,
            Flow::Affine(f) => f.spec().dim,
        }
    }

    pub fn context_dim(&self) -> usize {
        match self {
            Flow::Anode(f) => f.spec().context,
            Flow::Affine(f) => f.spec().context,
        }
    }

    /// Binds the flow to one tape. Spectral normalisation of the affine
    /// cores happens here, once per binding.
    pub fn prepare<'t>(&self, p: &Bound<'t>) -> Result<PreparedFlow<'_, 't>> {
        Ok(match self {
            Flow::Anode(f) => PreparedFlow::Anode(f.prepare(p)),
            Flow::Affine(f) => PreparedFlow::Affine(f.prepare(p)?),
        })
    }
}

pub enum PreparedFlow<'f, 't> {
    Anode(anode::PreparedAnode<'f, 't>),
    Affine(affine::PreparedAffine<'f, 't>),
}

impl<'t> PreparedFlow<'_, 't> {
    /// `x = F(o; ctx)` and `ln |det ∂x/∂o|`.
    pub fn forward(&self, o: &Tensor<'t>, ctx: &Tensor<'t>) -> Result<FlowResult<'t>> {
        match self {
            PreparedFlow::Anode(f) => f.forward(o, ctx),
            PreparedFlow::Affine(f) => f.forward(o, ctx),
        }
    }

    /// `o = F⁻¹(x; ctx)` and `ln |det ∂o/∂x|`.
    pub fn inverse(&self, x: &Tensor<'t>, ctx: &Tensor<'t>) -> Result<FlowResult<'t>> {
        match self {
            PreparedFlow::Anode(f) => f.inverse(x, ctx),
            PreparedFlow::Affine(f) => f.inverse(x, ctx),
        }
    }
}

pub(crate) fn check_shapes(x: &Tensor<'_>, ctx: &Tensor<'_>, d: usize, c: usize) -> Result<()> {
    if x.cols() != d || ctx.cols() != c || x.rows() != ctx.rows() {
        return Err(AdError::ShapeMismatch {
            op: "flow",
            lhs: x.shape(),
            rhs: ctx.shape(),
        }
        .into());
    }
    Ok(())
}
