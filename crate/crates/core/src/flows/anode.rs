use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{check_shapes, FlowError, FlowResult, Result};
use crate::autodiff::{Array, Bound, Mlp, MlpSpec, ParamStore, Tensor};

/// Neural-ODE flow: `N` blocks, each integrating `dh/dτ = f(h, ctx, τ)` over
/// `τ ∈ [0, 1]` with `steps` fixed RK4 steps.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnodeSpec {
    pub dim: usize,
    pub context: usize,
    pub blocks: usize,
    pub steps: usize,
    pub hidden: Vec<usize>,
}

impl AnodeSpec {
    pub fn new(dim: usize, context: usize) -> Self {
        Self {
            dim,
            context,
            blocks: 5,
            steps: 16,
            hidden: vec![8, 32, 32, 8],
        }
    }

    fn validate(&self) -> Result<()> {
        if self.dim == 0 || self.blocks == 0 || self.steps == 0 {
            return Err(FlowError::InvalidSpec(format!(
                "ANODE needs d, blocks and steps >= 1, got {self:?}"
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct AnodeFlow {
    spec: AnodeSpec,
    nets: Vec<Mlp>,
}

impl AnodeFlow {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        prefix: &str,
        spec: AnodeSpec,
        rng: &mut R,
        zero_last: bool,
    ) -> Result<Self> {
        spec.validate()?;
        let net_spec = MlpSpec::new(spec.dim + spec.context + 1, &spec.hidden, spec.dim);
        let nets = (0..spec.blocks)
            .map(|b| Mlp::new(store, &format!("{prefix}.block{b}"), net_spec.clone(), rng, zero_last))
            .collect::<std::result::Result<_, _>>()?;
        Ok(Self { spec, nets })
    }

    pub fn spec(&self) -> &AnodeSpec {
        &self.spec
    }

    pub fn nets(&self) -> &[Mlp] {
        &self.nets
    }

    pub(super) fn prepare<'t>(&self, p: &Bound<'t>) -> PreparedAnode<'_, 't> {
        PreparedAnode {
            flow: self,
            layers: self.nets.iter().map(|n| n.layer_tensors(p)).collect(),
        }
    }
}

pub struct PreparedAnode<'f, 't> {
    flow: &'f AnodeFlow,
    layers: Vec<Vec<(Tensor<'t>, Tensor<'t>)>>,
}

impl<'t> PreparedAnode<'_, 't> {
    /// Vector field and `Tr(∂f/∂h)` of block `b`.
    fn field(&self, b: usize, h: &Tensor<'t>, ctx: &Tensor<'t>, tau: f64) -> Result<(Tensor<'t>, Tensor<'t>)> {
        let d = self.flow.spec.dim;
        let tau_col = h.tape().constant(Array::full(h.rows(), 1, tau));
        let input = Tensor::concat(&[h, ctx, &tau_col])?;
        let dirs: Vec<usize> = (0..d).collect();
        let (f, tangents) = self.flow.nets[b].forward_with_tangents(&self.layers[b], &input, &dirs)?;
        let mut trace = tangents[0].slice_cols(0, 1)?;
        for (j, t) in tangents.iter().enumerate().skip(1) {
            trace = trace.add(&t.slice_cols(j, 1)?)?;
        }
        Ok((f, trace))
    }

    /// Integrates every block from `τ = from` to `τ = 1 - from`, visiting blocks
    /// in `order`. Returns the end state and `∫ Tr(∂f/∂h) dτ` along the way.
    fn integrate(
        &self,
        start: &Tensor<'t>,
        ctx: &Tensor<'t>,
        order: impl Iterator<Item = usize>,
        reverse: bool,
    ) -> Result<FlowResult<'t>> {
        let s = self.flow.spec.steps;
        let dt = if reverse { -1.0 / s as f64 } else { 1.0 / s as f64 };
        let mut h = start.clone();
        let mut logdet = start.tape().constant(Array::zeros(start.rows(), 1));
        for b in order {
            for k in 0..s {
                let tau = if reverse { 1.0 - k as f64 / s as f64 } else { k as f64 / s as f64 };
                let (k1, l1) = self.field(b, &h, ctx, tau)?;
                let (k2, l2) = self.field(b, &h.add(&k1.scale(0.5 * dt)?)?, ctx, tau + 0.5 * dt)?;
                let (k3, l3) = self.field(b, &h.add(&k2.scale(0.5 * dt)?)?, ctx, tau + 0.5 * dt)?;
                let (k4, l4) = self.field(b, &h.add(&k3.scale(dt)?)?, ctx, tau + dt)?;
                let dh = k1.add(&k2.add(&k3)?.scale(2.0)?)?.add(&k4)?.scale(dt / 6.0)?;
                let dl = l1.add(&l2.add(&l3)?.scale(2.0)?)?.add(&l4)?.scale(dt / 6.0)?;
                h = h.add(&dh)?;
                logdet = logdet.add(&dl)?;
            }
        }
        Ok(FlowResult {
            value: h,
            logdet,
            iterations: 0,
        })
    }

    pub fn forward(&self, o: &Tensor<'t>, ctx: &Tensor<'t>) -> Result<FlowResult<'t>> {
        check_shapes(o, ctx, self.flow.spec.dim, self.flow.spec.context)?;
        self.integrate(o, ctx, 0..self.flow.spec.blocks, false)
    }

    pub fn inverse(&self, x: &Tensor<'t>, ctx: &Tensor<'t>) -> Result<FlowResult<'t>> {
        check_shapes(x, ctx, self.flow.spec.dim, self.flow.spec.context)?;
        self.integrate(x, ctx, (0..self.flow.spec.blocks).rev(), true)
    }
}
