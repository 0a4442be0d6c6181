use std::collections::HashMap;

use super::{AdError, Array, Gradients, Tape, Tensor};

/// Handle to a parameter inside a [`ParamStore`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, PartialEq)]
pub(crate) struct Param {
    pub(crate) name: String,
    pub(crate) value: Array,
    pub(crate) m: Array,
    pub(crate) v: Array,
}

/// Named parameters with Adam moment buffers.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    pub(crate) params: Vec<Param>,
    pub(crate) index: HashMap<String, usize>,
    pub(crate) step: u64,
}

#[derive(Debug, Clone, Copy)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamConfig {
    pub fn with_lr(lr: f64) -> Self {
        Self {
            lr,
            ..Self::default()
        }
    }
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Array) -> Result<ParamId, AdError> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(AdError::DuplicateParam(name));
        }
        let [r, c] = value.shape();
        let id = self.params.len();
        self.index.insert(name.clone(), id);
        self.params.push(Param {
            name,
            value,
            m: Array::zeros(r, c),
            v: Array::zeros(r, c),
        });
        Ok(ParamId(id))
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn step(&self) -> u64 {
        self.step
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied().map(ParamId)
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.params[id.0].name
    }

    pub fn value(&self, id: ParamId) -> &Array {
        &self.params[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Array {
        &mut self.params[id.0].value
    }

    pub fn moments(&self, id: ParamId) -> (&Array, &Array) {
        let p = &self.params[id.0];
        (&p.m, &p.v)
    }

    /// Total number of scalar parameters.
    pub fn numel(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    /// All parameter values concatenated in store order.
    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.numel());
        for p in &self.params {
            out.extend_from_slice(p.value.data());
        }
        out
    }

    /// Overwrites all parameter values from a flat vector in store order.
    pub fn unflatten(&mut self, flat: &[f64]) {
        assert_eq!(flat.len(), self.numel(), "flat parameter length mismatch");
        let mut off = 0;
        for p in &mut self.params {
            let n = p.value.len();
            p.value.data_mut().copy_from_slice(&flat[off..off + n]);
            off += n;
        }
    }

    /// Registers every parameter as a leaf of `tape`.
    pub fn bind<'t>(&self, tape: &'t Tape) -> Bound<'t> {
        Bound {
            tensors: self.params.iter().map(|p| tape.leaf(p.value.clone())).collect(),
        }
    }

    /// One bias-corrected Adam update. `grads` is aligned with store order.
    pub fn adam_step(&mut self, grads: &[Array], cfg: &AdamConfig) -> Result<(), AdError> {
        if grads.len() != self.params.len() {
            let missing = self
                .params
                .get(grads.len())
                .map_or_else(|| "<extra>".to_string(), |p| p.name.clone());
            return Err(AdError::MissingGradient(missing));
        }
        for (p, g) in self.params.iter().zip(grads) {
            if p.value.shape() != g.shape() {
                return Err(AdError::ShapeMismatch {
                    op: "adam_step",
                    lhs: p.value.shape(),
                    rhs: g.shape(),
                });
            }
        }
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - cfg.beta1.powi(t);
        let bc2 = 1.0 - cfg.beta2.powi(t);
        for (p, g) in self.params.iter_mut().zip(grads) {
            let value = p.value.data_mut();
            let m = p.m.data_mut();
            let v = p.v.data_mut();
            for i in 0..value.len() {
                let gi = g.data()[i];
                m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * gi;
                v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * gi * gi;
                let m_hat = m[i] / bc1;
                let v_hat = v[i] / bc2;
                value[i] -= cfg.lr * m_hat / (v_hat.sqrt() + cfg.eps);
            }
        }
        Ok(())
    }
}

/// Rescales gradients in place so their global L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_global_norm(grads: &mut [Array], max_norm: f64) -> f64 {
    let norm = grads.iter().map(Array::norm_sq).sum::<f64>().sqrt();
    if norm > max_norm && norm.is_finite() {
        let s = max_norm / norm;
        for g in grads.iter_mut() {
            g.scale_assign(s);
        }
    }
    norm
}

/// Parameters registered as leaves on one tape.
pub struct Bound<'t> {
    tensors: Vec<Tensor<'t>>,
}

impl<'t> Bound<'t> {
    pub fn get(&self, id: ParamId) -> &Tensor<'t> {
        &self.tensors[id.0]
    }

    /// Gradient of every parameter (zeros where unused), in store order.
    pub fn grads(&self, g: &Gradients) -> Result<Vec<Array>, AdError> {
        self.tensors.iter().map(|t| g.wrt(t)).collect()
    }
}

impl<'t> std::ops::Index<ParamId> for Bound<'t> {
    type Output = Tensor<'t>;
    fn index(&self, id: ParamId) -> &Tensor<'t> {
        &self.tensors[id.0]
    }
}
