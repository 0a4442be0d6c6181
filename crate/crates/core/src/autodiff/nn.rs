//! Dense (MLP) and gated recurrent layers recorded on the tape.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{AdError, Array, Bound, ParamId, ParamStore, Tensor};

type Result<T> = std::result::Result<T, AdError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Tanh,
    Identity,
    Softplus,
}

impl Activation {
    fn apply<'t>(self, x: &Tensor<'t>) -> Result<Tensor<'t>> {
        match self {
            Activation::Tanh => x.tanh(),
            Activation::Identity => Ok(x.clone()),
            Activation::Softplus => x.softplus(),
        }
    }

    /// Activation and its elementwise derivative (`None` for identity).
    fn apply_with_deriv<'t>(self, x: &Tensor<'t>) -> Result<(Tensor<'t>, Option<Tensor<'t>>)> {
        match self {
            Activation::Tanh => {
                let a = x.tanh()?;
                let d = a.square()?.neg()?.offset(1.0)?;
                Ok((a, Some(d)))
            }
            Activation::Identity => Ok((x.clone(), None)),
            Activation::Softplus => Ok((x.softplus()?, Some(x.sigmoid()?))),
        }
    }

    fn apply_value(self, v: f64) -> f64 {
        match self {
            Activation::Tanh => v.tanh(),
            Activation::Identity => v,
            Activation::Softplus => super::softplus(v),
        }
    }
}

/// Layer widths `[input, hidden.., output]` and activations.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MlpSpec {
    pub widths: Vec<usize>,
    pub hidden: Vec<Activation>,
    pub output: Activation,
}

impl MlpSpec {
    /// Tanh hidden layers, identity output.
    pub fn new(input: usize, hidden: &[usize], output: usize) -> Self {
        let mut widths = Vec::with_capacity(hidden.len() + 2);
        widths.push(input);
        widths.extend_from_slice(hidden);
        widths.push(output);
        Self {
            widths,
            hidden: vec![Activation::Tanh; hidden.len()],
            output: Activation::Identity,
        }
    }

    pub fn with_output(mut self, act: Activation) -> Self {
        self.output = act;
        self
    }

    pub fn input(&self) -> usize {
        self.widths[0]
    }

    pub fn output_width(&self) -> usize {
        *self.widths.last().expect("validated spec")
    }

    pub fn n_layers(&self) -> usize {
        self.widths.len() - 1
    }

    pub fn validate(&self) -> Result<()> {
        if self.widths.len() < 2 {
            return Err(AdError::InvalidSpec("an MLP needs at least one layer".into()));
        }
        if self.widths.contains(&0) {
            return Err(AdError::InvalidSpec(format!("MLP widths must be positive: {:?}", self.widths)));
        }
        if self.hidden.len() != self.widths.len() - 2 {
            return Err(AdError::InvalidSpec("one activation per hidden layer".into()));
        }
        Ok(())
    }

    fn activation(&self, layer: usize) -> Activation {
        if layer + 1 == self.n_layers() {
            self.output
        } else {
            self.hidden[layer]
        }
    }
}

/// A multilayer perceptron whose weights live in a [`ParamStore`].
/// Weights are stored `fan_in x fan_out` so a batch of rows maps as `x W + b`.
#[derive(Debug, Clone)]
pub struct Mlp {
    spec: MlpSpec,
    layers: Vec<(ParamId, ParamId)>,
}

impl Mlp {
    /// Registers the layers under `prefix`. Weights and biases are drawn from
    /// `U(-1/sqrt(fan_in), 1/sqrt(fan_in))`; the last layer is zero when
    /// `zero_last` is set.
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        prefix: &str,
        spec: MlpSpec,
        rng: &mut R,
        zero_last: bool,
    ) -> Result<Self> {
        spec.validate()?;
        let mut layers = Vec::with_capacity(spec.n_layers());
        for l in 0..spec.n_layers() {
            let (fan_in, fan_out) = (spec.widths[l], spec.widths[l + 1]);
            let last = l + 1 == spec.n_layers();
            let bound = (1.0 / fan_in as f64).sqrt();
            let mut draw = |n: usize| -> Vec<f64> {
                if last && zero_last {
                    vec![0.0; n]
                } else {
                    (0..n).map(|_| rng.random_range(-bound..bound)).collect()
                }
            };
            let w = Array::from_vec(fan_in, fan_out, draw(fan_in * fan_out));
            let b = Array::from_vec(1, fan_out, draw(fan_out));
            let wid = store.add(format!("{prefix}.{l}.weight"), w)?;
            let bid = store.add(format!("{prefix}.{l}.bias"), b)?;
            layers.push((wid, bid));
        }
        Ok(Self { spec, layers })
    }

    pub fn spec(&self) -> &MlpSpec {
        &self.spec
    }

    pub fn layer_ids(&self) -> &[(ParamId, ParamId)] {
        &self.layers
    }

    pub fn layer_tensors<'t>(&self, p: &Bound<'t>) -> Vec<(Tensor<'t>, Tensor<'t>)> {
        self.layers
            .iter()
            .map(|&(w, b)| (p[w].clone(), p[b].clone()))
            .collect()
    }

    pub fn apply<'t>(&self, p: &Bound<'t>, x: &Tensor<'t>) -> Result<Tensor<'t>> {
        self.forward(&self.layer_tensors(p), x)
    }

    fn check_input(&self, x: &Tensor<'_>) -> Result<()> {
        if x.cols() != self.spec.input() {
            return Err(AdError::ShapeMismatch {
                op: "mlp_apply",
                lhs: x.shape(),
                rhs: [x.rows(), self.spec.input()],
            });
        }
        Ok(())
    }

    /// Forward pass with explicitly supplied layer tensors (e.g. rescaled
    /// weights).
    pub fn forward<'t>(&self, layers: &[(Tensor<'t>, Tensor<'t>)], x: &Tensor<'t>) -> Result<Tensor<'t>> {
        self.check_input(x)?;
        let mut h = x.clone();
        for (l, (w, b)) in layers.iter().enumerate() {
            h = self.spec.activation(l).apply(&h.affine(w, b)?)?;
        }
        Ok(h)
    }

    /// Completes a forward pass given the first layer's pre-activation, for
    /// callers that assemble `x W_0 + b_0` themselves from cached pieces.
    pub fn finish<'t>(&self, layers: &[(Tensor<'t>, Tensor<'t>)], first_pre: &Tensor<'t>) -> Result<Tensor<'t>> {
        let mut h = self.spec.activation(0).apply(first_pre)?;
        for (l, (w, b)) in layers.iter().enumerate().skip(1) {
            h = self.spec.activation(l).apply(&h.affine(w, b)?)?;
        }
        Ok(h)
    }

    /// Forward pass plus the directional derivatives of the output with
    /// respect to the input columns in `dirs`. Each returned tangent has the
    /// shape of the output; tangent `k` holds `d out / d x[:, dirs[k]]`.
    pub fn forward_with_tangents<'t>(
        &self,
        layers: &[(Tensor<'t>, Tensor<'t>)],
        x: &Tensor<'t>,
        dirs: &[usize],
    ) -> Result<(Tensor<'t>, Vec<Tensor<'t>>)> {
        self.check_input(x)?;
        let rows = x.rows();
        let mut tangents = dirs
            .iter()
            .map(|&j| layers[0].0.slice_rows(j, 1))
            .collect::<Result<Vec<_>>>()?;
        let mut pre = x.affine(&layers[0].0, &layers[0].1)?;
        let n = layers.len();
        for l in 0..n {
            let (a, deriv) = self.spec.activation(l).apply_with_deriv(&pre)?;
            if let Some(d) = &deriv {
                tangents = tangents.iter().map(|t| t.mul(d)).collect::<Result<_>>()?;
            }
            if l + 1 == n {
                let out_cols = a.cols();
                let tangents = tangents
                    .into_iter()
                    .map(|t| if t.rows() == rows { Ok(t) } else { t.broadcast_rows(rows) })
                    .collect::<Result<Vec<_>>>()?;
                debug_assert!(tangents.iter().all(|t| t.cols() == out_cols));
                return Ok((a, tangents));
            }
            let (w, b) = &layers[l + 1];
            pre = a.affine(w, b)?;
            tangents = tangents.iter().map(|t| t.matmul(w)).collect::<Result<_>>()?;
        }
        unreachable!("validated spec has at least one layer")
    }

    /// Value-only forward pass, bypassing the tape.
    pub fn eval(&self, layers: &[(&Array, &Array)], x: &Array) -> Array {
        let mut h = x.clone();
        for (l, (w, b)) in layers.iter().enumerate() {
            let act = self.spec.activation(l);
            h = super::affine(&h, w, b);
            if act != Activation::Identity {
                for v in h.data_mut() {
                    *v = act.apply_value(*v);
                }
            }
        }
        h
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct GruSpec {
    pub input: usize,
    pub hidden: usize,
}

/// Gated recurrent unit with reset, update and candidate gates.
#[derive(Debug, Clone)]
pub struct Gru {
    spec: GruSpec,
    wx: ParamId,
    wh: ParamId,
    bx: ParamId,
    bh: ParamId,
}

impl Gru {
    pub fn new<R: Rng>(store: &mut ParamStore, prefix: &str, spec: GruSpec, rng: &mut R) -> Result<Self> {
        if spec.input == 0 || spec.hidden == 0 {
            return Err(AdError::InvalidSpec(format!("GRU widths must be positive: {spec:?}")));
        }
        let h = spec.hidden;
        let bound = (1.0 / h as f64).sqrt();
        let mut draw = |r: usize, c: usize| {
            Array::from_vec(r, c, (0..r * c).map(|_| rng.random_range(-bound..bound)).collect())
        };
        let wx = store.add(format!("{prefix}.wx"), draw(spec.input, 3 * h))?;
        let wh = store.add(format!("{prefix}.wh"), draw(h, 3 * h))?;
        let bx = store.add(format!("{prefix}.bx"), draw(1, 3 * h))?;
        let bh = store.add(format!("{prefix}.bh"), draw(1, 3 * h))?;
        Ok(Self { spec, wx, wh, bx, bh })
    }

    pub fn spec(&self) -> GruSpec {
        self.spec
    }

    pub fn param_ids(&self) -> [ParamId; 4] {
        [self.wx, self.wh, self.bx, self.bh]
    }

    /// One recurrence step: `x` is `k x input`, `state` is `k x hidden`.
    pub fn step<'t>(&self, p: &Bound<'t>, x: &Tensor<'t>, state: &Tensor<'t>) -> Result<Tensor<'t>> {
        let h = self.spec.hidden;
        if x.cols() != self.spec.input || state.cols() != h || x.rows() != state.rows() {
            return Err(AdError::ShapeMismatch {
                op: "gru_step",
                lhs: x.shape(),
                rhs: state.shape(),
            });
        }
        let gx = x.affine(&p[self.wx], &p[self.bx])?;
        let gh = state.affine(&p[self.wh], &p[self.bh])?;
        let reset = gx.slice_cols(0, h)?.add(&gh.slice_cols(0, h)?)?.sigmoid()?;
        let update = gx.slice_cols(h, h)?.add(&gh.slice_cols(h, h)?)?.sigmoid()?;
        let cand = gx
            .slice_cols(2 * h, h)?
            .add(&reset.mul(&gh.slice_cols(2 * h, h)?)?)?
            .tanh()?;
        // (1 - z) * n + z * h
        cand.add(&update.mul(&state.sub(&cand)?)?)
    }
}
