use std::rc::Rc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{check_shapes, FlowError, FlowResult, Result};
use crate::autodiff::{inverse, Activation, Array, Bound, Mlp, MlpSpec, ParamStore, Tensor};

/// Affine indexed flow: per block `h ← k(h e^{-u} - v)` with `(u, v)` from an
/// index network of the context and `k(y) = y + r(y)` a contractive residual
/// block.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AffineSpec {
    pub dim: usize,
    pub context: usize,
    pub blocks: usize,
    pub index_hidden: Vec<usize>,
    pub core_hidden: Vec<usize>,
    /// Target Lipschitz constant of each residual-branch layer.
    pub lipschitz: f64,
    pub u_clamp: f64,
    pub tol: f64,
    pub max_iter: usize,
}

impl AffineSpec {
    pub fn new(dim: usize, context: usize) -> Self {
        Self {
            dim,
            context,
            blocks: 5,
            index_hidden: vec![32, 32],
            core_hidden: vec![8, 32, 32, 8],
            lipschitz: 0.9,
            u_clamp: 5.0,
            tol: 1e-8,
            max_iter: 200,
        }
    }

    fn validate(&self) -> Result<()> {
        if self.dim == 0 || self.context == 0 || self.blocks == 0 {
            return Err(FlowError::InvalidSpec(format!("affine flow needs d, c, blocks >= 1: {self:?}")));
        }
        if !(self.lipschitz > 0.0 && self.lipschitz < 1.0) {
            return Err(FlowError::InvalidSpec(format!(
                "residual Lipschitz target must be in (0, 1), got {}",
                self.lipschitz
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct AffineFlow {
    spec: AffineSpec,
    index: Vec<Mlp>,
    cores: Vec<Mlp>,
}

/// Largest singular value by power iteration run to convergence, with the
/// converged left and right singular vectors.
fn power_iteration(w: &Array) -> (f64, Vec<f64>, Vec<f64>) {
    let (rows, cols) = (w.rows(), w.cols());
    let mut v = vec![1.0 / (cols as f64).sqrt(); cols];
    let mut u = vec![0.0; rows];
    let mut sigma = 0.0;
    for _ in 0..1000 {
        for (i, ui) in u.iter_mut().enumerate() {
            *ui = w.row_slice(i).iter().zip(&v).map(|(a, b)| a * b).sum();
        }
        let nu = u.iter().map(|x| x * x).sum::<f64>().sqrt();
        if nu == 0.0 {
            return (0.0, u, v);
        }
        u.iter_mut().for_each(|x| *x /= nu);
        v.fill(0.0);
        for (i, ui) in u.iter().enumerate() {
            for (vj, wij) in v.iter_mut().zip(w.row_slice(i)) {
                *vj += wij * ui;
            }
        }
        let nv = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if nv == 0.0 {
            return (0.0, u, v);
        }
        v.iter_mut().for_each(|x| *x /= nv);
        let converged = (nv - sigma).abs() <= 1e-13 * nv;
        sigma = nv;
        if converged {
            break;
        }
    }
    (sigma, u, v)
}

/// Spectral norm of a matrix.
pub fn spectral_norm(w: &Array) -> f64 {
    power_iteration(w).0
}

/// `W c / max(σ(W), c)` recorded on the tape; `σ = uᵀ W v` with the singular
/// vectors held constant, which gives the exact derivative at convergence.
fn spectral_scale<'t>(w: &Tensor<'t>, c: f64) -> Result<Tensor<'t>> {
    let (sigma, u, v) = power_iteration(w.value());
    if sigma <= c {
        return Ok(w.clone());
    }
    let outer = Array::from_vec(u.len(), v.len(), u.iter().flat_map(|a| v.iter().map(move |b| a * b)).collect());
    let sigma_t = w.mul(&w.tape().constant(outer))?.sum()?;
    let coef = w.tape().scalar(c).div(&sigma_t)?;
    Ok(w.mul(&coef)?)
}

impl AffineFlow {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        prefix: &str,
        spec: AffineSpec,
        rng: &mut R,
        zero_last: bool,
    ) -> Result<Self> {
        spec.validate()?;
        let d = spec.dim;
        let mut index = Vec::with_capacity(spec.blocks);
        let mut cores = Vec::with_capacity(spec.blocks);
        for b in 0..spec.blocks {
            let ispec = MlpSpec::new(spec.context, &spec.index_hidden, 2 * d);
            index.push(Mlp::new(store, &format!("{prefix}.block{b}.index"), ispec, rng, zero_last)?);
            let cspec = MlpSpec::new(d, &spec.core_hidden, d).with_output(Activation::Identity);
            cores.push(Mlp::new(store, &format!("{prefix}.block{b}.core"), cspec, rng, zero_last)?);
        }
        Ok(Self { spec, index, cores })
    }

    pub fn spec(&self) -> &AffineSpec {
        &self.spec
    }

    pub fn index_nets(&self) -> &[Mlp] {
        &self.index
    }

    pub fn cores(&self) -> &[Mlp] {
        &self.cores
    }

    pub(super) fn prepare<'t>(&self, p: &Bound<'t>) -> Result<PreparedAffine<'_, 't>> {
        let mut cores = Vec::with_capacity(self.cores.len());
        for net in &self.cores {
            let layers = net
                .layer_tensors(p)
                .into_iter()
                .map(|(w, b)| Ok((spectral_scale(&w, self.spec.lipschitz)?, b)))
                .collect::<Result<Vec<_>>>()?;
            cores.push(layers);
        }
        let core_values = cores
            .iter()
            .map(|layers| {
                layers
                    .iter()
                    .map(|(w, b)| (w.value().clone(), b.value().clone()))
                    .collect()
            })
            .collect();
        Ok(PreparedAffine {
            flow: self,
            index: self.index.iter().map(|n| n.layer_tensors(p)).collect(),
            cores,
            core_values,
        })
    }
}

pub struct PreparedAffine<'f, 't> {
    flow: &'f AffineFlow,
    index: Vec<Vec<(Tensor<'t>, Tensor<'t>)>>,
    cores: Vec<Vec<(Tensor<'t>, Tensor<'t>)>>,
    core_values: Vec<Vec<(Array, Array)>>,
}

impl<'t> PreparedAffine<'_, 't> {
    fn shift_scale(&self, b: usize, ctx: &Tensor<'t>) -> Result<(Tensor<'t>, Tensor<'t>)> {
        let d = self.flow.spec.dim;
        let raw = self.flow.index[b].forward(&self.index[b], ctx)?;
        let c = self.flow.spec.u_clamp;
        let (u, _) = raw.slice_cols(0, d)?.clamp(-c, c)?;
        Ok((u, raw.slice_cols(d, d)?))
    }

    /// `r(y)` and the per-row tangents `∂r/∂y_j`.
    fn residual(&self, b: usize, y: &Tensor<'t>) -> Result<(Tensor<'t>, Vec<Tensor<'t>>)> {
        let dirs: Vec<usize> = (0..self.flow.spec.dim).collect();
        Ok(self.flow.cores[b].forward_with_tangents(&self.cores[b], y, &dirs)?)
    }

    /// `ln |det (I + J_r)|` per row from the tangents.
    fn core_logdet(&self, tangents: &[Tensor<'t>]) -> Result<Tensor<'t>> {
        let d = self.flow.spec.dim;
        let rows = tangents[0].rows();
        let refs: Vec<&Tensor<'t>> = tangents.iter().collect();
        let jt = Tensor::concat(&refs)?;
        let eye = Array::from_vec(1, d * d, Array::identity(d).into_vec());
        let m = jt.add(&jt.tape().constant(eye.repeat_rows(rows)))?;
        Ok(m.row_log_abs_det(d)?)
    }

    /// Solves `y + r(y) = h` for every row by the iteration `y ← h - r(y)`.
    fn fixed_point(&self, b: usize, h: &Array) -> Result<(Array, usize)> {
        let refs: Vec<(&Array, &Array)> = self.core_values[b].iter().map(|(w, bb)| (w, bb)).collect();
        let net = &self.flow.cores[b];
        let mut y = h.clone();
        let mut residual = f64::INFINITY;
        for it in 1..=self.flow.spec.max_iter {
            let r = net.eval(&refs, &y);
            let next = h.zip_map(&r, |a, b| a - b);
            residual = next.max_abs_diff(&y);
            y = next;
            if residual <= self.flow.spec.tol {
                return Ok((y, it));
            }
        }
        Err(FlowError::NoConvergence {
            residual,
            iterations: self.flow.spec.max_iter,
        })
    }

    pub fn forward(&self, o: &Tensor<'t>, ctx: &Tensor<'t>) -> Result<FlowResult<'t>> {
        let spec = &self.flow.spec;
        check_shapes(o, ctx, spec.dim, spec.context)?;
        let mut h = o.clone();
        let mut logdet = o.tape().constant(Array::zeros(o.rows(), 1));
        for b in 0..spec.blocks {
            let (u, v) = self.shift_scale(b, ctx)?;
            let a = h.mul(&u.neg()?.exp()?)?.sub(&v)?;
            let (r, tangents) = self.residual(b, &a)?;
            h = a.add(&r)?;
            logdet = logdet.sub(&u.sum_cols()?)?.add(&self.core_logdet(&tangents)?)?;
        }
        Ok(FlowResult {
            value: h,
            logdet,
            iterations: 0,
        })
    }

    pub fn inverse(&self, x: &Tensor<'t>, ctx: &Tensor<'t>) -> Result<FlowResult<'t>> {
        let spec = &self.flow.spec;
        let d = spec.dim;
        check_shapes(x, ctx, d, spec.context)?;
        let tape = x.tape();
        let mut h = x.clone();
        let mut logdet = tape.constant(Array::zeros(x.rows(), 1));
        let mut iterations = 0;
        for b in (0..spec.blocks).rev() {
            let (y_star, its) = self.fixed_point(b, h.value())?;
            iterations += its;
            let y_const = tape.constant(y_star);
            // Implicit-function re-attachment: y = y* + (I + J_r(y*))⁻¹ (h - r(y*) - y*).
            let (r_star, t_star) = self.residual(b, &y_const)?;
            let mut mats = Vec::with_capacity(x.rows() * d * d);
            for row in 0..x.rows() {
                let mut m = vec![0.0; d * d];
                for (j, t) in t_star.iter().enumerate() {
                    for i in 0..d {
                        m[i * d + j] = t.value().get(row, i) + if i == j { 1.0 } else { 0.0 };
                    }
                }
                mats.extend(inverse(&m, d).ok_or(crate::autodiff::AdError::Singular("affine core"))?);
            }
            let mats = Rc::new(Array::from_vec(x.rows(), d * d, mats));
            let step = h.sub(&r_star)?.sub(&y_const)?.row_matvec_const(mats)?;
            let y = y_const.add(&step)?;
            let (_, tangents) = self.residual(b, &y)?;
            let (u, v) = self.shift_scale(b, ctx)?;
            h = y.add(&v)?.mul(&u.exp()?)?;
            logdet = logdet.add(&u.sum_cols()?)?.sub(&self.core_logdet(&tangents)?)?;
        }
        Ok(FlowResult {
            value: h,
            logdet,
            iterations,
        })
    }
}

/// Lipschitz bound of a spectrally scaled residual branch: product of layer norms.
#[cfg(test)]
fn lipschitz_bound(layers: &[(Array, Array)]) -> f64 {
    layers.iter().map(|(w, _)| spectral_norm(w)).product()
}


#[cfg(test)]
mod tests {
    use super::super::{Flow, FlowSpec, PreparedFlow};
    use super::*;
    use crate::autodiff::{finite_diff_grad, log_abs_det, Tape};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn build(spec: AffineSpec, seed: u64, zero_last: bool) -> (ParamStore, Flow) {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let flow = Flow::new(&mut store, "flow", &FlowSpec::Affine(spec), &mut rng, zero_last).unwrap();
        (store, flow)
    }

    /// Random parameters, scaled up so the cores are close to the Lipschitz cap.
    fn random(d: usize, c: usize, seed: u64) -> (ParamStore, Flow) {
        let (mut store, flow) = build(AffineSpec::new(d, c), seed, false);
        for id in store.ids().collect::<Vec<_>>() {
            if store.name(id).contains("core") {
                store.value_mut(id).scale_assign(3.0);
            }
        }
        (store, flow)
    }

    fn eval(store: &ParamStore, flow: &Flow, o: &[f64], ctx: &[f64], inverse: bool) -> (Vec<f64>, f64, usize) {
        let tape = Tape::no_grad();
        let b = store.bind(&tape);
        let pf = flow.prepare(&b).unwrap();
        let x = tape.constant(Array::row(o));
        let c = tape.constant(Array::row(ctx));
        let r = if inverse { pf.inverse(&x, &c).unwrap() } else { pf.forward(&x, &c).unwrap() };
        (r.value.value().data().to_vec(), r.logdet.item(), r.iterations)
    }

    #[test]
    fn zero_parameters_give_identity() {
        let (store, flow) = build(AffineSpec::new(2, 2), 1, true);
        let (x, ld, _) = eval(&store, &flow, &[0.7, -0.1], &[1.0, 2.0], false);
        assert_eq!(x, vec![0.7, -0.1]);
        assert_eq!(ld, 0.0);
        let (o, ld, its) = eval(&store, &flow, &[0.7, -0.1], &[1.0, 2.0], true);
        assert_eq!(o, vec![0.7, -0.1]);
        assert_eq!(ld, 0.0);
        assert_eq!(its, 5, "one iteration per block");
    }

    #[test]
    fn pure_scaling_block() {
        let spec = AffineSpec { blocks: 1, ..AffineSpec::new(1, 1) };
        let (mut store, flow) = build(spec, 1, true);
        let bias = store.id("flow.block0.index.2.bias").unwrap();
        store.value_mut(bias).set(0, 0, 2f64.ln());
        let (x, ld, _) = eval(&store, &flow, &[3.0], &[0.5], false);
        assert!((x[0] - 1.5).abs() < 1e-15);
        assert!((ld + 2f64.ln()).abs() < 1e-15);
        let (o, ld_inv, its) = eval(&store, &flow, &[1.5], &[0.5], true);
        assert!((o[0] - 3.0).abs() < 1e-15);
        assert!((ld_inv - 2f64.ln()).abs() < 1e-15);
        assert_eq!(its, 1);
    }

    #[test]
    fn cores_are_contractive() {
        let (store, flow) = random(3, 2, 5);
        let tape = Tape::no_grad();
        let b = store.bind(&tape);
        let PreparedFlow::Affine(pf) = flow.prepare(&b).unwrap() else { unreachable!() };
        for layers in &pf.core_values {
            for (w, _) in layers {
                assert!(spectral_norm(w) <= 0.9 + 1e-9);
            }
            assert!(lipschitz_bound(layers) < 1.0);
        }
    }

    #[test]
    fn single_layer_core_meets_banach_bound() {
        let spec = AffineSpec { blocks: 1, core_hidden: vec![], ..AffineSpec::new(2, 1) };
        let (mut store, flow) = build(spec, 2, false);
        let w = store.id("flow.block0.core.0.weight").unwrap();
        *store.value_mut(w) = Array::from_rows(&[vec![-40.0, 3.0], vec![2.0, -35.0]]);
        let (x, _, _) = eval(&store, &flow, &[1.0, -1.0], &[0.3], false);
        let (o, _, its) = eval(&store, &flow, &x, &[0.3], true);
        assert!((o[0] - 1.0).abs() < 1e-6 && (o[1] + 1.0).abs() < 1e-6);
        let bound = (1e-8f64.ln() / 0.9f64.ln()).ceil() as usize;
        assert!(its <= bound, "{its} iterations");
        assert!(its > 20, "the core should be near the Lipschitz cap ({its})");
    }

    #[test]
    fn round_trip_over_random_points() {
        let (store, flow) = random(2, 3, 7);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut worst: f64 = 0.0;
        for _ in 0..100 {
            let o: Vec<f64> = (0..2).map(|_| rng.random_range(-3.0..3.0)).collect();
            let ctx: Vec<f64> = (0..3).map(|_| rng.random_range(-1.0..1.0)).collect();
            let (x, ld_f, _) = eval(&store, &flow, &o, &ctx, false);
            let (back, ld_i, _) = eval(&store, &flow, &x, &ctx, true);
            for (a, b) in o.iter().zip(&back) {
                worst = worst.max((a - b).abs());
            }
            assert!((ld_f + ld_i).abs() < 1e-8);
        }
        assert!(worst <= 1e-6, "round-trip error {worst}");
    }

    #[test]
    fn logdet_matches_finite_differences() {
        for d in 1..=3 {
            let (store, flow) = random(d, 2, 20 + d as u64);
            let o: Vec<f64> = (0..d).map(|i| 0.8 - 0.7 * i as f64).collect();
            let ctx = [0.2, -0.6];
            let mut jac = vec![0.0; d * d];
            for j in 0..d {
                for i in 0..d {
                    jac[i * d + j] = finite_diff_grad(
                        |p| {
                            let mut oo = o.clone();
                            oo[j] = p[0];
                            Ok(eval(&store, &flow, &oo, &ctx, false).0[i])
                        },
                        &[o[j]],
                        1e-5,
                    )
                    .unwrap()[0];
                }
            }
            let fd = log_abs_det(&jac, d).unwrap();
            let (_, ld, _) = eval(&store, &flow, &o, &ctx, false);
            assert!((ld - fd).abs() <= 1e-3 * fd.abs().max(1e-2), "d={d}: {ld} vs {fd}");
        }
    }

    #[test]
    fn inverse_gradients_match_finite_differences() {
        // Scalar objective through the implicit inverse: sum(o) + logdet.
        let (mut store, flow) = random(2, 2, 31);
        let x0 = [0.6, -0.4];
        let ctx = [0.3, 0.9];
        let objective = |store: &ParamStore, tape: &Tape| -> (f64, Option<Vec<Array>>) {
            let b = store.bind(tape);
            let pf = flow.prepare(&b).unwrap();
            let r = pf
                .inverse(&tape.constant(Array::row(&x0)), &tape.constant(Array::row(&ctx)))
                .unwrap();
            let out = r.value.sum().unwrap().add(&r.logdet.sum().unwrap()).unwrap();
            if tape.is_recording() {
                let g = tape.backward(&out).unwrap();
                (out.item(), Some(b.grads(&g).unwrap()))
            } else {
                (out.item(), None)
            }
        };
        let ad: Vec<f64> = objective(&store, &Tape::new())
            .1
            .unwrap()
            .into_iter()
            .flat_map(Array::into_vec)
            .collect();
        let point = store.flatten();
        let mut probe = store.clone();
        // Checking every tenth parameter keeps the test quick while touching every layer.
        let idx: Vec<usize> = (0..point.len()).step_by(10).collect();
        for &k in &idx {
            let fd = finite_diff_grad(
                |p| {
                    let mut q = point.clone();
                    q[k] = p[0];
                    probe.unflatten(&q);
                    Ok(objective(&probe, &Tape::no_grad()).0)
                },
                &[point[k]],
                1e-5,
            )
            .unwrap()[0];
            let err = (ad[k] - fd).abs() / ad[k].abs().max(fd.abs()).max(1e-4);
            assert!(err <= 1e-3, "param {k}: ad {} fd {fd}", ad[k]);
        }
        store.unflatten(&point);
    }

    #[test]
    fn decoder_reads_the_context() {
        let (store, flow) = random(1, 2, 3);
        let (a, _, _) = eval(&store, &flow, &[0.5], &[0.1, 0.3], false);
        let (b, _, _) = eval(&store, &flow, &[0.5], &[-0.9, 0.3], false);
        assert!((a[0] - b[0]).abs() > 1e-6);
    }

    #[test]
    fn spectral_norm_of_known_matrix() {
        let w = Array::from_rows(&[vec![3.0, 0.0], vec![0.0, -4.0]]);
        assert!((spectral_norm(&w) - 4.0).abs() < 1e-10);
        assert_eq!(spectral_norm(&Array::zeros(2, 3)), 0.0);
    }

}
