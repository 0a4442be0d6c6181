//! Euler–Maruyama solvers for one inter-observation interval, for the prior
//! SDE and for a posterior SDE with its Girsanov log-weight.

use rand::Rng;
use rand_distr::StandardNormal;

use super::{ModelError, Result};
use crate::autodiff::{Array, Tensor};
use crate::processes::em_steps;

/// Drift pair and shared diffusion evaluated on a batch of latent states.
pub trait Dynamics<'t> {
    /// Prior drift and diffusion at `(z, t)`, both shaped like `z`.
    fn prior(&self, z: &Tensor<'t>, t: f64) -> Result<(Tensor<'t>, Tensor<'t>)>;

    /// Posterior drift minus prior drift at `(z, t)`.
    fn delta(&self, z: &Tensor<'t>, t: f64) -> Result<Tensor<'t>>;
}

/// One solved interval of the latent SDE.
pub struct LatentPath<'t> {
    pub z_end: Tensor<'t>,
    /// Per-row `log M`, `K x 1`. Zero for prior paths.
    pub log_weight: Tensor<'t>,
    /// Entries of `u` that hit the clip.
    pub clip_events: usize,
    pub steps: usize,
    /// Recorded states at the step boundaries, the start included.
    pub states: Option<Vec<Array>>,
    /// Recorded Wiener increments, one `K x m` array per step.
    pub increments: Option<Vec<Array>>,
}

fn check_interval(t0: f64, t1: f64, h: f64) -> Result<()> {
    if !(t1 > t0) || !t0.is_finite() || !t1.is_finite() {
        return Err(ModelError::Data(format!("interval [{t0}, {t1}] is empty")));
    }
    if !(h > 0.0) {
        return Err(ModelError::Config(format!("Euler–Maruyama step must be positive, got {h}")));
    }
    Ok(())
}

fn increments<R: Rng + ?Sized>(rows: usize, cols: usize, dt: f64, rng: &mut R) -> Array {
    let s = dt.sqrt();
    let data = (0..rows * cols).map(|_| s * rng.sample::<f64, _>(StandardNormal)).collect();
    Array::from_vec(rows, cols, data)
}

/// Posterior path over `[t0, t1]` in `ceil((t1 - t0) / h)` equal steps. The
/// Girsanov weight uses `u = clamp(δ/σ, ±u_clip)` and the state moves with
/// the drift `μ_prior + σ u`, so the weight is exact for the simulated
/// process even when clipping is active.
#[allow(clippy::too_many_arguments)]
pub fn solve_posterior<'t, D, R>(
    dynamics: &D,
    z_start: &Tensor<'t>,
    t0: f64,
    t1: f64,
    h: f64,
    u_clip: f64,
    rng: &mut R,
    record: bool,
) -> Result<LatentPath<'t>>
where
    D: Dynamics<'t> + ?Sized,
    R: Rng + ?Sized,
{
    check_interval(t0, t1, h)?;
    let tape = z_start.tape();
    let [k, m] = z_start.shape();
    let n = em_steps(t1 - t0, h);
    let dt = (t1 - t0) / n as f64;
    let mut z = z_start.clone();
    let mut acc: Option<Tensor<'t>> = None;
    let mut clips = 0;
    let mut states = record.then(|| vec![z.value().clone()]);
    let mut incs = record.then(Vec::new);
    for step in 0..n {
        let t = t0 + step as f64 * dt;
        let (mu, sigma) = dynamics.prior(&z, t)?;
        let delta = dynamics.delta(&z, t)?;
        let (u, c) = delta.div(&sigma)?.clamp(-u_clip, u_clip)?;
        clips += c;
        let dw_arr = increments(k, m, dt, rng);
        if let Some(v) = incs.as_mut() {
            v.push(dw_arr.clone());
        }
        let dw = tape.constant(dw_arr);
        let term = u.square()?.scale(0.5 * dt)?.add(&u.mul(&dw)?)?;
        acc = Some(match acc {
            None => term,
            Some(a) => a.add(&term)?,
        });
        let noise = u.scale(dt)?.add(&dw)?.mul(&sigma)?;
        z = z.add(&mu.scale(dt)?)?.add(&noise)?;
        if let Some(s) = states.as_mut() {
            s.push(z.value().clone());
        }
    }
    let log_weight = acc.expect("at least one step").sum_cols()?.neg()?;
    Ok(LatentPath {
        z_end: z,
        log_weight,
        clip_events: clips,
        steps: n,
        states,
        increments: incs,
    })
}

/// Prior path over `[t0, t1]` with the same step layout as [`solve_posterior`].
pub fn solve_prior<'t, D, R>(
    dynamics: &D,
    z_start: &Tensor<'t>,
    t0: f64,
    t1: f64,
    h: f64,
    rng: &mut R,
    record: bool,
) -> Result<LatentPath<'t>>
where
    D: Dynamics<'t> + ?Sized,
    R: Rng + ?Sized,
{
    check_interval(t0, t1, h)?;
    let tape = z_start.tape();
    let [k, m] = z_start.shape();
    let n = em_steps(t1 - t0, h);
    let dt = (t1 - t0) / n as f64;
    let mut z = z_start.clone();
    let mut states = record.then(|| vec![z.value().clone()]);
    let mut incs = record.then(Vec::new);
    for step in 0..n {
        let t = t0 + step as f64 * dt;
        let (mu, sigma) = dynamics.prior(&z, t)?;
        let dw_arr = increments(k, m, dt, rng);
        if let Some(v) = incs.as_mut() {
            v.push(dw_arr.clone());
        }
        let dw = tape.constant(dw_arr);
        z = z.add(&mu.scale(dt)?)?.add(&sigma.mul(&dw)?)?;
        if let Some(s) = states.as_mut() {
            s.push(z.value().clone());
        }
    }
    Ok(LatentPath {
        z_end: z,
        log_weight: tape.constant(Array::zeros(k, 1)),
        clip_events: 0,
        steps: n,
        states,
        increments: incs,
    })
}

/// Drifts and diffusion given as plain functions of one state row; useful
/// for checks against analytically tractable processes.
pub struct FnDynamics<P, Q, S> {
    pub prior_drift: P,
    pub posterior_drift: Q,
    pub diffusion: S,
}

fn rowwise<'t>(z: &Tensor<'t>, t: f64, f: &impl Fn(&[f64], f64) -> Vec<f64>) -> Tensor<'t> {
    let [k, m] = z.shape();
    let mut out = Vec::with_capacity(k * m);
    for r in 0..k {
        out.extend(f(z.value().row_slice(r), t));
    }
    z.tape().constant(Array::from_vec(k, m, out))
}

impl<'t, P, Q, S> Dynamics<'t> for FnDynamics<P, Q, S>
where
    P: Fn(&[f64], f64) -> Vec<f64>,
    Q: Fn(&[f64], f64) -> Vec<f64>,
    S: Fn(&[f64], f64) -> Vec<f64>,
{
    fn prior(&self, z: &Tensor<'t>, t: f64) -> Result<(Tensor<'t>, Tensor<'t>)> {
        Ok((rowwise(z, t, &self.prior_drift), rowwise(z, t, &self.diffusion)))
    }

    fn delta(&self, z: &Tensor<'t>, t: f64) -> Result<Tensor<'t>> {
        let q = rowwise(z, t, &self.posterior_drift);
        Ok(q.sub(&rowwise(z, t, &self.prior_drift))?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Tape;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    type Row = fn(&[f64], f64) -> Vec<f64>;

    fn ou_pair(shift: f64) -> FnDynamics<Row, impl Fn(&[f64], f64) -> Vec<f64>, Row> {
        FnDynamics {
            prior_drift: (|z: &[f64], _| z.iter().map(|v| -v).collect()) as Row,
            posterior_drift: move |z: &[f64], _: f64| z.iter().map(|v| -v + shift).collect(),
            diffusion: (|z: &[f64], _| vec![2f64.sqrt(); z.len()]) as Row,
        }
    }

    fn mean_se(xs: &[f64]) -> (f64, f64) {
        let n = xs.len() as f64;
        let mean = xs.iter().sum::<f64>() / n;
        let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
        (mean, (var / n).sqrt())
    }

    #[test]
    fn matching_drifts_give_zero_weight() {
        let tape = Tape::no_grad();
        let dynamics = ou_pair(0.0);
        let z = tape.constant(Array::from_rows(&[vec![0.3], vec![-1.0]]));
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let path = solve_posterior(&dynamics, &z, 0.0, 0.7, 0.01, 20.0, &mut rng, true).unwrap();
        assert!(path.log_weight.value().data().iter().all(|&v| v == 0.0));
        assert_eq!(path.steps, 70);
        let states = path.states.unwrap();
        assert_eq!(states.len(), 71);
        assert_eq!(states.last().unwrap(), path.z_end.value());
        assert_eq!(path.increments.unwrap().len(), 70);
    }

    #[test]
    fn girsanov_weight_has_unit_mean_and_reweights_to_prior() {
        let tape = Tape::no_grad();
        let n = 10_000;
        let z0 = tape.constant(Array::zeros(n, 1));
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let post = solve_posterior(&ou_pair(1.0), &z0, 0.0, 1.0, 0.01, 20.0, &mut rng, false).unwrap();
        let w: Vec<f64> = post.log_weight.value().data().iter().map(|l| l.exp()).collect();
        let (mw, sw) = mean_se(&w);
        assert!((mw - 1.0).abs() < 3.0 * sw, "E[M] = {mw} ± {sw}");

        let prior = solve_prior(&ou_pair(0.0), &z0, 0.0, 1.0, 0.01, &mut rng, false).unwrap();
        let (mp, sp) = mean_se(prior.z_end.value().data());
        let zw: Vec<f64> = post.z_end.value().data().iter().zip(&w).map(|(z, w)| z * w).collect();
        let (mq, sq) = mean_se(&zw);
        assert!((mp - mq).abs() < 3.0 * (sp * sp + sq * sq).sqrt(), "{mp} vs {mq}");
    }

    #[test]
    fn prior_variance_matches_ou_moments() {
        // dZ = -Z dt + sqrt(2) dW from 0: Var Z_t = 1 - exp(-2t).
        let tape = Tape::no_grad();
        let n = 20_000;
        let z0 = tape.constant(Array::zeros(n, 1));
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let path = solve_prior(&ou_pair(0.0), &z0, 0.0, 0.5, 0.005, &mut rng, false).unwrap();
        let data = path.z_end.value().data();
        let var = data.iter().map(|v| v * v).sum::<f64>() / n as f64;
        let exact = 1.0 - (-1.0f64).exp();
        // Sampling SE of a variance is about var * sqrt(2/n); EM bias is O(h).
        assert!((var - exact).abs() < 3.0 * exact * (2.0 / n as f64).sqrt() + 0.01, "{var} vs {exact}");
    }

    #[test]
    fn clipping_is_counted_and_weight_stays_finite() {
        let tape = Tape::no_grad();
        let z0 = tape.constant(Array::zeros(4, 1));
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let path = solve_posterior(&ou_pair(100.0), &z0, 0.0, 0.1, 0.01, 20.0, &mut rng, false).unwrap();
        assert_eq!(path.clip_events, 40);
        assert!(path.log_weight.value().is_finite());
    }

    #[test]
    fn deterministic_and_rejects_empty_interval() {
        let tape = Tape::no_grad();
        let z0 = tape.constant(Array::zeros(2, 1));
        let run = |seed| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            solve_prior(&ou_pair(0.0), &z0, 1.0, 1.3, 0.01, &mut rng, false)
                .unwrap()
                .z_end
                .value()
                .clone()
        };
        assert_eq!(run(4), run(4));
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(solve_prior(&ou_pair(0.0), &z0, 1.0, 1.0, 0.01, &mut rng, false).is_err());
    }
}
