//! One-step-ahead prediction with a weighted particle approximation of the
//! filtering distribution.
//!
//! Each particle carries a latent state, an encoder state and a base value.
//! Observation `i` is folded in by solving the posterior SDE of interval `i`
//! and multiplying the particle weight by `p(x_i | ...) M_i`. The prediction
//! for `x_i` branches every particle forward under the prior SDE and the base
//! transition, decodes, and averages with the normalised weights. Particles
//! are resampled systematically when the effective sample size drops below
//! half the particle count.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use super::{ClpfModel, ModelError, Result};
use crate::autodiff::{Array, Tape, Tensor};
use crate::processes::TimeSeries;

#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    /// Times of the predicted observations (all but the first).
    pub times: Vec<f64>,
    pub predicted: Array,
    pub truth: Array,
    /// Euclidean error of each prediction.
    pub l2: Vec<f64>,
}

impl Prediction {
    pub fn mean_l2(&self) -> f64 {
        self.l2.iter().sum::<f64>() / self.l2.len() as f64
    }
}

fn gather(a: &Array, idx: &[usize]) -> Array {
    let rows: Vec<Vec<f64>> = idx.iter().map(|&i| a.row_slice(i).to_vec()).collect();
    Array::from_rows(&rows)
}

fn normalised_weights(logw: &[f64]) -> Vec<f64> {
    let max = logw.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let w: Vec<f64> = logw.iter().map(|l| (l - max).exp()).collect();
    let total: f64 = w.iter().sum();
    w.into_iter().map(|v| v / total).collect()
}

fn systematic_resample<R: Rng + ?Sized>(w: &[f64], rng: &mut R) -> Vec<usize> {
    let n = w.len();
    let start: f64 = rng.random::<f64>() / n as f64;
    let mut idx = Vec::with_capacity(n);
    let mut cum = w[0];
    let mut j = 0;
    for i in 0..n {
        let u = start + i as f64 / n as f64;
        while u > cum && j + 1 < n {
            j += 1;
            cum += w[j];
        }
        idx.push(j);
    }
    idx
}

/// Predicts every observation after the first from the ones before it,
/// using `samples` particles.
pub fn predict_sequence(model: &ClpfModel, series: &TimeSeries, samples: usize, seed: u64) -> Result<Prediction> {
    if series.len() < 2 {
        return Err(ModelError::Data("prediction needs at least two observations".into()));
    }
    if samples == 0 {
        return Err(ModelError::Config("prediction needs at least one sample".into()));
    }
    let cfg = model.config();
    let (d, s) = (cfg.data_dim, samples);
    let tape = Tape::no_grad();
    let mt = model.bind(&tape)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let has_latent = cfg.variant.has_latent();
    let global = cfg.variant.global();

    let mut z: Option<Tensor<'_>> = if has_latent { Some(mt.initial_latent(s)?) } else { None };
    let mut state = mt.initial_encoder_state(s);
    let zero_z = tape.constant(Array::zeros(1, cfg.latent_dim));
    let mut global_state = mt.initial_encoder_state(1);
    let mut o: Option<Tensor<'_>> = None;
    let mut logw = vec![0.0; s];
    let mut t_prev = 0.0;

    let mut times = Vec::with_capacity(series.len() - 1);
    let mut predicted = Vec::with_capacity(series.len() - 1);
    let mut truth = Vec::with_capacity(series.len() - 1);
    let mut l2 = Vec::with_capacity(series.len() - 1);

    for (i, &t) in series.times().iter().enumerate() {
        let x = series.value(i);
        if i > 0 {
            let zb = match &z {
                Some(z) => Some(mt.solve_prior_interval(z, t_prev, t, &mut rng, false)?.z_end),
                None => None,
            };
            let guesses = if mt.has_flow() {
                let prev = o.as_ref().expect("base value after first observation").value();
                let dt = t - t_prev;
                let (decay, sd) = if cfg.variant.wiener_base() {
                    (1.0, dt.sqrt())
                } else {
                    ((-dt).exp(), (-(-2.0 * dt).exp_m1()).sqrt())
                };
                let next = prev.map(|v| v * decay).zip_map(
                    &Array::from_vec(s, d, (0..s * d).map(|_| sd * rng.sample::<f64, _>(StandardNormal)).collect()),
                    |a, b| a + b,
                );
                mt.decode(&tape.constant(next), zb.as_ref(), t)?
            } else {
                let (mean, _) = mt.gaussian_params(zb.as_ref().expect("gaussian decoder has a latent"))?;
                mt.denormalise_rows(mean.value())
            };
            let w = normalised_weights(&logw);
            let guess: Vec<f64> = (0..d)
                .map(|c| (0..s).map(|r| w[r] * guesses.get(r, c)).sum())
                .collect();
            let err = guess.iter().zip(x).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
            times.push(t);
            truth.push(x.to_vec());
            predicted.push(guess);
            l2.push(err);
        }

        let mut log_m = None;
        if let Some(zc) = &z {
            let path = if global {
                let (gs, phi) = mt.encode_step(&global_state, x, &zero_z, t, t_prev)?;
                global_state = gs;
                mt.solve_posterior_interval(&phi.broadcast_rows(s)?, None, zc, t_prev, t, &mut rng, false)?
            } else {
                let (ns, phi) = mt.encode_step(&state, x, zc, t, t_prev)?;
                state = ns;
                mt.solve_posterior_interval(&phi, Some((x, t)), zc, t_prev, t, &mut rng, false)?
            };
            log_m = Some(path.log_weight);
            z = Some(path.z_end);
        }
        let prev = o.as_ref().map(|o| (o, t_prev));
        let (ll, o_new) = mt.observation_loglik(x, z.as_ref(), t, prev, s)?;
        for (r, w) in logw.iter_mut().enumerate() {
            *w += ll.value().get(r, 0) + log_m.as_ref().map_or(0.0, |m| m.value().get(r, 0));
        }
        o = o_new;
        t_prev = t;

        let w = normalised_weights(&logw);
        let ess = 1.0 / w.iter().map(|v| v * v).sum::<f64>();
        if ess < 0.5 * s as f64 {
            let idx = systematic_resample(&w, &mut rng);
            z = z.map(|z| tape.constant(gather(z.value(), &idx)));
            state = tape.constant(gather(state.value(), &idx));
            o = o.map(|o| tape.constant(gather(o.value(), &idx)));
            logw.iter_mut().for_each(|v| *v = 0.0);
        }
    }
    Ok(Prediction {
        times,
        predicted: Array::from_rows(&predicted),
        truth: Array::from_rows(&truth),
        l2,
    })
}
