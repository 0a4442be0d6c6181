//! The model bound to one tape: encoder steps, interval solves, conditional
//! likelihoods and the ELBO / IWAE objectives over a whole series.

use std::f64::consts::PI;

use rand::Rng;

use super::dynamics::{solve_posterior, solve_prior, Dynamics, LatentPath};
use super::{ClpfModel, Decoder, ModelError, Result};
use crate::autodiff::{Array, Bound, Mlp, Tape, Tensor};
use crate::flows::PreparedFlow;
use crate::processes::{TimeSeries, DT_MIN};

type Layers<'t> = Vec<(Tensor<'t>, Tensor<'t>)>;

/// An MLP whose first layer is split by input block, so that the parts
/// of the pre-activation that stay fixed over an interval are computed once.
/// Inputs are ordered `[z (m), t (1), context...]`.
pub(crate) struct SplitNet<'m, 't> {
    mlp: &'m Mlp,
    layers: Layers<'t>,
    w_z: Tensor<'t>,
    w_t: Tensor<'t>,
    w_c: Option<Tensor<'t>>,
}

impl<'m, 't> SplitNet<'m, 't> {
    fn new(mlp: &'m Mlp, p: &Bound<'t>, m: usize) -> Result<Self> {
        let layers = mlp.layer_tensors(p);
        let w0 = &layers[0].0;
        let w_z = w0.slice_rows(0, m)?;
        let w_t = w0.slice_rows(m, 1)?;
        let rest = w0.rows() - m - 1;
        let w_c = if rest > 0 { Some(w0.slice_rows(m + 1, rest)?) } else { None };
        Ok(Self { mlp, layers, w_z, w_t, w_c })
    }

    fn bias(&self) -> &Tensor<'t> {
        &self.layers[0].1
    }

    /// `t W_t + b` as a `1 x h` row.
    fn time_row(&self, t_scaled: f64) -> Result<Tensor<'t>> {
        Ok(self.w_t.scale(t_scaled)?.add(self.bias())?)
    }

    /// `ctx W_c + b`.
    fn context_row(&self, ctx: &Tensor<'t>) -> Result<Tensor<'t>> {
        let w_c = self.w_c.as_ref().expect("net has context inputs");
        Ok(ctx.matmul(w_c)?.add(self.bias())?)
    }

    fn apply(&self, z: &Tensor<'t>, base: &Tensor<'t>) -> Result<Tensor<'t>> {
        Ok(self.mlp.finish(&self.layers, &z.matmul(&self.w_z)?.add(base)?)?)
    }
}

struct BoundLatent<'m, 't> {
    prior: SplitNet<'m, 't>,
    diffusion: SplitNet<'m, 't>,
    posterior: SplitNet<'m, 't>,
    projection: Layers<'t>,
    z0: Tensor<'t>,
}

enum BoundDecoder<'m, 't> {
    Flow(PreparedFlow<'m, 't>),
    Gaussian(Layers<'t>),
}

/// A model whose parameters are leaves on `tape`.
pub struct ModelTape<'m, 't> {
    model: &'m ClpfModel,
    tape: &'t Tape,
    params: Bound<'t>,
    latent: Option<BoundLatent<'m, 't>>,
    decoder: BoundDecoder<'m, 't>,
}

/// Summary of one bound evaluation on one series.
#[derive(Debug, Clone, PartialEq)]
pub struct ElboEstimate {
    pub bound: f64,
    /// Conditional log-likelihood of each observation, averaged over samples.
    pub per_interval_loglik: Vec<f64>,
    /// `log M` of each interval, averaged over samples.
    pub per_interval_logweight: Vec<f64>,
    pub k: usize,
    /// Per-sample joint terms `Σ_i (loglik + log M)`.
    pub joint: Vec<f64>,
    pub clip_events: usize,
    pub steps: usize,
}

/// Posterior dynamics of one interval: the model's prior plus a drift
/// correction that sees the interval context.
pub(crate) struct PosteriorDynamics<'a, 'm, 't> {
    model: &'a ModelTape<'m, 't>,
    context_row: Tensor<'t>,
}

impl<'t> Dynamics<'t> for ModelTape<'_, 't> {
    fn prior(&self, z: &Tensor<'t>, t: f64) -> Result<(Tensor<'t>, Tensor<'t>)> {
        let lat = self.latent()?;
        let ts = t * self.model.config.time_scale;
        let mu = lat.prior.apply(z, &lat.prior.time_row(ts)?)?;
        let sigma = lat
            .diffusion
            .apply(z, &lat.diffusion.time_row(ts)?)?
            .offset(self.model.config.sigma_min)?;
        Ok((mu, sigma))
    }

    fn delta(&self, z: &Tensor<'t>, _t: f64) -> Result<Tensor<'t>> {
        Ok(self.tape.constant(Array::zeros(z.rows(), z.cols())))
    }
}

impl<'t> Dynamics<'t> for PosteriorDynamics<'_, '_, 't> {
    fn prior(&self, z: &Tensor<'t>, t: f64) -> Result<(Tensor<'t>, Tensor<'t>)> {
        self.model.prior(z, t)
    }

    fn delta(&self, z: &Tensor<'t>, t: f64) -> Result<Tensor<'t>> {
        let lat = self.model.latent()?;
        let ts = t * self.model.model.config.time_scale;
        let base = self.context_row.add(&lat.posterior.w_t.scale(ts)?)?;
        lat.posterior.apply(z, &base)
    }
}

fn gaussian_logpdf<'t>(diff: &Tensor<'t>, var: f64) -> Result<Tensor<'t>> {
    let d = diff.cols() as f64;
    Ok(diff
        .square()?
        .sum_cols()?
        .scale(-0.5 / var)?
        .offset(-0.5 * d * (2.0 * PI * var).ln())?)
}

impl ClpfModel {
    /// Registers the parameters on `tape` and prepares every component.
    pub fn bind<'m, 't>(&'m self, tape: &'t Tape) -> Result<ModelTape<'m, 't>> {
        let params = self.store.bind(tape);
        let m = self.config.latent_dim;
        let latent = match &self.latent {
            Some(l) => Some(BoundLatent {
                prior: SplitNet::new(&l.prior_drift, &params, m)?,
                diffusion: SplitNet::new(&l.diffusion, &params, m)?,
                posterior: SplitNet::new(&l.posterior_drift, &params, m)?,
                projection: l.projection.layer_tensors(&params),
                z0: params[l.z0].clone(),
            }),
            None => None,
        };
        let decoder = match &self.decoder {
            Decoder::Flow(f) => BoundDecoder::Flow(f.prepare(&params)?),
            Decoder::Gaussian(mlp) => BoundDecoder::Gaussian(mlp.layer_tensors(&params)),
        };
        Ok(ModelTape { model: self, tape, params, latent, decoder })
    }
}

impl<'m, 't> ModelTape<'m, 't> {
    pub fn model(&self) -> &'m ClpfModel {
        self.model
    }

    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn params(&self) -> &Bound<'t> {
        &self.params
    }

    fn latent(&self) -> Result<&BoundLatent<'m, 't>> {
        self.latent
            .as_ref()
            .ok_or_else(|| ModelError::Config(format!("variant {} has no latent SDE", self.model.config.variant)))
    }

    fn ts(&self, t: f64) -> f64 {
        t * self.model.config.time_scale
    }

    fn constant_rows(&self, row: &[f64], k: usize) -> Tensor<'t> {
        self.tape.constant(Array::row(row).repeat_rows(k))
    }

    /// Learned initial latent state repeated over `k` rows.
    pub fn initial_latent(&self, k: usize) -> Result<Tensor<'t>> {
        Ok(self.latent()?.z0.broadcast_rows(k)?)
    }

    /// Zero encoder state for `k` rows.
    pub fn initial_encoder_state(&self, k: usize) -> Tensor<'t> {
        self.tape.constant(Array::zeros(k, self.model.config.encoder_hidden))
    }

    /// One GRU step on `(x_i, z_{i-1}, t_i, t_{i-1}, t_i - t_{i-1})` followed
    /// by the context projection. `x` is in data units.
    pub fn encode_step(
        &self,
        state: &Tensor<'t>,
        x: &[f64],
        z_prev: &Tensor<'t>,
        t: f64,
        t_prev: f64,
    ) -> Result<(Tensor<'t>, Tensor<'t>)> {
        let cfg = &self.model.config;
        if x.len() != cfg.data_dim || z_prev.cols() != cfg.latent_dim || state.rows() != z_prev.rows() {
            return Err(ModelError::Data(format!(
                "encoder input shapes: x {} (want {}), z {:?}, state {:?}",
                x.len(),
                cfg.data_dim,
                z_prev.shape(),
                state.shape()
            )));
        }
        let k = z_prev.rows();
        let lat = self.latent()?;
        let encoder = &self.model.latent.as_ref().expect("latent present").encoder;
        let xc = self.constant_rows(&cfg.normalise(x), k);
        let tc = self.constant_rows(&[self.ts(t), self.ts(t_prev), self.ts(t - t_prev)], k);
        let input = Tensor::concat(&[&xc, z_prev, &tc])?;
        let next = encoder.step(&self.params, &input, state)?;
        let proj = &self.model.latent.as_ref().expect("latent present").projection;
        let phi = proj.forward(&lat.projection, &next)?;
        Ok((next, phi))
    }

    /// Posterior dynamics for the interval ending at an observation `x` at
    /// time `t`, given the context `φ`. With `x = None` the observation slots
    /// are zero, as in the global variant.
    pub(crate) fn posterior_dynamics<'a>(
        &'a self,
        phi: &Tensor<'t>,
        obs: Option<(&[f64], f64)>,
    ) -> Result<PosteriorDynamics<'a, 'm, 't>> {
        let cfg = &self.model.config;
        let k = phi.rows();
        let tail = match obs {
            Some((x, t)) => {
                let mut v = cfg.normalise(x);
                v.push(self.ts(t));
                v
            }
            None => vec![0.0; cfg.data_dim + 1],
        };
        let ctx = Tensor::concat(&[phi, &self.constant_rows(&tail, k)])?;
        Ok(PosteriorDynamics { model: self, context_row: self.latent()?.posterior.context_row(&ctx)? })
    }

    /// Solves the posterior SDE of one interval from `z_start`.
    #[allow(clippy::too_many_arguments)]
    pub fn solve_posterior_interval<R: Rng + ?Sized>(
        &self,
        phi: &Tensor<'t>,
        obs: Option<(&[f64], f64)>,
        z_start: &Tensor<'t>,
        t0: f64,
        t1: f64,
        rng: &mut R,
        record: bool,
    ) -> Result<LatentPath<'t>> {
        let cfg = &self.model.config;
        let dynamics = self.posterior_dynamics(phi, obs)?;
        solve_posterior(&dynamics, z_start, t0, t1, cfg.em_step, cfg.u_clip, rng, record)
    }

    /// Solves the prior SDE of one interval from `z_start`.
    pub fn solve_prior_interval<R: Rng + ?Sized>(
        &self,
        z_start: &Tensor<'t>,
        t0: f64,
        t1: f64,
        rng: &mut R,
        record: bool,
    ) -> Result<LatentPath<'t>> {
        self.latent()?;
        solve_prior(self, z_start, t0, t1, self.model.config.em_step, rng, record)
    }

    /// Flow context `(z, t)`, or `t` alone without a latent state.
    pub(crate) fn flow_context(&self, z: Option<&Tensor<'t>>, t: f64, k: usize) -> Result<Tensor<'t>> {
        let tc = self.tape.constant(Array::full(k, 1, self.ts(t)));
        Ok(match z {
            Some(z) => Tensor::concat(&[z, &tc])?,
            None => tc,
        })
    }

    /// `ln p(o_first)` under the base process observed first at time `t`.
    pub fn base_first_logpdf(&self, o: &Tensor<'t>, t: f64) -> Result<Tensor<'t>> {
        let var = if self.model.config.variant.wiener_base() { t.max(DT_MIN) } else { 1.0 };
        gaussian_logpdf(o, var)
    }

    /// `ln p(o | o_prev)` for a base-process step of length `dt`.
    pub fn base_transition_logpdf(&self, o_prev: &Tensor<'t>, o: &Tensor<'t>, dt: f64) -> Result<Tensor<'t>> {
        let dt = dt.max(DT_MIN);
        if self.model.config.variant.wiener_base() {
            gaussian_logpdf(&o.sub(o_prev)?, dt)
        } else {
            let var = -(-2.0 * dt).exp_m1();
            gaussian_logpdf(&o.sub(&o_prev.scale((-dt).exp())?)?, var)
        }
    }

    /// `x = F(o; z, t)` in data units, one row per sample.
    pub fn decode(&self, o: &Tensor<'t>, z: Option<&Tensor<'t>>, t: f64) -> Result<Array> {
        self.decode_rows(o, z, &vec![t; o.rows()])
    }

    /// Like [`ModelTape::decode`] with a separate time for every row.
    pub fn decode_rows(&self, o: &Tensor<'t>, z: Option<&Tensor<'t>>, times: &[f64]) -> Result<Array> {
        let BoundDecoder::Flow(flow) = &self.decoder else {
            return Err(ModelError::Config("decode needs a flow decoder".into()));
        };
        let tc: Vec<f64> = times.iter().map(|&t| self.ts(t)).collect();
        let tc = self.tape.constant(Array::column(&tc));
        let ctx = match z {
            Some(z) => Tensor::concat(&[z, &tc])?,
            None => tc,
        };
        Ok(self.denormalise_rows(flow.forward(o, &ctx)?.value.value()))
    }

    pub fn has_flow(&self) -> bool {
        matches!(self.decoder, BoundDecoder::Flow(_))
    }

    pub(crate) fn denormalise_rows(&self, y: &Array) -> Array {
        let cfg = &self.model.config;
        let rows: Vec<Vec<f64>> = (0..y.rows()).map(|r| cfg.denormalise(y.row_slice(r))).collect();
        Array::from_rows(&rows)
    }

    /// Gaussian decoder mean and log-variance for latent states `z`.
    pub(crate) fn gaussian_params(&self, z: &Tensor<'t>) -> Result<(Tensor<'t>, Tensor<'t>)> {
        let BoundDecoder::Gaussian(layers) = &self.decoder else {
            return Err(ModelError::Config("variant uses a flow decoder".into()));
        };
        let Decoder::Gaussian(mlp) = &self.model.decoder else { unreachable!() };
        let d = self.model.config.data_dim;
        let out = mlp.forward(layers, z)?;
        Ok((out.slice_cols(0, d)?, out.slice_cols(d, d)?))
    }

    /// Log-likelihood of observation `x` at time `t` given the latent state
    /// rows `z` and, except for the first observation, the previous base
    /// value and time. Returns the per-row log-likelihood and the base value
    /// `o = F⁻¹(x)` (flow decoders only).
    pub fn observation_loglik(
        &self,
        x: &[f64],
        z: Option<&Tensor<'t>>,
        t: f64,
        prev: Option<(&Tensor<'t>, f64)>,
        k: usize,
    ) -> Result<(Tensor<'t>, Option<Tensor<'t>>)> {
        self.observation_loglik_rows(&Array::row(x).repeat_rows(k), z, t, prev)
    }

    /// Like [`ModelTape::observation_loglik`] with one observation per row
    /// of `xs`.
    pub fn observation_loglik_rows(
        &self,
        xs: &Array,
        z: Option<&Tensor<'t>>,
        t: f64,
        prev: Option<(&Tensor<'t>, f64)>,
    ) -> Result<(Tensor<'t>, Option<Tensor<'t>>)> {
        let cfg = &self.model.config;
        if xs.cols() != cfg.data_dim {
            return Err(ModelError::Data(format!("observation has {} columns, want {}", xs.cols(), cfg.data_dim)));
        }
        let k = xs.rows();
        for r in 0..k {
            cfg.check_observation(xs.row_slice(r))?;
        }
        let rows: Vec<Vec<f64>> = (0..k).map(|r| cfg.normalise(xs.row_slice(r))).collect();
        let xn = self.tape.constant(Array::from_rows(&rows));
        let norm = self.tape.constant(Array::from_vec(
            k,
            1,
            (0..k).map(|r| cfg.normaliser_logdet(xs.row_slice(r))).collect(),
        ));
        match &self.decoder {
            BoundDecoder::Flow(flow) => {
                let ctx = self.flow_context(z, t, k)?;
                let inv = flow.inverse(&xn, &ctx)?;
                let base = match prev {
                    None => self.base_first_logpdf(&inv.value, t)?,
                    Some((o_prev, t_prev)) => self.base_transition_logpdf(o_prev, &inv.value, t - t_prev)?,
                };
                Ok((base.add(&inv.logdet)?.add(&norm)?, Some(inv.value)))
            }
            BoundDecoder::Gaussian(_) => {
                let z = z.ok_or_else(|| ModelError::Config("gaussian decoder needs a latent state".into()))?;
                let (mean, logvar) = self.gaussian_params(z)?;
                let quad = xn.sub(&mean)?.square()?.mul(&logvar.neg()?.exp()?)?;
                let ll = quad
                    .add(&logvar)?
                    .sum_cols()?
                    .scale(-0.5)?
                    .add(&norm)?
                    .offset(-0.5 * cfg.data_dim as f64 * (2.0 * PI).ln())?;
                Ok((ll, None))
            }
        }
    }

    /// Conditional log-likelihood of `x` at `t` given `x_prev` at `t_prev`
    /// and the latent states at both times.
    pub fn conditional_loglik(
        &self,
        x: &[f64],
        x_prev: &[f64],
        z: Option<&Tensor<'t>>,
        z_prev: Option<&Tensor<'t>>,
        t: f64,
        t_prev: f64,
    ) -> Result<Tensor<'t>> {
        let k = z.map_or(1, |z| z.rows());
        let o_prev = match &self.decoder {
            BoundDecoder::Flow(flow) => {
                let xn = self.constant_rows(&self.model.config.normalise(x_prev), k);
                Some(flow.inverse(&xn, &self.flow_context(z_prev, t_prev, k)?)?.value)
            }
            BoundDecoder::Gaussian(_) => None,
        };
        let prev = o_prev.as_ref().map(|o| (o, t_prev));
        Ok(self.observation_loglik(x, z, t, prev, k)?.0)
    }

    /// Log-likelihood of the first observation at `t`.
    pub fn first_obs_loglik(&self, x: &[f64], z: Option<&Tensor<'t>>, t: f64) -> Result<Tensor<'t>> {
        let k = z.map_or(1, |z| z.rows());
        Ok(self.observation_loglik(x, z, t, None, k)?.0)
    }

    /// Global context: the encoder run over the whole series with the latent
    /// slot held at zero. Returns a `1 x c` context.
    pub fn global_context(&self, series: &TimeSeries) -> Result<Tensor<'t>> {
        let zeros = self.tape.constant(Array::zeros(1, self.model.config.latent_dim));
        let mut state = self.initial_encoder_state(1);
        let mut phi = None;
        let mut t_prev = 0.0;
        for (i, &t) in series.times().iter().enumerate() {
            let (s, p) = self.encode_step(&state, series.value(i), &zeros, t, t_prev)?;
            state = s;
            phi = Some(p);
            t_prev = t;
        }
        phi.ok_or_else(|| ModelError::Data("empty series".into()))
    }

    fn check_series(&self, series: &TimeSeries) -> Result<()> {
        if series.is_empty() {
            return Err(ModelError::Data("series is empty".into()));
        }
        if series.dim() != self.model.config.data_dim {
            return Err(ModelError::Data(format!(
                "series has dimension {}, model expects {}",
                series.dim(),
                self.model.config.data_dim
            )));
        }
        Ok(())
    }

    /// Per-sample joint log-density `Σ_i (loglik_i + log M_i)` of `k`
    /// posterior samples, as a `k x 1` tensor, with summary statistics.
    pub fn joint<R: Rng + ?Sized>(
        &self,
        series: &TimeSeries,
        k: usize,
        rng: &mut R,
    ) -> Result<(Tensor<'t>, ElboEstimate)> {
        self.joint_with_knots(series, &[], k, rng)
    }

    /// [`ModelTape::joint`] with extra unobserved times at which the
    /// posterior solve of the enclosing interval is split. The interval keeps
    /// its context; only the step layout changes.
    pub fn joint_with_knots<R: Rng + ?Sized>(
        &self,
        series: &TimeSeries,
        knots: &[f64],
        k: usize,
        rng: &mut R,
    ) -> Result<(Tensor<'t>, ElboEstimate)> {
        self.check_series(series)?;
        if k == 0 {
            return Err(ModelError::Config("sample count K must be at least 1".into()));
        }
        let n = series.len();
        let mut est = ElboEstimate {
            bound: 0.0,
            per_interval_loglik: Vec::with_capacity(n),
            per_interval_logweight: Vec::with_capacity(n),
            k,
            joint: Vec::new(),
            clip_events: 0,
            steps: 0,
        };
        let mean = |t: &Tensor<'_>| t.value().sum() / t.rows() as f64;
        let Some(_) = &self.latent else {
            let mut total: Option<Tensor<'t>> = None;
            let mut prev: Option<(Tensor<'t>, f64)> = None;
            for (i, &t) in series.times().iter().enumerate() {
                let p = prev.as_ref().map(|(o, tp)| (o, *tp));
                let (ll, o) = self.observation_loglik(series.value(i), None, t, p, 1)?;
                est.per_interval_loglik.push(ll.item());
                est.per_interval_logweight.push(0.0);
                total = Some(match total {
                    None => ll,
                    Some(s) => s.add(&ll)?,
                });
                prev = Some((o.expect("flow decoder"), t));
            }
            let joint = total.expect("non-empty").broadcast_rows(k)?;
            est.joint = joint.value().data().to_vec();
            return Ok((joint, est));
        };

        let global = if self.model.config.variant.global() {
            Some(self.global_context(series)?)
        } else {
            None
        };
        let mut z = self.initial_latent(k)?;
        let mut state = self.initial_encoder_state(k);
        let mut prev: Option<(Tensor<'t>, f64)> = None;
        let mut t_prev = 0.0;
        let mut total: Option<Tensor<'t>> = None;
        for (i, &t) in series.times().iter().enumerate() {
            let x = series.value(i);
            let phi = match &global {
                Some(phi) => phi.clone(),
                None => {
                    let (s, phi) = self.encode_step(&state, x, &z, t, t_prev)?;
                    state = s;
                    phi
                }
            };
            let obs = if global.is_some() { None } else { Some((x, t)) };
            let dynamics = self.posterior_dynamics(&phi, obs)?;
            let cfg = &self.model.config;
            let mut bounds: Vec<f64> = knots.iter().copied().filter(|&u| u > t_prev && u < t).collect();
            bounds.sort_by(f64::total_cmp);
            bounds.push(t);
            let mut start = t_prev;
            let mut path: Option<LatentPath<'t>> = None;
            for &end in &bounds {
                let from = path.as_ref().map_or(&z, |p| &p.z_end);
                let piece = solve_posterior(&dynamics, from, start, end, cfg.em_step, cfg.u_clip, rng, false)?;
                path = Some(match path {
                    None => piece,
                    Some(p) => LatentPath {
                        log_weight: p.log_weight.add(&piece.log_weight)?,
                        clip_events: p.clip_events + piece.clip_events,
                        steps: p.steps + piece.steps,
                        ..piece
                    },
                });
                start = end;
            }
            let path = path.expect("at least one piece");
            z = path.z_end;
            let p = prev.as_ref().map(|(o, tp)| (o, *tp));
            let (ll, o) = self.observation_loglik(x, Some(&z), t, p, k)?;
            est.per_interval_loglik.push(mean(&ll));
            est.per_interval_logweight.push(mean(&path.log_weight));
            est.clip_events += path.clip_events;
            est.steps += path.steps;
            let term = ll.add(&path.log_weight)?;
            total = Some(match total {
                None => term,
                Some(s) => s.add(&term)?,
            });
            prev = o.map(|o| (o, t));
            t_prev = t;
        }
        let joint = total.expect("non-empty");
        est.joint = joint.value().data().to_vec();
        Ok((joint, est))
    }

    /// Monte Carlo ELBO averaged over `k` posterior samples.
    pub fn elbo<R: Rng + ?Sized>(&self, series: &TimeSeries, k: usize, rng: &mut R) -> Result<(Tensor<'t>, ElboEstimate)> {
        let (joint, mut est) = self.joint(series, k, rng)?;
        let bound = joint.mean()?;
        est.bound = bound.item();
        Ok((bound, est))
    }

    /// Importance-weighted bound `ln (1/K) Σ_k exp(joint_k)`.
    pub fn iwae<R: Rng + ?Sized>(&self, series: &TimeSeries, k: usize, rng: &mut R) -> Result<(Tensor<'t>, ElboEstimate)> {
        let (joint, mut est) = self.joint(series, k, rng)?;
        let bound = joint.log_mean_exp()?;
        est.bound = bound.item();
        Ok((bound, est))
    }
}
