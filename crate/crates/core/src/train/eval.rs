use std::time::Instant;

use rayon::prelude::*;

use super::{Result, TrainError};
use crate::autodiff::Tape;
use crate::model::{predict_sequence, ClpfModel, Prediction};
use crate::processes::{gbm_exact_logpdf, sequence_rng, Dataset, ProcessSpec, TimeSeries};

/// Mean per-observation NLL over sequences with its standard error.
#[derive(Debug, Clone, PartialEq)]
pub struct NllReport {
    pub nll: f64,
    pub se: f64,
    pub per_sequence: Vec<f64>,
    /// Fraction of `u` entries that hit the clip.
    pub clip_rate: f64,
    pub seconds: f64,
}

fn mean_se(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, (var / n).sqrt())
}

/// `-IWAE(K) / n_obs` averaged over `series`. Sequence `i` draws its samples
/// from stream `i` of `seed`, so the result does not depend on thread count.
pub fn evaluate_nll(model: &ClpfModel, series: &[TimeSeries], k: usize, seed: u64) -> Result<NllReport> {
    if series.is_empty() {
        return Err(TrainError::Dataset("evaluation set is empty".into()));
    }
    let start = Instant::now();
    let m = model.config().latent_dim;
    let results = series
        .par_iter()
        .enumerate()
        .map(|(i, s)| {
            let tape = Tape::no_grad();
            let mt = model.bind(&tape)?;
            let (_, est) = mt.iwae(s, k, &mut sequence_rng(seed, i as u64))?;
            Ok((-est.bound / s.len() as f64, est.clip_events, est.steps * k * m))
        })
        .collect::<std::result::Result<Vec<_>, crate::model::ModelError>>()?;
    let per_sequence: Vec<f64> = results.iter().map(|r| r.0).collect();
    let (clips, evals) = results.iter().fold((0, 0), |(c, e), r| (c + r.1, e + r.2));
    let (nll, se) = mean_se(&per_sequence);
    Ok(NllReport {
        nll,
        se,
        per_sequence,
        clip_rate: if evals > 0 { clips as f64 / evals as f64 } else { 0.0 },
        seconds: start.elapsed().as_secs_f64(),
    })
}

/// Exact per-observation NLL of a GBM dataset under its generating
/// parameters, the first observation scored from `X_0` at time 0.
pub fn gbm_oracle_nll(data: &Dataset) -> Result<NllReport> {
    let start = Instant::now();
    let Ok(ProcessSpec::Gbm(p)) = data.meta.process_spec() else {
        return Err(TrainError::Dataset(format!(
            "the GBM oracle needs a GBM dataset, got process `{}`",
            data.meta.process
        )));
    };
    let per_sequence = data
        .series
        .iter()
        .map(|s| {
            let (mut prev, mut t_prev, mut total) = (p.x0, 0.0, 0.0);
            for (i, &t) in s.times().iter().enumerate() {
                let x = s.value(i)[0];
                total += gbm_exact_logpdf(prev, x, t - t_prev, p.mu, p.sigma)?;
                prev = x;
                t_prev = t;
            }
            Ok(-total / s.len() as f64)
        })
        .collect::<std::result::Result<Vec<_>, crate::processes::ProcessError>>()?;
    let (nll, se) = mean_se(&per_sequence);
    Ok(NllReport { nll, se, per_sequence, clip_rate: 0.0, seconds: start.elapsed().as_secs_f64() })
}

/// Pooled one-step-ahead prediction errors over a dataset.
#[derive(Debug, Clone, PartialEq)]
pub struct PredictReport {
    pub mean_l2: f64,
    pub p25: f64,
    pub p75: f64,
    pub n_predictions: usize,
    /// Mean error of each evaluated sequence.
    pub per_sequence: Vec<f64>,
    /// Dataset index of each evaluated sequence with its predictions.
    pub predictions: Vec<(usize, Prediction)>,
}

fn quantile(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let (lo, hi) = (pos.floor() as usize, pos.ceil() as usize);
    sorted[lo] + (pos - lo as f64) * (sorted[hi] - sorted[lo])
}

/// Runs sequential prediction with `samples` particles on every series of
/// length at least two.
pub fn predict_dataset(model: &ClpfModel, series: &[TimeSeries], samples: usize, seed: u64) -> Result<PredictReport> {
    let usable: Vec<(usize, &TimeSeries)> = series.iter().enumerate().filter(|(_, s)| s.len() >= 2).collect();
    if usable.is_empty() {
        return Err(TrainError::Dataset("no series with at least two observations".into()));
    }
    let per = usable
        .par_iter()
        .map(|&(i, s)| predict_sequence(model, s, samples, seed.wrapping_add(i as u64)))
        .collect::<std::result::Result<Vec<_>, _>>()?;
    let mut all: Vec<f64> = per.iter().flat_map(|p| p.l2.iter().copied()).collect();
    let mean_l2 = all.iter().sum::<f64>() / all.len() as f64;
    all.sort_by(f64::total_cmp);
    Ok(PredictReport {
        mean_l2,
        p25: quantile(&all, 0.25),
        p75: quantile(&all, 0.75),
        n_predictions: all.len(),
        per_sequence: per.iter().map(|p| p.mean_l2()).collect(),
        predictions: usable.iter().map(|&(i, _)| i).zip(per).collect(),
    })
}
