use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;

use super::eval::evaluate_nll;
use super::{Result, TrainConfig, TrainError};
use crate::autodiff::{clip_global_norm, AdamConfig, Array, Tape};
use crate::model::{ClpfModel, ModelConfig, ModelError};
use crate::processes::{read_dataset, sequence_rng, Dataset, TimeSeries};

#[derive(Debug, Clone, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Mean training objective, `-IWAE(K_train) / n_obs`.
    pub train_loss: f64,
    pub val_nll: f64,
    pub val_se: f64,
    /// Seconds since training started.
    pub elapsed_s: f64,
    pub clip_rate: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// Parameters with the best validation NLL (epoch 0 is the initialisation).
    pub model: ClpfModel,
    pub curve: Vec<EpochRecord>,
    pub best_epoch: usize,
}

impl TrainOutcome {
    pub fn initial_val_nll(&self) -> f64 {
        self.curve[0].val_nll
    }

    pub fn best_val_nll(&self) -> f64 {
        self.curve[self.best_epoch].val_nll
    }
}

fn mix(seed: u64, epoch: usize) -> u64 {
    seed.wrapping_mul(0x9e37_79b9_7f4a_7c15).wrapping_add(epoch as u64 + 1)
}

/// Model configuration for `cfg` with the observation normaliser and time
/// scale taken from the training data.
pub fn build_model(cfg: &TrainConfig, train: &Dataset) -> Result<ClpfModel> {
    let d = train.meta.d;
    let mut mc = ModelConfig::new(cfg.variant, d, cfg.latent_dim);
    mc.flow_kind = cfg.flow;
    mc.flow_blocks = cfg.flow_blocks;
    mc.em_step = cfg.em_step;
    mc.time_scale = 1.0 / train.meta.horizon;
    mc.obs_log = cfg.log_transform;
    for s in &train.series {
        for i in 0..s.len() {
            mc.check_observation(s.value(i))?;
        }
    }
    if cfg.normalise {
        let n = train.total_observations() as f64;
        let mut mean = vec![0.0; d];
        let mut sq = vec![0.0; d];
        for s in &train.series {
            for i in 0..s.len() {
                for (c, v) in s.value(i).iter().enumerate() {
                    let v = if cfg.log_transform { v.ln() } else { *v };
                    mean[c] += v / n;
                    sq[c] += v * v / n;
                }
            }
        }
        mc.obs_shift = mean.clone();
        mc.obs_scale = mean
            .iter()
            .zip(&sq)
            .map(|(m, s)| {
                let sd = (s - m * m).max(0.0).sqrt();
                if sd > 1e-8 { sd } else { 1.0 }
            })
            .collect();
    }
    Ok(ClpfModel::new(mc, cfg.seed)?)
}

fn split_validation(cfg: &TrainConfig, mut train: Dataset) -> Result<(Dataset, Dataset)> {
    let n_val = ((train.series.len() as f64) * cfg.val_fraction).round() as usize;
    if n_val == 0 || n_val >= train.series.len() {
        return Err(TrainError::Dataset(format!(
            "cannot hold out {n_val} of {} sequences for validation",
            train.series.len()
        )));
    }
    let val_series = train.series.split_off(train.series.len() - n_val);
    let mut val = Dataset { meta: train.meta.clone(), series: val_series };
    val.meta.n_sequences = n_val;
    train.meta.n_sequences = train.series.len();
    Ok((train, val))
}

fn add_noise(data: &mut Dataset, sd: f64, seed: u64) {
    let normal = Normal::new(0.0, sd).expect("finite deviation");
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x6e_6f69_7365);
    for s in &mut data.series {
        for v in s.values.data_mut() {
            *v += normal.sample(&mut rng);
        }
    }
}

/// Reads the datasets named in `cfg` and trains. Progress lines go to `log`.
pub fn train(cfg: &TrainConfig, log: &mut dyn FnMut(&str)) -> Result<TrainOutcome> {
    cfg.validate()?;
    let data = read_dataset(&cfg.dataset)?;
    let (train_set, val_set) = match &cfg.validation {
        Some(p) => (data, read_dataset(p)?),
        None => split_validation(cfg, data)?,
    };
    train_on(cfg, train_set, &val_set, log)
}

struct BatchPart {
    loss: f64,
    grads: Vec<Array>,
    clips: usize,
    u_evals: usize,
}

fn sequence_gradient(model: &ClpfModel, s: &TimeSeries, k: usize, seed: u64, index: usize) -> std::result::Result<BatchPart, ModelError> {
    let tape = Tape::new();
    let mt = model.bind(&tape)?;
    let mut rng = sequence_rng(seed, index as u64);
    let (bound, est) = mt.iwae(s, k, &mut rng)?;
    let loss = bound.scale(-1.0 / s.len() as f64)?;
    let grads = mt.params().grads(&tape.backward(&loss)?)?;
    Ok(BatchPart {
        loss: loss.item(),
        grads,
        clips: est.clip_events,
        u_evals: est.steps * k * model.config().latent_dim,
    })
}

/// Trains on in-memory datasets, saving the best checkpoint to `cfg.checkpoint`.
pub fn train_on(cfg: &TrainConfig, mut train_set: Dataset, val_set: &Dataset, log: &mut dyn FnMut(&str)) -> Result<TrainOutcome> {
    cfg.validate()?;
    if train_set.series.is_empty() || val_set.series.is_empty() {
        return Err(TrainError::Dataset("training and validation sets must be non-empty".into()));
    }
    if val_set.meta.d != train_set.meta.d {
        return Err(TrainError::Dataset("training and validation dimensions differ".into()));
    }
    if cfg.obs_noise > 0.0 {
        add_noise(&mut train_set, cfg.obs_noise, cfg.seed);
    }
    let start = Instant::now();
    let mut model = build_model(cfg, &train_set)?;
    log(&format!(
        "model: variant={} d={} m={} params={} time_scale={:.4}",
        cfg.variant,
        train_set.meta.d,
        model.config().latent_dim,
        model.n_params(),
        model.config().time_scale
    ));
    let eval_seed = mix(cfg.seed, usize::MAX - 1);
    let init = evaluate_nll(&model, &val_set.series, cfg.k_val, eval_seed)?;
    let mut curve = vec![EpochRecord {
        epoch: 0,
        train_loss: f64::NAN,
        val_nll: init.nll,
        val_se: init.se,
        elapsed_s: start.elapsed().as_secs_f64(),
        clip_rate: init.clip_rate,
    }];
    log(&format!("epoch 0: val_nll={:.4} ± {:.4}", init.nll, init.se));
    let meta = |epoch: usize, val: f64| serde_json::json!({ "epoch": epoch, "val_nll": val, "seed": cfg.seed });
    model.save(&cfg.checkpoint, meta(0, init.nll))?;
    let mut best = (0, init.nll, model.clone());

    let adam = AdamConfig::with_lr(cfg.learning_rate);
    let n = train_set.series.len();
    let mut order: Vec<usize> = (0..n).collect();
    for epoch in 1..=cfg.epochs {
        if let Some(budget) = cfg.time_budget_s {
            if start.elapsed().as_secs_f64() >= budget {
                log(&format!("time budget of {budget} s reached before epoch {epoch}"));
                break;
            }
        }
        let mut rng = sequence_rng(mix(cfg.seed, epoch), u64::MAX);
        order.shuffle(&mut rng);
        let sample_seed = mix(cfg.seed, epoch);
        let (mut loss_sum, mut clips, mut u_evals) = (0.0, 0usize, 0usize);
        for batch in order.chunks(cfg.batch_size) {
            let parts: Vec<(usize, std::result::Result<BatchPart, ModelError>)> = batch
                .par_iter()
                .map(|&i| (i, sequence_gradient(&model, &train_set.series[i], cfg.k_train, sample_seed, i)))
                .collect();
            let mut total: Option<Vec<Array>> = None;
            for (i, part) in parts {
                let part = part.map_err(|e| TrainError::NonFinite {
                    step: model.store().step() + 1,
                    sequence: i,
                    detail: e.to_string(),
                })?;
                if !part.loss.is_finite() || part.grads.iter().any(|g| !g.is_finite()) {
                    return Err(TrainError::NonFinite {
                        step: model.store().step() + 1,
                        sequence: i,
                        detail: format!("loss {}", part.loss),
                    });
                }
                loss_sum += part.loss;
                clips += part.clips;
                u_evals += part.u_evals;
                match total.as_mut() {
                    None => total = Some(part.grads),
                    Some(t) => t.iter_mut().zip(&part.grads).for_each(|(a, g)| a.add_assign(g)),
                }
            }
            let mut grads = total.expect("non-empty batch");
            grads.iter_mut().for_each(|g| g.scale_assign(1.0 / batch.len() as f64));
            clip_global_norm(&mut grads, cfg.grad_clip);
            model.store_mut().adam_step(&grads, &adam)?;
        }
        let val = evaluate_nll(&model, &val_set.series, cfg.k_val, eval_seed)?;
        let rec = EpochRecord {
            epoch,
            train_loss: loss_sum / n as f64,
            val_nll: val.nll,
            val_se: val.se,
            elapsed_s: start.elapsed().as_secs_f64(),
            clip_rate: if u_evals > 0 { clips as f64 / u_evals as f64 } else { 0.0 },
        };
        log(&format!(
            "epoch {epoch}: train_loss={:.4} val_nll={:.4} ± {:.4} clip_rate={:.2e} elapsed={:.1}s",
            rec.train_loss, rec.val_nll, rec.val_se, rec.clip_rate, rec.elapsed_s
        ));
        if val.nll < best.1 {
            model.save(&cfg.checkpoint, meta(epoch, val.nll))?;
            best = (epoch, val.nll, model.clone());
        }
        curve.push(rec);
    }
    Ok(TrainOutcome { model: best.2, curve, best_epoch: best.0 })
}
