use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use super::{Result, TrainError};
use crate::flows::FlowKind;
use crate::model::Variant;

/// Training and evaluation settings, read from a flat `key = value` file.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub dataset: PathBuf,
    /// Validation set; when absent the last `val_fraction` of `dataset` is held out.
    pub validation: Option<PathBuf>,
    pub val_fraction: f64,
    pub variant: Variant,
    pub latent_dim: usize,
    pub flow: FlowKind,
    pub flow_blocks: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub k_train: usize,
    pub k_val: usize,
    pub k_test: usize,
    pub em_step: f64,
    pub seed: u64,
    pub checkpoint: PathBuf,
    pub grad_clip: f64,
    /// Standardise observations with the training-set mean and deviation.
    pub normalise: bool,
    /// Model `ln x` instead of `x`; the data must be strictly positive.
    pub log_transform: bool,
    /// Standard deviation of Gaussian noise added once to the training values.
    pub obs_noise: f64,
    /// Stop starting new epochs once this many seconds have elapsed.
    pub time_budget_s: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            dataset: PathBuf::from("train.jsonl"),
            validation: None,
            val_fraction: 0.1,
            variant: Variant::Clpf,
            latent_dim: 2,
            flow: FlowKind::Anode,
            flow_blocks: 5,
            learning_rate: 1e-3,
            batch_size: 100,
            epochs: 10,
            k_train: 3,
            k_val: 25,
            k_test: 125,
            em_step: 0.01,
            seed: 0,
            checkpoint: PathBuf::from("model.ckpt"),
            grad_clip: 10.0,
            normalise: true,
            log_transform: false,
            obs_noise: 0.0,
            time_budget_s: None,
        }
    }
}

fn parse_num<T: std::str::FromStr>(key: &str, value: &str) -> std::result::Result<T, String>
where
    T::Err: std::fmt::Display,
{
    value.parse().map_err(|e| format!("`{key}`: cannot parse `{value}`: {e}"))
}

impl TrainConfig {
    pub const KEYS: [&'static str; 21] = [
        "dataset",
        "validation",
        "val_fraction",
        "variant",
        "latent_dim",
        "flow",
        "flow_blocks",
        "learning_rate",
        "batch_size",
        "epochs",
        "k_train",
        "k_val",
        "k_test",
        "em_step",
        "seed",
        "checkpoint",
        "grad_clip",
        "normalise",
        "log_transform",
        "obs_noise",
        "time_budget_s",
    ];

    /// Sets one field from its textual form.
    pub fn set(&mut self, key: &str, value: &str) -> std::result::Result<(), String> {
        let value = value.trim();
        match key {
            "dataset" => self.dataset = value.into(),
            "validation" => self.validation = (!value.is_empty() && value != "none").then(|| value.into()),
            "val_fraction" => self.val_fraction = parse_num(key, value)?,
            "variant" => self.variant = value.parse().map_err(|e| format!("{e}"))?,
            "latent_dim" => self.latent_dim = parse_num(key, value)?,
            "flow" => self.flow = value.parse().map_err(|e| format!("{e}"))?,
            "flow_blocks" => self.flow_blocks = parse_num(key, value)?,
            "learning_rate" | "lr" => self.learning_rate = parse_num(key, value)?,
            "batch_size" => self.batch_size = parse_num(key, value)?,
            "epochs" => self.epochs = parse_num(key, value)?,
            "k_train" => self.k_train = parse_num(key, value)?,
            "k_val" => self.k_val = parse_num(key, value)?,
            "k_test" => self.k_test = parse_num(key, value)?,
            "em_step" => self.em_step = parse_num(key, value)?,
            "seed" => self.seed = parse_num(key, value)?,
            "checkpoint" => self.checkpoint = value.into(),
            "grad_clip" => self.grad_clip = parse_num(key, value)?,
            "normalise" => self.normalise = parse_num(key, value)?,
            "log_transform" => self.log_transform = parse_num(key, value)?,
            "obs_noise" => self.obs_noise = parse_num(key, value)?,
            "time_budget_s" => {
                self.time_budget_s = (value != "none").then(|| parse_num(key, value)).transpose()?
            }
            _ => return Err(format!("unknown key `{key}`")),
        }
        Ok(())
    }

    /// Parses the `key = value` format; `#` starts a comment.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| TrainError::ConfigSyntax {
                line: i + 1,
                detail: format!("expected `key = value`, got `{line}`"),
            })?;
            cfg.set(key.trim(), value)
                .map_err(|detail| TrainError::ConfigSyntax { line: i + 1, detail })?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|source| TrainError::Io { path: path.into(), source })?;
        Self::parse(&text)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |s: &str| Err(TrainError::Config(s.into()));
        if self.latent_dim == 0 && self.variant.has_latent() {
            return bad("latent_dim must be positive");
        }
        if self.flow_blocks == 0 || self.batch_size == 0 || self.k_train == 0 {
            return bad("flow_blocks, batch_size and k_train must be positive");
        }
        if !(self.k_test >= self.k_val && self.k_val >= self.k_train) {
            return bad("sample counts must satisfy k_test >= k_val >= k_train");
        }
        if !(self.learning_rate > 0.0) || !(self.em_step > 0.0) || !(self.grad_clip > 0.0) {
            return bad("learning_rate, em_step and grad_clip must be positive");
        }
        if !(0.0..1.0).contains(&self.val_fraction) || !(self.obs_noise >= 0.0) {
            return bad("val_fraction must lie in [0, 1) and obs_noise must be non-negative");
        }
        if self.time_budget_s.is_some_and(|b| !(b > 0.0)) {
            return bad("time_budget_s must be positive");
        }
        Ok(())
    }

    /// The resolved configuration in the same `key = value` format.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let opt = |p: &Option<PathBuf>| p.as_ref().map_or("none".to_string(), |p| p.display().to_string());
        let _ = writeln!(s, "dataset = {}", self.dataset.display());
        let _ = writeln!(s, "validation = {}", opt(&self.validation));
        let _ = writeln!(s, "val_fraction = {}", self.val_fraction);
        let _ = writeln!(s, "variant = {}", self.variant);
        let _ = writeln!(s, "latent_dim = {}", self.latent_dim);
        let _ = writeln!(s, "flow = {}", self.flow);
        let _ = writeln!(s, "flow_blocks = {}", self.flow_blocks);
        let _ = writeln!(s, "learning_rate = {}", self.learning_rate);
        let _ = writeln!(s, "batch_size = {}", self.batch_size);
        let _ = writeln!(s, "epochs = {}", self.epochs);
        let _ = writeln!(s, "k_train = {}", self.k_train);
        let _ = writeln!(s, "k_val = {}", self.k_val);
        let _ = writeln!(s, "k_test = {}", self.k_test);
        let _ = writeln!(s, "em_step = {}", self.em_step);
        let _ = writeln!(s, "seed = {}", self.seed);
        let _ = writeln!(s, "checkpoint = {}", self.checkpoint.display());
        let _ = writeln!(s, "grad_clip = {}", self.grad_clip);
        let _ = writeln!(s, "normalise = {}", self.normalise);
        let _ = writeln!(s, "log_transform = {}", self.log_transform);
        let _ = writeln!(s, "obs_noise = {}", self.obs_noise);
        let _ = writeln!(
            s,
            "time_budget_s = {}",
            self.time_budget_s.map_or("none".to_string(), |b| b.to_string())
        );
        s
    }
}
