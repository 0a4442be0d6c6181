//! The generative model: a latent SDE decoded through an indexed flow, its
//! per-interval posterior SDEs with Girsanov weights, the recurrent encoder,
//! the ELBO and IWAE bounds, trajectory sampling and the ablation variants.

mod bound;
mod config;
mod dynamics;
mod predict;
mod sample;

pub use bound::{ElboEstimate, ModelTape};
pub use dynamics::{solve_posterior, solve_prior, Dynamics, FnDynamics, LatentPath};
pub use config::{ModelConfig, Variant};
pub use predict::{predict_sequence, Prediction};
pub use sample::{sample_trajectory, SampledTrajectory};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::autodiff::{
    checkpoint, Activation, AdError, Array, Gru, GruSpec, Mlp, MlpSpec, ParamId, ParamStore,
};
use crate::flows::{Flow, FlowError};
use crate::processes::ProcessError;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error(transparent)]
    Ad(#[from] AdError),
    #[error(transparent)]
    Flow(#[from] FlowError),
    #[error(transparent)]
    Process(#[from] ProcessError),
    #[error(transparent)]
    Checkpoint(#[from] checkpoint::CheckpointError),
    #[error("invalid model configuration: {0}")]
    Config(String),
    #[error("series does not fit the model: {0}")]
    Data(String),
}

pub type Result<T> = std::result::Result<T, ModelError>;

/// Latent SDE components; absent for the CTFP baseline.
#[derive(Debug, Clone)]
pub(crate) struct Latent {
    pub prior_drift: Mlp,
    pub diffusion: Mlp,
    pub posterior_drift: Mlp,
    pub encoder: Gru,
    pub projection: Mlp,
    pub z0: ParamId,
}

/// Observation model: an indexed flow or a per-timestamp Gaussian.
#[derive(Debug, Clone)]
pub(crate) enum Decoder {
    Flow(Flow),
    Gaussian(Mlp),
}

/// Parameters and wiring of one model instance.
#[derive(Debug, Clone)]
pub struct ClpfModel {
    config: ModelConfig,
    store: ParamStore,
    pub(crate) latent: Option<Latent>,
    pub(crate) decoder: Decoder,
}

impl ClpfModel {
    /// Builds and initialises a model. Drift and decoder output layers start
    /// at zero so that the posterior equals the prior and the flow is the
    /// identity.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let (d, m, c) = (config.data_dim, config.latent_dim, config.context_dim);
        let latent = if config.variant.has_latent() {
            let prior_drift = Mlp::new(
                &mut store,
                "prior_drift",
                MlpSpec::new(m + 1, &config.drift_hidden, m),
                &mut rng,
                true,
            )?;
            let diffusion = Mlp::new(
                &mut store,
                "diffusion",
                MlpSpec::new(m + 1, &config.diffusion_hidden, m).with_output(Activation::Softplus),
                &mut rng,
                false,
            )?;
            let posterior_drift = Mlp::new(
                &mut store,
                "posterior_drift",
                MlpSpec::new(m + 1 + c + d + 1, &config.drift_hidden, m),
                &mut rng,
                true,
            )?;
            let encoder = Gru::new(
                &mut store,
                "encoder",
                GruSpec { input: d + m + 3, hidden: config.encoder_hidden },
                &mut rng,
            )?;
            let projection = Mlp::new(
                &mut store,
                "context",
                MlpSpec::new(config.encoder_hidden, &[], c),
                &mut rng,
                false,
            )?;
            let z0 = store.add("z0", Array::zeros(1, m))?;
            Some(Latent { prior_drift, diffusion, posterior_drift, encoder, projection, z0 })
        } else {
            None
        };
        let decoder = if config.variant.independent() {
            Decoder::Gaussian(Mlp::new(
                &mut store,
                "decoder",
                MlpSpec::new(m, &config.decoder_hidden, 2 * d),
                &mut rng,
                true,
            )?)
        } else {
            Decoder::Flow(Flow::new(&mut store, "flow", &config.flow_spec(), &mut rng, true)?)
        };
        Ok(Self { config, store, latent, decoder })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    pub fn n_params(&self) -> usize {
        self.store.numel()
    }

    /// Replaces all parameters (and optimiser state) with `store`, which must
    /// have the same names and shapes.
    pub fn load_store(&mut self, store: ParamStore) -> Result<()> {
        if store.len() != self.store.len() {
            return Err(ModelError::Config(format!(
                "checkpoint has {} parameter arrays, model has {}",
                store.len(),
                self.store.len()
            )));
        }
        for id in self.store.ids() {
            let other = store
                .id(self.store.name(id))
                .ok_or_else(|| ModelError::Config(format!("checkpoint lacks `{}`", self.store.name(id))))?;
            if other != id || store.value(other).shape() != self.store.value(id).shape() {
                return Err(ModelError::Config(format!("parameter `{}` differs in layout", self.store.name(id))));
            }
        }
        self.store = store;
        Ok(())
    }

    /// Writes parameters, optimiser state and `extra` metadata next to the
    /// model configuration.
    pub fn save(&self, path: &std::path::Path, extra: serde_json::Value) -> Result<()> {
        let meta = serde_json::json!({ "model": self.config, "extra": extra });
        Ok(checkpoint::save(path, &self.store, &meta)?)
    }

    /// Restores a model saved by [`ClpfModel::save`]; returns the extra metadata.
    pub fn load(path: &std::path::Path) -> Result<(Self, serde_json::Value)> {
        let (store, meta) = checkpoint::load(path)?;
        let config: ModelConfig = serde_json::from_value(meta["model"].clone())
            .map_err(|e| ModelError::Config(format!("checkpoint metadata: {e}")))?;
        let mut model = Self::new(config, 0)?;
        model.load_store(store)?;
        Ok((model, meta["extra"].clone()))
    }
}

#[cfg(test)]
mod unit_tests {
    use super::*;

    #[test]
    fn checkpoint_round_trip_preserves_parameters() {
        let cfg = ModelConfig::new(Variant::Clpf, 1, 2);
        let model = ClpfModel::new(cfg, 3).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        model.save(&path, serde_json::json!({"epoch": 4})).unwrap();
        let (back, extra) = ClpfModel::load(&path).unwrap();
        assert_eq!(back.store(), model.store());
        assert_eq!(back.config(), model.config());
        assert_eq!(extra["epoch"], 4);
    }

    #[test]
    fn variants_build() {
        for v in Variant::ALL {
            let m = ClpfModel::new(ModelConfig::new(v, 2, 3), 1).unwrap();
            assert!(m.n_params() > 0, "{v}");
            assert_eq!(m.latent.is_some(), v.has_latent());
        }
    }

    #[test]
    fn mismatched_store_is_rejected() {
        let mut a = ClpfModel::new(ModelConfig::new(Variant::Clpf, 1, 2), 1).unwrap();
        let b = ClpfModel::new(ModelConfig::new(Variant::Ctfp, 1, 2), 1).unwrap();
        assert!(a.load_store(b.store().clone()).is_err());
    }
}
