use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::{ModelError, Result};
use crate::flows::{AffineSpec, AnodeSpec, FlowKind, FlowSpec};

/// Model variants used for the ablations and baselines.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Variant {
    #[serde(rename = "clpf")]
    Clpf,
    /// One posterior SDE whose context comes from the whole sequence.
    #[serde(rename = "clpf-global")]
    ClpfGlobal,
    /// Gaussian decoder `z -> (mean, log-variance)` instead of the flow.
    #[serde(rename = "clpf-independent")]
    ClpfIndependent,
    /// Wiener base process instead of Ornstein–Uhlenbeck.
    #[serde(rename = "clpf-wiener")]
    ClpfWiener,
    /// Flow indexed by time only on a Wiener base; exact likelihood.
    #[serde(rename = "ctfp")]
    Ctfp,
    /// Global posterior with the Gaussian decoder.
    #[serde(rename = "latent-sde")]
    LatentSde,
}

impl Variant {
    pub const ALL: [Variant; 6] = [
        Variant::Clpf,
        Variant::ClpfGlobal,
        Variant::ClpfIndependent,
        Variant::ClpfWiener,
        Variant::Ctfp,
        Variant::LatentSde,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Clpf => "clpf",
            Variant::ClpfGlobal => "clpf-global",
            Variant::ClpfIndependent => "clpf-independent",
            Variant::ClpfWiener => "clpf-wiener",
            Variant::Ctfp => "ctfp",
            Variant::LatentSde => "latent-sde",
        }
    }

    pub fn has_latent(self) -> bool {
        self != Variant::Ctfp
    }

    pub fn global(self) -> bool {
        matches!(self, Variant::ClpfGlobal | Variant::LatentSde)
    }

    pub fn independent(self) -> bool {
        matches!(self, Variant::ClpfIndependent | Variant::LatentSde)
    }

    pub fn wiener_base(self) -> bool {
        matches!(self, Variant::ClpfWiener | Variant::Ctfp)
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Variant {
    type Err = ModelError;
    fn from_str(s: &str) -> Result<Self> {
        let norm = s.to_ascii_lowercase().replace('_', "-");
        Variant::ALL
            .into_iter()
            .find(|v| v.name() == norm)
            .ok_or_else(|| {
                ModelError::Config(format!(
                    "unknown variant `{s}` (expected one of clpf, clpf-global, clpf-independent, clpf-wiener, ctfp, latent-sde)"
                ))
            })
    }
}

fn default_flow_hidden() -> Vec<usize> {
    vec![8, 32, 32, 8]
}

/// Architecture and numerical settings. Serialised into checkpoints.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub variant: Variant,
    pub data_dim: usize,
    pub latent_dim: usize,
    pub context_dim: usize,
    pub encoder_hidden: usize,
    pub drift_hidden: Vec<usize>,
    pub diffusion_hidden: Vec<usize>,
    pub decoder_hidden: Vec<usize>,
    pub flow_kind: FlowKind,
    pub flow_blocks: usize,
    /// Hidden widths of each ANODE field or contractive affine core.
    #[serde(default = "default_flow_hidden")]
    pub flow_hidden: Vec<usize>,
    pub anode_steps: usize,
    /// Euler–Maruyama step for the latent SDEs.
    pub em_step: f64,
    /// Multiplier applied to times before they enter any network.
    pub time_scale: f64,
    /// Fixed affine normalisation of observations, `(x - shift) / scale`.
    pub obs_shift: Vec<f64>,
    pub obs_scale: Vec<f64>,
    /// Takes `ln x` before the affine normalisation. Observations must then
    /// be strictly positive.
    #[serde(default)]
    pub obs_log: bool,
    pub sigma_min: f64,
    pub u_clip: f64,
}

impl ModelConfig {
    pub fn new(variant: Variant, data_dim: usize, latent_dim: usize) -> Self {
        Self {
            variant,
            data_dim,
            latent_dim: if variant.has_latent() { latent_dim } else { 0 },
            context_dim: 16,
            encoder_hidden: 16,
            drift_hidden: vec![32, 32],
            diffusion_hidden: vec![16],
            decoder_hidden: vec![16, 64, 64, 16],
            flow_kind: FlowKind::Anode,
            flow_blocks: 5,
            flow_hidden: default_flow_hidden(),
            anode_steps: 16,
            em_step: 0.01,
            time_scale: 1.0,
            obs_shift: vec![0.0; data_dim],
            obs_scale: vec![1.0; data_dim],
            obs_log: false,
            sigma_min: 1e-3,
            u_clip: 20.0,
        }
    }

    /// Flow context: latent state and rescaled time, or time alone.
    pub fn flow_context_dim(&self) -> usize {
        self.latent_dim + 1
    }

    pub fn flow_spec(&self) -> FlowSpec {
        let (d, c) = (self.data_dim, self.flow_context_dim());
        match self.flow_kind {
            FlowKind::Anode => FlowSpec::Anode(AnodeSpec {
                blocks: self.flow_blocks,
                steps: self.anode_steps,
                hidden: self.flow_hidden.clone(),
                ..AnodeSpec::new(d, c)
            }),
            FlowKind::Affine => FlowSpec::Affine(AffineSpec {
                blocks: self.flow_blocks,
                core_hidden: self.flow_hidden.clone(),
                ..AffineSpec::new(d, c)
            }),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |s: String| Err(ModelError::Config(s));
        if self.data_dim == 0 {
            return bad("data dimension must be positive".into());
        }
        if self.variant.has_latent() && self.latent_dim == 0 {
            return bad(format!("variant {} needs a latent dimension >= 1", self.variant));
        }
        if !self.variant.has_latent() && self.latent_dim != 0 {
            return bad("the ctfp variant has no latent state".into());
        }
        if self.context_dim == 0 || self.encoder_hidden == 0 {
            return bad("context and encoder widths must be positive".into());
        }
        if !(self.em_step > 0.0) || !(self.time_scale > 0.0) || !(self.sigma_min > 0.0) || !(self.u_clip > 0.0) {
            return bad("em_step, time_scale, sigma_min and u_clip must be positive".into());
        }
        if self.obs_shift.len() != self.data_dim || self.obs_scale.len() != self.data_dim {
            return bad("observation normaliser must have one entry per data dimension".into());
        }
        if self.obs_scale.iter().any(|s| !(*s > 0.0)) || self.obs_shift.iter().any(|s| !s.is_finite()) {
            return bad("observation scales must be positive and shifts finite".into());
        }
        Ok(())
    }

    pub fn normalise(&self, x: &[f64]) -> Vec<f64> {
        x.iter()
            .zip(self.obs_shift.iter().zip(&self.obs_scale))
            .map(|(v, (s, k))| (if self.obs_log { v.ln() } else { *v } - s) / k)
            .collect()
    }

    pub fn denormalise(&self, y: &[f64]) -> Vec<f64> {
        y.iter()
            .zip(self.obs_shift.iter().zip(&self.obs_scale))
            .map(|(v, (s, k))| {
                let u = v * k + s;
                if self.obs_log {
                    u.exp()
                } else {
                    u
                }
            })
            .collect()
    }

    /// Log-Jacobian of the normaliser at `x`: `-Σ ln scale`, minus `Σ ln x`
    /// under the log transform.
    pub fn normaliser_logdet(&self, x: &[f64]) -> f64 {
        let affine = -self.obs_scale.iter().map(|s| s.ln()).sum::<f64>();
        if self.obs_log {
            affine - x.iter().map(|v| v.ln()).sum::<f64>()
        } else {
            affine
        }
    }

    /// Checks that `x` lies in the domain of the normaliser.
    pub fn check_observation(&self, x: &[f64]) -> Result<()> {
        if self.obs_log && x.iter().any(|v| !(*v > 0.0)) {
            return Err(ModelError::Data(format!("log-transformed observation {x:?} is not strictly positive")));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn variant_tags_round_trip() {
        for v in Variant::ALL {
            assert_eq!(v.name().parse::<Variant>().unwrap(), v);
            let json = serde_json::to_string(&v).unwrap();
            assert_eq!(json, format!("\"{}\"", v.name()));
        }
        assert_eq!("CLPF_Wiener".parse::<Variant>().unwrap(), Variant::ClpfWiener);
        assert!("vrnn".parse::<Variant>().is_err());
    }

    #[test]
    fn latent_sde_combines_global_and_independent() {
        assert!(Variant::LatentSde.global() && Variant::LatentSde.independent());
        assert!(!Variant::Ctfp.has_latent() && Variant::Ctfp.wiener_base());
    }

    #[test]
    fn validation() {
        assert!(ModelConfig::new(Variant::Clpf, 1, 2).validate().is_ok());
        assert!(ModelConfig::new(Variant::Clpf, 1, 0).validate().is_err());
        assert_eq!(ModelConfig::new(Variant::Ctfp, 1, 2).latent_dim, 0);
        let mut c = ModelConfig::new(Variant::Clpf, 2, 2);
        c.obs_scale = vec![1.0, 0.0];
        assert!(c.validate().is_err());
        c.obs_scale = vec![2.0, 4.0];
        assert!((c.normaliser_logdet(&[3.0, -1.0]) + 8f64.ln()).abs() < 1e-15);
        assert_eq!(c.denormalise(&c.normalise(&[3.0, -1.0])), vec![3.0, -1.0]);
    }

    #[test]
    fn log_normaliser_jacobian_matches_finite_differences() {
        let mut c = ModelConfig::new(Variant::Clpf, 2, 2);
        c.obs_log = true;
        c.obs_shift = vec![0.3, -1.0];
        c.obs_scale = vec![0.5, 2.0];
        let x = [2.5, 0.4];
        let back = c.denormalise(&c.normalise(&x));
        assert!(back.iter().zip(&x).all(|(a, b)| (a - b).abs() < 1e-12));
        // Diagonal map, so the log-determinant is a sum of log-derivatives.
        let h = 1e-6;
        let fd: f64 = (0..2)
            .map(|i| {
                let (mut up, mut dn) = (x, x);
                up[i] += h;
                dn[i] -= h;
                ((c.normalise(&up)[i] - c.normalise(&dn)[i]) / (2.0 * h)).ln()
            })
            .sum();
        assert!((c.normaliser_logdet(&x) - fd).abs() < 1e-8);
        assert!(c.check_observation(&[1.0, 0.0]).is_err());
        assert!(c.check_observation(&x).is_ok());
    }
}
