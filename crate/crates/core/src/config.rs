//! Run configuration: TOML file with nested sections, unknown keys rejected.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::diffusion::{make_schedule, DiffusionSchedule, GuidanceConfig, LossWeights};
use crate::error::{Error, Result};
use crate::evaluator::EvaluatorConfig;
use crate::model::ModelConfig;
use crate::optim::CosineSchedule;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DiffusionConfig {
    pub timesteps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
    /// Strided sampling steps; `0` runs every timestep.
    pub sampler_steps: usize,
    pub guidance_scale: f64,
}

impl Default for DiffusionConfig {
    fn default() -> Self {
        Self { timesteps: 1000, beta_start: 1e-4, beta_end: 0.02, sampler_steps: 50, guidance_scale: 1.8 }
    }
}

impl DiffusionConfig {
    pub fn schedule(&self) -> Result<DiffusionSchedule> {
        make_schedule(self.timesteps, self.beta_start, self.beta_end)
    }

    pub fn guidance(&self) -> Result<GuidanceConfig> {
        GuidanceConfig::new(self.guidance_scale)
    }

    pub fn sampler_steps(&self) -> Option<usize> {
        (self.sampler_steps > 0).then_some(self.sampler_steps)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub lr_initial: f64,
    pub lr_final: f64,
    pub lambda_distance: f64,
    pub cond_dropout: f64,
    pub grad_clip: f64,
    /// Write an intermediate checkpoint every this many steps; `0` disables.
    pub checkpoint_every: usize,
    pub log_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 20_000,
            batch_size: 8,
            lr_initial: 2e-4,
            lr_final: 2e-5,
            lambda_distance: 0.5,
            cond_dropout: 0.1,
            grad_clip: 1.0,
            checkpoint_every: 0,
            log_every: 100,
        }
    }
}

impl TrainConfig {
    pub fn lr_schedule(&self) -> Result<CosineSchedule> {
        CosineSchedule::new(self.lr_initial, self.lr_final, self.steps)
    }

    pub fn loss_weights(&self) -> Result<LossWeights> {
        LossWeights::new(self.lambda_distance)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MetricsConfig {
    pub diversity_pairs: usize,
    pub multimodality_pairs: usize,
    /// Generations per prompt for multimodality.
    pub multimodality_samples: usize,
    /// Prompts regenerated for multimodality (the first ones of the dataset).
    pub multimodality_prompts: usize,
    pub retrieval_pool: usize,
}

impl Default for MetricsConfig {
    fn default() -> Self {
        Self { diversity_pairs: 300, multimodality_pairs: 100, multimodality_samples: 2, multimodality_prompts: 10, retrieval_pool: 32 }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub model: ModelConfig,
    pub diffusion: DiffusionConfig,
    pub train: TrainConfig,
    pub evaluator: EvaluatorConfig,
    pub metrics: MetricsConfig,
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml(&fs::read_to_string(path)?)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// Hex SHA-256 of the canonical TOML rendering. The seed is left out:
    /// it is reported on its own, and reseeding does not change what a
    /// checkpoint is compatible with.
    pub fn fingerprint(&self) -> String {
        let unseeded = Self { seed: 0, ..self.clone() };
        let digest = Sha256::digest(unseeded.to_toml().as_bytes());
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.diffusion.schedule().map_err(to_config)?;
        self.diffusion.guidance().map_err(to_config)?;
        if self.diffusion.sampler_steps > self.diffusion.timesteps {
            return Err(Error::Config("diffusion.sampler_steps exceeds timesteps".into()));
        }
        let t = &self.train;
        t.lr_schedule()?;
        t.loss_weights().map_err(to_config)?;
        if t.batch_size == 0 {
            return Err(Error::Config("train.batch_size must be positive".into()));
        }
        if !(0.0..=1.0).contains(&t.cond_dropout) {
            return Err(Error::Config("train.cond_dropout must lie in [0, 1]".into()));
        }
        if !(t.grad_clip > 0.0) {
            return Err(Error::Config("train.grad_clip must be positive".into()));
        }
        self.evaluator.validate()?;
        if self.evaluator.text_width == 0 {
            return Err(Error::Config("evaluator.text_width must be positive".into()));
        }
        let m = &self.metrics;
        if m.diversity_pairs == 0 || m.multimodality_pairs == 0 || m.multimodality_prompts == 0 || m.retrieval_pool == 0 || m.multimodality_samples < 2 {
            return Err(Error::Config("metrics counts must be positive (multimodality_samples >= 2)".into()));
        }
        Ok(())
    }
}

fn to_config(e: Error) -> Error {
    match e {
        Error::InvalidArgument(m) => Error::Config(m),
        other => other,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_round_trips_and_validates() {
        let cfg = RunConfig::default();
        cfg.validate().unwrap();
        let back = RunConfig::from_toml(&cfg.to_toml()).unwrap();
        assert_eq!(back, cfg);
        assert_eq!(back.fingerprint(), cfg.fingerprint());
    }

    #[test]
    fn unknown_keys_rejected() {
        let err = RunConfig::from_toml("seed = 1\n[model]\nlatent_dimm = 3\n").unwrap_err();
        assert!(matches!(err, Error::Config(_)), "{err:?}");
        assert!(RunConfig::from_toml("sede = 1\n").is_err());
    }

    #[test]
    fn partial_files_fill_defaults() {
        let cfg = RunConfig::from_toml("seed = 9\n[train]\nsteps = 10\n").unwrap();
        assert_eq!(cfg.seed, 9);
        assert_eq!(cfg.train.steps, 10);
        assert_eq!(cfg.train.batch_size, 8);
        assert_ne!(cfg.fingerprint(), RunConfig::default().fingerprint());
    }

    #[test]
    fn fingerprint_ignores_seed() {
        let a = RunConfig { seed: 1, ..RunConfig::default() };
        let b = RunConfig { seed: 2, ..RunConfig::default() };
        assert_eq!(a.fingerprint(), b.fingerprint());
    }

    #[test]
    fn invalid_values_rejected() {
        assert!(RunConfig::from_toml("[diffusion]\nguidance_scale = -1.0\n").is_err());
        assert!(RunConfig::from_toml("[train]\nlr_final = 1.0\n").is_err());
        assert!(RunConfig::from_toml("[model]\nsegments = 100\n").is_err());
    }
}
