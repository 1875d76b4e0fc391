//! Run configuration: a strict TOML document whose defaults are the paper
//! recipe. Unknown keys are rejected; parse(serialize(c)) == c.

use std::path::{Path, PathBuf};

use crate::field::{ChannelVocabulary, FieldError, PatchSize};
use crate::model::{ModelConfig, ModelPreset, PredTarget};
use crate::sampler::SampleConfig;
use crate::train::TrainConfig;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("config parse error: {0}")]
    Parse(String),
    #[error("invalid config: {0}")]
    Invalid(String),
    #[error(transparent)]
    Field(#[from] FieldError),
}

/// Environment variable overriding the output directory (the only
/// environment override).
pub const OUT_DIR_ENV: &str = "PDEFLOW_OUT";

#[derive(Clone, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub preset: ModelPreset,
    /// (p_t, p_h, p_w, p_d)
    pub patch: [usize; 4],
    pub vocabulary: Vec<String>,
    pub history_len: usize,
    pub horizon: usize,
    pub prediction_target: PredTarget,
    pub time_embed_dim: usize,
    pub rope_base: f64,
    pub train: TrainConfig,
    pub sample: SampleConfig,
    pub datasets: Vec<PathBuf>,
    pub out_dir: PathBuf,
    pub seed: u64,
    pub deterministic: bool,
    pub threads: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            preset: ModelPreset::S,
            patch: [2, 8, 8, 8],
            vocabulary: ChannelVocabulary::default().names().to_vec(),
            history_len: 10,
            horizon: 10,
            prediction_target: PredTarget::X,
            time_embed_dim: 64,
            rope_base: 10000.0,
            train: TrainConfig::default(),
            sample: SampleConfig::default(),
            datasets: Vec::new(),
            out_dir: PathBuf::from("runs/out"),
            seed: 0,
            deterministic: false,
            threads: 1,
        }
    }
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| ConfigError::Parse(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path)?;
        Self::parse(&text)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.patch.contains(&0) {
            return Err(ConfigError::Invalid("patch extents must be >= 1".into()));
        }
        if self.history_len == 0 || self.horizon == 0 {
            return Err(ConfigError::Invalid("history_len and horizon must be >= 1".into()));
        }
        if !self.history_len.is_multiple_of(self.patch[0]) {
            return Err(ConfigError::Invalid(format!(
                "history_len {} must be divisible by the time patch extent {}",
                self.history_len, self.patch[0]
            )));
        }
        if self.vocabulary.is_empty() {
            return Err(ConfigError::Invalid("vocabulary must not be empty".into()));
        }
        if !(0.0..=1.0).contains(&self.train.p_t0) || !(0.0..=1.0).contains(&self.train.cond_dropout) {
            return Err(ConfigError::Invalid("probabilities must lie in [0,1]".into()));
        }
        if !(self.train.t_min > 0.0 && self.train.t_min < self.train.t_max && self.train.t_max <= 1.0) {
            return Err(ConfigError::Invalid("need 0 < t_min < t_max <= 1".into()));
        }
        if self.sample.steps == 0 {
            return Err(ConfigError::Invalid("sample.steps must be >= 1".into()));
        }
        if self.sample.cfg_scale < 0.0 {
            return Err(ConfigError::Invalid("sample.cfg_scale must be >= 0".into()));
        }
        Ok(())
    }

    pub fn model_config(&self) -> Result<ModelConfig, ConfigError> {
        let mut cfg = ModelConfig::preset(self.preset);
        cfg.patch = PatchSize::new(self.patch[0], self.patch[1], self.patch[2], self.patch[3])?;
        cfg.vocab = ChannelVocabulary::new(self.vocabulary.clone())?;
        cfg.history_len = self.history_len;
        cfg.horizon = self.horizon;
        cfg.prediction_target = self.prediction_target;
        cfg.time_embed_dim = self.time_embed_dim;
        cfg.rope_base = self.rope_base;
        Ok(cfg)
    }

    /// Effective thread count: deterministic mode pins execution to one.
    pub fn effective_threads(&self) -> usize {
        if self.deterministic {
            1
        } else {
            self.threads.max(1)
        }
    }
}

/// Reproducibility manifest written beside every run's outputs.
pub fn write_manifest(out_dir: &Path, config_toml: &str, seed: u64) -> Result<(), ConfigError> {
    std::fs::create_dir_all(out_dir)?;
    let manifest = format!(
        "config_crc32 = {:08x}\nseed = {}\npackage_version = \"{}\"\nschema_version = {}\n",
        crc32fast::hash(config_toml.as_bytes()),
        seed,
        env!("CARGO_PKG_VERSION"),
        crate::datagen::SCHEMA_VERSION,
    );
    std::fs::write(out_dir.join("manifest.txt"), manifest)?;
    std::fs::write(out_dir.join("config.toml"), config_toml)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_follow_the_training_recipe() {
        let c = RunConfig::default();
        assert_eq!(c.train.base_lr, 1e-4);
        assert_eq!(c.train.min_lr, 1e-6);
        assert_eq!(c.train.weight_decay, 1e-4);
        assert_eq!(c.train.warmup_frac, 0.05);
        assert_eq!(c.train.grad_clip_norm, 1.0);
        assert_eq!(c.train.p_mean, -0.8);
        assert_eq!(c.train.p_std, 0.8);
        assert_eq!(c.train.t_min, 1e-4);
        assert_eq!(c.train.t_max, 1.0);
        assert_eq!(c.train.p_t0, 0.1);
        assert_eq!(c.train.cond_dropout, 0.1);
        assert_eq!(c.train.batch_sizes, [16, 8, 4]);
        assert_eq!(c.train.dim_weights, [1.0, 1.0, 5.0]);
        assert_eq!(c.train.epochs, 200);
        assert_eq!(c.patch, [2, 8, 8, 8]);
        assert_eq!(c.history_len, 10);
        assert_eq!(c.horizon, 10);
        assert_eq!(c.sample.steps, 40);
        assert_eq!(c.sample.cfg_scale, 2.0);
        assert_eq!(c.prediction_target, PredTarget::X);
    }

    #[test]
    fn round_trip_identity() {
        let mut c = RunConfig::default();
        c.seed = 1234;
        c.preset = ModelPreset::Tiny;
        c.datasets = vec![PathBuf::from("data/a.pdt")];
        c.train.epochs = 3;
        let text = c.to_toml();
        let back = RunConfig::parse(&text).unwrap();
        assert_eq!(back, c);
    }

    #[test]
    fn unknown_keys_rejected() {
        let text = "mystery_knob = 3\n";
        match RunConfig::parse(text) {
            Err(ConfigError::Parse(msg)) => assert!(msg.contains("mystery_knob"), "{msg}"),
            other => panic!("expected parse error, got {other:?}"),
        }
        let nested = "[train]\nnot_a_field = 1.0\n";
        assert!(RunConfig::parse(nested).is_err());
    }

    #[test]
    fn invalid_values_rejected() {
        let mut c = RunConfig::default();
        c.history_len = 3; // not divisible by p_t = 2
        assert!(c.validate().is_err());
        let mut c = RunConfig::default();
        c.train.t_min = 0.0;
        assert!(c.validate().is_err());
    }
}
