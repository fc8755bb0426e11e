//! Run configuration shared by every pipeline stage.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::codec::CodecConfig;
use crate::datagen::DatagenConfig;
use crate::error::{Error, Result};
use crate::fusion::FusionConfig;
use crate::lm::{LmConfig, PretrainConfig, Sampling};
use crate::lora::LoraConfig;
use crate::metrics::MetricsConfig;
use crate::trainer::TrainConfig;

/// Overrides `paths.work_dir`.
pub const WORK_DIR_ENV: &str = "STEMEDIT_WORK_DIR";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PathsConfig {
    pub work_dir: PathBuf,
}

impl Default for PathsConfig {
    fn default() -> Self {
        Self { work_dir: PathBuf::from("work") }
    }
}

impl PathsConfig {
    pub fn corpus_dir(&self) -> PathBuf {
        self.work_dir.join("corpus")
    }

    pub fn train_dir(&self) -> PathBuf {
        self.work_dir.join("triplets").join("train")
    }

    pub fn eval_dir(&self) -> PathBuf {
        self.work_dir.join("triplets").join("eval")
    }

    pub fn base_checkpoint(&self) -> PathBuf {
        self.work_dir.join("base.ckpt")
    }

    pub fn adapter_checkpoint(&self) -> PathBuf {
        self.work_dir.join("adapters.ckpt")
    }

    pub fn report_dir(&self) -> PathBuf {
        self.work_dir.join("report")
    }
}

/// Dataset sizes.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub n_tracks: usize,
    /// Tracks at the end of the corpus reserved for evaluation triplets.
    pub n_eval_tracks: usize,
    pub n_train_triplets: usize,
    pub n_eval_triplets: usize,
    /// Captioned mixture clips for base-model pretraining.
    pub n_pretrain_clips: usize,
    /// Clips the codec is fitted on.
    pub n_codec_clips: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            n_tracks: 48,
            n_eval_tracks: 8,
            n_train_triplets: 600,
            n_eval_triplets: 60,
            n_pretrain_clips: 400,
            n_codec_clips: 200,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub paths: PathsConfig,
    pub data: DataConfig,
    pub datagen: DatagenConfig,
    pub codec: CodecConfig,
    pub model: LmConfig,
    pub pretrain: PretrainConfig,
    pub fusion: FusionConfig,
    pub lora: LoraConfig,
    pub trainer: TrainConfig,
    pub sampling: Sampling,
    pub metrics: MetricsConfig,
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::config(e.to_string()))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    /// Defaults, then `path` if given, then the work-directory environment
    /// override. The result is validated.
    pub fn load(path: Option<&Path>) -> Result<Self> {
        let mut cfg = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
                Self::from_toml(&text).map_err(|e| Error::config(format!("{}: {e}", p.display())))?
            }
            None => Self::default(),
        };
        if let Some(dir) = std::env::var_os(WORK_DIR_ENV) {
            cfg.paths.work_dir = PathBuf::from(dir);
        }
        cfg.validate()?;
        Ok(cfg)
    }

    /// Small configuration that trains end to end in minutes.
    pub fn toy() -> Self {
        Self::from_toml(include_str!("../../../configs/toy.toml")).expect("bundled toy config parses")
    }

    pub fn validate(&self) -> Result<()> {
        self.datagen.validate()?;
        self.codec.validate()?;
        self.model.validate()?;
        self.fusion.validate()?;
        self.lora.validate()?;
        self.trainer.validate()?;
        let (c, m, d) = (&self.codec, &self.model, &self.datagen);
        if c.n_codebooks != m.n_codebooks || c.codebook_size != m.codebook_size {
            return Err(Error::config("codec and model disagree on codebook count or size"));
        }
        if c.sample_rate != d.sample_rate || c.frame_rate != d.frame_rate {
            return Err(Error::config("codec and datagen disagree on sample or frame rate"));
        }
        if d.clip_frames() > self.fusion.t_max {
            return Err(Error::config(format!(
                "clips of {} frames exceed fusion t_max {}",
                d.clip_frames(),
                self.fusion.t_max
            )));
        }
        if self.data.n_eval_tracks >= self.data.n_tracks {
            return Err(Error::config("n_eval_tracks must leave at least one training track"));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate_and_round_trip() {
        let cfg = RunConfig::default();
        cfg.validate().unwrap();
        assert_eq!(RunConfig::from_toml(&cfg.to_toml()).unwrap(), cfg);
    }

    #[test]
    fn toy_config_is_consistent() {
        let toy = RunConfig::toy();
        toy.validate().unwrap();
        assert_eq!(toy.codec.n_codebooks, toy.model.n_codebooks);
    }

    #[test]
    fn partial_files_keep_defaults_and_unknown_keys_fail() {
        let cfg = RunConfig::from_toml("seed = 7\n[trainer]\nlearning_rate = 0.001\n").unwrap();
        assert_eq!(cfg.seed, 7);
        assert_eq!(cfg.trainer.learning_rate, 0.001);
        assert_eq!(cfg.trainer.batch_size, TrainConfig::default().batch_size);
        assert!(matches!(RunConfig::from_toml("[trainer]\nlr = 1\n"), Err(Error::Config(_))));
        assert!(matches!(RunConfig::from_toml("[trainer]\nloss_mode = \"l1\"\n"), Err(Error::Config(_))));
    }

    #[test]
    fn inconsistent_codebooks_are_rejected() {
        let mut cfg = RunConfig::default();
        cfg.model.codebook_size = 32;
        assert!(matches!(cfg.validate(), Err(Error::Config(_))));
    }
}
