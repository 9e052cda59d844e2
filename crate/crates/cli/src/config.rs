//! The single declarative run configuration shared by every command.

use std::path::Path;

use serde::{Deserialize, Serialize};

use ecm_core::latent_codec::{CodecConfig, CodecTrainConfig};
use ecm_core::phantom_data::PhantomConfig;
use ecm_core::video_diffusion::{DiffusionConfig, DiffusionTrainConfig};

use crate::error::CliError;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SampleConfig {
    /// DDIM steps; 0 uses the model's configured count.
    pub steps: usize,
    pub seed: u64,
}

impl Default for SampleConfig {
    fn default() -> Self {
        Self { steps: 0, seed: 0 }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub data: PhantomConfig,
    pub codec: CodecConfig,
    pub codec_train: CodecTrainConfig,
    pub model: DiffusionConfig,
    pub train: DiffusionTrainConfig,
    pub sample: SampleConfig,
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self, CliError> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| CliError::Config(e.message().replace('\n', " ")))?;
        cfg.check()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        Self::from_toml(&text)
    }

    /// Canonical text used as the config echo.
    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("run config serializes")
    }

    /// Cross-section consistency: the model must match the data and codec.
    pub fn check(&self) -> Result<(), CliError> {
        let (d, c, m) = (&self.data, &self.codec, &self.model);
        if (m.height, m.width) != (d.height, d.width) {
            return Err(CliError::Config(format!("model frame {}x{} differs from data {}x{}", m.height, m.width, d.height, d.width)));
        }
        if m.downsample != c.downsample || m.latent_channels != c.latent_channels {
            return Err(CliError::Config("model downsample/latent_channels must match the codec".into()));
        }
        if m.categories != ecm_core::phantom_data::CATEGORY_NAMES.len() {
            return Err(CliError::Config(format!("the phantom generator produces {} categories", ecm_core::phantom_data::CATEGORY_NAMES.len())));
        }
        m.validate()?;
        Ok(())
    }
}
