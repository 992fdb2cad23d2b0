//! TOML run configuration. Every section is optional and falls back to the
//! library defaults; command-line flags override individual fields.

use std::path::Path;

use corrnet::descriptor::RansacConfig;
use corrnet::detector::DetectorConfig;
use corrnet::evaluation::EvalConfig;
use corrnet::model::{Arch, EncoderConfig};
use corrnet::trainer::{DescriptorTrainConfig, TrainConfig};
use serde::{Deserialize, Serialize};

use crate::UsageError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    pub arch: Arch,
    pub description_size: usize,
}

impl Default for ModelSection {
    fn default() -> Self {
        Self {
            arch: Arch::Small,
            description_size: 128,
        }
    }
}

impl ModelSection {
    pub fn encoder(&self) -> EncoderConfig {
        match self.arch {
            Arch::Small => EncoderConfig::small(self.description_size),
            Arch::Large => EncoderConfig::large(self.description_size),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelSection,
    pub train: TrainConfig,
    pub descriptor: DescriptorTrainConfig,
    pub detector: DetectorConfig,
    pub eval: EvalConfig,
    pub ransac: RansacConfig,
}

impl RunConfig {
    /// Defaults when `path` is `None`; a missing or malformed file is a
    /// usage error.
    pub fn load(path: Option<&Path>) -> Result<Self, UsageError> {
        let Some(path) = path else {
            return Ok(Self::default());
        };
        let text = std::fs::read_to_string(path)
            .map_err(|e| UsageError(format!("cannot read config {}: {e}", path.display())))?;
        toml::from_str(&text).map_err(|e| UsageError(format!("invalid config {}: {e}", path.display())))
    }
}
