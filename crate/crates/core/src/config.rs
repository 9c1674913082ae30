//! Run configuration: one TOML file with a section per component.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::GeneratorSpec;
use crate::error::{Error, Result};
use crate::losses::AngleBinSpec;
use crate::model::EncoderConfig;
use crate::training::TrainConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SplitConfig {
    pub train_fraction: f64,
}

impl Default for SplitConfig {
    fn default() -> Self {
        SplitConfig { train_fraction: 0.8 }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub generator: GeneratorSpec,
    pub encoder: EncoderConfig,
    pub bins: AngleBinSpec,
    pub train: TrainConfig,
    pub split: SplitConfig,
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// Sets every seed (data, split, initialization, shuffling, k-means).
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.generator.seed = seed;
        self.train.seed = seed;
        self.train.cluster.seed = seed;
        self
    }

    pub fn validate(&self) -> Result<()> {
        self.generator.validate()?;
        self.encoder.validate()?;
        self.bins.validate()?;
        self.train.validate()?;
        if self.encoder.input_dim != self.generator.input_dim {
            return Err(Error::Config(format!(
                "encoder.input_dim = {} but generator.input_dim = {}",
                self.encoder.input_dim, self.generator.input_dim
            )));
        }
        let f = self.split.train_fraction;
        if !(f > 0.0 && f < 1.0) {
            return Err(Error::Config(format!(
                "split.train_fraction must lie in (0, 1), got {f}"
            )));
        }
        Ok(())
    }
}
