//! Experiment configuration file (TOML) and the content hashes stamped
//! into every artifact.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::eval::EvalConfig;
use crate::fusion::FusionConfig;
use crate::trainer::{RunMode, TrainConfig};
use crate::world::{GenConfig, GridConfig, SensorConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub run_id: String,
    /// Dataset seed: sample `i` of a generated dataset depends on `(seed, i)`.
    pub seed: u64,
    pub num_samples: usize,
    pub world: GenConfig,
    pub sensor: SensorConfig,
    pub grid: GridConfig,
    pub fusion: FusionConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            run_id: "run".into(),
            seed: 0,
            num_samples: 64,
            world: GenConfig::default(),
            sensor: SensorConfig::default(),
            grid: GridConfig::default(),
            fusion: FusionConfig::default(),
            train: TrainConfig::default(),
            eval: EvalConfig::default(),
        }
    }
}

/// First 8 bytes (little-endian) of the SHA-256 of `value`'s JSON form.
pub fn content_hash<S: Serialize>(value: &S) -> u64 {
    let json = serde_json::to_vec(value).expect("config types serialize");
    let digest = Sha256::digest(&json);
    u64::from_le_bytes(digest[..8].try_into().expect("digest is 32 bytes"))
}

pub fn format_hash(h: u64) -> String {
    format!("{h:016x}")
}

impl ExperimentConfig {
    pub fn from_toml_str(s: &str) -> Result<Self> {
        let cfg: ExperimentConfig = toml::from_str(s).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&text)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("config types serialize")
    }

    pub fn validate(&self) -> Result<()> {
        self.grid.validate()?;
        self.fusion.validate(self.grid.channels)?;
        self.train.validate()?;
        self.eval.validate()?;
        if self.run_id.is_empty() || self.run_id.contains(['/', '\\']) {
            return Err(Error::Config(format!(
                "run_id {:?} is not a plain file stem",
                self.run_id
            )));
        }
        Ok(())
    }

    /// Covers everything that shapes the generated data except the seed.
    pub fn data_hash(&self) -> u64 {
        content_hash(&(&self.world, &self.sensor, &self.grid))
    }

    /// Covers everything that shapes the parameter set of a checkpoint.
    pub fn model_hash(&self) -> u64 {
        let fusion = match self.train.mode {
            RunMode::SingleBranch => Some(&self.fusion),
            RunMode::Baseline => None,
        };
        content_hash(&(&self.grid, self.world.num_classes, fusion, self.train.mode))
    }

    pub fn full_hash(&self) -> u64 {
        content_hash(self)
    }

    /// Extent of the BEV region, shared by world and grid.
    pub fn extent_m(&self) -> f32 {
        self.grid.extent_m()
    }
}
