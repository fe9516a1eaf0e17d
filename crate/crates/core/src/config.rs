//! Experiment configuration files.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::dataset::{DatasetSpec, FrameDtype, SplitCounts};
use crate::error::{ConfigError, IoContext};
use crate::grid::GridSpec;
use crate::models::ModelSpec;
use crate::scene::SceneConfig;
use crate::train::TrainConfig;

/// Names every experiment config must define.
pub const MODEL_NAMES: [&str; 9] = [
    "fcd_b", "fcd_s", "rfcd_ff", "rfcd_res", "rfcd_ed1", "rfcd_ed2", "rm_gf", "tm_3d", "tm_st",
];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Profile {
    Full,
    Tiny,
}

impl FromStr for Profile {
    type Err = ConfigError;

    fn from_str(s: &str) -> Result<Self, ConfigError> {
        match s {
            "full" => Ok(Profile::Full),
            "tiny" => Ok(Profile::Tiny),
            _ => Err(ConfigError::Invalid(format!("unknown profile `{s}` (expected full or tiny)"))),
        }
    }
}

impl fmt::Display for Profile {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Profile::Full => "full",
            Profile::Tiny => "tiny",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetSection {
    /// Where `generate-data` writes and the other commands read.
    pub dir: PathBuf,
    pub splits: SplitCounts,
    #[serde(default)]
    pub frame_dtype: FrameDtype,
    pub shard_size: usize,
    #[serde(default = "default_workers")]
    pub workers: usize,
}

fn default_workers() -> usize {
    1
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridSection {
    /// Entry of `models` the axes vary.
    pub model: String,
    #[serde(default)]
    pub layers_per_db: Vec<usize>,
    #[serde(default)]
    pub growth: Vec<usize>,
    #[serde(default)]
    pub first_conv_features: Vec<usize>,
    #[serde(default)]
    pub learning_rate: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub scene: SceneConfig,
    pub dataset: DatasetSection,
    pub models: BTreeMap<String, ModelSpec>,
    pub train: TrainConfig,
    pub grid: Option<GridSection>,
}

/// Reduced widths for desk-scale runs: (layers per block, growth, first conv).
fn tiny_widths(name: &str) -> (usize, usize, usize) {
    match name {
        "fcd_b" => (4, 6, 16),
        "tm_3d" => (3, 4, 20),
        "tm_st" => (3, 6, 24),
        _ => (3, 4, 12),
    }
}

impl ExperimentConfig {
    pub fn profile(profile: Profile) -> Self {
        let mut models = BTreeMap::new();
        for name in MODEL_NAMES {
            let mut spec = ModelSpec::named(name).expect("built-in model name");
            if profile == Profile::Tiny {
                let (l, k, m) = tiny_widths(name);
                spec.layers_per_db = l;
                spec.growth = k;
                spec.first_conv_features = m;
            }
            models.insert(name.to_string(), spec);
        }
        let (dir, splits, frame_dtype, shard_size, train) = match profile {
            Profile::Full => ("data/full", SplitCounts::default(), FrameDtype::U8, 1000, TrainConfig::default()),
            Profile::Tiny => (
                "data/tiny",
                SplitCounts {
                    train: 500,
                    val: 100,
                    test: 100,
                    clean_test: 100,
                },
                FrameDtype::F32,
                500,
                // same epoch budget for every model, so runs compare fairly
                // and do not depend on machine speed
                TrainConfig {
                    max_epochs: 12,
                    patience: 12,
                    ..TrainConfig::default()
                },
            ),
        };
        let grid = GridSection {
            model: "fcd_s".into(),
            layers_per_db: match profile {
                Profile::Full => vec![5, 7, 9],
                Profile::Tiny => vec![2, 3],
            },
            growth: match profile {
                Profile::Full => vec![8, 12],
                Profile::Tiny => vec![4],
            },
            first_conv_features: vec![],
            learning_rate: vec![],
        };
        Self {
            scene: SceneConfig::default(),
            dataset: DatasetSection {
                dir: dir.into(),
                splits,
                frame_dtype,
                shard_size,
                workers: 1,
            },
            models,
            train,
            grid: Some(grid),
        }
    }

    pub fn parse(text: &str, origin: &Path) -> Result<Self, ConfigError> {
        let cfg: Self = toml::from_str(text).map_err(|e| ConfigError::Parse {
            path: origin.to_path_buf(),
            message: e.to_string(),
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        Self::parse(&fs::read_to_string(path).at(path)?, path)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes to TOML")
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let invalid = |m: String| ConfigError::Invalid(m);
        for name in MODEL_NAMES {
            if !self.models.contains_key(name) {
                return Err(invalid(format!("models.{name} is missing")));
            }
        }
        for (name, spec) in &self.models {
            spec.validate().map_err(|e| invalid(format!("models.{name}: {e}")))?;
            if spec.sequence_length != self.scene.sequence_length {
                return Err(invalid(format!(
                    "models.{name} expects {} frames but scenes have {}",
                    spec.sequence_length, self.scene.sequence_length
                )));
            }
        }
        self.scene.validate().map_err(|e| invalid(e.to_string()))?;
        self.train.validate().map_err(|e| invalid(e.to_string()))?;
        if self.dataset.shard_size == 0 || self.dataset.workers == 0 {
            return Err(invalid("dataset shard_size and workers must be at least 1".into()));
        }
        if let Some(g) = &self.grid {
            if !self.models.contains_key(&g.model) {
                return Err(invalid(format!("grid.model `{}` is not defined", g.model)));
            }
        }
        Ok(())
    }

    pub fn model(&self, name: &str) -> Result<&ModelSpec, ConfigError> {
        self.models.get(name).ok_or_else(|| {
            let known: Vec<&str> = self.models.keys().map(String::as_str).collect();
            ConfigError::Invalid(format!("unknown model `{name}` (known: {})", known.join(", ")))
        })
    }

    pub fn dataset_spec(&self, glyph_source: &str) -> DatasetSpec {
        DatasetSpec {
            scene: self.scene.clone(),
            splits: self.dataset.splits,
            frame_dtype: self.dataset.frame_dtype,
            shard_size: self.dataset.shard_size,
            glyph_source: glyph_source.to_string(),
        }
    }

    pub fn grid_spec(&self) -> Result<GridSpec, ConfigError> {
        let g = self
            .grid
            .as_ref()
            .ok_or_else(|| ConfigError::Invalid("no [grid] section".into()))?;
        Ok(GridSpec {
            base: self.model(&g.model)?.clone(),
            layers_per_db: g.layers_per_db.clone(),
            growth: g.growth.clone(),
            first_conv_features: g.first_conv_features.clone(),
            learning_rate: g.learning_rate.clone(),
        })
    }

    /// SHA-256 of the canonical JSON form; equal configs hash equally however
    /// the TOML was laid out.
    pub fn hash(&self) -> String {
        let json = serde_json::to_vec(self).expect("config serializes to JSON");
        hex::encode(Sha256::digest(json))
    }
}

#[cfg(test)]
mod tests;
