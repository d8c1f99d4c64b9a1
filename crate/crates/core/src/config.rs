//! Run configuration: defaults, overridden by a TOML file, overridden by flags.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{LmadError, Result};
use crate::eval::{EvalConfig, JudgeConfig};
use crate::model::ModelConfig;
use crate::scene::GenConfig;
use crate::training::TrainConfig;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DataConfig {
    pub scenes: usize,
    pub first_seed: u64,
    /// Fraction of records in the train split.
    pub split: f64,
    /// Split scored by evaluation.
    pub eval_split: SplitName,
    pub gen: GenConfig,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self { scenes: 100, first_seed: 0, split: 0.8, eval_split: SplitName::Val, gen: GenConfig::default() }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SplitName {
    Train,
    #[default]
    Val,
}

impl SplitName {
    pub fn file_name(self) -> &'static str {
        match self {
            Self::Train => "train.jsonl",
            Self::Val => "val.jsonl",
        }
    }
}

impl std::str::FromStr for SplitName {
    type Err = LmadError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Self::Train),
            "val" => Ok(Self::Val),
            other => Err(LmadError::Config(format!("unknown split {other:?}, expected train or val"))),
        }
    }
}

/// Locations of inputs and outputs; unset paths are required by the
/// commands that read them.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PathsConfig {
    pub dataset: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
    /// Exact run directory instead of a timestamped one under `out_dir`.
    pub run_dir: Option<PathBuf>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct InferConfig {
    pub scene_seed: u64,
    /// Print prefix token counts.
    pub dump_tokens: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub seed: u64,
    /// Parent of the timestamped run directories.
    pub out_dir: PathBuf,
    pub paths: PathsConfig,
    pub data: DataConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
    pub judge: JudgeConfig,
    pub infer: InferConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            out_dir: PathBuf::from("runs"),
            paths: PathsConfig::default(),
            data: DataConfig::default(),
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            eval: EvalConfig::default(),
            judge: JudgeConfig::default(),
            infer: InferConfig::default(),
        }
    }
}

pub const EFFECTIVE_CONFIG_FILE: &str = "config.toml";

impl RunConfig {
    pub fn from_toml_str(s: &str) -> Result<Self> {
        Ok(toml::from_str(s)?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let s = std::fs::read_to_string(path).map_err(|e| LmadError::io(path, e))?;
        Self::from_toml_str(&s)
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| LmadError::Config(format!("cannot serialize config: {e}")))
    }

    /// Writes the effective configuration into `dir`.
    pub fn dump(&self, dir: &Path) -> Result<PathBuf> {
        let path = dir.join(EFFECTIVE_CONFIG_FILE);
        std::fs::write(&path, self.to_toml_string()?).map_err(|e| LmadError::io(&path, e))?;
        Ok(path)
    }

    /// Copies the top-level seed into every component seed.
    pub fn propagate_seed(&mut self) {
        self.model.seed = self.seed;
        self.train.seed = self.seed;
    }

    pub fn validate(&self) -> Result<()> {
        self.data.gen.validate()?;
        if !(0.0..=1.0).contains(&self.data.split) {
            return Err(LmadError::Config(format!("split {} outside [0, 1]", self.data.split)));
        }
        self.model.validate()?;
        self.train.validate()?;
        if self.model.encoder.num_cameras != self.data.gen.num_cameras {
            return Err(LmadError::Config("encoder camera count differs from the rig".into()));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::training::Strategy;

    #[test]
    fn defaults_round_trip_and_partial_files_fill_in() {
        let c = RunConfig::default();
        let back = RunConfig::from_toml_str(&c.to_toml_string().unwrap()).unwrap();
        assert_eq!(back, c);
        let partial = RunConfig::from_toml_str("seed = 7\n[train]\nstrategy = \"joint\"\nlambda = 0.5\n").unwrap();
        assert_eq!(partial.seed, 7);
        assert_eq!(partial.train.strategy, Strategy::Joint);
        assert_eq!(partial.train.lambda, Some(0.5));
        assert_eq!(partial.model, ModelConfig::default());
        assert!(RunConfig::from_toml_str("seed = \"x\"").is_err());
    }
}
