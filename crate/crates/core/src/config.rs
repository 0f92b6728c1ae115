//! Run configuration shared by the command line and the examples.
//!
//! Resolution order, lowest to highest: built-in defaults (with
//! `READ_PVLA_SEED` supplying the default seed), a JSON config file, a
//! named preset, explicit flags.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::backbone::ModelConfig;
use crate::data::DatasetSpec;
use crate::error::{Error, Result};
use crate::pot::SolverConfig;
use crate::train::{preset, source_spec, target_spec, FinetuneStrategy, PretrainConfig, TrainConfig};

pub const SEED_ENV: &str = "READ_PVLA_SEED";
pub const RESOLVED_CONFIG: &str = "resolved-config.json";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub seed: u64,
    /// Consecutive seeds a fine-tuning command runs, starting at `seed`.
    pub seeds: usize,
    /// Downstream task data.
    pub data: DatasetSpec,
    /// Data the stand-in backbone is pretrained on.
    pub source: DatasetSpec,
    pub model: ModelConfig,
    pub pretrain: PretrainConfig,
    pub train: TrainConfig,
    pub strategy: FinetuneStrategy,
    /// Standalone solver settings for `ot-solve`.
    pub solver: SolverConfig,
    pub data_dir: Option<PathBuf>,
    pub backbone_dir: Option<PathBuf>,
    /// Preset already folded into `model` and `train`; informational.
    pub applied_preset: Option<String>,
}

/// Seed from the environment, if set and well-formed.
pub fn env_seed() -> Result<Option<u64>> {
    match std::env::var(SEED_ENV) {
        Ok(v) => v
            .trim()
            .parse()
            .map(Some)
            .map_err(|_| Error::Config(format!("{SEED_ENV}={v:?} is not an unsigned integer"))),
        Err(_) => Ok(None),
    }
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: env_seed().ok().flatten().unwrap_or(0),
            seeds: 1,
            data: target_spec(0),
            source: source_spec(0),
            model: ModelConfig::default(),
            pretrain: PretrainConfig::default(),
            train: TrainConfig::default(),
            strategy: FinetuneStrategy::default(),
            solver: SolverConfig::default(),
            data_dir: None,
            backbone_dir: None,
            applied_preset: None,
        }
    }
}

impl RunConfig {
    /// Defaults overlaid with `path`, when given. Fields missing from the
    /// file keep their defaults.
    pub fn load(path: Option<&Path>) -> Result<Self> {
        env_seed()?;
        match path {
            None => Ok(Self::default()),
            Some(p) => {
                let text = fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
                serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", p.display())))
            }
        }
    }

    /// Applies `train.preset` if one is named, then clears it so a
    /// resolved config replays without re-applying it over later flags.
    pub fn apply_preset(&mut self) -> Result<()> {
        if let Some(name) = self.train.preset.take() {
            preset(&name)?.apply(&mut self.model, &mut self.train);
            self.applied_preset = Some(name);
        }
        Ok(())
    }

    /// Final consistency pass: propagates the seed and validates.
    pub fn finalize(&mut self) -> Result<()> {
        self.train.seed = self.seed;
        if self.seeds == 0 {
            return Err(Error::Config("seeds must be >= 1".into()));
        }
        self.model.d_in_video = self.data.d_video;
        self.model.d_in_lang = self.data.d_lang;
        if self.source.d_video != self.data.d_video || self.source.d_lang != self.data.d_lang {
            return Err(Error::Config("source and task data must share feature widths".into()));
        }
        self.data.validate()?;
        self.source.validate()?;
        self.model.validate()?;
        self.train.validate()?;
        self.solver.validate()
    }

    pub fn write_resolved(&self, dir: &Path) -> Result<PathBuf> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let path = dir.join(RESOLVED_CONFIG);
        fs::write(&path, serde_json::to_string_pretty(self)?).map_err(|e| Error::io(&path, e))?;
        Ok(path)
    }
}
