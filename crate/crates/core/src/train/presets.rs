//! Named hyperparameter sets and the stand-in data worlds.

use serde::{Deserialize, Serialize};

use crate::backbone::ModelConfig;
use crate::data::DatasetSpec;
use crate::error::{Error, Result};

use super::trainer::TrainConfig;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Preset {
    pub name: &'static str,
    pub num_blocks: usize,
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
}

pub const PRESETS: [Preset; 5] = [
    Preset {
        name: "youtube-umt",
        num_blocks: 8,
        learning_rate: 1e-2,
        epochs: 100,
        batch_size: 4,
    },
    Preset {
        name: "tvsum-umt",
        num_blocks: 8,
        learning_rate: 1e-3,
        epochs: 500,
        batch_size: 1,
    },
    Preset {
        name: "qvh-mdetr",
        num_blocks: 8,
        learning_rate: 1e-4,
        epochs: 200,
        batch_size: 32,
    },
    Preset {
        name: "how2-vg",
        num_blocks: 6,
        learning_rate: 1e-3,
        epochs: 100,
        batch_size: 16,
    },
    // small enough for repeated multi-seed runs on one core
    Preset {
        name: "desk",
        num_blocks: 4,
        learning_rate: 1e-2,
        epochs: 40,
        batch_size: 4,
    },
];

pub fn preset(name: &str) -> Result<&'static Preset> {
    PRESETS.iter().find(|p| p.name == name).ok_or_else(|| {
        let known: Vec<&str> = PRESETS.iter().map(|p| p.name).collect();
        Error::Config(format!("unknown preset {name:?}; known: {}", known.join(", ")))
    })
}

impl Preset {
    pub fn apply(&self, model: &mut ModelConfig, train: &mut TrainConfig) {
        model.num_blocks = self.num_blocks;
        train.learning_rate = self.learning_rate;
        train.epochs = self.epochs;
        train.batch_size = self.batch_size;
    }
}

/// Large unshifted split the stand-in backbone is pretrained on.
pub fn source_spec(world_seed: u64) -> DatasetSpec {
    DatasetSpec {
        seed: 1000,
        world_seed,
        n_train: 400,
        n_val: 100,
        n_test: 20,
        ..DatasetSpec::default()
    }
}

/// Low-resource downstream task: same concepts, shifted renderings.
pub fn target_spec(world_seed: u64) -> DatasetSpec {
    DatasetSpec {
        seed: 2000,
        world_seed,
        noise_sigma: 1.0,
        domain_shift: 0.85,
        ..DatasetSpec::default()
    }
}
