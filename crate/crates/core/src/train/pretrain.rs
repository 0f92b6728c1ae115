//! Stand-in "pre-trained" backbone: full training on a synthetic source task.

use serde::{Deserialize, Serialize};

use crate::backbone::{Backbone, ModelConfig};
use crate::data::Dataset;
use crate::error::{Error, Result};

use super::strategy::{FinetuneStrategy, StrategyKind};
use super::trainer::{evaluate_map, train_finetune, PvlaMode, TrainConfig};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PretrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub seed: u64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            epochs: 6,
            batch_size: 8,
            learning_rate: 2e-3,
            weight_decay: 0.01,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PretrainReport {
    pub initial_map: f64,
    pub final_map: f64,
}

/// Randomly initializes a backbone, trains every parameter on the task
/// loss over `source.train`, and returns it fully frozen. Source mAP is
/// measured on `source.val` before and after.
pub fn build_pretrained_backbone(
    cfg: &ModelConfig,
    source: &Dataset,
    pc: &PretrainConfig,
) -> Result<(Backbone, PretrainReport)> {
    if source.train.is_empty() || source.val.is_empty() {
        return Err(Error::Contract("source dataset needs train and val samples".into()));
    }
    if cfg.d_in_video != source.spec.d_video || cfg.d_in_lang != source.spec.d_lang {
        return Err(Error::Config(format!(
            "model input widths ({}, {}) differ from data widths ({}, {})",
            cfg.d_in_video, cfg.d_in_lang, source.spec.d_video, source.spec.d_lang
        )));
    }
    let mut model = Backbone::new(cfg.clone(), pc.seed)?;
    let initial_map = evaluate_map(&model, &source.val)?;
    let train = TrainConfig {
        epochs: pc.epochs,
        batch_size: pc.batch_size,
        learning_rate: pc.learning_rate,
        weight_decay: pc.weight_decay,
        lambda_pvla: 0.0,
        pvla_mode: PvlaMode::Off,
        seed: pc.seed,
        ..TrainConfig::default()
    };
    let report = train_finetune(&mut model, &FinetuneStrategy::of(StrategyKind::Full), source, &train, None)?;
    model.freeze_backbone();
    Ok((
        model,
        PretrainReport {
            initial_map,
            final_map: report.final_val_map,
        },
    ))
}
