//! Fine-tuning: strategies, optimizer, training loop, checkpoints.

pub mod adamw;
pub mod checkpoint;
pub mod presets;
pub mod pretrain;
pub mod strategy;
pub mod trainer;

pub use adamw::{adamw_step, AdamHyper, AdamState};
pub use checkpoint::{checkpoint_bytes, load_checkpoint, read_manifest, save_checkpoint, Manifest};
pub use presets::{preset, source_spec, target_spec, Preset, PRESETS};
pub use pretrain::{build_pretrained_backbone, PretrainConfig, PretrainReport};
pub use strategy::{masked_numel, select_trainable, FinetuneStrategy, StrategyKind};
pub use trainer::{
    batch_objective, evaluate_map, evaluate_task_loss, gradient_check, train_finetune, EpochMetrics,
    GradCheckReport, PvlaMode, TrainConfig, TrainReport,
};
