//! Pretrains the stand-in backbone on the source task, then adapts it to
//! the shifted low-resource target with READ, with and without the
//! alignment loss.
//!
//! cargo run --release --example pretrain_and_finetune [-- SEEDS]

use read_pvla::backbone::ModelConfig;
use read_pvla::data::generate_dataset;
use read_pvla::train::*;
use read_pvla::Result;

fn main() -> Result<()> {
    let seeds: u64 = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(2);
    let source = generate_dataset(&source_spec(0))?;
    let target = generate_dataset(&target_spec(0))?;
    let (backbone, pre) = build_pretrained_backbone(&ModelConfig::default(), &source, &PretrainConfig::default())?;
    println!("source val mAP {:.4} -> {:.4} after pretraining", pre.initial_map, pre.final_map);
    println!("frozen backbone on target val: {:.4}", evaluate_map(&backbone, &target.val)?);

    for mode in [PvlaMode::Pvla, PvlaMode::Off] {
        let mut maps = Vec::new();
        for seed in 0..seeds {
            let strategy = FinetuneStrategy::of(StrategyKind::Read);
            let mut model = backbone.clone();
            strategy.prepare(&mut model, seed)?;
            let cfg = TrainConfig {
                seed,
                pvla_mode: mode,
                ..TrainConfig::default()
            };
            maps.push(train_finetune(&mut model, &strategy, &target, &cfg, None)?.final_val_map);
        }
        let mean = maps.iter().sum::<f64>() / maps.len() as f64;
        println!("READ, alignment {mode}: mean val mAP {mean:.4} over {seeds} seeds");
    }
    Ok(())
}
