//! READ with each recurrent cell on the same pretrained backbone.
//!
//! cargo run --release --example cell_ablation [-- SEEDS]

use read_pvla::adapters::CellKind;
use read_pvla::backbone::ModelConfig;
use read_pvla::data::generate_dataset;
use read_pvla::train::*;
use read_pvla::Result;

fn main() -> Result<()> {
    let seeds: u64 = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(2);
    let source = generate_dataset(&source_spec(0))?;
    let target = generate_dataset(&target_spec(0))?;
    let (backbone, _) = build_pretrained_backbone(&ModelConfig::default(), &source, &PretrainConfig::default())?;

    for cell in CellKind::ALL {
        let strategy = FinetuneStrategy {
            cell,
            ..FinetuneStrategy::of(StrategyKind::Read)
        };
        let mut maps = Vec::new();
        let mut trainable = 0;
        for seed in 0..seeds {
            let mut model = backbone.clone();
            strategy.prepare(&mut model, seed)?;
            let cfg = TrainConfig {
                seed,
                ..TrainConfig::default()
            };
            let r = train_finetune(&mut model, &strategy, &target, &cfg, None)?;
            trainable = masked_numel(&model, &r.mask);
            maps.push(r.final_val_map);
        }
        let mean = maps.iter().sum::<f64>() / maps.len() as f64;
        println!("{cell:<5} {trainable:>6} trainable, mean val mAP {mean:.4}");
    }
    Ok(())
}
