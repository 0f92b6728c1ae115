//! Saves only the adapter weights of a fine-tuned model, restores them
//! onto a fresh copy of the frozen backbone, and compares outputs.
//!
//! cargo run --release --example checkpoint_roundtrip

use read_pvla::backbone::ModelConfig;
use read_pvla::data::generate_dataset;
use read_pvla::pipeline::save_backbone;
use read_pvla::train::*;
use read_pvla::Result;

fn main() -> Result<()> {
    let data = generate_dataset(&target_spec(0))?;
    let mut backbone = read_pvla::backbone::Backbone::new(ModelConfig::default(), 0)?;
    backbone.freeze_backbone();

    let strategy = FinetuneStrategy::of(StrategyKind::Read);
    let mut tuned = backbone.clone();
    strategy.prepare(&mut tuned, 0)?;
    let cfg = TrainConfig {
        epochs: 3,
        ..TrainConfig::default()
    };
    let report = train_finetune(&mut tuned, &strategy, &data, &cfg, None)?;

    let dir = tempfile_dir("read-pvla-ckpt");
    save_checkpoint(&tuned, &strategy, &report.mask, &dir.join("adapter"))?;
    save_backbone(&tuned, &dir.join("full"))?;

    let mut restored = backbone.clone();
    strategy.prepare(&mut restored, 99)?;
    load_checkpoint(&mut restored, &dir.join("adapter"))?;

    let s = &data.val[0];
    let same = tuned.forward(&s.video, &s.lang)? == restored.forward(&s.video, &s.lang)?;
    let (small, full) = (checkpoint_bytes(&dir.join("adapter"))?, checkpoint_bytes(&dir.join("full"))?);
    println!("outputs identical after reload: {same}");
    println!("adapter checkpoint {small} bytes, full {full} bytes ({:.2}%)", 100.0 * small as f64 / full as f64);
    Ok(())
}

fn tempfile_dir(name: &str) -> std::path::PathBuf {
    let dir = std::env::temp_dir().join(name);
    let _ = std::fs::remove_dir_all(&dir);
    dir
}
