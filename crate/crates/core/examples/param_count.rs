//! Trainable and total parameters of every fine-tuning strategy on the
//! default stand-in backbone.
//!
//! cargo run --example param_count

use read_pvla::backbone::ModelConfig;
use read_pvla::pipeline::param_count_table;
use read_pvla::train::FinetuneStrategy;
use read_pvla::Result;

fn main() -> Result<()> {
    let rows = param_count_table(&ModelConfig::default(), &FinetuneStrategy::default())?;
    println!("{:<10} {:>10} {:>10} {:>9}", "strategy", "trainable", "total", "fraction");
    for r in rows {
        println!("{:<10} {:>10} {:>10} {:>8.2}%", r.strategy.name(), r.trainable, r.total, 100.0 * r.fraction());
    }
    Ok(())
}
