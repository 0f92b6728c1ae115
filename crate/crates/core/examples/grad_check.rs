//! Central-difference check of every trainable gradient of the full
//! objective (task loss plus alignment loss) on a tiny READ model.
//!
//! cargo run --example grad_check

use read_pvla::pipeline::grad_check_suite;
use read_pvla::Result;

fn main() -> Result<()> {
    for seed in 0..3 {
        let r = grad_check_suite(seed)?;
        println!(
            "seed {seed}: {} coordinates, max relative error {:.2e} at {}[{}]",
            r.checked, r.max_rel_error, r.worst.0, r.worst.1
        );
    }
    Ok(())
}
