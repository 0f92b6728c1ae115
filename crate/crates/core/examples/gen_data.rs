//! Generates the downstream grounding task, writes it to disk, reads it
//! back, and shows one sample.
//!
//! cargo run --example gen_data [-- OUT_DIR]

use std::path::PathBuf;

use read_pvla::data::{generate_dataset, load_dataset, mean_average_precision};
use read_pvla::train::target_spec;
use read_pvla::Result;

fn main() -> Result<()> {
    let out = std::env::args()
        .nth(1)
        .map(PathBuf::from)
        .unwrap_or_else(|| std::env::temp_dir().join("read-pvla-data"));
    let ds = generate_dataset(&target_spec(0))?;
    read_pvla::data::save_dataset(&ds, &out)?;
    let back = load_dataset(&out)?;
    println!("wrote {} and read it back ({} / {} / {} samples)", out.display(), back.train.len(), back.val.len(), back.test.len());

    let s = &back.train[0];
    let span: String = s.labels.iter().map(|&l| if l { '#' } else { '.' }).collect();
    let words: String = s.query_tokens.iter().map(|&q| if q { 'Q' } else { '-' }).collect();
    println!("sample 0: concept {}, {} frames [{span}], {} words [{words}]", s.concept, s.n_frames(), s.lang.rows());

    // a scorer that knows nothing ranks by frame index
    let scores: Vec<Vec<f64>> = back.val.iter().map(|s| (0..s.n_frames()).map(|i| -(i as f64)).collect()).collect();
    let chance = mean_average_precision(scores.iter().zip(&back.val).map(|(sc, s)| (sc.as_slice(), s.labels.as_slice())))?;
    println!("val mAP of a position-only scorer: {chance:.4}");
    Ok(())
}
