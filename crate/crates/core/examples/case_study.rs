//! Transport distance between a clip and its own query versus a query
//! about another concept, on noise-free pairs where only a few frames and
//! a few words carry the shared concept.
//!
//! cargo run --release --example case_study

use read_pvla::data::{generate_dataset, DatasetSpec};
use read_pvla::pot::{cosine_cost, pooled_distance, solve_mass_grid, PooledMetric, Pooling, SolverConfig};
use read_pvla::Result;

fn main() -> Result<()> {
    let spec = DatasetSpec {
        seed: 77,
        noise_sigma: 0.0,
        n_train: 1,
        n_val: 100,
        n_test: 1,
        ..DatasetSpec::default()
    };
    let pairs = generate_dataset(&spec)?.val;
    let solver = SolverConfig::default();

    let mut transport = (0, 0.0, 0.0);
    let mut pooled = (0, 0.0, 0.0);
    for (i, clip) in pairs.iter().enumerate() {
        // next clip whose query names a different concept
        let other = (1..pairs.len())
            .map(|o| &pairs[(i + o) % pairs.len()])
            .find(|s| s.concept != clip.concept)
            .expect("more than one concept");

        let m = solve_mass_grid(&cosine_cost(&clip.video, &clip.lang)?, &solver)?.loss;
        let x = solve_mass_grid(&cosine_cost(&clip.video, &other.lang)?, &solver)?.loss;
        transport = (transport.0 + usize::from(m < x), transport.1 + m, transport.2 + x);

        let m = pooled_distance(&clip.video, &clip.lang, Pooling::Avg, PooledMetric::Cosine)?;
        let x = pooled_distance(&clip.video, &other.lang, Pooling::Avg, PooledMetric::Cosine)?;
        pooled = (pooled.0 + usize::from(m < x), pooled.1 + m, pooled.2 + x);
    }

    let n = pairs.len() as f64;
    println!("{:<22} {:>9} {:>11} {:>8}", "", "matched", "mismatched", "wins");
    for (name, (wins, m, x)) in [("partial transport", transport), ("mean-pooled cosine", pooled)] {
        println!("{name:<22} {:>9.4} {:>11.4} {:>4}/{}", m / n, x / n, wins, pairs.len());
    }
    Ok(())
}
