//! Partial transport on a small cost matrix: the entropic solver against
//! the exact optimum at every candidate mass, then the grid search the
//! alignment loss uses.
//!
//! cargo run --example ot_solve

use read_pvla::pot::{exact_partial_ot, sinkhorn_partial, solve_mass_grid, CostMatrix, DiscreteDistribution, SolverConfig};
use read_pvla::Result;

fn main() -> Result<()> {
    let c = CostMatrix::from_rows(&[[1.0, 2.0], [3.0, 5.0]])?;
    let (a, b) = (DiscreteDistribution::uniform(2), DiscreteDistribution::uniform(2));
    let sharp = SolverConfig {
        tau: 0.005,
        ..SolverConfig::default()
    };

    println!("{:>6} {:>10} {:>10} {:>10}", "mass", "sinkhorn", "exact", "violation");
    for mass in [0.25, 0.5, 0.75, 1.0] {
        let plan = sinkhorn_partial(&c, &a, &b, mass, &sharp)?;
        let (_, exact) = exact_partial_ot(&c, &a, &b, mass)?;
        println!(
            "{mass:>6.2} {:>10.4} {:>10.4} {:>10.1e}",
            plan.cost(&c),
            exact,
            plan.max_violation(&a, &b)
        );
    }

    let best = solve_mass_grid(&c, &SolverConfig::default())?;
    println!("\ngrid search at tau 0.05: loss {:.4} at mass {}", best.loss, best.best_mass);
    for i in 0..best.plan.rows() {
        let row: Vec<String> = (0..best.plan.cols()).map(|j| format!("{:.4}", best.plan.at(i, j))).collect();
        println!("  [{}]", row.join(", "));
    }
    Ok(())
}
