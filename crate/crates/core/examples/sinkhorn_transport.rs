//! Entropic optimal transport between two small point clouds, compared with
//! the exact assignment found by enumeration.
//!
//!     cargo run --release --example sinkhorn_transport

use fewshot_ot::otcore::{self, Epsilon, SinkhornConfig};
use fewshot_ot::selfcheck::exact_uniform_ot;
use ndarray::array;

fn main() -> fewshot_ot::Result<()> {
    let a = array![[0.0, 0.0], [1.0, 0.0], [0.0, 1.0], [1.0, 1.0]];
    let b = array![[2.0, 0.5], [0.3, 2.0], [1.5, 1.5], [-1.0, 0.2]];
    let cost = otcore::cost_matrix(a.view(), b.view())?;
    let exact = exact_uniform_ot(&cost);
    println!("exact optimum (4! matchings): {exact:.6}");

    for fraction in [0.5, 0.1, 0.01, 0.001] {
        let cfg = SinkhornConfig {
            epsilon: Epsilon::MedianFraction(fraction),
            max_iterations: 20_000,
            tolerance: 1e-9,
        };
        let (d, plan) = otcore::sinkhorn_with_cost(&cost, &cfg)?;
        println!(
            "eps = {fraction:<5} x median: distance {d:.6} ({:+.2}%), {} iterations, converged {}",
            100.0 * (d - exact) / exact,
            plan.iterations,
            plan.converged
        );
    }

    let (_, plan) = otcore::sinkhorn_with_cost(&cost, &SinkhornConfig::default())?;
    println!("\nplan at the default epsilon (rows sum to 1/4):");
    for row in plan.coupling.rows() {
        let cells: Vec<String> = row.iter().map(|v| format!("{v:.3}")).collect();
        println!("  {}", cells.join("  "));
    }
    let (ga, _) = otcore::sinkhorn_embedding_grads(a.view(), b.view(), &plan)?;
    println!("\nfixed-plan gradient with respect to the first cloud:\n{ga:.3}");
    Ok(())
}
