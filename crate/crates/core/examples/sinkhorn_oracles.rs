//! Entropic transport on a random square problem, approaching the optimal
//! assignment as ε shrinks, with the free-marginal lower bound alongside.
//!
//! cargo run --release --example sinkhorn_oracles

use cloth::numerics::SeededStream;
use cloth::ot::{
    hungarian, row_argmin_plan, sinkhorn, transport_cost, CostMatrix, Marginals, SinkhornOptions,
};

fn main() -> cloth::Result<()> {
    let n = 6;
    let mut s = SeededStream::new(3);
    let cost = CostMatrix::new(s.random_matrix(n, n, 0.0, 1.0))?;
    let best = hungarian(&cost)?;
    let free = row_argmin_plan(&cost, 1.0 / n as f64);
    println!(
        "assignment {:?}, cost / N = {:.6}",
        best.permutation,
        best.cost / n as f64
    );
    println!(
        "free column marginal bound = {:.6} (induced pi {:?})",
        free.objective, free.induced_pi
    );

    let marg = Marginals::uniform(n, n)?;
    for epsilon in [1.0, 0.1, 0.01, 0.001] {
        let r = sinkhorn(
            &cost,
            &marg,
            SinkhornOptions {
                epsilon,
                max_iter: 100_000,
                tol: 1e-9,
            },
        )?;
        println!(
            "eps {epsilon:>6}: cost {:.6}, entropy {:.4}, {} iterations, violation {:.1e}",
            transport_cost(&r.plan, &cost)?,
            r.plan.entropy(),
            r.iterations,
            r.violation
        );
    }
    Ok(())
}
