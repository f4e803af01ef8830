//! A transport network fitted to one fixed cost matrix, compared with the
//! exact free-marginal plan and an entropic plan at the marginal it induces.
//!
//! cargo run --release --example amortized_transport

use cloth::engine::{compare_plans, fit_transport_head, FitOptions};
use cloth::numerics::SeededStream;
use cloth::ot::{CostMatrix, SinkhornOptions};

fn main() -> cloth::Result<()> {
    let mut s = SeededStream::new(20);
    let x = s.random_matrix(64, 8, -1.0, 1.0);
    let cost = CostMatrix::new(s.random_matrix(64, 4, 0.0, 1.0))?;
    let fit = fit_transport_head(&x, &cost, &FitOptions::default(), &mut s)?;
    for (k, v) in fit.objective_trace.iter().enumerate().step_by(10) {
        println!(
            "step {:>5}: objective {v:.5}",
            k * FitOptions::default().record_every
        );
    }
    for epsilon in [0.1, 0.001] {
        let opts = SinkhornOptions {
            epsilon,
            max_iter: 100_000,
            tol: 1e-9,
        };
        let r = compare_plans(&fit.rows, &cost, opts, 0.1)?;
        println!(
            "eps {epsilon}: amortized {:.5}, exact {:.5}, sinkhorn {:.5}, argmax agreement {:.3}",
            r.amortized, r.exact_free_pi, r.sinkhorn_at_induced_pi, r.argmax_agreement
        );
    }
    Ok(())
}
