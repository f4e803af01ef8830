//! Higher-order moment distances: explicit tensors against the kernel form,
//! and the class-aware loss timed both ways.
//!
//! cargo run --release --example moment_kernel

use std::time::Instant;

use cloth::hmm::{
    cahomm_loss, cahomm_loss_flatten, hm_bruteforce, hm_kernel, phi_flatten, MomentOrder,
};
use cloth::numerics::{softmax_into, SeededStream};

fn main() -> cloth::Result<()> {
    let mut s = SeededStream::new(7);
    let u = s.random_matrix(6, 3, -1.0, 1.0);
    let v = s.random_matrix(4, 3, -1.0, 1.0);
    for q in 1..=4 {
        let q = MomentOrder::new(q)?;
        let phi_len = phi_flatten(u.row(0), q)?.len();
        println!(
            "q={} flattened length {phi_len:>3}: explicit {:.12}  kernel {:.12}",
            q.get(),
            hm_bruteforce(&u, &v, q)?,
            hm_kernel(&u, &v, q, 1.0)?
        );
    }

    let n = 128;
    for p in [8, 16] {
        let xs = s.random_matrix(n, p, -1.0, 1.0);
        let xt = s.random_matrix(n, p, -1.0, 1.0);
        let labels: Vec<usize> = (0..n).map(|i| i % 3).collect();
        let mut w = s.random_matrix(n, 3, -1.0, 1.0);
        for j in 0..n {
            let r = w.row(j).to_vec();
            softmax_into(&r, w.row_mut(j));
        }
        for q in [2, 3] {
            let q = MomentOrder::new(q)?;
            let scale = 1.0 / p as f64;
            let t = Instant::now();
            let a = cahomm_loss(&xs, &labels, &xt, &w, q, scale)?;
            let tk = t.elapsed();
            let t = Instant::now();
            let b = cahomm_loss_flatten(&xs, &labels, &xt, &w, q, scale)?;
            let tf = t.elapsed();
            println!(
                "p={p:>2} q={}: loss {:.6e} vs {:.6e}; kernel {:?}, flatten {:?}",
                q.get(),
                a.value,
                b.value,
                tk,
                tf
            );
        }
    }
    Ok(())
}
