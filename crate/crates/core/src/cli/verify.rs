//! Randomized oracle suites behind `cloth verify`.

use std::fmt;
use std::str::FromStr;

use crate::engine::gradcheck::{gradient_suite, MAX_PARAMS};
use crate::engine::losses::entropy_from_probs;
use crate::error::{Error, Result};
use crate::hmm::{cahomm_loss, cahomm_loss_flatten, hm_bruteforce, hm_kernel, MomentOrder};
use crate::numerics::{softmax_into, Matrix, SeededStream, LOG_FLOOR};
use crate::ot::{hungarian, sinkhorn, CostMatrix, Marginals, SinkhornOptions};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Suite {
    Hmm,
    Ot,
    Grad,
    Entropy,
    All,
}

impl Suite {
    pub const NAMES: [&'static str; 5] = ["hmm", "ot", "grad", "entropy", "all"];

    fn parts(self) -> Vec<Suite> {
        match self {
            Suite::All => vec![Suite::Hmm, Suite::Ot, Suite::Grad, Suite::Entropy],
            s => vec![s],
        }
    }
}

impl FromStr for Suite {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "hmm" => Suite::Hmm,
            "ot" => Suite::Ot,
            "grad" => Suite::Grad,
            "entropy" => Suite::Entropy,
            "all" => Suite::All,
            _ => {
                return Err(Error::Config(format!(
                    "unknown suite {s:?}; expected one of {}",
                    Suite::NAMES.join("|")
                )))
            }
        })
    }
}

impl fmt::Display for Suite {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let i = [
            Suite::Hmm,
            Suite::Ot,
            Suite::Grad,
            Suite::Entropy,
            Suite::All,
        ]
        .iter()
        .position(|s| s == self)
        .unwrap();
        f.write_str(Suite::NAMES[i])
    }
}

/// Outcome of one named property. `failures` holds reproducible
/// descriptions of the offending inputs.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Check {
    pub name: String,
    pub trials: usize,
    pub worst: f64,
    pub tolerance: f64,
    pub failures: Vec<String>,
}

impl Check {
    fn new(name: impl Into<String>, tolerance: f64) -> Self {
        Self {
            name: name.into(),
            tolerance,
            ..Self::default()
        }
    }

    fn record(&mut self, err: f64, describe: impl FnOnce() -> String) {
        self.trials += 1;
        if err.is_nan() || err > self.worst {
            self.worst = err;
        }
        if err.is_nan() || err > self.tolerance {
            self.failures.push(describe());
        }
    }

    pub fn passed(&self) -> bool {
        self.failures.is_empty() && self.trials > 0
    }
}

impl fmt::Display for Check {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{} {}: {} trials, worst {:.3e} (tol {:.1e})",
            if self.passed() { "ok  " } else { "FAIL" },
            self.name,
            self.trials,
            self.worst,
            self.tolerance
        )?;
        for fail in self.failures.iter().take(5) {
            write!(f, "\n       {fail}")?;
        }
        if self.failures.len() > 5 {
            write!(f, "\n       ... {} more", self.failures.len() - 5)?;
        }
        Ok(())
    }
}

pub fn run(suite: Suite, seed: u64) -> Result<Vec<Check>> {
    let mut out = Vec::new();
    for s in suite.parts() {
        match s {
            Suite::Hmm => {
                out.push(hmm_kernel_identity(seed, 200)?);
                out.push(cahomm_forms_agree(seed, 50)?);
            }
            Suite::Ot => {
                out.push(sinkhorn_marginals(seed, 100)?);
                out.push(sinkhorn_vs_hungarian(seed, 50)?);
            }
            Suite::Grad => out.push(gradients(seed)?),
            Suite::Entropy => out.extend(entropy_bound(seed, 1000)?),
            Suite::All => unreachable!(),
        }
    }
    Ok(out)
}

/// Kernel form against explicit moment tensors for every
/// `(p, q, n) ∈ {2,3,4} × {1,2,3} × {2,4,8}`, `trials` draws each.
pub fn hmm_kernel_identity(seed: u64, trials: usize) -> Result<Check> {
    let mut check = Check::new("hm_kernel == hm_bruteforce (relative)", 1e-10);
    let root = SeededStream::new(seed).substream("verify/hmm");
    for p in [2, 3, 4] {
        for q in [1, 2, 3] {
            for n in [2, 4, 8] {
                let mut s = root.substream(&format!("{p}/{q}/{n}"));
                let order = MomentOrder::new(q)?;
                for trial in 0..trials {
                    let nv = 1 + s.below(n);
                    let u = s.random_matrix(n, p, -2.0, 2.0);
                    let v = s.random_matrix(nv, p, -2.0, 2.0);
                    let brute = hm_bruteforce(&u, &v, order)?;
                    let kern = hm_kernel(&u, &v, order, 1.0)?;
                    let err = (kern - brute).abs() / brute.abs().max(1.0);
                    check.record(err, || {
                        format!("seed {seed} p={p} q={q} n={n} trial {trial}: kernel {kern} brute {brute}")
                    });
                }
            }
        }
    }
    Ok(check)
}

/// Class-aware loss and gradients: kernel form against the flattened form.
pub fn cahomm_forms_agree(seed: u64, trials: usize) -> Result<Check> {
    let mut check = Check::new("cahomm kernel == flatten (value and gradients)", 1e-9);
    let mut s = SeededStream::new(seed).substream("verify/cahomm");
    for trial in 0..trials {
        let p = 2 + s.below(3);
        let m = 2 + s.below(3);
        let q = MomentOrder::new(1 + s.below(3) as u32)?;
        let (ns, nt) = (2 + s.below(8), 2 + s.below(8));
        let xs = s.random_matrix(ns, p, -1.5, 1.5);
        let xt = s.random_matrix(nt, p, -1.5, 1.5);
        let labels: Vec<usize> = (0..ns).map(|_| s.below(m)).collect();
        let mut w = s.random_matrix(nt, m, -2.0, 2.0);
        for j in 0..nt {
            let row = w.row(j).to_vec();
            softmax_into(&row, w.row_mut(j));
        }
        let scale = s.uniform_in(0.2, 1.0);
        let a = cahomm_loss(&xs, &labels, &xt, &w, q, scale)?;
        let b = cahomm_loss_flatten(&xs, &labels, &xt, &w, q, scale)?;
        let rel = |x: &[f64], y: &[f64]| {
            x.iter()
                .zip(y)
                .map(|(x, y)| (x - y).abs() / y.abs().max(1.0))
                .fold(0.0, f64::max)
        };
        let err = rel(&[a.value], &[b.value])
            .max(rel(a.grad_source.as_slice(), b.grad_source.as_slice()))
            .max(rel(a.grad_target.as_slice(), b.grad_target.as_slice()))
            .max(rel(a.grad_t_probs.as_slice(), b.grad_t_probs.as_slice()));
        check.record(err, || {
            format!(
                "seed {seed} trial {trial}: p={p} M={m} q={} ns={ns} nt={nt}",
                q.get()
            )
        });
    }
    Ok(check)
}

fn simplex(s: &mut SeededStream, n: usize) -> Vec<f64> {
    let v: Vec<f64> = (0..n).map(|_| 0.05 + s.next_f64()).collect();
    let z: f64 = v.iter().sum();
    v.into_iter().map(|x| x / z).collect()
}

/// Random rectangular instances with random marginals.
pub fn sinkhorn_marginals(seed: u64, trials: usize) -> Result<Check> {
    let mut check = Check::new("sinkhorn marginal violation", 1e-6);
    let mut s = SeededStream::new(seed).substream("verify/sinkhorn-marginals");
    for trial in 0..trials {
        let (n, m) = (1 + s.below(16), 1 + s.below(16));
        let cost = CostMatrix::new(s.random_matrix(n, m, 0.0, 1.0))?;
        let marg = Marginals::new(simplex(&mut s, n), simplex(&mut s, m))?;
        let epsilon = [0.05, 0.1, 0.5][trial % 3];
        let r = sinkhorn(
            &cost,
            &marg,
            SinkhornOptions {
                epsilon,
                max_iter: 20_000,
                tol: 1e-9,
            },
        )?;
        let err = r.plan.marginal_violation(&marg);
        check.record(err, || {
            format!("seed {seed} trial {trial}: {n}x{m} ε={epsilon}")
        });
    }
    Ok(check)
}

/// Square instances with uniform marginals at ε = 1e-3 against the
/// optimal assignment divided by N.
pub fn sinkhorn_vs_hungarian(seed: u64, trials: usize) -> Result<Check> {
    let mut check = Check::new("sinkhorn cost vs assignment optimum / N (relative)", 0.01);
    let mut s = SeededStream::new(seed).substream("verify/sinkhorn-hungarian");
    for trial in 0..trials {
        let n = 1 + s.below(8);
        let cost = CostMatrix::new(s.random_matrix(n, n, 0.0, 1.0))?;
        let exact = hungarian(&cost)?.cost / n as f64;
        let r = sinkhorn(
            &cost,
            &Marginals::uniform(n, n)?,
            SinkhornOptions {
                epsilon: 1e-3,
                max_iter: 200_000,
                tol: 1e-10,
            },
        )?;
        let got = crate::ot::transport_cost(&r.plan, &cost)?;
        let err = (got - exact).abs() / exact.abs().max(1e-12);
        check.record(err, || {
            format!("seed {seed} trial {trial}: N={n} sinkhorn {got} exact {exact}")
        });
    }
    Ok(check)
}

pub fn gradients(seed: u64) -> Result<Check> {
    let mut check = Check::new(
        format!("loss gradients vs finite differences (≤{MAX_PARAMS} params)"),
        1e-4,
    );
    for g in gradient_suite(seed)? {
        let err = if g.params <= MAX_PARAMS {
            g.rel_error
        } else {
            f64::INFINITY
        };
        check.record(err, || {
            format!(
                "seed {seed} {} shared_ct={} params={} error {:.3e}",
                g.loss, g.shared_ct, g.params, g.rel_error
            )
        });
    }
    Ok(check)
}

/// Range of the equal-movement entropy loss on random softmax outputs, and
/// its value when every row is the same.
pub fn entropy_bound(seed: u64, trials: usize) -> Result<Vec<Check>> {
    let mut range = Check::new("entropy loss within [-ln M, 0]", 1e-9);
    let mut same = Check::new("entropy loss is 0 for identical rows", 1e-9);
    let mut s = SeededStream::new(seed).substream("verify/entropy");
    for trial in 0..trials {
        let m = 2 + s.below(9);
        let n = 2 + s.below(63);
        let sharp = s.uniform_in(0.1, 20.0);
        let mut p = s.random_matrix(n, m, -sharp, sharp);
        for i in 0..n {
            let row = p.row(i).to_vec();
            softmax_into(&row, p.row_mut(i));
        }
        let (v, _) = entropy_from_probs(&p, LOG_FLOOR)?;
        let lo = -(m as f64).ln();
        let excess = (lo - v).max(v).max(0.0);
        range.record(excess, || {
            format!("seed {seed} trial {trial}: n={n} M={m} value {v}")
        });

        let row = p.row(0).to_vec();
        let rep = Matrix::from_rows(&vec![row; n])?;
        let (v, _) = entropy_from_probs(&rep, LOG_FLOOR)?;
        same.record(v.abs(), || {
            format!("seed {seed} trial {trial}: n={n} M={m} value {v}")
        });
    }
    Ok(vec![range, same])
}
