//! Timing of the class-aware moment loss: kernel form against explicit
//! flattened moment tensors.

use std::hint::black_box;
use std::io::Write;
use std::time::Instant;

use crate::error::{Error, Result};
use crate::hmm::{cahomm_loss, cahomm_loss_flatten, MomentOrder};
use crate::numerics::{softmax_into, SeededStream};

use super::config::BenchConfig;

pub const BENCH_HEADER: &str = "method,p,q,time_per_batch_ms,total_ms";

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Method {
    Kernel,
    Flatten,
}

impl Method {
    pub fn name(self) -> &'static str {
        match self {
            Method::Kernel => "kernel",
            Method::Flatten => "flatten",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BenchRow {
    pub method: Method,
    pub p: usize,
    pub q: u32,
    pub time_per_batch_ms: f64,
    pub total_ms: f64,
}

impl BenchRow {
    pub fn csv_line(&self) -> String {
        format!(
            "{},{},{},{:.4},{:.4}",
            self.method.name(),
            self.p,
            self.q,
            self.time_per_batch_ms,
            self.total_ms
        )
    }
}

/// Times both forms on identical random batches, loss and gradients
/// included, for every `(p, q)` in the config.
pub fn run(cfg: &BenchConfig, seed: u64) -> Result<Vec<BenchRow>> {
    if cfg.repeats == 0 || cfg.batch_size < 2 || cfg.classes == 0 {
        return Err(Error::Config(
            "bench: repeats, batch_size and classes must be positive".into(),
        ));
    }
    let mut rows = Vec::new();
    for &p in &cfg.ps {
        for &q in &cfg.qs {
            let order = MomentOrder::new(q).map_err(|e| Error::Config(format!("bench.qs: {e}")))?;
            let mut s = SeededStream::new(seed).substream(&format!("bench/{p}/{q}"));
            let n = cfg.batch_size;
            let xs = s.random_matrix(n, p, -1.0, 1.0);
            let xt = s.random_matrix(n, p, -1.0, 1.0);
            let labels: Vec<usize> = (0..n).map(|i| i % cfg.classes).collect();
            let mut w = s.random_matrix(n, cfg.classes, -1.0, 1.0);
            for j in 0..n {
                let r = w.row(j).to_vec();
                softmax_into(&r, w.row_mut(j));
            }
            let scale = 1.0 / p as f64;
            for method in [Method::Kernel, Method::Flatten] {
                let loss = || match method {
                    Method::Kernel => cahomm_loss(&xs, &labels, &xt, &w, order, scale),
                    Method::Flatten => cahomm_loss_flatten(&xs, &labels, &xt, &w, order, scale),
                };
                black_box(loss()?);
                let start = Instant::now();
                for _ in 0..cfg.repeats {
                    black_box(loss()?);
                }
                let total_ms = start.elapsed().as_secs_f64() * 1e3;
                rows.push(BenchRow {
                    method,
                    p,
                    q,
                    time_per_batch_ms: total_ms / cfg.repeats as f64,
                    total_ms,
                });
            }
        }
    }
    Ok(rows)
}

pub fn write_csv<W: Write>(mut out: W, rows: &[BenchRow]) -> Result<()> {
    writeln!(out, "{BENCH_HEADER}")?;
    for r in rows {
        writeln!(out, "{}", r.csv_line())?;
    }
    Ok(())
}

/// Kernel over flatten time per batch at `(p, q)`, if both were measured.
pub fn speedup(rows: &[BenchRow], p: usize, q: u32) -> Option<f64> {
    let t = |m| {
        rows.iter()
            .find(|r| r.method == m && r.p == p && r.q == q)
            .map(|r| r.time_per_batch_ms)
    };
    Some(t(Method::Flatten)? / t(Method::Kernel)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tiny_bench_has_schema() {
        let cfg = BenchConfig {
            ps: vec![2],
            qs: vec![1],
            batch_size: 8,
            classes: 2,
            repeats: 1,
        };
        let rows = run(&cfg, 0).unwrap();
        assert_eq!(rows.len(), 2);
        let mut buf = Vec::new();
        write_csv(&mut buf, &rows).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let mut lines = text.lines();
        assert_eq!(lines.next(), Some(BENCH_HEADER));
        for l in lines {
            let f: Vec<&str> = l.split(',').collect();
            assert_eq!(f.len(), 5);
            assert!(f[3].parse::<f64>().unwrap() >= 0.0);
        }
        assert!(speedup(&rows, 2, 1).is_some());
        assert!(speedup(&rows, 3, 1).is_none());
    }

    #[test]
    fn rejects_zero_repeats() {
        let cfg = BenchConfig {
            repeats: 0,
            ..BenchConfig::default()
        };
        assert!(run(&cfg, 0).is_err());
    }
}
