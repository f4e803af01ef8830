//! Source-only baseline against the full objective on the three-class
//! Gaussian shift benchmark.
//!
//! cargo run --release --example synthetic_uda [ITERS]

use cloth::data::{make_gaussian_shift, SyntheticSpec};
use cloth::engine::{evaluate, train, AblationRow, NullSink, TrainConfig};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let iters: usize = std::env::args()
        .nth(1)
        .map(|s| s.parse())
        .transpose()?
        .unwrap_or(3000);
    let (source, target) = make_gaussian_shift(&SyntheticSpec::three_class_benchmark(0))?;
    println!(
        "source {} rows, target {} rows, target class counts {:?}",
        source.len(),
        target.len(),
        target.class_counts().unwrap()
    );

    for (name, row) in [("source only", 1), ("adversarial", 2), ("full", 7)] {
        let cfg = TrainConfig {
            iters,
            ..TrainConfig::default()
        }
        .with_ablation(AblationRow::number(row)?);
        let out = train(&cfg, &source, &target, &mut NullSink)?;
        let report = evaluate(&out.model, &target)?;
        let per_class: Vec<String> = report
            .per_class
            .iter()
            .map(|a| a.map_or("-".into(), |a| format!("{a:.3}")))
            .collect();
        println!(
            "{name:>12}: target accuracy {:.4} (per class {}), snapshot from iteration {}",
            report.accuracy,
            per_class.join(" "),
            out.selected_iter
        );
    }
    Ok(())
}
