//! A run file with an environment override, a training run streaming its
//! metrics to CSV, and the transport-cost and loss columns drawn as SVG.
//!
//! cargo run --release --example loss_curves [OUT_DIR]

use std::path::PathBuf;

use cloth::cli::commands;
use cloth::cli::config::RunConfigFile;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let out: PathBuf = std::env::args()
        .nth(1)
        .map(PathBuf::from)
        .unwrap_or_else(|| std::env::temp_dir().join("cloth-loss-curves"));
    let text = r#"{ "seed": 5, "dataset": { "kind": "two_moons", "n": 600 }, "log_every": 50 }"#;
    let env = [("CLOTH_TRAIN__ITERS".to_string(), "1500".to_string())];
    let run = RunConfigFile::from_json_with_env(text, env)?;
    println!("iters from the environment: {}", run.train.iters);

    let bundle = commands::train(&run, &out).map_err(|f| f.message)?;
    println!(
        "target accuracy {:.4}, final W_est {:.4}",
        bundle.result.target_acc, bundle.result.final_w_est
    );
    let svg = out.join("curves.svg");
    commands::export_plot(
        &bundle.metrics,
        &["W_est".into(), "L_t".into(), "L_C".into()],
        &svg,
    )
    .map_err(|f| f.message)?;
    println!("wrote {} and {}", bundle.metrics.display(), svg.display());
    Ok(())
}
