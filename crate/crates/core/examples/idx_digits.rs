//! IDX ingestion: writes a small pair of synthetic digit-like domains as IDX
//! files, reads them back downsampled and adapts between them.
//!
//! cargo run --release --example idx_digits

use cloth::data::{load_idx, write_idx, Domain};
use cloth::engine::{evaluate, train, AblationRow, NullSink, TrainConfig};
use cloth::numerics::SeededStream;

const SIDE: usize = 16;

/// Class k is a bar at a class-specific angle; the second domain draws
/// thicker, dimmer strokes off centre on a brighter, noisier background.
fn render(class: usize, bold: bool, s: &mut SeededStream) -> Vec<u8> {
    let angle = class as f64 * std::f64::consts::PI / 4.0 + 0.15 * s.normal();
    let (c, sn) = (angle.cos(), angle.sin());
    let width = if bold { 2.6 } else { 1.2 };
    let mut px = vec![0u8; SIDE * SIDE];
    for r in 0..SIDE {
        for col in 0..SIDE {
            let shift = if bold { 2.5 } else { 0.0 };
            let (y, x) = (r as f64 - 7.5 - shift, col as f64 - 7.5 - shift);
            let dist = (x * sn - y * c).abs();
            let on = dist < width && (x * c + y * sn).abs() < 6.5;
            let (fg, bg, noise) = if bold {
                (170.0, 70.0, 30.0)
            } else {
                (230.0, 20.0, 12.0)
            };
            let v = if on { fg } else { bg } + noise * s.normal();
            px[r * SIDE + col] = v.clamp(0.0, 255.0) as u8;
        }
    }
    px
}

fn write_domain(
    dir: &std::path::Path,
    name: &str,
    bold: bool,
    n: usize,
    seed: u64,
) -> cloth::Result<()> {
    let mut s = SeededStream::new(seed);
    let mut pixels = Vec::new();
    let mut digits = Vec::new();
    for i in 0..n {
        let class = i % 4;
        pixels.extend(render(class, bold, &mut s));
        digits.push(class as u8);
    }
    write_idx(
        &dir.join(format!("{name}-images-idx3-ubyte")),
        &dir.join(format!("{name}-labels-idx1-ubyte")),
        SIDE,
        SIDE,
        &pixels,
        &digits,
    )
}

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let dir = std::env::temp_dir().join("cloth-idx-example");
    std::fs::create_dir_all(&dir)?;
    write_domain(&dir, "thin", false, 800, 1)?;
    write_domain(&dir, "bold", true, 800, 2)?;

    let source = load_idx(
        &dir.join("thin-images-idx3-ubyte"),
        &dir.join("thin-labels-idx1-ubyte"),
        8,
        800,
    )?;
    let target = load_idx(
        &dir.join("bold-images-idx3-ubyte"),
        &dir.join("bold-labels-idx1-ubyte"),
        8,
        800,
    )?
    .with_classes(source.num_classes(), Domain::Target)?;
    println!(
        "{} source and {} target images at 8x8, {} classes",
        source.len(),
        target.len(),
        source.num_classes()
    );

    let base = TrainConfig {
        iters: 1500,
        batch_size: 64,
        ..TrainConfig::default()
    };
    let runs = [
        ("source only", base.with_ablation(AblationRow::number(1)?)),
        ("full", base.clone()),
        (
            "full, beta=1",
            TrainConfig {
                beta: 1.0,
                ..base.clone()
            },
        ),
    ];
    for (name, cfg) in runs {
        let out = train(&cfg, &source, &target, &mut NullSink)?;
        println!(
            "{name:>12}: source accuracy {:.4}, target accuracy {:.4}",
            evaluate(&out.model, &source)?.accuracy,
            evaluate(&out.model, &target)?.accuracy
        );
    }
    Ok(())
}
