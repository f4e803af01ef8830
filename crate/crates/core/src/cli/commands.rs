//! Command implementations. Each returns a [`Failure`] carrying the exit
//! code on error; the binary only parses arguments and prints.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::Serialize;

use crate::data::Dataset;
use crate::engine::model::config_hash;
use crate::engine::{
    compare_amortized_vs_exact, evaluate, train as train_model, AblationRow, ClothModel,
    CompareReport, CsvSink, TrainConfig, TrainError, TrainOutput,
};
use crate::error::Error;
use crate::numerics::Matrix;
use crate::ot::SinkhornOptions;

use super::config::{check_q_list, CompareConfig, RunConfigFile};
use super::plot::{line_chart, Table};
use super::verify::{self, Check, Suite};
use super::{bench, Failure, EXIT_VERIFY};

type Outcome<T> = std::result::Result<T, Failure>;

fn create_dir(dir: &Path) -> Outcome<()> {
    fs::create_dir_all(dir)
        .map_err(|e| Failure::usage(format!("cannot create {}: {e}", dir.display())))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Outcome<()> {
    let text = serde_json::to_string_pretty(value).map_err(Error::from)?;
    fs::write(path, text + "\n")
        .map_err(|e| Failure::usage(format!("cannot write {}: {e}", path.display())))
}

/// Loss values of the last generator step.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct FinalLosses {
    pub l_c: f64,
    pub l_d: f64,
    pub l_t: f64,
    pub l_ent: f64,
    pub l_hmm: f64,
}

/// Contents of `summary.json`.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct TrainSummary {
    pub seed: u64,
    pub config_hash: String,
    pub iters: usize,
    pub selected_iter: usize,
    pub selected_val_acc: Option<f64>,
    pub source_acc: f64,
    pub target_acc: f64,
    pub target_per_class: Vec<Option<f64>>,
    pub final_w_est: f64,
    pub final_losses: FinalLosses,
    pub hmm_skips: usize,
    /// Absent when the discriminator is not class-aware.
    pub transport: Option<CompareReport>,
    pub wall_ms: u128,
}

/// Paths of a finished training run.
#[derive(Clone, Debug, PartialEq)]
pub struct ReportBundle {
    pub metrics: PathBuf,
    pub model: PathBuf,
    pub summary: PathBuf,
    pub result: TrainSummary,
}

fn compare_rows(features: &Matrix, max_rows: usize) -> Matrix {
    let idx: Vec<usize> = (0..features.rows().min(max_rows)).collect();
    features.select_rows(&idx)
}

fn sinkhorn_options(c: &CompareConfig) -> SinkhornOptions {
    SinkhornOptions {
        epsilon: c.epsilon,
        max_iter: c.max_iter,
        ..SinkhornOptions::default()
    }
}

/// Frozen-model transport comparison on the first `max_rows` target rows.
pub fn transport_report(
    model: &ClothModel,
    target: &Dataset,
    cfg: &TrainConfig,
    c: &CompareConfig,
) -> Outcome<Option<CompareReport>> {
    if !model.class_aware_d() {
        return Ok(None);
    }
    let x = compare_rows(target.unlabeled().features(), c.max_rows);
    Ok(Some(compare_amortized_vs_exact(
        model,
        &x,
        cfg.log_floor,
        sinkhorn_options(c),
        c.gap,
    )?))
}

fn summarize(
    run: &RunConfigFile,
    cfg: &TrainConfig,
    out: &TrainOutput,
    source: &Dataset,
    target: &Dataset,
    wall_ms: u128,
) -> Outcome<TrainSummary> {
    let tgt = evaluate(&out.model, target)?;
    Ok(TrainSummary {
        seed: run.seed,
        config_hash: config_hash(cfg)?,
        iters: cfg.iters,
        selected_iter: out.selected_iter,
        selected_val_acc: out.selected_val_acc,
        source_acc: evaluate(&out.model, source)?.accuracy,
        target_acc: tgt.accuracy,
        target_per_class: tgt.per_class,
        final_w_est: out.final_w_est,
        final_losses: FinalLosses {
            l_c: out.last_parts.classifier,
            l_d: out.last_l_d,
            l_t: out.last_parts.transport,
            l_ent: out.last_parts.entropy,
            l_hmm: out.last_parts.hmm,
        },
        hmm_skips: out.hmm_skips,
        transport: transport_report(&out.model, target, cfg, &run.compare)?,
        wall_ms,
    })
}

/// Trains one run and writes `metrics.csv`, `model.json` and
/// `summary.json` under `out`. A non-finite step writes `checkpoint.json`
/// and fails with the numeric exit code.
pub fn train(run: &RunConfigFile, out: &Path) -> Outcome<ReportBundle> {
    let (source, target) = run.datasets()?;
    train_on(run, &run.train_config(), &source, &target, out)
}

fn train_on(
    run: &RunConfigFile,
    cfg: &TrainConfig,
    source: &Dataset,
    target: &Dataset,
    out: &Path,
) -> Outcome<ReportBundle> {
    create_dir(out)?;
    let metrics = out.join("metrics.csv");
    let file = File::create(&metrics)
        .map_err(|e| Failure::usage(format!("cannot write {}: {e}", metrics.display())))?;
    let mut sink = CsvSink::new(BufWriter::new(file))?;
    let start = Instant::now();
    let result = train_model(cfg, source, target, &mut sink);
    sink.into_inner().flush().map_err(Error::from)?;
    let output = match result {
        Ok(o) => o,
        Err(TrainError::Invalid(e)) => return Err(e.into()),
        Err(TrainError::Aborted {
            error,
            iter,
            checkpoint,
        }) => {
            let path = out.join("checkpoint.json");
            checkpoint.save(&path, cfg)?;
            return Err(Failure::numeric(format!(
                "training aborted at iteration {iter}: {error}; last good model in {}",
                path.display()
            )));
        }
    };
    let wall_ms = start.elapsed().as_millis();
    let model = out.join("model.json");
    output.model.save(&model, cfg)?;
    let result = summarize(run, cfg, &output, source, target, wall_ms)?;
    let summary = out.join("summary.json");
    write_json(&summary, &result)?;
    Ok(ReportBundle {
        metrics,
        model,
        summary,
        result,
    })
}

/// One line per ablation run.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct AblationResult {
    pub row: usize,
    pub seed: u64,
    pub source_acc: f64,
    pub target_acc: f64,
    pub final_w_est: f64,
}

pub const ABLATION_HEADER: &str =
    "row,seed,adversarial,transport,entropy,hmm,source_acc,target_acc,final_w_est";

/// Trains every requested ablation row for every seed. Each run gets its own
/// subdirectory `row{r}_seed{s}` and the table goes to `ablation.csv`.
pub fn ablate(
    run: &RunConfigFile,
    rows: &[usize],
    seeds: &[u64],
    out: &Path,
) -> Outcome<Vec<AblationResult>> {
    let parsed: Vec<AblationRow> = rows
        .iter()
        .map(|&r| AblationRow::number(r))
        .collect::<Result<_, _>>()?;
    if rows.is_empty() || seeds.is_empty() {
        return Err(Failure::usage("ablate needs at least one row and one seed"));
    }
    create_dir(out)?;
    let mut results = Vec::new();
    let mut csv = format!("{ABLATION_HEADER}\n");
    for &seed in seeds {
        let mut r = run.clone();
        r.seed = seed;
        let (source, target) = r.datasets()?;
        for (&n, &row) in rows.iter().zip(&parsed) {
            let cfg = r.train_config().with_ablation(row);
            let dir = out.join(format!("row{n}_seed{seed}"));
            let b = train_on(&r, &cfg, &source, &target, &dir)?;
            log::info!(
                "row {n} seed {seed}: target accuracy {:.4}",
                b.result.target_acc
            );
            csv += &format!(
                "{n},{seed},{},{},{},{},{},{},{}\n",
                row.adversarial as u8,
                row.transport as u8,
                row.entropy as u8,
                row.hmm as u8,
                b.result.source_acc,
                b.result.target_acc,
                b.result.final_w_est
            );
            results.push(AblationResult {
                row: n,
                seed,
                source_acc: b.result.source_acc,
                target_acc: b.result.target_acc,
                final_w_est: b.result.final_w_est,
            });
        }
    }
    fs::write(out.join("ablation.csv"), csv).map_err(Error::from)?;
    Ok(results)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SweepRow {
    pub q: u32,
    pub target_acc: f64,
    pub source_acc: f64,
    pub wall_ms: u128,
}

pub const SWEEP_HEADER: &str = "q,target_acc,source_acc,wall_ms";

/// One training run per moment order, written to `sweep_q.csv`. With
/// `workers > 1` runs execute on that many threads; every run uses the
/// config seed, so results do not depend on scheduling.
pub fn sweep_q(
    run: &RunConfigFile,
    qs: &[u32],
    workers: usize,
    out: &Path,
) -> Outcome<Vec<SweepRow>> {
    check_q_list(qs)?;
    if workers == 0 {
        return Err(Failure::usage("workers must be >= 1"));
    }
    create_dir(out)?;
    let (source, target) = run.datasets()?;
    let one = |q: u32| -> Outcome<SweepRow> {
        let mut cfg = run.train_config();
        cfg.q = q;
        let start = Instant::now();
        let o =
            train_model(&cfg, &source, &target, &mut crate::engine::NullSink).map_err(
                |e| match e {
                    TrainError::Invalid(e) => Failure::from(e),
                    e @ TrainError::Aborted { .. } => Failure::numeric(e.to_string()),
                },
            )?;
        Ok(SweepRow {
            q,
            target_acc: evaluate(&o.model, &target)?.accuracy,
            source_acc: evaluate(&o.model, &source)?.accuracy,
            wall_ms: start.elapsed().as_millis(),
        })
    };
    let results: Vec<Outcome<SweepRow>> = if workers == 1 {
        qs.iter().map(|&q| one(q)).collect()
    } else {
        let mut slots: Vec<Option<Outcome<SweepRow>>> = (0..qs.len()).map(|_| None).collect();
        let chunk = qs.len().div_ceil(workers);
        std::thread::scope(|s| {
            for (qc, sc) in qs.chunks(chunk).zip(slots.chunks_mut(chunk)) {
                let one = &one;
                s.spawn(move || {
                    for (q, slot) in qc.iter().zip(sc) {
                        *slot = Some(one(*q));
                    }
                });
            }
        });
        slots.into_iter().map(Option::unwrap).collect()
    };
    let rows: Vec<SweepRow> = results.into_iter().collect::<Outcome<_>>()?;
    let mut csv = format!("{SWEEP_HEADER}\n");
    for r in &rows {
        csv += &format!("{},{},{},{}\n", r.q, r.target_acc, r.source_acc, r.wall_ms);
    }
    fs::write(out.join("sweep_q.csv"), csv).map_err(Error::from)?;
    Ok(rows)
}

/// Compares T's amortized plan with the exact and entropic plans on a
/// frozen model, writing `compare_ot.json`. Without `model`, a model is
/// trained from the run config first.
pub fn compare_ot(run: &RunConfigFile, model: Option<&Path>, out: &Path) -> Outcome<CompareReport> {
    create_dir(out)?;
    let (source, target) = run.datasets()?;
    let cfg = run.train_config();
    let model = match model {
        Some(p) => ClothModel::load(p)?.0,
        None => {
            train_on(run, &cfg, &source, &target, &out.join("train"))
                .map(|b| ClothModel::load(&b.model))??
                .0
        }
    };
    if model.input_dim() != target.dim() || model.num_classes != target.num_classes() {
        return Err(Failure::usage(
            "model does not match the configured dataset",
        ));
    }
    let report = transport_report(&model, &target, &cfg, &run.compare)?
        .ok_or_else(|| Failure::usage("comparison needs a class-aware discriminator"))?;
    write_json(&out.join("compare_ot.json"), &report)?;
    Ok(report)
}

/// Writes `bench.csv`. Fails verification when the kernel form is not
/// faster than the flattened one at `p = 16, q = 3`.
pub fn bench(run: &RunConfigFile, out: &Path) -> Outcome<Vec<bench::BenchRow>> {
    create_dir(out)?;
    let rows = bench::run(&run.bench, run.seed)?;
    let path = out.join("bench.csv");
    let file = File::create(&path).map_err(Error::from)?;
    bench::write_csv(BufWriter::new(file), &rows)?;
    if let Some(s) = bench::speedup(&rows, 16, 3) {
        if s <= 1.0 {
            return Err(Failure::new(
                EXIT_VERIFY,
                format!("kernel form is not faster than flatten at p=16, q=3 (speedup {s:.2})"),
            ));
        }
    }
    Ok(rows)
}

pub fn verify(suite: Suite, seed: u64) -> Outcome<Vec<Check>> {
    let checks = verify::run(suite, seed)?;
    let failed: Vec<&str> = checks
        .iter()
        .filter(|c| !c.passed())
        .map(|c| c.name.as_str())
        .collect();
    if !failed.is_empty() {
        let detail: Vec<String> = checks.iter().map(ToString::to_string).collect();
        return Err(Failure::new(
            EXIT_VERIFY,
            format!(
                "{}\n{} check(s) failed: {}",
                detail.join("\n"),
                failed.len(),
                failed.join(", ")
            ),
        ));
    }
    Ok(checks)
}

pub fn export_plot(csv: &Path, columns: &[String], out_svg: &Path) -> Outcome<()> {
    let table = Table::read(csv)?;
    let series = table.series(columns)?;
    let title = csv
        .file_name()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    let svg = line_chart(&title, &table.headers[0], &series)?;
    if let Some(dir) = out_svg.parent().filter(|d| !d.as_os_str().is_empty()) {
        create_dir(dir)?;
    }
    fs::write(out_svg, svg)
        .map_err(|e| Failure::usage(format!("cannot write {}: {e}", out_svg.display())))
}
