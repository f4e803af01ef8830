use std::io::Write;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use cloth::cli::commands;
use cloth::cli::config::{RunConfigFile, ENV_PREFIX};
use cloth::cli::verify::Suite;
use cloth::cli::{Failure, EXIT_USAGE};

/// Class-aware transport and moment matching for domain adaptation.
///
/// Settings resolve as: run file, then CLOTH_* environment variables
/// (nested keys joined by `__`, e.g. CLOTH_TRAIN__ALPHA=0.5), then flags.
#[derive(Parser, Debug)]
#[command(name = "cloth", version)]
struct Cli {
    /// JSON run file. Without it the synthetic benchmark defaults are used.
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,
    #[arg(long, global = true, value_name = "N")]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true, value_name = "DIR")]
    out: Option<PathBuf>,
    /// Print the resolved run file with every default and exit.
    #[arg(long, global = true)]
    print_config: bool,
    #[command(subcommand)]
    command: Option<Command>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train one model and write metrics, model and summary.
    Train,
    /// Run randomized oracle checks.
    Verify {
        #[arg(default_value = "all", value_parser = Suite::NAMES)]
        suite: String,
    },
    /// Time the kernel and flattened moment losses.
    Bench,
    /// Train once per moment order.
    SweepQ {
        #[arg(long, value_delimiter = ',')]
        q: Option<Vec<u32>>,
        #[arg(long)]
        workers: Option<usize>,
    },
    /// Train the loss-group ablation rows.
    Ablate {
        #[arg(long, value_delimiter = ',', default_value = "1,2,3,4,5,6,7")]
        rows: Vec<usize>,
        /// Number of consecutive seeds starting at the run seed.
        #[arg(long, default_value_t = 1)]
        seeds: u64,
    },
    /// Compare amortized, exact and entropic transport on a frozen model.
    CompareOt {
        /// Saved model; trained from the run file when absent.
        #[arg(long)]
        model: Option<PathBuf>,
    },
    /// Render CSV columns as an SVG line chart.
    ExportPlot {
        #[arg(long)]
        csv: PathBuf,
        #[arg(long, value_delimiter = ',', required = true)]
        columns: Vec<String>,
        #[arg(long)]
        out_svg: PathBuf,
    },
}

/// `println!` that exits quietly when stdout has been closed.
macro_rules! say {
    ($($arg:tt)*) => {
        if let Err(e) = writeln!(std::io::stdout(), $($arg)*) {
            if e.kind() == std::io::ErrorKind::BrokenPipe {
                std::process::exit(0);
            }
            return Err(Failure::usage(format!("cannot write to stdout: {e}")));
        }
    };
}

fn resolve(cli: &Cli) -> Result<RunConfigFile, Failure> {
    let mut run = match &cli.config {
        Some(p) => RunConfigFile::load(p)?,
        None => {
            let text = RunConfigFile::example(0).to_pretty_json()?;
            RunConfigFile::from_json_with_env(&text, std::env::vars())?
        }
    };
    if let Some(s) = cli.seed {
        run.seed = s;
    }
    if let Some(o) = &cli.out {
        run.out_dir = o.clone();
    }
    run.validate()?;
    Ok(run)
}

fn dispatch(cli: Cli) -> Result<(), Failure> {
    let run = resolve(&cli)?;
    if cli.print_config {
        say!("{}", run.to_pretty_json()?);
        return Ok(());
    }
    let out = run.out_dir.clone();
    let Some(command) = cli.command else {
        return Err(Failure::usage(format!(
            "no command given; run `cloth --help`. Environment overrides use the {ENV_PREFIX} prefix"
        )));
    };
    match command {
        Command::Train => {
            let b = commands::train(&run, &out)?;
            say!(
                "target accuracy {:.4}, source accuracy {:.4}, W_est {:.4}",
                b.result.target_acc,
                b.result.source_acc,
                b.result.final_w_est
            );
            say!(
                "wrote {}, {}, {}",
                b.metrics.display(),
                b.model.display(),
                b.summary.display()
            );
        }
        Command::Verify { suite } => {
            let suite: Suite = suite.parse()?;
            for c in commands::verify(suite, run.seed)? {
                say!("{c}");
            }
        }
        Command::Bench => {
            let rows = commands::bench(&run, &out)?;
            cloth::cli::bench::write_csv(std::io::stdout().lock(), &rows)?;
        }
        Command::SweepQ { q, workers } => {
            let qs = q.unwrap_or_else(|| run.sweep.qs.clone());
            let rows = commands::sweep_q(&run, &qs, workers.unwrap_or(run.sweep.workers), &out)?;
            say!("{}", commands::SWEEP_HEADER);
            for r in rows {
                say!(
                    "{},{:.4},{:.4},{}",
                    r.q,
                    r.target_acc,
                    r.source_acc,
                    r.wall_ms
                );
            }
        }
        Command::Ablate { rows, seeds } => {
            let seeds: Vec<u64> = (0..seeds).map(|k| run.seed + k).collect();
            for r in commands::ablate(&run, &rows, &seeds, &out)? {
                say!(
                    "row {} seed {}: target accuracy {:.4}",
                    r.row,
                    r.seed,
                    r.target_acc
                );
            }
            say!("wrote {}", out.join("ablation.csv").display());
        }
        Command::CompareOt { model } => {
            let r = commands::compare_ot(&run, model.as_deref(), &out)?;
            say!(
                "amortized {:.6}  exact free-pi {:.6}  sinkhorn at induced pi {:.6}",
                r.amortized,
                r.exact_free_pi,
                r.sinkhorn_at_induced_pi
            );
            say!(
                "amortized <= sinkhorn + 1e-6: {}",
                r.amortized <= r.sinkhorn_at_induced_pi + 1e-6
            );
        }
        Command::ExportPlot {
            csv,
            columns,
            out_svg,
        } => {
            commands::export_plot(&csv, &columns, &out_svg)?;
            say!("wrote {}", out_svg.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { EXIT_USAGE as u8 } else { 0 });
        }
    };
    match dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {f}");
            ExitCode::from(f.code as u8)
        }
    }
}
