use std::io::Write;
use std::path::PathBuf;
use std::process::ExitCode;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;

use clap::{Parser, Subcommand, ValueEnum};
use fedsplit::bench::{self, ExperimentConfig};
use fedsplit::Error;

#[derive(Parser)]
#[command(name = "fedsplit", version, about = "Federated split learning of a toy transformer")]
struct Cli {
    /// Experiment file; defaults apply to anything it leaves out.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides `output_dir` from the file and the environment.
    #[arg(long, global = true)]
    output_dir: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train adapters with the configured strategy.
    Train,
    /// Decode answers for corpus prompts.
    Generate {
        #[arg(long, default_value_t = 16)]
        limit: usize,
    },
    /// Score cloze and copy items.
    Eval,
    /// Run the colluding-client inversion attack.
    Attack,
    /// Measure per-step bytes and the mask compression.
    CommReport {
        #[arg(long, value_delimiter = ',', default_values_t = [128usize, 512])]
        contexts: Vec<usize>,
    },
    /// Sweep partitions or attack settings.
    Grid {
        #[arg(long, value_enum, default_value_t = GridKind::Partition)]
        kind: GridKind,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum GridKind {
    Partition,
    Attack,
}

const EXIT_CONFIG: u8 = 2;
const EXIT_PROTOCOL: u8 = 3;
const EXIT_CHECK: u8 = 4;

enum Failure {
    Run(Error),
    Check(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Run(e)
    }
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_)
        | Error::Partition(_)
        | Error::TokenId { .. }
        | Error::ThreatModel(_)
        | Error::Checkpoint(_)
        | Error::Io(_) => EXIT_CONFIG,
        _ => EXIT_PROTOCOL,
    }
}

fn load(cli: &Cli) -> Result<ExperimentConfig, Error> {
    let mut cfg = match &cli.config {
        Some(path) => ExperimentConfig::load(path)?,
        None => ExperimentConfig::default(),
    };
    cfg.apply_env(|k| std::env::var(k).ok());
    if let Some(dir) = &cli.output_dir {
        cfg.output_dir = dir.clone();
    }
    cfg.validate()?;
    Ok(cfg)
}

/// Stdout write that tolerates a closed pipe.
fn emit(text: &str) {
    let _ = std::io::stdout().lock().write_all(text.as_bytes());
}

fn print<T: serde::Serialize>(value: &T) {
    match serde_json::to_string_pretty(value) {
        Ok(s) => emit(&format!("{s}\n")),
        Err(e) => eprintln!("cannot render result: {e}"),
    }
}

fn run(cli: &Cli, stop: &AtomicBool) -> Result<(), Failure> {
    let cfg = load(cli)?;
    match &cli.command {
        Command::Train => {
            let trained = bench::train(&cfg, Some(stop))?;
            print(&trained.summary);
            if let Some(limit) = cfg.checks.max_loss_ratio {
                if !(trained.summary.loss_ratio < limit) {
                    return Err(Failure::Check(format!(
                        "loss ratio {:.4} is not below {limit}",
                        trained.summary.loss_ratio
                    )));
                }
            }
        }
        Command::Generate { limit } => {
            let records = bench::generate(&cfg, *limit)?;
            for r in &records {
                emit(&format!("{}: {:?} -> {:?}\n", r.index, r.prompt, r.tokens));
            }
            if records.iter().any(|r| r.matches_uncached == Some(false)) {
                return Err(Failure::Check("cached and uncached decoding disagree".into()));
            }
        }
        Command::Eval => {
            let report = bench::evaluate(&cfg)?;
            print(&report);
            if cfg.checks.cache_identity && report.cache_score_max_diff > 1e-9 {
                return Err(Failure::Check(format!(
                    "cached and uncached scores differ by {:e}",
                    report.cache_score_max_diff
                )));
            }
        }
        Command::Attack => print(&bench::attack(&cfg)?),
        Command::CommReport { contexts } => print(&bench::comm(&cfg, contexts)?),
        Command::Grid { kind } => {
            let report = match kind {
                GridKind::Partition => bench::grid_partition(&cfg)?,
                GridKind::Attack => bench::grid_attack(&cfg)?,
            };
            emit(&report.to_csv());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let stop = Arc::new(AtomicBool::new(false));
    let flag = Arc::clone(&stop);
    if let Err(e) = ctrlc::set_handler(move || flag.store(true, Ordering::Relaxed)) {
        eprintln!("warning: cannot install interrupt handler: {e}");
    }
    match run(&cli, &stop) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Run(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
        Err(Failure::Check(msg)) => {
            eprintln!("check failed: {msg}");
            ExitCode::from(EXIT_CHECK)
        }
    }
}
