use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use serde_json::json;

use lpdet::audit::AUDIT_TOLERANCE;
use lpdet::commands::{
    cmd_eval, cmd_gradcheck, cmd_infer, cmd_sweep_ratio, cmd_synth, cmd_train, sweep_table, CommandError,
};
use lpdet::config::RunConfig;

/// Coarse-to-fine license plate detection on synthetic traffic scenes.
#[derive(Debug, Parser)]
#[command(name = "lpdet", version)]
struct Cli {
    /// Config file of `key = value` lines (see `lpdet config` for every key).
    #[arg(short, long, global = true)]
    config: Option<PathBuf>,
    /// Override one key, e.g. `--set iterations=200`; applied after the file.
    #[arg(short = 's', long = "set", value_name = "KEY=VALUE", global = true)]
    overrides: Vec<String>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Print the resolved configuration with every key documented.
    Config,
    /// Generate a synthetic dataset into `data_dir`.
    Synth,
    /// Train on the train split; writes config.txt, loss.jsonl and the checkpoint to `run_dir`.
    Train,
    /// Evaluate the checkpoint on the test split; writes eval.json to `run_dir`.
    Eval,
    /// Write detection records (one JSON object per line).
    Infer {
        /// Output file; standard output when absent.
        #[arg(short, long)]
        out: Option<PathBuf>,
        /// Images to process (PPM/PNM); the test split when none are given.
        images: Vec<PathBuf>,
    },
    /// Evaluate the checkpoint at expansion ratios 1, 2, 3, 4, 5 and inf; writes sweep.json.
    SweepRatio,
    /// Finite-difference audit of every differentiable op and loss term.
    Gradcheck {
        /// Random seeds per check.
        #[arg(long, default_value_t = 50)]
        seeds: u64,
    },
}

#[derive(Debug)]
enum Failure {
    Command(CommandError),
    Output(std::io::Error),
    Gradcheck(Vec<String>),
}

impl From<CommandError> for Failure {
    fn from(e: CommandError) -> Self {
        Self::Command(e)
    }
}

impl From<lpdet::config::ConfigError> for Failure {
    fn from(e: lpdet::config::ConfigError) -> Self {
        Self::Command(e.into())
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Self::Output(e)
    }
}

fn resolve(cli: &Cli) -> Result<RunConfig, Failure> {
    let mut config = match &cli.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    config.apply_overrides(&cli.overrides)?;
    Ok(config)
}

fn run(cli: Cli) -> Result<(), Failure> {
    let config = resolve(&cli)?;
    let stdout = std::io::stdout();
    let mut out = stdout.lock();
    match cli.command {
        Command::Config => {
            config.validate()?;
            write!(out, "{}", config.to_text())?;
        }
        Command::Synth => {
            let summary = cmd_synth(&config)?;
            writeln!(out, "wrote {} train and {} test scenes to {}", summary.train, summary.test, config.data_dir.display())?;
        }
        Command::Train => {
            let every = config.log_every;
            let checkpoint = cmd_train(&config, |r| {
                if every > 0 && r.iter % every == 0 {
                    eprintln!(
                        "iter {:>6}  lr {:.1e}  L1 {:.4}  L2 {:.4}  total {:.4}  regions {}",
                        r.iter, r.lr, r.l1.total, r.l2.total, r.total, r.regions
                    );
                }
            })?;
            writeln!(out, "wrote {}", checkpoint.display())?;
        }
        Command::Eval => {
            let outcome = cmd_eval(&config)?;
            write!(out, "{}", outcome.to_table())?;
        }
        Command::Infer { out: path, images } => {
            let records = cmd_infer(&config, &images)?;
            let mut sink: Box<dyn Write> = match &path {
                Some(p) => Box::new(BufWriter::new(
                    File::create(p).map_err(|source| CommandError::Io { path: p.clone(), source })?,
                )),
                None => Box::new(BufWriter::new(&mut out)),
            };
            for r in &records {
                writeln!(sink, "{}", serde_json::to_string(r).expect("detection records serialize"))?;
            }
            sink.flush()?;
        }
        Command::SweepRatio => {
            let rows = cmd_sweep_ratio(&config)?;
            write!(out, "{}", sweep_table(&rows))?;
        }
        Command::Gradcheck { seeds } => {
            let entries = cmd_gradcheck(seeds)?;
            let mut failed = Vec::new();
            for e in &entries {
                let verdict = if e.passed() { "PASS" } else { "FAIL" };
                writeln!(
                    out,
                    "{verdict}  {:<45} seeds {:>3}  checks {:>6}  max rel err {:.3e}",
                    e.name, e.seeds, e.checked, e.max_rel_error
                )?;
                if !e.passed() {
                    failed.push(e.name.clone());
                }
            }
            writeln!(out, "tolerance {AUDIT_TOLERANCE:e}")?;
            if !failed.is_empty() {
                return Err(Failure::Gradcheck(failed));
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(failure) => {
            let (kind, message) = match failure {
                Failure::Command(e) => (e.kind(), e.to_string()),
                // a closed pipe (`lpdet infer | head`) is not a failure
                Failure::Output(e) if e.kind() == std::io::ErrorKind::BrokenPipe => return ExitCode::SUCCESS,
                Failure::Output(e) => ("output", e.to_string()),
                Failure::Gradcheck(names) => ("gradcheck", format!("failed: {}", names.join(", "))),
            };
            eprintln!("{}", json!({ "error": kind, "message": message }));
            ExitCode::FAILURE
        }
    }
}
