mod commands;
mod config;


use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand, ValueEnum};

use commands::{Session, Subset};
use config::{is_key, ConfigError, RunConfig};

/// Explainable channel loss experiments.
///
/// Any configuration key can be overridden on the command line as
/// `--<key> <value>` (for example `--train.epochs 2 --seed 3`).
#[derive(Parser)]
#[command(name = "ecloss", version)]
struct Cli {
    /// `key = value` configuration file; overrides on the command line win.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Toggle {
    On,
    Off,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic dataset (`dataset.ecds`).
    GenData {
        /// Also write the first N images as `sample{i}.pgm`.
        #[arg(long, default_value_t = 0)]
        pgm: usize,
    },
    /// Build and subsample the template set (`templates.ect`).
    GenTemplates,
    /// Train the network (`final.ecnn`, `train_log.csv`).
    Train {
        #[arg(long, value_enum, default_value = "on")]
        ecloss: Toggle,
        /// Dataset file; generated from the config when omitted.
        #[arg(long)]
        data: Option<PathBuf>,
        /// Template file; built from the config when omitted.
        #[arg(long)]
        templates: Option<PathBuf>,
    },
    /// Compute explainability metrics (`metrics.csv`, `comparison.csv`).
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: Option<PathBuf>,
        /// Baseline checkpoint to compare against.
        #[arg(long)]
        baseline: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "eval")]
        subset: Subset,
    },
    /// Render heatmap overlays as `s{idx}_c{ch}.ppm`.
    Visualize {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long, value_delimiter = ',', required = true)]
        samples: Vec<usize>,
        #[arg(long, value_delimiter = ',', required = true)]
        channels: Vec<usize>,
    },
}

type Overrides = Vec<(String, String)>;

/// Splits `--<config key> <value>` (or `--<key>=<value>`) pairs out of argv.
fn extract_overrides(args: Vec<String>) -> Result<(Vec<String>, Overrides), ConfigError> {
    let mut rest = Vec::with_capacity(args.len());
    let mut overrides = Vec::new();
    let mut it = args.into_iter();
    while let Some(arg) = it.next() {
        let Some(flag) = arg.strip_prefix("--") else {
            rest.push(arg);
            continue;
        };
        let (key, inline) = match flag.split_once('=') {
            Some((k, v)) => (k, Some(v.to_string())),
            None => (flag, None),
        };
        if !is_key(key) {
            rest.push(arg);
            continue;
        }
        let value = match inline {
            Some(v) => v,
            None => it
                .next()
                .ok_or_else(|| ConfigError(format!("--{key} needs a value")))?,
        };
        overrides.push((key.to_string(), value));
    }
    Ok((rest, overrides))
}

fn configure_threads() -> Result<()> {
    let Ok(raw) = std::env::var("ECLOSS_THREADS") else {
        return Ok(());
    };
    let n: usize = raw
        .trim()
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| ConfigError(format!("ECLOSS_THREADS must be a positive integer, got '{raw}'")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .context("starting worker threads")?;
    Ok(())
}

/// Parses `args` (including the program name) and runs the command.
fn execute(args: Vec<String>) -> Result<()> {
    let (args, overrides) = extract_overrides(args)?;
    let cli = Cli::try_parse_from(args)?;
    let mut config = match &cli.config {
        Some(path) => {
            let text = std::fs::read_to_string(path)
                .with_context(|| format!("reading {}", path.display()))?;
            RunConfig::parse(&text).map_err(|e| ConfigError(format!("{}: {e}", path.display())))?
        }
        None => RunConfig::default(),
    };
    for (k, v) in &overrides {
        config.set(k, v)?;
    }
    let mut session = Session::new(config);
    match cli.command {
        Command::GenData { pgm } => session.gen_data(pgm),
        Command::GenTemplates => session.gen_templates(),
        Command::Train { ecloss, data, templates } => {
            session.train(ecloss == Toggle::On, data.as_deref(), templates.as_deref())
        }
        Command::Eval { checkpoint, data, baseline, subset } => {
            session.eval(&checkpoint, data.as_deref(), baseline.as_deref(), subset)
        }
        Command::Visualize { checkpoint, data, samples, channels } => {
            session.visualize(&checkpoint, data.as_deref(), &samples, &channels)
        }
    }
}

/// 2 for invalid input or configuration, 3 for runtime failures.
fn exit_code(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if let Some(e) = cause.downcast_ref::<ecloss_core::Error>() {
            return match e {
                ecloss_core::Error::Io { .. } | ecloss_core::Error::Divergence { .. } => 3,
                _ => 2,
            };
        }
        if cause.is::<ConfigError>() || cause.is::<clap::Error>() {
            return 2;
        }
    }
    3
}

fn main() -> ExitCode {
    let result = configure_threads().and_then(|()| execute(std::env::args().collect()));
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => match e.downcast::<clap::Error>() {
            Ok(usage) => usage.exit(),
            Err(e) => {
                eprintln!("error: {e:#}");
                ExitCode::from(exit_code(&e))
            }
        },
    }
}
