mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{CommandFactory, FromArgMatches, Parser, Subcommand};

use config::{ConfigError, RunConfig};

/// Exit status when an acceptance check fails.
const EXIT_CHECK_FAILED: u8 = 1;
/// Exit status for configuration and usage errors.
const EXIT_CONFIG: u8 = 2;
/// Exit status for runtime failures (I/O, numerical errors).
const EXIT_RUNTIME: u8 = 3;

#[derive(Parser, Debug)]
#[command(
    name = "stap",
    version,
    about = "Popularity-prediction experiments on a synthetic micro-video corpus",
    long_about = "Popularity-prediction experiments on a synthetic micro-video corpus.\n\n\
        Every subcommand is non-interactive and writes its artifacts plus a \
        manifest.txt (config echo, seed, SHA-256 of each artifact) into --out.\n\n\
        Exit status: 0 success, 1 failed acceptance check, 2 configuration or \
        usage error, 3 runtime error.\n\n\
        Environment: STAP_THREADS caps the worker threads used internally."
)]
struct Cli {
    #[command(subcommand)]
    command: Command,

    /// Flat key=value config file; defaults apply when omitted.
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,

    /// Run seed; overrides the config's `seed` key.
    #[arg(long, global = true, value_name = "INT")]
    seed: Option<u64>,

    /// Output directory for artifacts and the manifest.
    #[arg(long, global = true, value_name = "DIR", default_value = "stap-out")]
    out: PathBuf,

    /// Ablation variant, or `all`.
    #[arg(long, global = true, value_name = "NAME")]
    variant: Option<String>,

    /// Comma-separated sizes for `bench`.
    #[arg(long, global = true, value_name = "CSVLIST", value_delimiter = ',')]
    sizes: Option<Vec<usize>>,

    /// Benchmark kernel for `bench`, or `all`.
    #[arg(long, global = true, value_name = "NAME")]
    kernel: Option<String>,

    /// Checkpoint for `inspect`; defaults to <out>/model.ckpt.
    #[arg(long, global = true, value_name = "PATH")]
    checkpoint: Option<PathBuf>,
}

#[derive(Subcommand, Debug, Clone, Copy, PartialEq, Eq)]
enum Command {
    /// Generate the corpus, train the full model, evaluate on the test split.
    Train,
    /// Time kernels over increasing sizes and fit log-log slopes.
    Bench,
    /// Train ablation variants under one seed and compare them.
    Ablate,
    /// Train one model per (partitions, clusters) pair.
    Gridsearch,
    /// Export frame scores and slot activations from a trained checkpoint.
    Inspect,
    /// Finite-difference checks of every kernel, block and the full model.
    Gradcheck,
}

impl Command {
    fn name(self) -> &'static str {
        match self {
            Command::Train => "train",
            Command::Bench => "bench",
            Command::Ablate => "ablate",
            Command::Gridsearch => "gridsearch",
            Command::Inspect => "inspect",
            Command::Gradcheck => "gradcheck",
        }
    }
}

/// Outcome of a subcommand that ran to completion.
pub enum Outcome {
    Passed,
    ChecksFailed,
}

fn init_threads() -> Result<(), String> {
    let Ok(v) = std::env::var("STAP_THREADS") else {
        return Ok(());
    };
    let n: usize = v
        .trim()
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| format!("STAP_THREADS must be a positive integer, got {v:?}"))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| format!("could not size the thread pool: {e}"))
}

fn load_config(cli: &Cli) -> Result<RunConfig, ConfigError> {
    let mut cfg = match &cli.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.set_seed(seed);
    }
    Ok(cfg)
}

fn main() -> ExitCode {
    let matches = Cli::command()
        .after_long_help(config::schema_help())
        .get_matches();
    let cli = match Cli::from_arg_matches(&matches) {
        Ok(c) => c,
        Err(e) => e.exit(),
    };
    if let Err(msg) = init_threads() {
        eprintln!("error: {msg}");
        return ExitCode::from(EXIT_CONFIG);
    }
    let cfg = match load_config(&cli) {
        Ok(c) => c,
        Err(e) => {
            eprintln!("error: {e}");
            return ExitCode::from(EXIT_CONFIG);
        }
    };
    eprintln!("# stap {} seed={}", cli.command.name(), cfg.seed);
    for line in cfg.echo().lines() {
        eprintln!("#   {line}");
    }
    match commands::run(cli.command, &cli, &cfg) {
        Ok(Outcome::Passed) => ExitCode::SUCCESS,
        Ok(Outcome::ChecksFailed) => {
            eprintln!("one or more acceptance checks failed");
            ExitCode::from(EXIT_CHECK_FAILED)
        }
        Err(commands::CommandError::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(EXIT_CONFIG)
        }
        Err(commands::CommandError::Runtime(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(EXIT_RUNTIME)
        }
    }
}
