mod error;
mod plot;
mod run;
mod stages;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use tafnet::config::Config;

use error::{CliError, Result};
use run::RunContext;

/// Longitudinal conversion prediction pipeline.
#[derive(Parser)]
#[command(name = "tafnet", version)]
struct Cli {
    /// Config file with `key = value` lines.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the `seed` key.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Run directory; each stage writes a subdirectory here.
    #[arg(long, global = true, default_value = "runs/default")]
    out: PathBuf,
    /// Config override, repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    set: Vec<String>,
    #[command(subcommand)]
    stage: Stage,
}

#[derive(Subcommand)]
enum Stage {
    /// Generate the synthetic cohort and pretraining volumes.
    Synth,
    /// Skull-strip, normalise, denoise, crop and QC every volume.
    Preprocess,
    /// Pretrain the encoder on single volumes.
    Pretrain,
    /// Encode pairs with the frozen encoder and fit every model.
    Train,
    /// Cross-validate the models and run the statistical tests.
    Eval,
    /// Gate profiles and attention maps from the trained fusion model.
    Interpret,
    /// Summary table and charts from a metrics CSV.
    Report {
        /// Metrics CSV (`method,fold,metric,value`); defaults to the eval output.
        #[arg(long)]
        metrics: Option<PathBuf>,
    },
    /// Print the resolved configuration.
    Config,
}

fn workers() -> Result<usize> {
    let n = match std::env::var("TAFNET_NUM_WORKERS") {
        Ok(v) => v.trim().parse::<usize>().ok().filter(|n| *n > 0).ok_or_else(|| {
            CliError::Taf(tafnet::TafError::Config(format!("TAFNET_NUM_WORKERS must be a positive integer, got {v:?}")))
        })?,
        Err(_) => std::thread::available_parallelism().map_or(1, |n| n.get()),
    };
    // A pool may already exist when running inside tests; that is harmless.
    let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    Ok(n)
}

fn build_config(cli: &Cli) -> Result<Config> {
    let mut cfg = match &cli.config {
        Some(p) => Config::load(p)?,
        None => Config::default(),
    };
    for pair in &cli.set {
        cfg.set_pair(pair)?;
    }
    if let Some(seed) = cli.seed {
        cfg.set("seed", &seed.to_string())?;
    }
    Ok(cfg)
}

fn run(cli: Cli) -> Result<()> {
    let cfg = build_config(&cli)?;
    if let Stage::Config = cli.stage {
        print!("{}", cfg.to_text());
        return Ok(());
    }
    let ctx = RunContext { out: cli.out.clone(), cfg, workers: workers()? };
    match &cli.stage {
        Stage::Synth => stages::synth(&ctx),
        Stage::Preprocess => stages::preprocess(&ctx),
        Stage::Pretrain => stages::pretrain(&ctx),
        Stage::Train => stages::train(&ctx),
        Stage::Eval => stages::eval(&ctx),
        Stage::Interpret => stages::interpret(&ctx),
        Stage::Report { metrics } => stages::report(&ctx, metrics.as_deref()),
        Stage::Config => unreachable!(),
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
