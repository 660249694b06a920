mod commands;
mod config;
mod evaluate;
mod plot;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use cgp_core::Error;
use config::RunConfig;

#[derive(Debug, Parser)]
#[command(name = "cgp", version, about = "Compartmental GP epidemic forecaster")]
struct Cli {
    #[command(subcommand)]
    command: Command,

    /// Flat key=value config file; flags override it.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Directory holding features.csv, fatalities.csv and policies.csv.
    #[arg(long, global = true)]
    data: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[arg(long, global = true)]
    checkpoint: Option<PathBuf>,
    #[arg(long, global = true)]
    region: Option<String>,
    #[arg(long, global = true)]
    horizon: Option<usize>,
    #[arg(long, global = true, allow_hyphen_values = true)]
    shift_days: Option<i64>,
    /// Monte Carlo samples per forecast.
    #[arg(long, global = true)]
    samples: Option<usize>,
    #[arg(long, global = true)]
    bind: Option<String>,
    /// Any config key, repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    set: Vec<String>,
}

#[derive(Debug, Clone, Copy, Subcommand)]
enum Command {
    /// Validate input files and write the drop report.
    Ingest,
    /// Fit the model and write a checkpoint and the ELBO trace.
    Train,
    /// Forecast cumulative deaths under the last observed policy.
    Forecast,
    /// Forecast under an edited policy timeline against the unedited one.
    Scenario,
    /// Cumulative-error table for the CGP and the baselines.
    Evaluate,
    /// Run the JSON HTTP service.
    Serve,
    /// Write the synthetic benchmark dataset.
    Synth,
}

enum Failure {
    Usage(String),
    Core(Error),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Core(e)
    }
}

fn error_code(e: &Error) -> &'static str {
    match e {
        Error::Range { .. } => "range",
        Error::Domain(_) => "domain",
        Error::IntegrationFailure { .. } => "integration",
        Error::Shape(_) => "shape",
        Error::Numerical(_) => "numerical",
        Error::Parse { .. } => "parse",
        Error::Join { .. } => "join",
        Error::Alignment(_) => "alignment",
        Error::Training { .. } => "training",
        Error::TrainingAborted(_) => "training_aborted",
        Error::UnknownRegion(_) => "unknown_region",
        Error::Forecast(_) => "forecast",
        Error::Fit(_) => "fit",
        Error::InsufficientVariation { .. } => "insufficient_variation",
        Error::Config(_) => "config",
        Error::Checkpoint(_) => "checkpoint",
        Error::Io(_) => "io",
        Error::Json(_) => "json",
    }
}

fn build_config(cli: &Cli) -> cgp_core::Result<RunConfig> {
    let mut cfg = RunConfig::default();
    if let Some(p) = &cli.config {
        cfg.load_file(p)?;
    }
    if let Some(dir) = &cli.data {
        for name in ["features", "fatalities", "policies"] {
            cfg.set(name, &dir.join(format!("{name}.csv")).to_string_lossy())?;
        }
    }
    for pair in &cli.set {
        cfg.set_pair(pair)?;
    }
    let flags = [
        ("seed", cli.seed.map(|v| v.to_string())),
        (
            "out",
            cli.out.as_ref().map(|p| p.to_string_lossy().into_owned()),
        ),
        (
            "checkpoint",
            cli.checkpoint
                .as_ref()
                .map(|p| p.to_string_lossy().into_owned()),
        ),
        ("region", cli.region.clone()),
        ("horizon", cli.horizon.map(|v| v.to_string())),
        ("shift_days", cli.shift_days.map(|v| v.to_string())),
        ("forecast_samples", cli.samples.map(|v| v.to_string())),
        ("bind", cli.bind.clone()),
    ];
    for (key, value) in flags {
        if let Some(v) = value {
            cfg.set(key, &v)?;
        }
    }
    cfg.validate()?;
    Ok(cfg)
}

fn run() -> Result<(), Failure> {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) if !e.use_stderr() => {
            print!("{e}");
            return Ok(());
        }
        Err(e) => {
            let text = e.to_string();
            let line = text
                .lines()
                .find(|l| !l.trim().is_empty())
                .unwrap_or("invalid arguments")
                .trim_start_matches("error: ");
            return Err(Failure::Usage(line.to_string()));
        }
    };
    let cfg = build_config(&cli)?;
    std::fs::create_dir_all(cfg.out_dir()).map_err(Error::from)?;
    std::fs::write(
        cfg.out_dir().join("config.effective.txt"),
        cfg.effective_text()?,
    )
    .map_err(Error::from)?;
    match cli.command {
        Command::Ingest => commands::ingest(&cfg)?,
        Command::Train => commands::train(&cfg)?,
        Command::Forecast => commands::forecast(&cfg)?,
        Command::Scenario => commands::scenario(&cfg)?,
        Command::Evaluate => evaluate::evaluate(&cfg)?,
        Command::Serve => commands::serve(&cfg)?,
        Command::Synth => commands::synth(&cfg)?,
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match run() {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(m)) => {
            eprintln!("error: usage: {m}");
            ExitCode::from(2)
        }
        Err(Failure::Core(e)) => {
            let message = e.to_string().replace('\n', " ");
            eprintln!("error: {}: {message}", error_code(&e));
            let status = match &e {
                Error::Config(_) => 2,
                e if e.is_data_error() => 3,
                _ => 4,
            };
            ExitCode::from(status)
        }
    }
}
