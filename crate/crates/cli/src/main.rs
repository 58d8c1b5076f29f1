use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, ValueEnum};
use reciprocity_core::pipeline::{self, PipelineConfig};
use reciprocity_core::Error;

#[derive(Debug, Clone, Copy, ValueEnum)]
enum Stage {
    Simulate,
    Ingest,
    Windows,
    Match,
    Fit,
    Sweep,
    Bins,
    Report,
    All,
}

impl Stage {
    fn name(self) -> &'static str {
        match self {
            Stage::Simulate => "simulate",
            Stage::Ingest => "ingest",
            Stage::Windows => "windows",
            Stage::Match => "match",
            Stage::Fit => "fit",
            Stage::Sweep => "sweep",
            Stage::Bins => "bins",
            Stage::Report => "report",
            Stage::All => "all",
        }
    }
}

/// Matched difference-in-differences survival pipeline for Q&A event logs.
#[derive(Debug, Parser)]
#[command(name = "reciprocity", version)]
struct Cli {
    /// Stage to run; `all` chains every stage.
    #[arg(value_enum)]
    stage: Stage,
    /// Flat `key = value` configuration file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory holding every stage artifact.
    #[arg(long, default_value = "out")]
    out: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    /// Worker threads; results do not depend on it.
    #[arg(long)]
    threads: Option<usize>,
    /// Input event log CSV; skips `simulate` under `all`.
    #[arg(long)]
    events: Option<PathBuf>,
    #[arg(long)]
    half_length_hours: Option<f64>,
    #[arg(long)]
    caliper: Option<f64>,
    #[arg(long)]
    penalizer_main: Option<f64>,
    #[arg(long)]
    penalizer_interaction: Option<f64>,
    #[arg(long)]
    clip_low: Option<f64>,
    #[arg(long)]
    clip_high: Option<f64>,
    #[arg(long)]
    subsample_budget: Option<usize>,
    /// Response-time bins in minutes, e.g. `0-15,15-30,30-60`.
    #[arg(long)]
    bins: Option<String>,
    /// Any config key, e.g. `--set sim.n_users=500`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    sets: Vec<String>,
}

fn build_config(cli: &Cli) -> Result<PipelineConfig, Error> {
    let mut cfg = match &cli.config {
        Some(path) => PipelineConfig::load(path)?,
        None => PipelineConfig::default(),
    };
    cfg.out_dir = cli.out.clone();
    let mut flags: Vec<(&str, String)> = Vec::new();
    let mut push = |key: &'static str, v: Option<String>| {
        if let Some(v) = v {
            flags.push((key, v));
        }
    };
    push("seed", cli.seed.map(|v| v.to_string()));
    push(
        "events",
        cli.events.as_ref().map(|p| p.display().to_string()),
    );
    push(
        "half_length_hours",
        cli.half_length_hours.map(|v| v.to_string()),
    );
    push("caliper", cli.caliper.map(|v| v.to_string()));
    push("penalizer_main", cli.penalizer_main.map(|v| v.to_string()));
    push(
        "penalizer_interaction",
        cli.penalizer_interaction.map(|v| v.to_string()),
    );
    push("clip_low", cli.clip_low.map(|v| v.to_string()));
    push("clip_high", cli.clip_high.map(|v| v.to_string()));
    push(
        "subsample_budget",
        cli.subsample_budget.map(|v| v.to_string()),
    );
    push("bins", cli.bins.clone());
    for (k, v) in flags {
        cfg.set(k, &v)?;
    }
    for kv in &cli.sets {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| Error::InvalidInput(format!("--set expects KEY=VALUE, got `{kv}`")))?;
        cfg.set(k, v)?;
    }
    Ok(cfg)
}

fn run(cli: &Cli) -> Result<(), Error> {
    let cfg = build_config(cli)?;
    let stage = cli.stage.name();
    match cli.threads {
        Some(n) => {
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(n)
                .build()
                .map_err(|e| Error::InvalidInput(format!("thread pool: {e}")))?;
            pool.install(|| pipeline::run(stage, &cfg))
        }
        None => pipeline::run(stage, &cfg),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {} failed: {e}", cli.stage.name());
            match e {
                Error::MissingInput(_) => ExitCode::from(2),
                _ => ExitCode::from(1),
            }
        }
    }
}
