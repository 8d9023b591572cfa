//! Command-line front end for the experiment pipeline.
//!
//! Every verb runs its stage together with any upstream stages whose
//! outputs are missing or stale; completed stages are skipped, so verbs
//! compose naturally (`train` after `dataset` only trains).

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use musa_mud::config::ExperimentConfig;
use musa_mud::pipeline::{run_pipeline, STAGES};

#[derive(Parser)]
#[command(name = "musa-mud", version, about = "Grant-free MUSA multi-user detection simulator")]
struct Cli {
    /// Experiment config (TOML). Defaults are used when omitted.
    #[arg(short, long, global = true)]
    config: Option<PathBuf>,

    /// Override the output directory from the config.
    #[arg(short, long, global = true)]
    output_dir: Option<PathBuf>,

    /// Worker threads (default: all cores). Also honors MUSA_MUD_WORKERS.
    #[arg(short, long, global = true)]
    workers: Option<usize>,

    /// Override any config field, e.g. --set train.epochs=5
    /// --set 'codebook.n_devices=[8,12]'. Repeatable; values are TOML.
    #[arg(short, long = "set", global = true, value_name = "PATH=VALUE")]
    set: Vec<String>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the spreading codebooks.
    Codebook,
    /// Synthesize the training datasets (and anything upstream).
    Dataset,
    /// Train the neural detectors (and anything upstream).
    Train,
    /// Run the evaluation sweep (and anything upstream).
    Evaluate,
    /// Emit the plotting scripts (and anything upstream).
    Plots,
    /// Run the whole pipeline.
    All,
    /// Print the default config as TOML and exit.
    DefaultConfig,
}

fn stages_for(cmd: &Command) -> &'static [&'static str] {
    let upto = |stage: &str| {
        let i = STAGES.iter().position(|s| *s == stage).expect("known stage");
        &STAGES[..=i]
    };
    match cmd {
        Command::Codebook => upto("codebook"),
        Command::Dataset => upto("dataset"),
        Command::Train => upto("train"),
        Command::Evaluate => upto("evaluate"),
        Command::Plots | Command::All => &STAGES,
        Command::DefaultConfig => &[],
    }
}

/// Applies `section.field=value` overrides through the TOML representation,
/// so every config field is reachable from the command line.
fn apply_overrides(cfg: &ExperimentConfig, sets: &[String]) -> musa_mud::Result<ExperimentConfig> {
    let bad = |msg: String| musa_mud::Error::Config(msg);
    let mut value: toml::Value = cfg
        .to_toml()?
        .parse()
        .map_err(|e| bad(format!("config reserialize: {e}")))?;
    for s in sets {
        let (path, raw) = s
            .split_once('=')
            .ok_or_else(|| bad(format!("--set '{s}' is not PATH=VALUE")))?;
        let new: toml::Value = format!("v = {raw}")
            .parse::<toml::Table>()
            .map_err(|e| bad(format!("--set '{s}': bad value: {e}")))?
            .remove("v")
            .expect("parsed table has key v");
        let parts: Vec<&str> = path.split('.').collect();
        let (last, init) = parts.split_last().expect("split_once gave non-empty path");
        let mut node = &mut value;
        for part in init {
            node = node
                .as_table_mut()
                .and_then(|t| t.get_mut(*part))
                .ok_or_else(|| bad(format!("--set '{s}': unknown field '{part}'")))?;
        }
        node.as_table_mut()
            .ok_or_else(|| bad(format!("--set '{s}': '{last}' is not inside a table")))?
            .insert(last.to_string(), new);
    }
    ExperimentConfig::from_toml(&toml::to_string(&value).map_err(|e| bad(e.to_string()))?)
}

fn run(cli: Cli) -> musa_mud::Result<()> {
    if let Command::DefaultConfig = cli.command {
        print!("{}", ExperimentConfig::default().to_toml()?);
        return Ok(());
    }

    let workers = cli.workers.or_else(|| {
        std::env::var("MUSA_MUD_WORKERS").ok().and_then(|v| v.parse().ok())
    });
    if let Some(w) = workers {
        rayon::ThreadPoolBuilder::new()
            .num_threads(w)
            .build_global()
            .map_err(|e| musa_mud::Error::Config(format!("worker pool: {e}")))?;
    }

    let mut cfg = match &cli.config {
        Some(path) => ExperimentConfig::load(path)?,
        None => ExperimentConfig::default(),
    };
    if !cli.set.is_empty() {
        cfg = apply_overrides(&cfg, &cli.set)?;
    }
    if let Some(dir) = cli.output_dir {
        cfg.output_dir = dir;
    }

    let manifest = run_pipeline(&cfg, stages_for(&cli.command))?;
    for s in &manifest.stages {
        eprintln!(
            "stage {:<9} {} ({:.2}s)",
            s.name,
            if s.skipped { "skipped" } else { "done" },
            s.wall_clock_s
        );
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
