use std::path::PathBuf;
use std::process::ExitCode;

use bddm::config::{self, PRESETS};
use bddm::{apply_overrides, configure_threads, run_command, CliError};
use clap::{Args, Parser, Subcommand};

/// Blind denoising diffusion experiments on synthetic Gaussian mixtures.
///
/// Exit codes: 0 success, 2 configuration error, 3 numerical failure, 1 other.
#[derive(Parser)]
#[command(name = "bddm", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Histogram of per-draw noise-level MLEs for one or more models.
    MleHist(Source),
    /// Draw samples with a blind or non-blind sampler and score them.
    Sample(Source),
    /// Compare estimated noise levels with the implicit schedule.
    TrackSchedule(Source),
    /// Denoising error as the supplied noise level is misstated.
    Mismatch(Source),
    /// Train a dense denoiser, optionally resuming from a bundle.
    Train(Source),
    /// Run two samplers on matched noise and compare their output.
    Compare(Source),
    /// Run a named preset with its own command.
    Run {
        preset: String,
        #[command(flatten)]
        overrides: Overrides,
    },
    /// List presets, or print one as JSON.
    Presets { name: Option<String> },
}

#[derive(Args)]
struct Source {
    /// JSON config file.
    #[arg(long, conflicts_with = "preset", required_unless_present = "preset")]
    config: Option<PathBuf>,
    /// Named preset (see `bddm presets`).
    #[arg(long)]
    preset: Option<String>,
    #[command(flatten)]
    overrides: Overrides,
}

#[derive(Args)]
struct Overrides {
    /// Output directory; defaults to the config's `out`, then `results/<name>`.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
}

fn preset_value(name: &str, command: Option<&str>) -> Result<(serde_json::Value, &'static str), CliError> {
    let p = config::preset(name).ok_or_else(|| CliError::Config(format!("unknown preset {name:?}")))?;
    if let Some(c) = command.filter(|c| *c != p.command) {
        return Err(CliError::Config(format!("preset {name:?} belongs to `{}`, not `{c}`", p.command)));
    }
    Ok(((p.config)(), p.command))
}

fn execute(cli: Cli) -> Result<(), CliError> {
    let (command, source) = match cli.command {
        Command::Presets { name: None } => {
            for p in PRESETS {
                println!("{:<28} {:<15} {}", p.name, p.command, p.about);
            }
            return Ok(());
        }
        Command::Presets { name: Some(name) } => {
            let (value, _) = preset_value(&name, None)?;
            println!("{}", serde_json::to_string_pretty(&value)?);
            return Ok(());
        }
        Command::Run { preset, overrides } => {
            let (value, command) = preset_value(&preset, None)?;
            let value = apply_overrides(value, overrides.seed, overrides.out.as_deref())?;
            let summary = run_command(command, value, &PathBuf::from("results").join(&preset))?;
            println!("{}", serde_json::to_string_pretty(&summary)?);
            return Ok(());
        }
        Command::MleHist(s) => ("mle-hist", s),
        Command::Sample(s) => ("sample", s),
        Command::TrackSchedule(s) => ("track-schedule", s),
        Command::Mismatch(s) => ("mismatch", s),
        Command::Train(s) => ("train", s),
        Command::Compare(s) => ("compare", s),
    };
    let (value, name) = match (&source.config, &source.preset) {
        (Some(path), _) => {
            let v: serde_json::Value = config::read_config(path)?;
            let stem = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_else(|| command.into());
            (v, stem)
        }
        (None, Some(p)) => (preset_value(p, Some(command))?.0, p.clone()),
        (None, None) => unreachable!("clap requires one source"),
    };
    let value = apply_overrides(value, source.overrides.seed, source.overrides.out.as_deref())?;
    let summary = run_command(command, value, &PathBuf::from("results").join(name))?;
    println!("{}", serde_json::to_string_pretty(&summary)?);
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = configure_threads().and_then(|()| execute(cli));
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("bddm: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
