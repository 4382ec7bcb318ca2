//! Experiment runner for blind denoising diffusion on synthetic mixtures.
//!
//! Each command reads a JSON config (or a named preset), runs one experiment
//! and writes CSV tables with JSON sidecars, SVG plots and a summary JSON
//! into the output directory. Output depends only on the config and seed.

pub mod config;
pub mod experiments;
pub mod svg;

use std::path::{Path, PathBuf};

use serde::Serialize;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("numerical failure: {0}")]
    Numerical(String),
    #[error("i/o error: {0}")]
    Io(String),
}

impl CliError {
    /// 2 for configuration problems, 3 for numerical failures, 1 otherwise.
    pub fn exit_code(&self) -> i32 {
        match self {
            Self::Config(_) => 2,
            Self::Numerical(_) => 3,
            Self::Io(_) => 1,
        }
    }
}

impl From<bddm_core::Error> for CliError {
    fn from(e: bddm_core::Error) -> Self {
        use bddm_core::Error as E;
        match e {
            E::Config(_) | E::Unsupported(_) | E::Json(_) => Self::Config(e.to_string()),
            E::Numerical(_) | E::Domain(_) => Self::Numerical(e.to_string()),
            E::Io(_) | E::Csv(_) => Self::Io(e.to_string()),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        Self::Io(e.to_string())
    }
}

impl From<serde_json::Error> for CliError {
    fn from(e: serde_json::Error) -> Self {
        Self::Io(e.to_string())
    }
}

/// Caps the global thread pool at `BDDM_THREADS` when set.
pub fn configure_threads() -> Result<(), CliError> {
    let Ok(raw) = std::env::var("BDDM_THREADS") else {
        return Ok(());
    };
    let n: usize = raw
        .trim()
        .parse()
        .ok()
        .filter(|n| *n > 0)
        .ok_or_else(|| CliError::Config(format!("BDDM_THREADS must be a positive integer, got {raw:?}")))?;
    // A pool built earlier in the process (tests) is left alone.
    let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    Ok(())
}

/// Artifact writer for one command run. Every table gets a sidecar holding
/// the resolved config.
pub struct Output {
    dir: PathBuf,
    meta: serde_json::Value,
}

impl Output {
    pub fn new(dir: &Path, command: &str, config: &impl Serialize) -> Result<Self, CliError> {
        std::fs::create_dir_all(dir)?;
        let meta = serde_json::json!({
            "command": command,
            "version": env!("CARGO_PKG_VERSION"),
            "config": config,
        });
        Ok(Self { dir: dir.to_path_buf(), meta })
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.dir.join(name)
    }

    pub fn table(&self, name: &str, header: &[&str], rows: &[Vec<String>]) -> Result<PathBuf, CliError> {
        let path = self.path(name);
        let mut meta = self.meta.clone();
        meta["columns"] = serde_json::json!(header);
        meta["rows"] = serde_json::json!(rows.len());
        bddm_core::metrics::write_table(&path, header, rows, &meta)?;
        Ok(path)
    }

    pub fn json(&self, name: &str, value: &impl Serialize) -> Result<PathBuf, CliError> {
        let path = self.path(name);
        let mut text = serde_json::to_string_pretty(value)?;
        text.push('\n');
        std::fs::write(&path, text)?;
        Ok(path)
    }

    pub fn plot(&self, name: &str, plot: &svg::Plot) -> Result<PathBuf, CliError> {
        let path = self.path(name);
        plot.save(&path)?;
        Ok(path)
    }
}

/// Command names accepted by [`run_command`].
pub const COMMANDS: &[&str] = &["mle-hist", "sample", "track-schedule", "mismatch", "train", "compare"];

/// Applies the `seed` and `out` overrides to a raw config.
pub fn apply_overrides(
    mut config: serde_json::Value,
    seed: Option<u64>,
    out: Option<&Path>,
) -> Result<serde_json::Value, CliError> {
    let obj = config
        .as_object_mut()
        .ok_or_else(|| CliError::Config("config must be a JSON object".into()))?;
    if let Some(s) = seed {
        obj.insert("seed".into(), s.into());
    }
    if let Some(o) = out {
        obj.insert("out".into(), o.to_string_lossy().into_owned().into());
    }
    Ok(config)
}

fn run_typed<T, S>(
    command: &str,
    config: serde_json::Value,
    default_out: &Path,
    out_of: impl Fn(&T) -> Option<PathBuf>,
    run: impl Fn(&T, &Output) -> Result<S, CliError>,
) -> Result<serde_json::Value, CliError>
where
    T: serde::de::DeserializeOwned + Serialize,
    S: Serialize,
{
    let cfg: T = config::from_value(config)?;
    let dir = out_of(&cfg).unwrap_or_else(|| default_out.to_path_buf());
    let out = Output::new(&dir, command, &cfg)?;
    out.json("config.json", &cfg)?;
    Ok(serde_json::to_value(run(&cfg, &out)?)?)
}

/// Parses `config` for `command`, runs it and returns the summary.
/// Artifacts go to the config's `out`, else to `default_out`.
pub fn run_command(command: &str, config: serde_json::Value, default_out: &Path) -> Result<serde_json::Value, CliError> {
    use experiments as e;
    match command {
        "mle-hist" => run_typed(command, config, default_out, |c: &config::MleHistConfig| c.out.clone(), e::mle_hist),
        "sample" => run_typed(command, config, default_out, |c: &config::SampleConfig| c.out.clone(), e::sample),
        "track-schedule" => {
            run_typed(command, config, default_out, |c: &config::TrackScheduleConfig| c.out.clone(), e::track_schedule)
        }
        "mismatch" => run_typed(command, config, default_out, |c: &config::MismatchConfig| c.out.clone(), e::mismatch),
        "train" => run_typed(command, config, default_out, |c: &config::TrainCommandConfig| c.out.clone(), e::train),
        "compare" => run_typed(command, config, default_out, |c: &config::CompareConfig| c.out.clone(), e::compare),
        other => Err(CliError::Config(format!("unknown command {other:?}"))),
    }
}

/// Shortest round-trip decimal form, so tables are byte-stable.
pub fn num(v: f64) -> String {
    format!("{v}")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exit_codes() {
        assert_eq!(CliError::Config("x".into()).exit_code(), 2);
        assert_eq!(CliError::Numerical("x".into()).exit_code(), 3);
        assert_eq!(CliError::from(bddm_core::Error::Domain("x".into())).exit_code(), 3);
        assert_eq!(CliError::from(bddm_core::Error::Unsupported("x".into())).exit_code(), 2);
    }

    #[test]
    fn tables_get_sidecars() {
        let dir = tempfile::tempdir().unwrap();
        let out = Output::new(dir.path(), "demo", &serde_json::json!({ "seed": 3 })).unwrap();
        let p = out.table("t.csv", &["a", "b"], &[vec![num(1.5), num(0.1)]]).unwrap();
        assert_eq!(std::fs::read_to_string(&p).unwrap(), "a,b\n1.5,0.1\n");
        let side: serde_json::Value =
            serde_json::from_str(&std::fs::read_to_string(dir.path().join("t.csv.json")).unwrap()).unwrap();
        assert_eq!(side["config"]["seed"], 3);
        assert_eq!(side["command"], "demo");
    }
}
