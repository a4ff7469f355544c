//! Run manifests: one `manifest.json` per output directory, enough to replay
//! the run.

use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use mplreg::{PhantomParams, RegistrationConfig};
use serde::{Deserialize, Serialize};

use crate::error::{CliError, CliResult};

pub const MANIFEST: &str = "manifest.json";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RegisterInputs {
    pub fixed: PathBuf,
    pub moving: PathBuf,
    pub fixed_label: PathBuf,
    pub moving_label: PathBuf,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SuiteSpec {
    pub cases: usize,
    pub first_seed: u64,
    pub jobs: usize,
    pub phantom: PhantomParams,
    pub config: RegistrationConfig,
}

/// What was run. Replaying a manifest runs this again.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "command", rename_all = "snake_case")]
pub enum RunSpec {
    Register { inputs: RegisterInputs, config: RegistrationConfig },
    /// The phantom seed is the manifest's top-level `seed`.
    Phantom { params: PhantomParams },
    Suite(SuiteSpec),
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RunManifest {
    pub tool: String,
    pub version: String,
    pub seed: u64,
    #[serde(flatten)]
    pub spec: RunSpec,
    /// Files written by the run, relative to the manifest's directory.
    pub outputs: Vec<String>,
    pub status: String,
    pub started_unix: f64,
    pub finished_unix: f64,
}

pub fn now_unix() -> f64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs_f64()).unwrap_or(0.0)
}

impl RunManifest {
    pub fn new(spec: RunSpec, seed: u64, started_unix: f64) -> Self {
        RunManifest {
            tool: env!("CARGO_PKG_NAME").into(),
            version: env!("CARGO_PKG_VERSION").into(),
            seed,
            spec,
            outputs: Vec::new(),
            status: "running".into(),
            started_unix,
            finished_unix: started_unix,
        }
    }

    pub fn finish(mut self, status: &str, outputs: Vec<String>) -> Self {
        self.status = status.into();
        self.outputs = outputs;
        self.finished_unix = now_unix();
        self
    }

    pub fn write(&self, dir: &Path) -> CliResult<()> {
        write_json(&dir.join(MANIFEST), self)
    }

    pub fn read(path: &Path) -> CliResult<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))
    }
}

pub fn write_json<S: Serialize>(path: &Path, value: &S) -> CliResult<()> {
    let text = serde_json::to_string_pretty(value).map_err(|e| CliError::Usage(e.to_string()))?;
    std::fs::write(path, text + "\n").map_err(|e| CliError::io(path, e))
}

/// Creates `dir`, refusing to mix runs unless `force` is set.
pub fn prepare_out_dir(dir: &Path, force: bool) -> CliResult<()> {
    if dir.join(MANIFEST).exists() && !force {
        return Err(CliError::Usage(format!(
            "{} already holds a run manifest; pass --force to overwrite",
            dir.display()
        )));
    }
    std::fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))
}
