//! Run bookkeeping: output locks, atomic writes and the run manifest.

use std::fs::{self, OpenOptions};
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use anyhow::{Context, Result};
use serde::Serialize;
use serde_json::Value;

/// A failure outside the library's own error type, with its exit code.
#[derive(Debug, thiserror::Error)]
#[error("{message}")]
pub struct CliError {
    pub code: u8,
    pub message: String,
}

pub fn usage(message: impl Into<String>) -> anyhow::Error {
    CliError {
        code: 2,
        message: message.into(),
    }
    .into()
}

pub fn data(message: impl Into<String>) -> anyhow::Error {
    CliError {
        code: 3,
        message: message.into(),
    }
    .into()
}

fn now() -> f64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map_or(0.0, |d| d.as_secs_f64())
}

/// Writes through a temporary sibling and a rename.
pub fn write_atomic(path: &Path, bytes: impl AsRef<[u8]>) -> Result<()> {
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = PathBuf::from(tmp);
    fs::write(&tmp, bytes).with_context(|| format!("writing {}", tmp.display()))?;
    fs::rename(&tmp, path).with_context(|| format!("renaming {} to {}", tmp.display(), path.display()))
}

/// Exclusive claim on an output location, released on drop.
pub struct OutputLock {
    path: PathBuf,
}

impl OutputLock {
    pub fn acquire(path: PathBuf) -> Result<Self> {
        if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
            fs::create_dir_all(parent).with_context(|| format!("creating {}", parent.display()))?;
        }
        match OpenOptions::new().write(true).create_new(true).open(&path) {
            Ok(_) => Ok(Self { path }),
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => Err(data(format!(
                "{} exists: another run is writing here (remove it if that run died)",
                path.display()
            ))),
            Err(e) => Err(e).with_context(|| format!("creating lock {}", path.display())),
        }
    }
}

impl Drop for OutputLock {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.path);
    }
}

/// Everything needed to replay a run.
#[derive(Debug, Serialize)]
pub struct RunManifest {
    pub command: String,
    pub argv: Vec<String>,
    /// Settings after applying template, config file and flags.
    pub config: Value,
    pub seed: Option<u64>,
    pub version: String,
    pub inputs: Vec<PathBuf>,
    pub outputs: Vec<PathBuf>,
    pub started_unix: f64,
    pub finished_unix: f64,
    /// Wall-clock details kept out of the primary outputs.
    #[serde(skip_serializing_if = "Value::is_null")]
    pub timing: Value,
}

/// A command in progress: holds the output lock and collects the manifest.
pub struct Run {
    pub manifest: RunManifest,
    manifest_path: PathBuf,
    _lock: OutputLock,
}

impl Run {
    /// Starts a run writing into directory `out`.
    pub fn in_dir(command: &str, out: &Path) -> Result<Self> {
        fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
        Self::start(command, out.join(".lock"), out.join("manifest.json"))
    }

    /// Starts a run whose primary output is the file `out`.
    pub fn for_file(command: &str, out: &Path) -> Result<Self> {
        let mut lock = out.as_os_str().to_owned();
        lock.push(".lock");
        Self::start(command, PathBuf::from(lock), out.with_extension("manifest.json"))
    }

    fn start(command: &str, lock: PathBuf, manifest_path: PathBuf) -> Result<Self> {
        let lock = OutputLock::acquire(lock)?;
        Ok(Self {
            manifest: RunManifest {
                command: command.into(),
                argv: std::env::args().collect(),
                config: Value::Null,
                seed: None,
                version: env!("CARGO_PKG_VERSION").into(),
                inputs: Vec::new(),
                outputs: Vec::new(),
                started_unix: now(),
                finished_unix: 0.0,
                timing: Value::Null,
            },
            manifest_path,
            _lock: lock,
        })
    }

    pub fn config(&mut self, config: &impl Serialize) -> Result<()> {
        self.manifest.config = serde_json::to_value(config)?;
        Ok(())
    }

    pub fn input(&mut self, p: &Path) {
        self.manifest.inputs.push(p.to_path_buf());
    }

    pub fn output(&mut self, p: &Path) {
        self.manifest.outputs.push(p.to_path_buf());
    }

    pub fn finish(mut self) -> Result<()> {
        self.manifest.finished_unix = now();
        let text = serde_json::to_string_pretty(&self.manifest)? + "\n";
        write_atomic(&self.manifest_path, text)
    }
}
