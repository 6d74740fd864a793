use std::fs::{self, File, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::Serialize;
use serde_json::Value;

use crate::CliError;

/// Directory layout of one pipeline run.
#[derive(Debug, Clone)]
pub struct Workspace {
    root: PathBuf,
}

/// Held for the duration of a mutating subcommand.
#[derive(Debug)]
pub struct Lock {
    path: PathBuf,
}

impl Drop for Lock {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.path);
    }
}

impl Workspace {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }

    pub fn path(&self, rel: &str) -> PathBuf {
        self.root.join(rel)
    }

    pub fn lock(&self) -> Result<Lock, CliError> {
        fs::create_dir_all(&self.root).map_err(wavediff::Error::from)?;
        let path = self.root.join(".lock");
        match OpenOptions::new().write(true).create_new(true).open(&path) {
            Ok(mut f) => {
                let _ = writeln!(f, "{}", std::process::id());
                Ok(Lock { path })
            }
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => {
                let owner = fs::read_to_string(&path).unwrap_or_default();
                Err(CliError::Runtime(format!(
                    "workspace {} is locked by process {} (delete {} if it is stale)",
                    self.root.display(),
                    owner.trim(),
                    path.display()
                )))
            }
            Err(e) => Err(wavediff::Error::from(e).into()),
        }
    }

    /// Fails unless the stage summary at `rel` was written under `digest`.
    pub fn check_lineage(&self, rel: &str, digest: &str, force: bool) -> Result<(), CliError> {
        let path = self.path(rel);
        if !path.exists() {
            return Err(CliError::Runtime(format!(
                "{} not found; run the earlier stage first",
                path.display()
            )));
        }
        let summary: Value = read_json(&path)?;
        let found = summary.get("config_digest").and_then(Value::as_str).unwrap_or("");
        if found != digest {
            if force {
                log::warn!("{} comes from another configuration; continuing (--force)", path.display());
            } else {
                return Err(CliError::Runtime(format!(
                    "{} was produced by config {}, current config is {} (rerun the stage or pass --force)",
                    path.display(),
                    short(found),
                    short(digest)
                )));
            }
        }
        Ok(())
    }
}

pub fn short(digest: &str) -> &str {
    &digest[..digest.len().min(12)]
}

/// Writes through a temporary file and renames it into place.
pub fn write_atomic(path: &Path, write: impl FnOnce(&mut File) -> wavediff::Result<()>) -> Result<(), CliError> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(wavediff::Error::from)?;
    }
    let tmp = path.with_extension("partial");
    let mut f = File::create(&tmp).map_err(wavediff::Error::from)?;
    write(&mut f)?;
    f.sync_all().map_err(wavediff::Error::from)?;
    fs::rename(&tmp, path).map_err(wavediff::Error::from)?;
    Ok(())
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), CliError> {
    write_atomic(path, |f| {
        serde_json::to_writer_pretty(&mut *f, value)?;
        f.write_all(b"\n")?;
        Ok(())
    })
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T, CliError> {
    let f = File::open(path).map_err(|e| CliError::Runtime(format!("{}: {e}", path.display())))?;
    Ok(serde_json::from_reader(std::io::BufReader::new(f)).map_err(wavediff::Error::from)?)
}
