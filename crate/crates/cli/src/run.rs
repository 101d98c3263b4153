//! Output directory ownership and run manifests.

use std::collections::BTreeMap;
use std::fs::OpenOptions;
use std::io::Write;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};

pub const CODE_VERSION: &str = env!("CARGO_PKG_VERSION");
const LOCK_NAME: &str = ".nowcast.lock";

/// Exclusive ownership of an output directory for one invocation. Released on drop.
#[derive(Debug)]
pub struct RunLock {
    path: PathBuf,
}

impl RunLock {
    pub fn acquire(dir: &Path) -> Result<Self> {
        std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
        let path = dir.join(LOCK_NAME);
        match OpenOptions::new().write(true).create_new(true).open(&path) {
            Ok(mut f) => {
                writeln!(f, "{}", std::process::id())?;
                Ok(Self { path })
            }
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => bail!(
                "{} is in use by another invocation (remove {} if that run died)",
                dir.display(),
                path.display()
            ),
            Err(e) => Err(e).with_context(|| format!("creating {}", path.display())),
        }
    }
}

impl Drop for RunLock {
    fn drop(&mut self) {
        let _ = std::fs::remove_file(&self.path);
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub stage: Option<String>,
    pub config_hash: String,
    pub code_version: String,
    pub seed: u64,
    pub checkpoints: Vec<PathBuf>,
    pub reports: Vec<PathBuf>,
    pub outputs: Vec<PathBuf>,
    /// Seconds per named phase.
    pub timings: BTreeMap<String, f64>,
}

impl RunManifest {
    pub fn new(command: &str, stage: Option<&str>, config_hash: String, seed: u64) -> Self {
        Self {
            command: command.into(),
            stage: stage.map(Into::into),
            config_hash,
            code_version: CODE_VERSION.into(),
            seed,
            checkpoints: Vec::new(),
            reports: Vec::new(),
            outputs: Vec::new(),
            timings: BTreeMap::new(),
        }
    }

    /// Writes to a fresh numbered file under `dir/manifests`; existing manifests are
    /// never overwritten.
    pub fn write(&self, dir: &Path) -> Result<PathBuf> {
        let mdir = dir.join("manifests");
        std::fs::create_dir_all(&mdir)?;
        let stem = match &self.stage {
            Some(s) => format!("{}-{}", self.command, s),
            None => self.command.clone(),
        };
        let body = serde_json::to_vec_pretty(self)?;
        for i in 1.. {
            let path = mdir.join(format!("{stem}-{i:03}.json"));
            match OpenOptions::new().write(true).create_new(true).open(&path) {
                Ok(mut f) => {
                    f.write_all(&body)?;
                    return Ok(path);
                }
                Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => continue,
                Err(e) => return Err(e).with_context(|| format!("writing {}", path.display())),
            }
        }
        unreachable!("manifest numbering is unbounded")
    }
}

/// Writes `bytes` via a temporary file and rename.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent)?;
    }
    let tmp = path.with_extension("partial");
    std::fs::write(&tmp, bytes).with_context(|| format!("writing {}", tmp.display()))?;
    std::fs::rename(&tmp, path).with_context(|| format!("writing {}", path.display()))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn lock_is_exclusive_and_released() {
        let dir = tempfile::tempdir().unwrap();
        let a = RunLock::acquire(dir.path()).unwrap();
        assert!(RunLock::acquire(dir.path()).is_err());
        drop(a);
        RunLock::acquire(dir.path()).unwrap();
    }

    #[test]
    fn manifests_are_never_overwritten() {
        let dir = tempfile::tempdir().unwrap();
        let m = RunManifest::new("train", Some("interpolator"), "abc".into(), 1);
        let p1 = m.write(dir.path()).unwrap();
        let p2 = m.write(dir.path()).unwrap();
        assert_ne!(p1, p2);
        let back: RunManifest = serde_json::from_slice(&std::fs::read(&p1).unwrap()).unwrap();
        assert_eq!(back, m);
    }
}
