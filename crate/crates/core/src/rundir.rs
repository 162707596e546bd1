//! Run directory layout. Files are only ever created, never overwritten, so
//! a finished run cannot be altered by a later command.
//!
//! ```text
//! <root>/config.snapshot
//! <root>/initial/policy.ckpt
//! <root>/round_<i>/{policy.ckpt, pool.jsonl, selected.csv, dataset_delta.jsonl,
//!                   partition.csv, bandit_trace.csv, selection.csv, sampler.csv}
//! <root>/final/{policy.ckpt, metrics.csv, per_outcome.csv, dtw.csv, brake_sweep.csv, test_set.json}
//! ```

use std::fs::{File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use crate::config::RunConfig;
use crate::error::{Result, SgdaError};

pub const SNAPSHOT: &str = "config.snapshot";
pub const METRICS: &str = "final/metrics.csv";

#[derive(Debug, Clone)]
pub struct RunDir {
    root: PathBuf,
}

impl RunDir {
    /// Starts a new run; the directory must be absent or empty.
    pub fn create(root: &Path) -> Result<Self> {
        if root.exists() {
            let mut entries = std::fs::read_dir(root)?;
            if entries.next().is_some() {
                return Err(SgdaError::input(format!("run directory {} is not empty", root.display())));
            }
        } else {
            std::fs::create_dir_all(root)?;
        }
        Ok(Self { root: root.to_path_buf() })
    }

    /// Opens an existing run for reading.
    pub fn open(root: &Path) -> Result<Self> {
        if !root.join(SNAPSHOT).is_file() {
            return Err(SgdaError::input(format!("{} has no {SNAPSHOT}", root.display())));
        }
        Ok(Self { root: root.to_path_buf() })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn is_complete(&self) -> bool {
        self.root.join(METRICS).is_file()
    }

    pub fn config(&self) -> Result<RunConfig> {
        RunConfig::load(&self.root.join(SNAPSHOT))
    }

    pub fn write_snapshot(&self, cfg: &RunConfig) -> Result<()> {
        let mut f = self.create_file(SNAPSHOT)?;
        f.write_all(cfg.to_toml()?.as_bytes())?;
        f.flush()?;
        Ok(())
    }

    pub fn round_name(round: usize) -> String {
        format!("round_{round}")
    }

    /// Creates `rel`, and any missing parent directories, failing if it exists.
    pub fn create_file(&self, rel: impl AsRef<Path>) -> Result<BufWriter<File>> {
        let path = self.root.join(rel);
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent)?;
        }
        let file = OpenOptions::new().write(true).create_new(true).open(&path).map_err(|e| {
            SgdaError::Io(std::io::Error::new(e.kind(), format!("{}: {e}", path.display())))
        })?;
        Ok(BufWriter::new(file))
    }

    pub fn path(&self, rel: impl AsRef<Path>) -> PathBuf {
        self.root.join(rel)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn files_are_never_overwritten() {
        let dir = tempfile::tempdir().unwrap();
        let run = RunDir::create(dir.path()).unwrap();
        run.create_file("round_0/a.csv").unwrap().write_all(b"x").unwrap();
        assert!(run.create_file("round_0/a.csv").is_err());
        assert!(RunDir::create(dir.path()).is_err());
    }

    #[test]
    fn snapshot_reloads() {
        let dir = tempfile::tempdir().unwrap();
        let run = RunDir::create(&dir.path().join("r")).unwrap();
        let cfg = RunConfig { seed: 11, ..RunConfig::default() };
        run.write_snapshot(&cfg).unwrap();
        let again = RunDir::open(run.root()).unwrap();
        assert_eq!(again.config().unwrap(), cfg);
        assert!(!again.is_complete());
    }
}
