//! Run-directory layout, locking and atomic stage output.

use std::fs;
use std::path::{Path, PathBuf};

use sieve_core::{RunManifest, Stage};

use crate::error::{CliError, CliResult};

pub const LOCK_FILE: &str = ".sieve.lock";
pub const MANIFEST: &str = "manifest.json";
pub const GENERATE_DIR: &str = "generate";
pub const INPUTS_DIR: &str = "inputs";

pub fn stage_dir(run_dir: &Path, stage: Stage) -> PathBuf {
    run_dir.join(stage.name())
}

pub fn manifest_path(run_dir: &Path, stage: Stage) -> PathBuf {
    stage_dir(run_dir, stage).join(MANIFEST)
}

/// Fails with a stage-order error unless `stage`'s prerequisite has a
/// manifest in `run_dir`.
pub fn require_prerequisite(run_dir: &Path, stage: Stage) -> CliResult<Option<RunManifest>> {
    let Some(pre) = stage.prerequisite() else {
        return Ok(None);
    };
    let path = manifest_path(run_dir, pre);
    if !path.exists() {
        return Err(sieve_core::SieveError::StageOrder(format!(
            "`{stage}` needs the outputs of `{pre}`; run `sieve {pre}` first (no {})",
            path.display()
        ))
        .into());
    }
    Ok(Some(RunManifest::load(&path)?))
}

/// Exclusive lock on a run directory, released on drop.
#[derive(Debug)]
pub struct RunLock {
    path: PathBuf,
}

impl RunLock {
    pub fn acquire(run_dir: &Path) -> CliResult<Self> {
        fs::create_dir_all(run_dir).map_err(|e| CliError::io(run_dir, e))?;
        let path = run_dir.join(LOCK_FILE);
        match fs::OpenOptions::new()
            .write(true)
            .create_new(true)
            .open(&path)
        {
            Ok(mut f) => {
                use std::io::Write;
                let _ = writeln!(f, "{}", std::process::id());
                Ok(Self { path })
            }
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => Err(CliError::Locked {
                dir: run_dir.to_path_buf(),
                lock: path,
            }),
            Err(e) => Err(CliError::io(path, e)),
        }
    }
}

impl Drop for RunLock {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.path);
    }
}

/// Output directory built under a temporary name and swapped into place by
/// [`StagingDir::commit`]. Dropped without commit, it is removed.
#[derive(Debug)]
pub struct StagingDir {
    tmp: PathBuf,
    target: PathBuf,
    committed: bool,
}

impl StagingDir {
    pub fn begin(run_dir: &Path, name: &str) -> CliResult<Self> {
        let tmp = run_dir.join(format!(".{name}.tmp"));
        if tmp.exists() {
            fs::remove_dir_all(&tmp).map_err(|e| CliError::io(&tmp, e))?;
        }
        fs::create_dir_all(&tmp).map_err(|e| CliError::io(&tmp, e))?;
        Ok(Self {
            tmp,
            target: run_dir.join(name),
            committed: false,
        })
    }

    pub fn path(&self, file: &str) -> PathBuf {
        self.tmp.join(file)
    }

    pub fn target(&self) -> &Path {
        &self.target
    }

    pub fn commit(mut self) -> CliResult<PathBuf> {
        let old = self.target.with_file_name(format!(
            ".{}.old",
            self.target
                .file_name()
                .and_then(|n| n.to_str())
                .unwrap_or("stage")
        ));
        if old.exists() {
            fs::remove_dir_all(&old).map_err(|e| CliError::io(&old, e))?;
        }
        if self.target.exists() {
            fs::rename(&self.target, &old).map_err(|e| CliError::io(&self.target, e))?;
        }
        fs::rename(&self.tmp, &self.target).map_err(|e| CliError::io(&self.target, e))?;
        if old.exists() {
            fs::remove_dir_all(&old).map_err(|e| CliError::io(&old, e))?;
        }
        self.committed = true;
        Ok(self.target.clone())
    }
}

impl Drop for StagingDir {
    fn drop(&mut self) {
        if !self.committed {
            let _ = fs::remove_dir_all(&self.tmp);
        }
    }
}

/// Removes outputs of stages after `stage`, which a rerun makes stale.
pub fn clear_downstream(run_dir: &Path, stage: Stage) -> CliResult<()> {
    for later in Stage::ALL.iter().filter(|s| **s > stage) {
        let dir = stage_dir(run_dir, *later);
        if dir.exists() {
            fs::remove_dir_all(&dir).map_err(|e| CliError::io(&dir, e))?;
        }
    }
    Ok(())
}
