//! Run directories: every artifact is written atomically and recorded, and
//! `manifest.json` goes in last.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::{LabConfig, Seeds};
use crate::error::{LabError, Result};

pub const MANIFEST_FILE: &str = "manifest.json";

/// Writes to a sibling temporary file, syncs it and renames it over `path`.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let name = path
        .file_name()
        .ok_or_else(|| LabError::io(path, std::io::Error::other("path has no file name")))?;
    let mut tmp_name = std::ffi::OsString::from(".");
    tmp_name.push(name);
    tmp_name.push(".tmp");
    let tmp = path.with_file_name(tmp_name);
    let result = (|| {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
        fs::rename(&tmp, path)
    })();
    if let Err(e) = result {
        let _ = fs::remove_file(&tmp);
        return Err(LabError::io(path, e));
    }
    Ok(())
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FileDigest {
    pub file: String,
    pub sha256: String,
    pub bytes: u64,
}

impl FileDigest {
    pub fn of(file: impl Into<String>, bytes: &[u8]) -> Self {
        Self {
            file: file.into(),
            sha256: sha256_hex(bytes),
            bytes: bytes.len() as u64,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub version: String,
    pub config: LabConfig,
    pub seeds: Seeds,
    /// Checkpoints read or written by the run.
    pub checkpoints: Vec<FileDigest>,
    /// Every file in the run directory except this manifest.
    pub artifacts: Vec<FileDigest>,
    pub started_at: String,
    pub wall_clock_seconds: f64,
}

/// Default location: `runs/<UTC timestamp>-<command>`.
pub fn default_run_dir(command: &str) -> PathBuf {
    let stamp = chrono::Utc::now().format("%Y%m%dT%H%M%SZ");
    PathBuf::from("runs").join(format!("{stamp}-{command}"))
}

pub struct RunDir {
    path: PathBuf,
    command: String,
    config: LabConfig,
    checkpoints: Vec<FileDigest>,
    artifacts: Vec<FileDigest>,
    started_at: String,
    clock: Instant,
}

impl RunDir {
    /// Creates `path`; refuses a directory that already holds a manifest.
    pub fn create(path: &Path, command: &str, config: &LabConfig) -> Result<Self> {
        fs::create_dir_all(path).map_err(|e| LabError::io(path, e))?;
        let manifest = path.join(MANIFEST_FILE);
        if manifest.exists() {
            return Err(LabError::io(
                &manifest,
                std::io::Error::new(std::io::ErrorKind::AlreadyExists, "run directory already completed"),
            ));
        }
        Ok(Self {
            path: path.to_path_buf(),
            command: command.into(),
            config: config.clone(),
            checkpoints: Vec::new(),
            artifacts: Vec::new(),
            started_at: chrono::Utc::now().to_rfc3339_opts(chrono::SecondsFormat::Secs, true),
            clock: Instant::now(),
        })
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    pub fn elapsed_seconds(&self) -> f64 {
        self.clock.elapsed().as_secs_f64()
    }

    pub fn record_checkpoint(&mut self, label: impl Into<String>, bytes: &[u8]) {
        self.checkpoints.push(FileDigest::of(label, bytes));
    }

    pub fn write(&mut self, name: &str, bytes: &[u8]) -> Result<PathBuf> {
        let path = self.path.join(name);
        write_atomic(&path, bytes)?;
        self.artifacts.retain(|a| a.file != name);
        self.artifacts.push(FileDigest::of(name, bytes));
        Ok(path)
    }

    pub fn write_json<T: Serialize>(&mut self, name: &str, value: &T) -> Result<PathBuf> {
        let mut bytes = serde_json::to_vec_pretty(value).expect("report types serialize");
        bytes.push(b'\n');
        self.write(name, &bytes)
    }

    /// Writes the manifest and returns the run directory.
    pub fn finish(self) -> Result<PathBuf> {
        let manifest = RunManifest {
            command: self.command,
            version: env!("CARGO_PKG_VERSION").into(),
            seeds: self.config.seed.clone(),
            config: self.config,
            checkpoints: self.checkpoints,
            artifacts: self.artifacts,
            started_at: self.started_at,
            wall_clock_seconds: self.clock.elapsed().as_secs_f64(),
        };
        let mut bytes = serde_json::to_vec_pretty(&manifest).expect("manifest serializes");
        bytes.push(b'\n');
        write_atomic(&self.path.join(MANIFEST_FILE), &bytes)?;
        Ok(self.path)
    }
}
