//! Run manifest and experiment-directory lock.
//!
//! File digests are git-style object hashes, `sha256("blob <len>\0" ++ bytes)`,
//! so they match `git hash-object` in a SHA-256 repository.

use std::fs::{File, OpenOptions};
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::ExperimentConfig;
use crate::error::{CliError, CliResult};

pub const MANIFEST_FILE: &str = "manifest.json";
pub const LOCK_FILE: &str = ".lock";

pub fn blob_hash(bytes: &[u8]) -> String {
    let mut h = Sha256::new();
    h.update(format!("blob {}\0", bytes.len()).as_bytes());
    h.update(bytes);
    hex::encode(h.finalize())
}

pub fn hash_file(path: &Path) -> CliResult<String> {
    let bytes = std::fs::read(path).map_err(|e| CliError::io(path, e))?;
    Ok(blob_hash(&bytes))
}

fn now_unix() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FileEntry {
    /// Relative to the experiment directory, `/`-separated.
    pub path: String,
    pub sha256: String,
    pub bytes: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageRecord {
    pub command: String,
    pub started_unix: u64,
    pub finished_unix: u64,
    /// False when the stage stopped early; its outputs are partial.
    pub complete: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub config: ExperimentConfig,
    /// Hash over the effective configuration and any external input files.
    pub input_hash: String,
    pub created_unix: u64,
    pub updated_unix: u64,
    pub stages: Vec<StageRecord>,
    pub files: Vec<FileEntry>,
}

impl RunManifest {
    pub fn load_or_new(dir: &Path, cfg: &ExperimentConfig) -> CliResult<Self> {
        let input_hash = input_hash(cfg)?;
        let path = dir.join(MANIFEST_FILE);
        if path.exists() {
            let text = std::fs::read_to_string(&path).map_err(|e| CliError::io(&path, e))?;
            if let Ok(mut m) = serde_json::from_str::<RunManifest>(&text) {
                m.config = cfg.clone();
                m.input_hash = input_hash;
                return Ok(m);
            }
            log::warn!("{} is unreadable; starting a new manifest", path.display());
        }
        let now = now_unix();
        Ok(Self {
            config: cfg.clone(),
            input_hash,
            created_unix: now,
            updated_unix: now,
            stages: Vec::new(),
            files: Vec::new(),
        })
    }

    pub fn record_stage(&mut self, command: &str, started_unix: u64, outcome: Result<(), String>) {
        self.stages.push(StageRecord {
            command: command.to_string(),
            started_unix,
            finished_unix: now_unix(),
            complete: outcome.is_ok(),
            error: outcome.err(),
        });
    }

    /// Re-indexes every file under `dir` except the manifest and the lock.
    pub fn refresh_files(&mut self, dir: &Path) -> CliResult<()> {
        let mut paths = Vec::new();
        collect_files(dir, &mut paths)?;
        paths.sort();
        self.files.clear();
        for p in paths {
            let rel = relative(dir, &p);
            if rel == MANIFEST_FILE || rel == LOCK_FILE {
                continue;
            }
            let bytes = std::fs::read(&p).map_err(|e| CliError::io(&p, e))?;
            self.files.push(FileEntry {
                path: rel,
                sha256: blob_hash(&bytes),
                bytes: bytes.len() as u64,
            });
        }
        self.updated_unix = now_unix();
        Ok(())
    }

    pub fn write(&self, dir: &Path) -> CliResult<()> {
        let path = dir.join(MANIFEST_FILE);
        let text = serde_json::to_string_pretty(self).expect("manifest serializes");
        std::fs::write(&path, text + "\n").map_err(|e| CliError::io(&path, e))
    }

    pub fn read(dir: &Path) -> CliResult<Self> {
        let path = dir.join(MANIFEST_FILE);
        let text = std::fs::read_to_string(&path).map_err(|e| CliError::io(&path, e))?;
        serde_json::from_str(&text).map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))
    }

    /// Listed files whose current content no longer matches, and files on
    /// disk that are not listed.
    pub fn verify(&self, dir: &Path) -> CliResult<Vec<String>> {
        let mut problems = Vec::new();
        for f in &self.files {
            let p = dir.join(&f.path);
            match std::fs::read(&p) {
                Ok(bytes) if blob_hash(&bytes) == f.sha256 => {}
                Ok(_) => problems.push(format!("{}: checksum mismatch", f.path)),
                Err(_) => problems.push(format!("{}: missing", f.path)),
            }
        }
        let mut on_disk = Vec::new();
        collect_files(dir, &mut on_disk)?;
        for p in on_disk {
            let rel = relative(dir, &p);
            if rel != MANIFEST_FILE && rel != LOCK_FILE && !self.files.iter().any(|f| f.path == rel)
            {
                problems.push(format!("{rel}: not listed"));
            }
        }
        Ok(problems)
    }
}

fn input_hash(cfg: &ExperimentConfig) -> CliResult<String> {
    let mut h = Sha256::new();
    h.update(blob_hash(cfg.to_json_string().as_bytes()).as_bytes());
    let d = &cfg.data;
    for p in [
        &d.train_csv,
        &d.test_csv,
        &d.reference_csv,
        &d.prior_pool_csv,
    ] {
        if !p.is_empty() {
            h.update(p.as_bytes());
            h.update(hash_file(Path::new(p))?.as_bytes());
        }
    }
    Ok(hex::encode(h.finalize()))
}

fn relative(dir: &Path, p: &Path) -> String {
    let rel = p.strip_prefix(dir).unwrap_or(p);
    rel.components()
        .map(|c| c.as_os_str().to_string_lossy().into_owned())
        .collect::<Vec<_>>()
        .join("/")
}

fn collect_files(dir: &Path, out: &mut Vec<PathBuf>) -> CliResult<()> {
    for entry in std::fs::read_dir(dir).map_err(|e| CliError::io(dir, e))? {
        let entry = entry.map_err(|e| CliError::io(dir, e))?;
        let path = entry.path();
        let kind = entry.file_type().map_err(|e| CliError::io(&path, e))?;
        if kind.is_dir() {
            collect_files(&path, out)?;
        } else if kind.is_file() {
            out.push(path);
        }
    }
    Ok(())
}

/// Exclusive ownership of an experiment directory, released when dropped or
/// when the process exits.
#[derive(Debug)]
pub struct ExperimentLock {
    _file: File,
}

impl ExperimentLock {
    pub fn acquire(dir: &Path) -> CliResult<Self> {
        std::fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
        let path = dir.join(LOCK_FILE);
        let file = OpenOptions::new()
            .create(true)
            .truncate(false)
            .write(true)
            .open(&path)
            .map_err(|e| CliError::io(&path, e))?;
        match file.try_lock() {
            Ok(()) => Ok(Self { _file: file }),
            Err(std::fs::TryLockError::WouldBlock) => Err(CliError::Locked(dir.to_path_buf())),
            Err(std::fs::TryLockError::Error(e)) => Err(CliError::io(&path, e)),
        }
    }
}
