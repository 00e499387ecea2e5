//! One experiment directory: its configuration, lock, manifest and layout.
//!
//! ```text
//! <out>/config.toml, config.json     effective configuration
//! <out>/manifest.json                stages and checksums of every file
//! <out>/data/                        train.csv, test.csv, normalizer.json, references
//! <out>/train/                       loss.csv, checkpoints/, selected.json
//! <out>/samples/                     ensemble_NN.csv + .json, index.json
//! <out>/eval/                        metrics.jsonl, kde_NN_xJ.csv
//! <out>/study/                       overfitting study tables and report.json
//! ```

use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::de::DeserializeOwned;
use serde::Serialize;

use crate::config::ExperimentConfig;
use crate::error::{CliError, CliResult};
use crate::manifest::{ExperimentLock, RunManifest};

/// Seed streams of the independent random tasks of a run.
pub mod streams {
    pub const TRAIN_DATA: u64 = 1;
    pub const TEST_DATA: u64 = 2;
    pub const REFERENCE_POOL: u64 = 3;
    pub const PRIOR_POOL: u64 = 4;
    pub const PROBLEM: u64 = 5;
    pub const SAMPLE: u64 = 6;
    pub const EVALUATE: u64 = 7;
    pub const STUDY: u64 = 8;
}

/// A generator for `stream` of the run seed.
pub fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// A seed for sub-task `index` of `stream`.
pub fn derived_seed(seed: u64, stream: u64, index: u64) -> u64 {
    let mut rng = stream_rng(seed, stream);
    rng.set_word_pos(u128::from(index) * 2);
    rng.next_u64()
}

pub struct Experiment {
    pub cfg: ExperimentConfig,
    pub dir: PathBuf,
    _lock: ExperimentLock,
}

impl Experiment {
    /// Takes ownership of `cfg.output` and writes the effective configuration.
    pub fn open(cfg: ExperimentConfig) -> CliResult<Self> {
        let dir = cfg.output.clone();
        let lock = ExperimentLock::acquire(&dir)?;
        let exp = Self {
            cfg,
            dir,
            _lock: lock,
        };
        exp.write_text("config.toml", &exp.cfg.to_toml_string())?;
        exp.write_text("config.json", &(exp.cfg.to_json_string() + "\n"))?;
        Ok(exp)
    }

    pub fn path(&self, rel: &str) -> PathBuf {
        self.dir.join(rel)
    }

    /// Creates `rel` (a directory) and returns its path.
    pub fn subdir(&self, rel: &str) -> CliResult<PathBuf> {
        let p = self.path(rel);
        std::fs::create_dir_all(&p).map_err(|e| CliError::io(&p, e))?;
        Ok(p)
    }

    pub fn write_text(&self, rel: &str, text: &str) -> CliResult<()> {
        let p = self.path(rel);
        if let Some(parent) = p.parent() {
            std::fs::create_dir_all(parent).map_err(|e| CliError::io(parent, e))?;
        }
        std::fs::write(&p, text).map_err(|e| CliError::io(&p, e))
    }

    pub fn write_json<T: Serialize + ?Sized>(&self, rel: &str, value: &T) -> CliResult<()> {
        let text = serde_json::to_string_pretty(value).expect("serializable value");
        self.write_text(rel, &(text + "\n"))
    }

    pub fn read_json<T: DeserializeOwned>(&self, rel: &str) -> CliResult<T> {
        read_json_file(&self.path(rel))
    }

    /// Runs one command and records it, with the resulting file index, in the
    /// manifest whether or not it succeeds.
    pub fn stage<T>(&self, command: &str, f: impl FnOnce(&Self) -> CliResult<T>) -> CliResult<T> {
        let started = SystemTime::now()
            .duration_since(UNIX_EPOCH)
            .map(|d| d.as_secs())
            .unwrap_or(0);
        log::info!("{command}: starting in {}", self.dir.display());
        let result = f(self);
        let mut manifest = RunManifest::load_or_new(&self.dir, &self.cfg)?;
        manifest.record_stage(
            command,
            started,
            result.as_ref().map(|_| ()).map_err(|e| e.to_string()),
        );
        manifest.refresh_files(&self.dir)?;
        manifest.write(&self.dir)?;
        result
    }
}

pub fn read_json_file<T: DeserializeOwned>(path: &Path) -> CliResult<T> {
    let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| {
        CliError::Core(cfm_core::Error::Format {
            path: path.to_path_buf(),
            reason: e.to_string(),
        })
    })
}
