//! `manifest.json`: what produced a run directory and what it contains.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::error::Result;
use crate::io::{self, FileRecord, MANIFEST_FILE};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Versions {
    pub pcrlb_cli: String,
    pub pcrlb_core: String,
    pub parallel: bool,
}

impl Versions {
    pub fn current() -> Self {
        Self {
            pcrlb_cli: env!("CARGO_PKG_VERSION").to_string(),
            pcrlb_core: pcrlb_core::VERSION.to_string(),
            parallel: pcrlb_core::par::is_parallel(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageRecord {
    /// Seconds since the Unix epoch when the stage started.
    pub started_unix: f64,
    pub wall_clock_seconds: f64,
    pub workers: usize,
    pub files: Vec<FileRecord>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub config_hash: String,
    pub seed: u64,
    pub model: String,
    pub versions: Versions,
    pub config: FileRecord,
    /// Keyed by stage name: `bound`, `identify`, `analyze`.
    pub stages: BTreeMap<String, StageRecord>,
}

impl RunManifest {
    /// Loads the directory's manifest if it belongs to the same configuration,
    /// otherwise starts a fresh one.
    pub fn open(dir: &Path, config: &RunConfig, config_file: FileRecord) -> Self {
        let hash = config.hash();
        let existing: Option<Self> = io::read_json(&dir.join(MANIFEST_FILE)).ok();
        match existing {
            Some(mut m) if m.config_hash == hash => {
                m.versions = Versions::current();
                m.config = config_file;
                m
            }
            _ => Self {
                config_hash: hash,
                seed: config.seed,
                model: config.model.clone(),
                versions: Versions::current(),
                config: config_file,
                stages: BTreeMap::new(),
            },
        }
    }

    pub fn record(&mut self, stage: &str, record: StageRecord) {
        self.stages.insert(stage.to_string(), record);
    }

    pub fn write(&self, dir: &Path) -> Result<FileRecord> {
        io::write_json(dir, MANIFEST_FILE, self)
    }

    /// Every file listed, across all stages.
    pub fn files(&self) -> impl Iterator<Item = &FileRecord> {
        std::iter::once(&self.config).chain(self.stages.values().flat_map(|s| s.files.iter()))
    }
}
