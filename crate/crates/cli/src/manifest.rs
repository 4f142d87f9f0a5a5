//! The record every command leaves in its output directory.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};

use crate::config::RunConfig;

pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub args: Vec<String>,
    pub config_hash: String,
    pub seeds: BTreeMap<String, u64>,
    pub build: String,
    pub out_dir: PathBuf,
    /// Milliseconds since the Unix epoch.
    pub started_at_ms: u64,
    pub finished_at_ms: Option<u64>,
    pub exit_code: Option<i32>,
}

pub fn now_ms() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_millis() as u64)
}

impl RunManifest {
    pub fn start(command: &str, args: Vec<String>, cfg: &RunConfig, out_dir: &Path) -> Self {
        RunManifest {
            command: command.to_string(),
            args,
            config_hash: cfg.hash(),
            seeds: cfg.seed_set(),
            build: env!("MOBIRL_GIT_DESCRIBE").to_string(),
            out_dir: out_dir.to_path_buf(),
            started_at_ms: now_ms(),
            finished_at_ms: None,
            exit_code: None,
        }
    }

    /// Writes (or replaces) the directory's single manifest.
    pub fn write(&self) -> std::io::Result<()> {
        std::fs::create_dir_all(&self.out_dir)?;
        std::fs::write(self.out_dir.join(MANIFEST_FILE), serde_json::to_vec_pretty(self)?)
    }

    pub fn finish(&mut self, exit_code: i32) -> std::io::Result<()> {
        self.finished_at_ms = Some(now_ms());
        self.exit_code = Some(exit_code);
        self.write()
    }
}
