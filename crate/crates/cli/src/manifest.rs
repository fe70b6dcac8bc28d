//! Per-seed record of completed stages.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::CliError;

pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct RunManifest {
    pub config_hash: String,
    pub seed: u64,
    pub stages: BTreeMap<String, StageRecord>,
    #[serde(default)]
    pub failed_stage: Option<FailedStage>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageRecord {
    /// Hash of the stage's own settings chained with its upstream hashes.
    pub hash: String,
    pub complete: bool,
    pub upstream: Vec<String>,
    /// Paths relative to the run directory.
    pub artifacts: BTreeMap<String, PathBuf>,
    #[serde(default)]
    pub dataset_fingerprint: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FailedStage {
    pub stage: String,
    pub error: String,
}

impl RunManifest {
    pub fn load_or_new(dir: &Path, seed: u64) -> Result<Self, CliError> {
        let path = dir.join(MANIFEST_FILE);
        if !path.exists() {
            return Ok(Self {
                seed,
                ..Default::default()
            });
        }
        let text = std::fs::read_to_string(&path).map_err(|e| CliError::stage("manifest", e))?;
        let m: Self = serde_json::from_str(&text)
            .map_err(|e| CliError::stage("manifest", format!("{}: {e}", path.display())))?;
        if m.seed != seed {
            return Err(CliError::stage(
                "manifest",
                format!("{} belongs to seed {}, not {seed}", path.display(), m.seed),
            ));
        }
        Ok(m)
    }

    /// Write to a temporary file and rename over the old manifest.
    pub fn save(&self, dir: &Path) -> Result<(), CliError> {
        std::fs::create_dir_all(dir).map_err(|e| CliError::stage("manifest", e))?;
        let tmp = dir.join(format!("{MANIFEST_FILE}.tmp"));
        let text = serde_json::to_string_pretty(self).expect("manifest serializes");
        std::fs::write(&tmp, text).map_err(|e| CliError::stage("manifest", e))?;
        std::fs::rename(&tmp, dir.join(MANIFEST_FILE)).map_err(|e| CliError::stage("manifest", e))
    }

    /// Complete, recorded with `hash`, and every artifact still on disk.
    pub fn is_current(&self, stage: &str, hash: &str, dir: &Path) -> bool {
        self.stages
            .get(stage)
            .is_some_and(|r| r.complete && r.hash == hash && r.artifacts.values().all(|p| dir.join(p).exists()))
    }

    pub fn record(&mut self, stage: &str, record: StageRecord) {
        if self.failed_stage.as_ref().is_some_and(|f| f.stage == stage) {
            self.failed_stage = None;
        }
        self.stages.insert(stage.to_string(), record);
    }

    pub fn mark_failed(&mut self, stage: &str, error: &str) {
        if let Some(r) = self.stages.get_mut(stage) {
            r.complete = false;
        }
        self.failed_stage = Some(FailedStage {
            stage: stage.to_string(),
            error: error.to_string(),
        });
    }

    pub fn artifact(&self, stage: &str, name: &str) -> Option<&Path> {
        self.stages.get(stage)?.artifacts.get(name).map(PathBuf::as_path)
    }

    pub fn fingerprint(&self) -> Option<&str> {
        self.stages.get("data")?.dataset_fingerprint.as_deref()
    }
}
