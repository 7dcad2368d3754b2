use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::jsonio::{read_json, write_json};
use crate::error::{Result, SieveError};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Select,
    Hypothesize,
    Verify,
    Report,
}

impl Stage {
    pub const ALL: [Stage; 4] = [
        Stage::Select,
        Stage::Hypothesize,
        Stage::Verify,
        Stage::Report,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Stage::Select => "select",
            Stage::Hypothesize => "hypothesize",
            Stage::Verify => "verify",
            Stage::Report => "report",
        }
    }

    pub fn prerequisite(self) -> Option<Stage> {
        match self {
            Stage::Select => None,
            Stage::Hypothesize => Some(Stage::Select),
            Stage::Verify => Some(Stage::Hypothesize),
            Stage::Report => Some(Stage::Verify),
        }
    }
}

impl std::fmt::Display for Stage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// Provenance written next to every stage's outputs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunManifest {
    pub stage: Stage,
    pub inputs: BTreeMap<String, PathBuf>,
    pub config_digest: String,
    pub created_at: String,
    #[serde(default)]
    pub outputs: Vec<String>,
    #[serde(default)]
    pub notes: BTreeMap<String, serde_json::Value>,
}

impl RunManifest {
    pub fn new(stage: Stage, config_digest: impl Into<String>) -> Self {
        Self {
            stage,
            inputs: BTreeMap::new(),
            config_digest: config_digest.into(),
            created_at: timestamp_now(),
            outputs: Vec::new(),
            notes: BTreeMap::new(),
        }
    }

    pub fn with_input(mut self, role: &str, path: impl Into<PathBuf>) -> Self {
        self.inputs.insert(role.to_string(), path.into());
        self
    }

    /// Every referenced input must exist when the stage runs.
    pub fn check_inputs(&self) -> Result<()> {
        for (role, path) in &self.inputs {
            if !path.exists() {
                return Err(SieveError::Validation(format!(
                    "{} input {role:?} missing: {}",
                    self.stage,
                    path.display()
                )));
            }
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_json(path, self)
    }

    pub fn load(path: &Path) -> Result<Self> {
        read_json(path)
    }
}

/// RFC 3339 UTC. Honors `SOURCE_DATE_EPOCH` for reproducible builds.
pub fn timestamp_now() -> String {
    let from_env = std::env::var("SOURCE_DATE_EPOCH")
        .ok()
        .and_then(|s| s.trim().parse::<i64>().ok())
        .and_then(|secs| chrono::DateTime::from_timestamp(secs, 0));
    from_env
        .unwrap_or_else(chrono::Utc::now)
        .to_rfc3339_opts(chrono::SecondsFormat::Secs, true)
}
