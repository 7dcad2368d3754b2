use std::collections::HashSet;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Result, SieveError};

/// Lowercases, trims and collapses internal whitespace.
pub fn normalize_concept(text: &str) -> String {
    text.split_whitespace()
        .collect::<Vec<_>>()
        .join(" ")
        .to_lowercase()
}

/// Ordered, de-duplicated concept vocabulary.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct ConceptSet {
    concepts: Vec<String>,
    source_id: String,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct ConceptFile {
    source_id: String,
    concepts: Vec<String>,
}

impl ConceptSet {
    pub fn new<S: AsRef<str>>(concepts: &[S], source_id: impl Into<String>) -> Result<Self> {
        if concepts.is_empty() {
            return Err(SieveError::Validation("concept set is empty".into()));
        }
        let mut seen = HashSet::new();
        let mut out = Vec::with_capacity(concepts.len());
        for (i, raw) in concepts.iter().enumerate() {
            let c = normalize_concept(raw.as_ref());
            if c.is_empty() {
                return Err(SieveError::Validation(format!("concept {i} is empty")));
            }
            if !seen.insert(c.clone()) {
                return Err(SieveError::Validation(format!("duplicate concept {c:?}")));
            }
            out.push(c);
        }
        Ok(Self {
            concepts: out,
            source_id: source_id.into(),
        })
    }

    /// Loads `{"source_id": ..., "concepts": [...]}` JSON, or plain text with
    /// one concept per line (source id = file stem, blank lines skipped).
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| SieveError::io(path, e))?;
        if path.extension().is_some_and(|e| e == "json") {
            let file: ConceptFile =
                serde_json::from_str(&text).map_err(|e| SieveError::json(path, e))?;
            Self::new(&file.concepts, file.source_id)
        } else {
            let lines: Vec<&str> = text.lines().filter(|l| !l.trim().is_empty()).collect();
            let stem = path
                .file_stem()
                .map(|s| s.to_string_lossy().into_owned())
                .unwrap_or_default();
            Self::new(&lines, stem)
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        super::jsonio::write_json(path, self)
    }

    pub fn concepts(&self) -> &[String] {
        &self.concepts
    }

    pub fn source_id(&self) -> &str {
        &self.source_id
    }

    pub fn len(&self) -> usize {
        self.concepts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.concepts.is_empty()
    }

    pub fn get(&self, index: usize) -> Option<&str> {
        self.concepts.get(index).map(String::as_str)
    }

    pub fn index_of(&self, text: &str) -> Option<usize> {
        let t = normalize_concept(text);
        self.concepts.iter().position(|c| *c == t)
    }
}
