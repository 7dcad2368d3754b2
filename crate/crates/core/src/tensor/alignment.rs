use std::collections::{HashMap, HashSet};

use serde::Serialize;

use super::{ActivationMapStack, ActivationTable, EmbeddingTable};

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
#[serde(tag = "status", rename_all = "snake_case")]
pub enum AlignmentStatus {
    Identical,
    /// Same id set, different order. `permutation[i]` is the position in the
    /// right-hand input of the left-hand input's `i`-th id.
    Permuted {
        permutation: Vec<usize>,
    },
    Mismatch {
        missing_in_right: Vec<String>,
        missing_in_left: Vec<String>,
    },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct PairAlignment {
    pub left: String,
    pub right: String,
    #[serde(flatten)]
    pub status: AlignmentStatus,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct AlignmentReport {
    pub pairs: Vec<PairAlignment>,
}

impl AlignmentReport {
    pub fn is_aligned(&self) -> bool {
        self.pairs
            .iter()
            .all(|p| !matches!(p.status, AlignmentStatus::Mismatch { .. }))
    }
}

pub fn compare_ids(left: &[String], right: &[String]) -> AlignmentStatus {
    if left == right {
        return AlignmentStatus::Identical;
    }
    let right_pos: HashMap<&str, usize> = right
        .iter()
        .enumerate()
        .map(|(i, id)| (id.as_str(), i))
        .collect();
    let left_set: HashSet<&str> = left.iter().map(String::as_str).collect();
    let missing_in_right: Vec<String> = left
        .iter()
        .filter(|id| !right_pos.contains_key(id.as_str()))
        .cloned()
        .collect();
    let missing_in_left: Vec<String> = right
        .iter()
        .filter(|id| !left_set.contains(id.as_str()))
        .cloned()
        .collect();
    if missing_in_right.is_empty() && missing_in_left.is_empty() {
        AlignmentStatus::Permuted {
            permutation: left.iter().map(|id| right_pos[id.as_str()]).collect(),
        }
    } else {
        AlignmentStatus::Mismatch {
            missing_in_right,
            missing_in_left,
        }
    }
}

/// Patch ids have the form `<sample>#<neuron>[#<cluster>]`; whole-image
/// embeddings use the bare sample id.
pub fn sample_of_item(item_id: &str) -> &str {
    item_id.split('#').next().unwrap_or(item_id)
}

/// Compares the sample ids of activations against maps and against the
/// samples covered by an embedding table. Report only; callers decide whether
/// to refuse.
pub fn validate_alignment(
    acts: &ActivationTable,
    maps: &ActivationMapStack,
    embs: &EmbeddingTable,
) -> AlignmentReport {
    let mut seen = HashSet::new();
    let emb_samples: Vec<String> = embs
        .item_ids()
        .iter()
        .map(|id| sample_of_item(id))
        .filter(|s| seen.insert(*s))
        .map(str::to_string)
        .collect();
    AlignmentReport {
        pairs: vec![
            PairAlignment {
                left: "activations".into(),
                right: "maps".into(),
                status: compare_ids(acts.sample_ids(), maps.sample_ids()),
            },
            PairAlignment {
                left: "activations".into(),
                right: "embeddings".into(),
                status: compare_ids(acts.sample_ids(), &emb_samples),
            },
        ],
    }
}
