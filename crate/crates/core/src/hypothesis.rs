//! Concept scoring for clusters of high-activation patches.
//!
//! A cluster's score for concept `t` is the mean cosine similarity between
//! its patch embeddings and the embedding of `t`; each cluster keeps its
//! top-K concepts as hypotheses.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::clustering::ClusterAssignment;
use crate::error::{Result, SieveError};
use crate::tensor::{normalize_concept, ConceptSet, DenseTensor, EmbeddingTable};

pub const DEFAULT_TOP_K: usize = 2;

fn norm(v: &[f32]) -> f64 {
    v.iter()
        .map(|&x| f64::from(x) * f64::from(x))
        .sum::<f64>()
        .sqrt()
}

pub fn cosine_similarity(u: &[f32], v: &[f32]) -> Result<f64> {
    if u.len() != v.len() {
        return Err(SieveError::Validation(format!(
            "embedding lengths differ: {} vs {}",
            u.len(),
            v.len()
        )));
    }
    let (nu, nv) = (norm(u), norm(v));
    if nu == 0.0 || nv == 0.0 {
        return Err(SieveError::ZeroNorm);
    }
    let dot: f64 = u
        .iter()
        .zip(v)
        .map(|(&a, &b)| f64::from(a) * f64::from(b))
        .sum();
    Ok((dot / (nu * nv)).clamp(-1.0, 1.0))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ClusterRef {
    pub neuron_id: usize,
    pub cluster_index: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConceptScoreRow {
    pub cluster: ClusterRef,
    /// One score per concept, in concept-set order.
    pub scores: Vec<f64>,
}

fn check_space(a: &EmbeddingTable, b: &EmbeddingTable) -> Result<()> {
    if a.space_id() != b.space_id() {
        return Err(SieveError::SpaceMismatch {
            left: a.space_id().to_string(),
            right: b.space_id().to_string(),
        });
    }
    if a.dim() != b.dim() {
        return Err(SieveError::Validation(format!(
            "embedding dims differ: {} vs {}",
            a.dim(),
            b.dim()
        )));
    }
    Ok(())
}

/// Mean patch-to-concept cosine for every concept.
///
/// Computed as the dot product of the mean unit patch vector with each unit
/// concept vector, which equals the mean of the individual cosines.
pub fn cluster_concept_scores(
    cluster: ClusterRef,
    cluster_patch_embs: &EmbeddingTable,
    concept_embs: &EmbeddingTable,
) -> Result<ConceptScoreRow> {
    if cluster_patch_embs.is_empty() {
        return Err(SieveError::EmptyInput("cluster has no patches"));
    }
    check_space(cluster_patch_embs, concept_embs)?;
    let dim = cluster_patch_embs.dim();
    let mut mean = vec![0.0f64; dim];
    for row in cluster_patch_embs.rows() {
        let n = norm(row);
        for (m, &x) in mean.iter_mut().zip(row) {
            *m += f64::from(x) / n;
        }
    }
    let count = cluster_patch_embs.len() as f64;
    mean.iter_mut().for_each(|m| *m /= count);
    let scores = concept_embs
        .rows()
        .map(|t| {
            let n = norm(t);
            let dot: f64 = mean.iter().zip(t).map(|(m, &x)| m * f64::from(x)).sum();
            (dot / n).clamp(-1.0, 1.0)
        })
        .collect();
    Ok(ConceptScoreRow { cluster, scores })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Hypothesis {
    pub neuron_id: usize,
    pub cluster_index: usize,
    pub concept_index: usize,
    pub concept_text: String,
    pub score: f64,
    /// Another cluster of the same neuron proposed this concept with a higher score.
    #[serde(default)]
    pub duplicate: bool,
}

/// The `k` best concepts, descending by score, ties by concept index.
pub fn top_k_concepts(
    row: &ConceptScoreRow,
    concepts: &ConceptSet,
    k: usize,
) -> Result<Vec<Hypothesis>> {
    let n = concepts.len();
    if row.scores.len() != n {
        return Err(SieveError::Validation(format!(
            "{} scores for {n} concepts",
            row.scores.len()
        )));
    }
    if k == 0 || k > n {
        return Err(SieveError::Range(format!("K = {k} not in 1..={n}")));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| row.scores[b].total_cmp(&row.scores[a]).then(a.cmp(&b)));
    Ok(order[..k]
        .iter()
        .map(|&q| Hypothesis {
            neuron_id: row.cluster.neuron_id,
            cluster_index: row.cluster.cluster_index,
            concept_index: q,
            concept_text: concepts.concepts()[q].clone(),
            score: row.scores[q],
            duplicate: false,
        })
        .collect())
}

/// Reorders a concept embedding table so row `q` embeds concept `q`. Item
/// ids are matched after concept normalization.
pub fn align_concept_embeddings(
    concepts: &ConceptSet,
    concept_embs: &EmbeddingTable,
) -> Result<EmbeddingTable> {
    let by_text: HashMap<String, usize> = concept_embs
        .item_ids()
        .iter()
        .enumerate()
        .map(|(i, id)| (normalize_concept(id), i))
        .collect();
    let dim = concept_embs.dim();
    let mut data = Vec::with_capacity(concepts.len() * dim);
    for c in concepts.concepts() {
        let i = *by_text
            .get(c)
            .ok_or_else(|| SieveError::Key(format!("no embedding for concept {c:?}")))?;
        data.extend_from_slice(concept_embs.row(i));
    }
    EmbeddingTable::new(
        DenseTensor::new(vec![concepts.len(), dim], data)?,
        concepts.concepts().to_vec(),
        concept_embs.space_id(),
    )
}

/// Top-K hypotheses for every cluster of one neuron.
///
/// `patch_embs` rows must follow the order of `clusters.labels`. When two
/// clusters share a concept, every instance but the highest-scoring one is
/// flagged `duplicate`.
pub fn hypothesize_neuron(
    neuron_id: usize,
    clusters: &ClusterAssignment,
    patch_embs: &EmbeddingTable,
    concept_embs: &EmbeddingTable,
    concepts: &ConceptSet,
    k: usize,
) -> Result<Vec<Hypothesis>> {
    if clusters.labels.len() != patch_embs.len() {
        return Err(SieveError::Validation(format!(
            "{} cluster labels for {} patch embeddings",
            clusters.labels.len(),
            patch_embs.len()
        )));
    }
    let mut out = Vec::new();
    for cluster_index in 0..clusters.m {
        let ids: Vec<String> = clusters
            .members(cluster_index)
            .into_iter()
            .map(|i| patch_embs.item_ids()[i].clone())
            .collect();
        let members = patch_embs.subset(&ids)?;
        let row = cluster_concept_scores(
            ClusterRef {
                neuron_id,
                cluster_index,
            },
            &members,
            concept_embs,
        )?;
        out.extend(top_k_concepts(&row, concepts, k)?);
    }
    flag_duplicates(&mut out);
    Ok(out)
}

fn flag_duplicates(hyps: &mut [Hypothesis]) {
    let mut best: HashMap<usize, usize> = HashMap::new();
    for (i, h) in hyps.iter().enumerate() {
        best.entry(h.concept_index)
            .and_modify(|b| {
                if h.score > hyps[*b].score {
                    *b = i;
                }
            })
            .or_insert(i);
    }
    for (i, h) in hyps.iter_mut().enumerate() {
        h.duplicate = best[&h.concept_index] != i;
    }
}
