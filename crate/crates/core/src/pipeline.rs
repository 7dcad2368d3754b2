//! Stage functions over in-memory data and an end-to-end runner.
//!
//! Every stage is parallel across neurons; results always come back in
//! neuron-id order so output files do not depend on the thread count.

use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::clustering::{
    choose_cluster_count, pairwise_euclidean, ClusterChoice, DEFAULT_MAX_CLUSTERS,
};
use crate::error::{Result, SieveError};
use crate::hypothesis::{align_concept_embeddings, hypothesize_neuron, Hypothesis, DEFAULT_TOP_K};
use crate::selection::{select_high_activation, SelectionConfig, SelectionResult};
use crate::tensor::{ActivationMapStack, ActivationTable, ConceptSet, EmbeddingTable};
use crate::verification::{
    build_generation_plan, filter_by_initial_mean, verify_plan, ClusterSummary, FilterOutcome,
    GenManifest, GenerationPlan, HypothesisOutcome, HypothesisStatus, NeuronReport, RunReport,
    RunSummary, DEFAULT_IMAGES_PER_HYPOTHESIS,
};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineParams {
    pub selection: SelectionConfig,
    /// Concepts kept per cluster.
    pub top_k_concepts: usize,
    pub max_clusters: usize,
    pub n_images: usize,
    pub seed: u64,
    pub verify: bool,
}

impl Default for PipelineParams {
    fn default() -> Self {
        Self {
            selection: SelectionConfig::default(),
            top_k_concepts: DEFAULT_TOP_K,
            max_clusters: DEFAULT_MAX_CLUSTERS,
            n_images: DEFAULT_IMAGES_PER_HYPOTHESIS,
            seed: 0,
            verify: true,
        }
    }
}

impl PipelineParams {
    pub fn validate(&self) -> Result<()> {
        self.selection.validate()?;
        if self.top_k_concepts == 0 {
            return Err(SieveError::Range("top_k_concepts must be >= 1".into()));
        }
        if self.max_clusters < 2 {
            return Err(SieveError::Range("max_clusters must be >= 2".into()));
        }
        if self.n_images == 0 {
            return Err(SieveError::Range("n_images must be >= 1".into()));
        }
        Ok(())
    }
}

/// Selection for every neuron of `acts`, with crops from `maps` when given.
pub fn select_neurons(
    acts: &ActivationTable,
    maps: Option<&ActivationMapStack>,
    cfg: &SelectionConfig,
) -> Result<Vec<SelectionResult>> {
    cfg.validate()?;
    (0..acts.n_neurons())
        .into_par_iter()
        .map(|n| {
            let sel = select_high_activation(acts, n, cfg)?;
            match maps {
                Some(m) if !sel.selected_sample_ids.is_empty() => sel.with_crops(m, cfg),
                _ => Ok(sel),
            }
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterRecord {
    pub neuron_id: usize,
    /// Patch embedding ids, in the order of `choice.assignment.labels`.
    pub patch_ids: Vec<String>,
    pub choice: ClusterChoice,
}

impl ClusterRecord {
    pub fn summary(&self) -> ClusterSummary {
        ClusterSummary {
            m: self.choice.assignment.m,
            patch_ids: self.patch_ids.clone(),
            labels: self.choice.assignment.labels.clone(),
            silhouette_curve: self.choice.curve.clone(),
        }
    }
}

/// Patch embedding ids for a neuron's selected samples: `<sample>#<neuron>`
/// when the table has per-neuron crops, else the bare sample id.
pub fn patch_ids_for(sel: &SelectionResult, patch_embs: &EmbeddingTable) -> Result<Vec<String>> {
    sel.selected_sample_ids
        .iter()
        .map(|s| {
            let scoped = format!("{s}#{}", sel.neuron_id);
            if patch_embs.index_of(&scoped).is_some() {
                Ok(scoped)
            } else if patch_embs.index_of(s).is_some() {
                Ok(s.clone())
            } else {
                Err(SieveError::Key(format!(
                    "patch embedding for sample {s:?} of neuron {}",
                    sel.neuron_id
                )))
            }
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HypothesisStage {
    pub clusters: Vec<ClusterRecord>,
    pub hypotheses: Vec<Hypothesis>,
}

/// Clusters the unit-normalized patch embeddings of one discriminative
/// neuron and scores concepts against each cluster.
pub fn hypothesize_one(
    sel: &SelectionResult,
    patch_embs: &EmbeddingTable,
    aligned_concepts: &EmbeddingTable,
    concepts: &ConceptSet,
    params: &PipelineParams,
) -> Result<(ClusterRecord, Vec<Hypothesis>)> {
    let patch_ids = patch_ids_for(sel, patch_embs)?;
    let patches = patch_embs.subset(&patch_ids)?.normalized();
    let choice = choose_cluster_count(&pairwise_euclidean(&patches), params.max_clusters)?;
    let hyps = hypothesize_neuron(
        sel.neuron_id,
        &choice.assignment,
        &patches,
        aligned_concepts,
        concepts,
        params.top_k_concepts,
    )?;
    Ok((
        ClusterRecord {
            neuron_id: sel.neuron_id,
            patch_ids,
            choice,
        },
        hyps,
    ))
}

pub fn hypothesize_all(
    selections: &[SelectionResult],
    patch_embs: &EmbeddingTable,
    concept_embs: &EmbeddingTable,
    concepts: &ConceptSet,
    params: &PipelineParams,
) -> Result<HypothesisStage> {
    if patch_embs.space_id() != concept_embs.space_id() {
        return Err(SieveError::SpaceMismatch {
            left: patch_embs.space_id().to_string(),
            right: concept_embs.space_id().to_string(),
        });
    }
    let aligned = align_concept_embeddings(concepts, concept_embs)?;
    let per_neuron: Vec<(ClusterRecord, Vec<Hypothesis>)> = selections
        .par_iter()
        .filter(|s| s.discriminative && !s.selected_sample_ids.is_empty())
        .map(|s| hypothesize_one(s, patch_embs, &aligned, concepts, params))
        .collect::<Result<_>>()?;
    let mut stage = HypothesisStage {
        clusters: Vec::with_capacity(per_neuron.len()),
        hypotheses: Vec::new(),
    };
    for (c, h) in per_neuron {
        stage.clusters.push(c);
        stage.hypotheses.extend(h);
    }
    Ok(stage)
}

/// Activation-rate records and the mean filter; `None` when the generator
/// produced nothing usable.
pub fn verify_all(
    plan: &GenerationPlan,
    probe: &ActivationTable,
    generated: &ActivationTable,
    manifest: &GenManifest,
) -> Result<Option<FilterOutcome>> {
    let records = verify_plan(plan, probe, generated, manifest)?;
    if records.is_empty() {
        return Ok(None);
    }
    filter_by_initial_mean(&records).map(Some)
}

/// How far verification got for a run.
#[derive(Debug, Clone, Copy)]
pub enum Verification<'a> {
    Disabled,
    Done(Option<&'a FilterOutcome>),
}

fn outcome_for(
    h: &Hypothesis,
    verification: Verification<'_>,
    verdicts: &BTreeMap<(usize, usize), (f64, bool)>,
) -> HypothesisOutcome {
    let (status, activation_rate, retained) = match verification {
        Verification::Disabled => (HypothesisStatus::Unverified, None, true),
        Verification::Done(_) => match verdicts.get(&(h.neuron_id, h.concept_index)) {
            Some(&(ar, kept)) if h.duplicate => (HypothesisStatus::Duplicate, Some(ar), kept),
            Some(&(ar, kept)) => (HypothesisStatus::Verified, Some(ar), kept),
            None => (HypothesisStatus::Missing, None, false),
        },
    };
    HypothesisOutcome {
        hypothesis: h.clone(),
        status,
        activation_rate,
        retained,
    }
}

/// Distinct retained concept texts, best score first, ties by concept index.
fn retained_concepts(outcomes: &[HypothesisOutcome]) -> Vec<String> {
    let mut best: BTreeMap<usize, (f64, &str)> = BTreeMap::new();
    for o in outcomes.iter().filter(|o| o.retained) {
        let h = &o.hypothesis;
        let e = best
            .entry(h.concept_index)
            .or_insert((h.score, &h.concept_text));
        if h.score > e.0 {
            e.0 = h.score;
        }
    }
    let mut ranked: Vec<(usize, f64, &str)> =
        best.into_iter().map(|(i, (s, t))| (i, s, t)).collect();
    ranked.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    ranked.into_iter().map(|(_, _, t)| t.to_string()).collect()
}

pub fn assemble_report(
    selections: &[SelectionResult],
    stage: &HypothesisStage,
    verification: Verification<'_>,
) -> RunReport {
    let mut verdicts: BTreeMap<(usize, usize), (f64, bool)> = BTreeMap::new();
    if let Verification::Done(Some(outcome)) = verification {
        for r in &outcome.records {
            verdicts.insert(
                (r.neuron_id, r.concept_index),
                (r.activation_rate, r.retained),
            );
        }
    }
    let clusters: BTreeMap<usize, &ClusterRecord> =
        stage.clusters.iter().map(|c| (c.neuron_id, c)).collect();
    let mut by_neuron: BTreeMap<usize, Vec<HypothesisOutcome>> = BTreeMap::new();
    for h in &stage.hypotheses {
        by_neuron
            .entry(h.neuron_id)
            .or_default()
            .push(outcome_for(h, verification, &verdicts));
    }
    let neurons: Vec<NeuronReport> = selections
        .iter()
        .map(|s| {
            let hypotheses = by_neuron.remove(&s.neuron_id).unwrap_or_default();
            NeuronReport {
                neuron_id: s.neuron_id,
                stats: s.stats.clone(),
                discriminative: s.discriminative,
                selected_sample_ids: s.selected_sample_ids.clone(),
                crop_rects: s.crop_rects.clone(),
                clusters: clusters.get(&s.neuron_id).map(|c| c.summary()),
                retained_concepts: retained_concepts(&hypotheses),
                hypotheses,
            }
        })
        .collect();
    let all = || neurons.iter().flat_map(|n| n.hypotheses.iter());
    let (initial_mean_ar, retained_mean_ar) = match verification {
        Verification::Done(Some(o)) => (Some(o.initial_mean), Some(o.retained_mean)),
        _ => (None, None),
    };
    RunReport {
        summary: RunSummary {
            n_neurons: neurons.len(),
            n_discriminative: neurons.iter().filter(|n| n.discriminative).count(),
            n_hypotheses: all().count(),
            n_verified: all()
                .filter(|h| h.status == HypothesisStatus::Verified)
                .count(),
            n_retained: all().filter(|h| h.retained).count(),
            verification_enabled: !matches!(verification, Verification::Disabled),
            initial_mean_ar,
            retained_mean_ar,
            agreement: Vec::new(),
        },
        neurons,
    }
}

/// Everything a run reads from the probe side.
#[derive(Debug, Clone, Copy)]
pub struct PipelineInputs<'a> {
    pub acts: &'a ActivationTable,
    pub maps: Option<&'a ActivationMapStack>,
    pub patch_embs: &'a EmbeddingTable,
    pub concept_embs: &'a EmbeddingTable,
    pub concepts: &'a ConceptSet,
}

/// Select, hypothesize and (when enabled) verify in one call. `generate`
/// fulfills the generation plan and returns activations on the generated
/// items.
pub fn run_in_memory<G>(
    inputs: PipelineInputs<'_>,
    params: &PipelineParams,
    generate: G,
) -> Result<RunReport>
where
    G: FnOnce(&GenerationPlan) -> Result<(ActivationTable, GenManifest)>,
{
    params.validate()?;
    let selections = select_neurons(inputs.acts, inputs.maps, &params.selection)?;
    let stage = hypothesize_all(
        &selections,
        inputs.patch_embs,
        inputs.concept_embs,
        inputs.concepts,
        params,
    )?;
    if !params.verify {
        return Ok(assemble_report(&selections, &stage, Verification::Disabled));
    }
    let plan = build_generation_plan(&stage.hypotheses, params.n_images, params.seed)?;
    if plan.entries.is_empty() {
        return Ok(assemble_report(
            &selections,
            &stage,
            Verification::Done(None),
        ));
    }
    let (generated, manifest) = generate(&plan)?;
    let outcome = verify_all(&plan, inputs.acts, &generated, &manifest)?;
    Ok(assemble_report(
        &selections,
        &stage,
        Verification::Done(outcome.as_ref()),
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::verification::{EntryStatus, GeneratedEntry};

    fn concepts() -> ConceptSet {
        ConceptSet::new(&["red", "green", "blue"], "colors").unwrap()
    }

    fn concept_embs() -> EmbeddingTable {
        EmbeddingTable::from_rows(
            vec!["red".into(), "green".into(), "blue".into()],
            "s",
            &[
                vec![1.0, 0.0, 0.0],
                vec![0.0, 1.0, 0.0],
                vec![0.0, 0.0, 1.0],
            ],
        )
        .unwrap()
    }

    /// 200 samples; neuron 0 fires on the first 5 ("red" samples), neuron 1 is flat.
    fn world() -> (ActivationTable, EmbeddingTable) {
        let ids: Vec<String> = (0..200).map(|i| format!("s{i}")).collect();
        let mut data = Vec::new();
        let mut rows = Vec::new();
        for i in 0..200 {
            data.push(if i < 5 { 3.0 + i as f32 } else { 0.0 });
            data.push(1.0);
            rows.push(if i < 5 {
                vec![1.0, 0.1 * i as f32, 0.0]
            } else {
                vec![0.0, 0.0, 1.0]
            });
        }
        let acts = ActivationTable::from_rows(ids.clone(), "l", 2, data).unwrap();
        let embs = EmbeddingTable::from_rows(ids, "s", &rows).unwrap();
        (acts, embs)
    }

    fn params() -> PipelineParams {
        PipelineParams {
            selection: SelectionConfig {
                top_k_samples: 3,
                ..SelectionConfig::default()
            },
            n_images: 4,
            ..PipelineParams::default()
        }
    }

    /// Neuron 0 fires on generated "red" items only.
    fn generator(plan: &GenerationPlan) -> Result<(ActivationTable, GenManifest)> {
        let mut ids = Vec::new();
        let mut data = Vec::new();
        let mut entries = Vec::new();
        for e in &plan.entries {
            let mut sample_ids = Vec::new();
            for j in 0..e.n_images {
                let id = format!("g{}-{j}", e.entry_index);
                ids.push(id.clone());
                sample_ids.push(id);
                data.push(if e.concept_text == "red" { 10.0 } else { 0.0 });
                data.push(1.0);
            }
            entries.push(GeneratedEntry {
                entry_index: e.entry_index,
                status: EntryStatus::Ok,
                sample_ids,
                seed: e.seed_base,
                error: None,
            });
        }
        let table = ActivationTable::from_rows(ids, "l", 2, data)?;
        Ok((
            table,
            GenManifest {
                generator: "test".into(),
                deterministic: true,
                plan_digest: None,
                entries,
            },
        ))
    }

    fn inputs<'a>(
        acts: &'a ActivationTable,
        embs: &'a EmbeddingTable,
        cembs: &'a EmbeddingTable,
        cs: &'a ConceptSet,
    ) -> PipelineInputs<'a> {
        PipelineInputs {
            acts,
            maps: None,
            patch_embs: embs,
            concept_embs: cembs,
            concepts: cs,
        }
    }

    #[test]
    fn end_to_end_small_world() {
        let (acts, embs) = world();
        let (cembs, cs) = (concept_embs(), concepts());
        let report =
            run_in_memory(inputs(&acts, &embs, &cembs, &cs), &params(), generator).unwrap();
        assert_eq!(report.summary.n_neurons, 2);
        assert_eq!(report.summary.n_discriminative, 1);
        let n0 = report.neuron(0).unwrap();
        assert_eq!(n0.selected_sample_ids, ["s4", "s3", "s2"]);
        assert_eq!(n0.clusters.as_ref().unwrap().m, 1);
        assert_eq!(n0.hypotheses.len(), 2);
        assert_eq!(n0.hypotheses[0].hypothesis.concept_text, "red");
        assert_eq!(n0.retained_concepts, ["red"]);
        assert_eq!(report.summary.initial_mean_ar, Some(0.5));
        assert_eq!(report.summary.retained_mean_ar, Some(1.0));
        assert!(report.neuron(1).unwrap().hypotheses.is_empty());
    }

    #[test]
    fn verification_disabled_keeps_everything() {
        let (acts, embs) = world();
        let (cembs, cs) = (concept_embs(), concepts());
        let p = PipelineParams {
            verify: false,
            ..params()
        };
        let report =
            run_in_memory(inputs(&acts, &embs, &cembs, &cs), &p, |_| unreachable!()).unwrap();
        let n0 = report.neuron(0).unwrap();
        assert_eq!(n0.retained_concepts.len(), 2);
        assert!(n0
            .hypotheses
            .iter()
            .all(|h| h.status == HypothesisStatus::Unverified));
        assert_eq!(report.summary.initial_mean_ar, None);
    }

    #[test]
    fn failed_generation_is_missing_not_zero() {
        let (acts, embs) = world();
        let (cembs, cs) = (concept_embs(), concepts());
        let report = run_in_memory(inputs(&acts, &embs, &cembs, &cs), &params(), |plan| {
            let (t, mut m) = generator(plan)?;
            m.entries[1].status = EntryStatus::Failed;
            Ok((t, m))
        })
        .unwrap();
        let hs = &report.neuron(0).unwrap().hypotheses;
        assert_eq!(hs[1].status, HypothesisStatus::Missing);
        assert!(!hs[1].retained);
        assert_eq!(report.summary.initial_mean_ar, Some(1.0));
    }

    #[test]
    fn scoped_patch_ids_win() {
        let (acts, _) = world();
        let sel = select_high_activation(&acts, 0, &params().selection).unwrap();
        let embs = EmbeddingTable::from_rows(
            vec!["s4".into(), "s4#0".into(), "s3".into(), "s2".into()],
            "s",
            &vec![vec![1.0, 0.0]; 4],
        )
        .unwrap();
        assert_eq!(
            patch_ids_for(&sel, &embs).unwrap()[..2],
            ["s4#0".to_string(), "s3".to_string()]
        );
        let missing = EmbeddingTable::from_rows(vec!["s4".into()], "s", &[vec![1.0]]).unwrap();
        assert!(matches!(
            patch_ids_for(&sel, &missing),
            Err(SieveError::Key(_))
        ));
    }

    #[test]
    fn space_mismatch_rejected() {
        let (acts, embs) = world();
        let cs = concepts();
        let other =
            EmbeddingTable::from_rows(vec!["red".into()], "t", &[vec![1.0, 0.0, 0.0]]).unwrap();
        let sels = select_neurons(&acts, None, &params().selection).unwrap();
        assert!(matches!(
            hypothesize_all(&sels, &embs, &other, &cs, &params()),
            Err(SieveError::SpaceMismatch { .. })
        ));
    }
}
