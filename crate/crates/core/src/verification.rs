//! Hypothesis verification through concept-conditioned generated inputs.
//!
//! Each non-duplicate hypothesis becomes a generation-plan entry. An external
//! generator fulfills the plan and reports the target layer's activations on
//! the generated items; a hypothesis's activation rate is the fraction of its
//! items on which the neuron exceeds its top-1% probe threshold. Hypotheses
//! whose rate falls below the run-wide mean rate are discarded.

use std::collections::{BTreeMap, HashMap, HashSet};

use serde::{Deserialize, Serialize};

use crate::clustering::SilhouettePoint;
use crate::error::{Result, SieveError};
use crate::hypothesis::{cosine_similarity, Hypothesis};
use crate::selection::{quantile, CropRect, NeuronStats};
use crate::tensor::{ActivationTable, EmbeddingTable};

pub const DEFAULT_IMAGES_PER_HYPOTHESIS: usize = 10;

/// Probe quantile used as the "significant activation" threshold.
pub const THRESHOLD_QUANTILE: f64 = 0.99;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PlanEntry {
    pub entry_index: usize,
    pub neuron_id: usize,
    pub cluster_index: usize,
    pub concept_index: usize,
    pub concept_text: String,
    pub prompt_text: String,
    pub n_images: usize,
    pub seed_base: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GenerationPlan {
    pub seed_base: u64,
    pub n_images: usize,
    pub entries: Vec<PlanEntry>,
}

/// One entry per non-duplicate hypothesis; prompts are the concept text
/// verbatim and entry `i` gets seed `seed_base + i`.
pub fn build_generation_plan(
    hyps: &[Hypothesis],
    n_images: usize,
    seed_base: u64,
) -> Result<GenerationPlan> {
    if n_images == 0 {
        return Err(SieveError::Range("n_images must be >= 1".into()));
    }
    let mut seen = HashSet::new();
    let mut entries = Vec::new();
    for h in hyps.iter().filter(|h| !h.duplicate) {
        if h.concept_text.trim().is_empty() {
            return Err(SieveError::Validation(format!(
                "hypothesis for neuron {} cluster {} has empty concept text",
                h.neuron_id, h.cluster_index
            )));
        }
        if !seen.insert((h.neuron_id, h.cluster_index, h.concept_text.clone())) {
            return Err(SieveError::Validation(format!(
                "duplicate plan entry for neuron {} cluster {} concept {:?}",
                h.neuron_id, h.cluster_index, h.concept_text
            )));
        }
        let entry_index = entries.len();
        entries.push(PlanEntry {
            entry_index,
            neuron_id: h.neuron_id,
            cluster_index: h.cluster_index,
            concept_index: h.concept_index,
            concept_text: h.concept_text.clone(),
            prompt_text: h.concept_text.clone(),
            n_images,
            seed_base: seed_base.wrapping_add(entry_index as u64),
        });
    }
    Ok(GenerationPlan {
        seed_base,
        n_images,
        entries,
    })
}

/// The neuron's top-1% threshold on the probe set.
pub fn activation_threshold<T: Copy + Into<f64>>(probe_column: &[T]) -> Result<f64> {
    if probe_column.is_empty() {
        return Err(SieveError::EmptyInput("probe activation column"));
    }
    quantile(probe_column, THRESHOLD_QUANTILE)
}

/// Number of activations strictly above `threshold`.
pub fn count_above<T: Copy + Into<f64>>(gen_acts: &[T], threshold: f64) -> usize {
    gen_acts.iter().filter(|&&a| a.into() > threshold).count()
}

pub fn activation_rate<T: Copy + Into<f64>>(gen_acts: &[T], threshold: f64) -> Result<f64> {
    if gen_acts.is_empty() {
        return Err(SieveError::EmptyInput("generated activations"));
    }
    Ok(count_above(gen_acts, threshold) as f64 / gen_acts.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VerificationRecord {
    pub neuron_id: usize,
    pub cluster_index: usize,
    pub concept_index: usize,
    pub concept_text: String,
    pub threshold: f64,
    pub activation_rate: f64,
    pub hits: usize,
    pub n_images: usize,
    pub retained: bool,
}

fn neumaier_sum(values: impl Iterator<Item = f64>) -> f64 {
    let (mut sum, mut comp) = (0.0f64, 0.0f64);
    for v in values {
        let t = sum + v;
        comp += if sum.abs() >= v.abs() {
            (sum - t) + v
        } else {
            (v - t) + sum
        };
        sum = t;
    }
    sum + comp
}

/// Mean of `values`, kept inside `[min, max]` against rounding.
fn bounded_mean(values: &[f64]) -> f64 {
    let min = values.iter().copied().fold(f64::INFINITY, f64::min);
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    (neumaier_sum(values.iter().copied()) / values.len() as f64).clamp(min, max)
}

pub fn mean_activation_rate(records: &[VerificationRecord]) -> Result<f64> {
    if records.is_empty() {
        return Err(SieveError::EmptyInput("verification records"));
    }
    let rates: Vec<f64> = records.iter().map(|r| r.activation_rate).collect();
    Ok(bounded_mean(&rates))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FilterOutcome {
    /// All input records, with `retained` set.
    pub records: Vec<VerificationRecord>,
    pub initial_mean: f64,
    pub retained_mean: f64,
}

impl FilterOutcome {
    pub fn retained(&self) -> impl Iterator<Item = &VerificationRecord> {
        self.records.iter().filter(|r| r.retained)
    }
}

/// Single pass: keep records whose rate is at least the mean over all
/// records, then recompute the mean over the survivors.
pub fn filter_by_initial_mean(records: &[VerificationRecord]) -> Result<FilterOutcome> {
    let initial_mean = mean_activation_rate(records)?;
    let records: Vec<VerificationRecord> = records
        .iter()
        .map(|r| VerificationRecord {
            retained: r.activation_rate >= initial_mean,
            ..r.clone()
        })
        .collect();
    let kept: Vec<f64> = records
        .iter()
        .filter(|r| r.retained)
        .map(|r| r.activation_rate)
        .collect();
    let retained_mean = bounded_mean(&kept).max(initial_mean);
    Ok(FilterOutcome {
        records,
        initial_mean,
        retained_mean,
    })
}

/// Status of one generation-plan entry as reported by the generator.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EntryStatus {
    Ok,
    Failed,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GeneratedEntry {
    pub entry_index: usize,
    pub status: EntryStatus,
    /// Rows of the generated activation table produced for this entry.
    #[serde(default)]
    pub sample_ids: Vec<String>,
    pub seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

/// `gen_manifest.json`: what the generator produced for a plan.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GenManifest {
    pub generator: String,
    pub deterministic: bool,
    /// Digest of the `genplan.json` this output fulfills, when known.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub plan_digest: Option<String>,
    pub entries: Vec<GeneratedEntry>,
}

/// Activation-rate records for every successfully generated plan entry.
/// Failed or absent entries produce no record.
pub fn verify_plan(
    plan: &GenerationPlan,
    probe: &ActivationTable,
    generated: &ActivationTable,
    manifest: &GenManifest,
) -> Result<Vec<VerificationRecord>> {
    if probe.n_neurons() != generated.n_neurons() {
        return Err(SieveError::Validation(format!(
            "probe table has {} neurons, generated table {}",
            probe.n_neurons(),
            generated.n_neurons()
        )));
    }
    let produced: HashMap<usize, &GeneratedEntry> = manifest
        .entries
        .iter()
        .filter(|e| e.status == EntryStatus::Ok)
        .map(|e| (e.entry_index, e))
        .collect();
    let mut thresholds: BTreeMap<usize, f64> = BTreeMap::new();
    let mut records = Vec::new();
    for entry in &plan.entries {
        let Some(gen) = produced.get(&entry.entry_index) else {
            continue;
        };
        if gen.sample_ids.is_empty() {
            continue;
        }
        let threshold = match thresholds.get(&entry.neuron_id) {
            Some(&t) => t,
            None => {
                let t = activation_threshold(&probe.column(entry.neuron_id)?)?;
                thresholds.insert(entry.neuron_id, t);
                t
            }
        };
        let acts = gen
            .sample_ids
            .iter()
            .map(|id| {
                generated
                    .sample_index(id)
                    .map(|s| generated.value(s, entry.neuron_id))
                    .ok_or_else(|| SieveError::Key(format!("generated sample {id:?}")))
            })
            .collect::<Result<Vec<f32>>>()?;
        let hits = count_above(&acts, threshold);
        records.push(VerificationRecord {
            neuron_id: entry.neuron_id,
            cluster_index: entry.cluster_index,
            concept_index: entry.concept_index,
            concept_text: entry.concept_text.clone(),
            threshold,
            activation_rate: hits as f64 / acts.len() as f64,
            hits,
            n_images: acts.len(),
            retained: false,
        });
    }
    Ok(records)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpaceAgreement {
    pub space_id: String,
    pub mean_cosine: f64,
    pub n_pairs: usize,
}

/// Mean cosine between each neuron's predicted-concept embedding and its
/// ground-truth label embedding, once per embedding space. `pairing` holds
/// `(prediction item id, label item id)`.
pub fn agreement_metrics(
    spaces: &[(EmbeddingTable, EmbeddingTable)],
    pairing: &[(String, String)],
) -> Result<Vec<SpaceAgreement>> {
    if pairing.is_empty() {
        return Err(SieveError::EmptyInput("agreement pairing"));
    }
    spaces
        .iter()
        .map(|(pred, labels)| {
            if pred.space_id() != labels.space_id() {
                return Err(SieveError::SpaceMismatch {
                    left: pred.space_id().to_string(),
                    right: labels.space_id().to_string(),
                });
            }
            let mut cosines = Vec::with_capacity(pairing.len());
            for (p, l) in pairing {
                let pv = pred.row_by_id(p).ok_or_else(|| {
                    SieveError::Pairing(format!("prediction {p:?} in {}", pred.space_id()))
                })?;
                let lv = labels.row_by_id(l).ok_or_else(|| {
                    SieveError::Pairing(format!("label {l:?} in {}", labels.space_id()))
                })?;
                cosines.push(cosine_similarity(pv, lv)?);
            }
            Ok(SpaceAgreement {
                space_id: pred.space_id().to_string(),
                mean_cosine: neumaier_sum(cosines.iter().copied()) / cosines.len() as f64,
                n_pairs: cosines.len(),
            })
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HypothesisStatus {
    /// Has its own activation-rate record.
    Verified,
    /// Shares the verdict of the same concept in a higher-scoring cluster.
    Duplicate,
    /// Generation failed or produced nothing; never retained.
    Missing,
    /// Verification was switched off; retained by default.
    Unverified,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HypothesisOutcome {
    #[serde(flatten)]
    pub hypothesis: Hypothesis,
    pub status: HypothesisStatus,
    pub activation_rate: Option<f64>,
    pub retained: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterSummary {
    pub m: usize,
    pub patch_ids: Vec<String>,
    pub labels: Vec<usize>,
    pub silhouette_curve: Vec<SilhouettePoint>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NeuronReport {
    pub neuron_id: usize,
    pub stats: NeuronStats,
    pub discriminative: bool,
    pub selected_sample_ids: Vec<String>,
    pub crop_rects: Vec<CropRect>,
    pub clusters: Option<ClusterSummary>,
    pub hypotheses: Vec<HypothesisOutcome>,
    /// Distinct retained concepts, best score first.
    pub retained_concepts: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub n_neurons: usize,
    pub n_discriminative: usize,
    pub n_hypotheses: usize,
    pub n_verified: usize,
    pub n_retained: usize,
    pub verification_enabled: bool,
    pub initial_mean_ar: Option<f64>,
    pub retained_mean_ar: Option<f64>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub agreement: Vec<SpaceAgreement>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub summary: RunSummary,
    pub neurons: Vec<NeuronReport>,
}

impl RunReport {
    pub fn neuron(&self, neuron_id: usize) -> Option<&NeuronReport> {
        self.neurons.iter().find(|n| n.neuron_id == neuron_id)
    }

    /// Markdown table: one row per hypothesis of every discriminative neuron.
    pub fn to_markdown(&self) -> String {
        let mut out = String::from("# Neuron concept report\n\n");
        let s = &self.summary;
        out.push_str(&format!(
            "{} neurons, {} discriminative, {} hypotheses, {} retained.\n",
            s.n_neurons, s.n_discriminative, s.n_hypotheses, s.n_retained
        ));
        if let (Some(a), Some(b)) = (s.initial_mean_ar, s.retained_mean_ar) {
            out.push_str(&format!(
                "Mean activation rate {a:.4} before filtering, {b:.4} after.\n"
            ));
        }
        for agr in &s.agreement {
            out.push_str(&format!(
                "Agreement in {}: mean cosine {:.4} over {} neurons.\n",
                agr.space_id, agr.mean_cosine, agr.n_pairs
            ));
        }
        out.push_str("\n| neuron | cluster | concept | score | AR | verdict |\n|---:|---:|---|---:|---:|---|\n");
        for n in self.neurons.iter().filter(|n| n.discriminative) {
            for h in &n.hypotheses {
                let ar = h
                    .activation_rate
                    .map_or("-".to_string(), |a| format!("{a:.2}"));
                let verdict = match (h.status, h.retained) {
                    (HypothesisStatus::Missing, _) => "missing",
                    (_, true) => "retained",
                    (_, false) => "discarded",
                };
                out.push_str(&format!(
                    "| {} | {} | {} | {:.4} | {} | {} |\n",
                    n.neuron_id,
                    h.hypothesis.cluster_index,
                    h.hypothesis.concept_text,
                    h.hypothesis.score,
                    ar,
                    verdict
                ));
            }
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn hyp(neuron: usize, cluster: usize, concept: &str, duplicate: bool) -> Hypothesis {
        Hypothesis {
            neuron_id: neuron,
            cluster_index: cluster,
            concept_index: 0,
            concept_text: concept.into(),
            score: 0.5,
            duplicate,
        }
    }

    fn rec(ar: f64) -> VerificationRecord {
        VerificationRecord {
            neuron_id: 0,
            cluster_index: 0,
            concept_index: 0,
            concept_text: "x".into(),
            threshold: 0.0,
            activation_rate: ar,
            hits: 0,
            n_images: 10,
            retained: false,
        }
    }

    #[test]
    fn plan_entries_and_seeds() {
        let hyps = [
            hyp(1, 0, "dog", false),
            hyp(1, 0, "cat", false),
            hyp(2, 1, "fur", false),
        ];
        let plan = build_generation_plan(&hyps, 10, 100).unwrap();
        assert_eq!(plan.entries.len(), 3);
        assert!(plan
            .entries
            .iter()
            .all(|e| e.n_images == 10 && e.prompt_text == e.concept_text));
        assert_eq!(
            plan.entries.iter().map(|e| e.seed_base).collect::<Vec<_>>(),
            [100, 101, 102]
        );
    }

    #[test]
    fn plan_skips_duplicates_and_rejects_empty_text() {
        let hyps = [hyp(1, 0, "dog", false), hyp(1, 1, "dog", true)];
        assert_eq!(
            build_generation_plan(&hyps, 10, 0).unwrap().entries.len(),
            1
        );
        assert!(matches!(
            build_generation_plan(&[hyp(1, 0, " ", false)], 10, 0),
            Err(SieveError::Validation(_))
        ));
        assert!(matches!(
            build_generation_plan(&[hyp(1, 0, "dog", false)], 0, 0),
            Err(SieveError::Range(_))
        ));
    }

    #[test]
    fn thresholds() {
        let v: Vec<f32> = (1..=100).map(|i| i as f32).collect();
        assert!((activation_threshold(&v).unwrap() - 99.01).abs() < 1e-9);
        assert_eq!(activation_threshold(&[2.5f32; 7]).unwrap(), 2.5);
        assert!(matches!(
            activation_threshold::<f32>(&[]),
            Err(SieveError::EmptyInput(_))
        ));
    }

    #[test]
    fn rates() {
        assert_eq!(
            activation_rate(&[5.0f32, 1.0, 6.0, 7.0], 4.0).unwrap(),
            0.75
        );
        assert_eq!(activation_rate(&[1.0f32, 4.0], 4.0).unwrap(), 0.0);
        assert_eq!(activation_rate(&[5.0f32, 6.0], 4.0).unwrap(), 1.0);
        assert!(activation_rate::<f32>(&[], 1.0).is_err());
    }

    #[test]
    fn means_and_filter() {
        let recs = [rec(0.9), rec(0.2), rec(0.8)];
        assert!((mean_activation_rate(&recs).unwrap() - 0.633333333333).abs() < 1e-9);
        assert_eq!(mean_activation_rate(&[rec(0.4)]).unwrap(), 0.4);
        assert!(mean_activation_rate(&[]).is_err());

        let f = filter_by_initial_mean(&recs).unwrap();
        assert!((f.initial_mean - 0.6333333333).abs() < 1e-9);
        assert_eq!(
            f.retained().map(|r| r.activation_rate).collect::<Vec<_>>(),
            [0.9, 0.8]
        );
        assert!((f.retained_mean - 0.85).abs() < 1e-12);

        let f = filter_by_initial_mean(&[rec(0.3), rec(0.3), rec(0.3)]).unwrap();
        assert_eq!(f.retained().count(), 3);
        assert_eq!(f.initial_mean, f.retained_mean);

        let f = filter_by_initial_mean(&[rec(1.0), rec(0.0)]).unwrap();
        assert_eq!(f.initial_mean, 0.5);
        assert_eq!(f.retained().count(), 1);
        assert_eq!(f.retained_mean, 1.0);
    }

    #[test]
    fn filter_applies_once() {
        // A second pass would drop 0.6 (retained mean 0.75); the outcome keeps it.
        let f = filter_by_initial_mean(&[rec(0.9), rec(0.6), rec(0.0)]).unwrap();
        assert_eq!(f.retained().count(), 2);
        let again = filter_by_initial_mean(&f.retained().cloned().collect::<Vec<_>>()).unwrap();
        assert_eq!(again.retained().count(), 1);
    }

    fn table(ids: &[&str], space: &str, rows: &[Vec<f32>]) -> EmbeddingTable {
        EmbeddingTable::from_rows(ids.iter().map(|s| s.to_string()).collect(), space, rows).unwrap()
    }

    #[test]
    fn agreement_identity_and_orthogonal() {
        let pred = table(
            &["n0", "n1"],
            "clip-text",
            &[vec![1.0, 0.0], vec![0.0, 2.0]],
        );
        let same = table(
            &["l0", "l1"],
            "clip-text",
            &[vec![3.0, 0.0], vec![0.0, 1.0]],
        );
        let orth = table(
            &["l0", "l1"],
            "clip-text",
            &[vec![0.0, 1.0], vec![1.0, 0.0]],
        );
        let pairing = vec![
            ("n0".to_string(), "l0".to_string()),
            ("n1".to_string(), "l1".to_string()),
        ];
        let r = agreement_metrics(&[(pred.clone(), same), (pred.clone(), orth)], &pairing).unwrap();
        assert!((r[0].mean_cosine - 1.0).abs() < 1e-12);
        assert_eq!(r[1].mean_cosine, 0.0);
        assert_eq!(r[0].n_pairs, 2);

        let bad = vec![("n9".to_string(), "l0".to_string())];
        let labels = table(&["l0"], "clip-text", &[vec![1.0, 0.0]]);
        assert!(matches!(
            agreement_metrics(&[(pred.clone(), labels)], &bad),
            Err(SieveError::Pairing(_))
        ));
        let mpnet = table(&["l0"], "mpnet", &[vec![1.0, 0.0]]);
        assert!(matches!(
            agreement_metrics(&[(pred, mpnet)], &pairing),
            Err(SieveError::SpaceMismatch { .. })
        ));
    }

    #[test]
    fn verify_plan_uses_probe_threshold_and_skips_failed() {
        let probe_rows: Vec<f32> = (1..=100).flat_map(|i| [i as f32, 0.0]).collect();
        let probe_ids = (0..100).map(|i| format!("p{i}")).collect();
        let probe = ActivationTable::from_rows(probe_ids, "l", 2, probe_rows).unwrap();
        let plan = build_generation_plan(&[hyp(0, 0, "dog", false), hyp(0, 0, "cat", false)], 2, 0)
            .unwrap();
        let generated = ActivationTable::from_rows(
            vec!["g0".into(), "g1".into(), "g2".into(), "g3".into()],
            "l",
            2,
            vec![100.0, 0.0, 50.0, 0.0, 100.0, 0.0, 100.0, 0.0],
        )
        .unwrap();
        let manifest = GenManifest {
            generator: "test".into(),
            deterministic: true,
            plan_digest: None,
            entries: vec![
                GeneratedEntry {
                    entry_index: 0,
                    status: EntryStatus::Ok,
                    sample_ids: vec!["g0".into(), "g1".into()],
                    seed: 0,
                    error: None,
                },
                GeneratedEntry {
                    entry_index: 1,
                    status: EntryStatus::Failed,
                    sample_ids: vec![],
                    seed: 1,
                    error: Some("oom".into()),
                },
            ],
        };
        let recs = verify_plan(&plan, &probe, &generated, &manifest).unwrap();
        assert_eq!(recs.len(), 1);
        assert!((recs[0].threshold - 99.01).abs() < 1e-9);
        assert_eq!((recs[0].hits, recs[0].n_images), (1, 2));
        assert_eq!(recs[0].activation_rate, 0.5);
    }

    #[test]
    fn threshold_equals_selection_p99() {
        use crate::selection::{neuron_stats, SelectionConfig};
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(21);
        for _ in 0..50 {
            let col: Vec<f32> = (0..rng.random_range(1..400))
                .map(|_| rng.random_range(0.0f32..5.0))
                .collect();
            let stats = neuron_stats(0, &col, &SelectionConfig::default()).unwrap();
            assert_eq!(
                activation_threshold(&col).unwrap().to_bits(),
                stats.p99.to_bits()
            );
        }
    }

    #[test]
    fn agreement_matches_naive_loop() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(22);
        let n = 30;
        let ids = |p: &str| (0..n).map(|i| format!("{p}{i}")).collect::<Vec<_>>();
        let rows: Vec<Vec<f32>> = (0..n)
            .map(|_| (0..8).map(|_| rng.random_range(-1.0f32..1.0)).collect())
            .collect();
        let lrows: Vec<Vec<f32>> = (0..n)
            .map(|_| (0..8).map(|_| rng.random_range(-1.0f32..1.0)).collect())
            .collect();
        let pred = EmbeddingTable::from_rows(ids("n"), "mpnet", &rows).unwrap();
        let labels = EmbeddingTable::from_rows(ids("l"), "mpnet", &lrows).unwrap();
        let pairing: Vec<(String, String)> = (0..n)
            .map(|i| (format!("n{i}"), format!("l{}", (i * 7) % n)))
            .collect();
        let got = agreement_metrics(&[(pred, labels)], &pairing).unwrap()[0].mean_cosine;
        let mut want = 0.0;
        for i in 0..n {
            let (u, v) = (&rows[i], &lrows[(i * 7) % n]);
            let dot: f64 = u.iter().zip(v).map(|(a, b)| *a as f64 * *b as f64).sum();
            let nu = u.iter().map(|a| (*a as f64).powi(2)).sum::<f64>().sqrt();
            let nv = v.iter().map(|a| (*a as f64).powi(2)).sum::<f64>().sqrt();
            want += dot / (nu * nv);
        }
        want /= n as f64;
        assert!((got - want).abs() < 1e-9, "{got} vs {want}");
    }

    proptest! {
        #[test]
        fn rate_monotone_in_threshold(acts in prop::collection::vec(-5.0f32..5.0, 1..50), t1 in -6.0f64..6.0, t2 in -6.0f64..6.0) {
            let (lo, hi) = if t1 <= t2 { (t1, t2) } else { (t2, t1) };
            let (a, b) = (activation_rate(&acts, lo).unwrap(), activation_rate(&acts, hi).unwrap());
            prop_assert!(a >= b);
            let k = a * acts.len() as f64;
            prop_assert!((k - k.round()).abs() < 1e-9);
        }

        #[test]
        fn filter_law(counts in prop::collection::vec(0usize..=10, 1..40)) {
            let recs: Vec<VerificationRecord> = counts.iter().map(|&c| rec(c as f64 / 10.0)).collect();
            let f = filter_by_initial_mean(&recs).unwrap();
            prop_assert!(f.retained().count() >= 1);
            prop_assert!(f.retained_mean >= f.initial_mean);
            let all_equal = counts.iter().all(|&c| c == counts[0]);
            prop_assert_eq!(f.retained_mean == f.initial_mean, all_equal);
            for r in f.retained() {
                prop_assert!(r.activation_rate >= f.initial_mean);
            }
        }
    }
}
