//! Analytic stand-in for the vision model, the encoders and the generator.
//!
//! Concepts are random unit vectors `v_c` in `embed_dim` dimensions. A probe
//! sample is `v_c + sigma * g` for Gaussian `g`, and that same vector serves as
//! its patch embedding. Planted neuron `i` with concept `c` responds
//! `max(0, <x, v_c> - MARGIN)`; distractor neurons emit i.i.d.
//! `max(0, 1 + 0.25 z)`. Generated "images" for a concept are fresh noisy
//! copies of its generation direction, so verification is exact to reason
//! about.
//!
//! Decoy concepts copy a planted concept's text embedding but generate along
//! an unrelated direction: they out-score the true concept when `text_gap > 0`
//! yet fail verification.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Result, SieveError};
use crate::tensor::{ActivationMapStack, ActivationTable, ConceptSet, DenseTensor, EmbeddingTable};
use crate::verification::{
    EntryStatus, GenManifest, GeneratedEntry, GenerationPlan, HypothesisStatus, RunReport,
};

pub const MARGIN: f64 = 0.5;
pub const DEFAULT_NOISE_SIGMA: f64 = 0.1;
pub const DEFAULT_MAP_SIZE: usize = 4;
pub const LAYER_ID: &str = "synth";
pub const SPACE_ID: &str = "synth";
pub const GENERATOR_ID: &str = "synth-analytic";
const DISTRACTOR_MEAN: f64 = 1.0;
const DISTRACTOR_SD: f64 = 0.25;
/// Map cells next to the peak carry this fraction of the peak value.
const NEIGHBOUR_FRACTION: f32 = 0.25;

fn default_sigma() -> f64 {
    DEFAULT_NOISE_SIGMA
}

fn default_map_size() -> usize {
    DEFAULT_MAP_SIZE
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticWorldSpec {
    pub n_concepts: usize,
    pub embed_dim: usize,
    pub n_planted_neurons: usize,
    pub n_distractor_neurons: usize,
    pub samples_per_concept: usize,
    #[serde(default = "default_sigma")]
    pub noise_sigma: f64,
    #[serde(default)]
    pub seed: u64,
    /// Probe samples drawn around random directions that belong to no
    /// concept. `None` sizes the set so that each concept holds just over 1%
    /// of the probe, which puts a planted neuron's 99th percentile between
    /// its silent samples and its concept samples.
    #[serde(default)]
    pub background_samples: Option<usize>,
    #[serde(default)]
    pub n_decoys: usize,
    /// Scale of the random offset added to every real concept's text
    /// embedding before normalizing.
    #[serde(default)]
    pub text_gap: f64,
    #[serde(default = "default_map_size")]
    pub map_size: usize,
}

impl SyntheticWorldSpec {
    pub fn new(
        n_concepts: usize,
        embed_dim: usize,
        n_planted_neurons: usize,
        n_distractor_neurons: usize,
        samples_per_concept: usize,
        seed: u64,
    ) -> Self {
        Self {
            n_concepts,
            embed_dim,
            n_planted_neurons,
            n_distractor_neurons,
            samples_per_concept,
            noise_sigma: DEFAULT_NOISE_SIGMA,
            seed,
            background_samples: None,
            n_decoys: 0,
            text_gap: 0.0,
            map_size: DEFAULT_MAP_SIZE,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.embed_dim < 2 {
            return Err(SieveError::Range("embed_dim must be >= 2".into()));
        }
        for (name, v) in [
            ("n_concepts", self.n_concepts),
            ("n_planted_neurons", self.n_planted_neurons),
            ("n_distractor_neurons", self.n_distractor_neurons),
            ("samples_per_concept", self.samples_per_concept),
            ("map_size", self.map_size),
        ] {
            if v == 0 {
                return Err(SieveError::Range(format!("{name} must be >= 1")));
            }
        }
        if !(self.noise_sigma.is_finite() && self.noise_sigma >= 0.0) {
            return Err(SieveError::Range(
                "noise_sigma must be finite and >= 0".into(),
            ));
        }
        if !(self.text_gap.is_finite() && self.text_gap >= 0.0) {
            return Err(SieveError::Range("text_gap must be finite and >= 0".into()));
        }
        Ok(())
    }

    pub fn n_background(&self) -> usize {
        self.background_samples.unwrap_or_else(|| {
            (100 * self.samples_per_concept)
                .saturating_sub(49 + self.n_concepts * self.samples_per_concept)
        })
    }

    fn n_planted_concepts(&self) -> usize {
        self.n_planted_neurons.min(self.n_concepts)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GroundTruth {
    /// Neuron id to the text of its planted concept.
    pub planted: BTreeMap<usize, String>,
    pub distractors: Vec<usize>,
    /// Decoy text to the concept whose text embedding it copies.
    pub decoys: BTreeMap<String, String>,
}

/// The world's neurons and its generator directions.
#[derive(Debug, Clone, PartialEq)]
pub struct NeuronModel {
    /// Direction generated inputs follow, per concept-set entry.
    pub generation_dirs: Vec<Vec<f64>>,
    /// Planted concept of each neuron; `None` for distractors.
    pub neuron_concepts: Vec<Option<usize>>,
}

impl NeuronModel {
    pub fn n_neurons(&self) -> usize {
        self.neuron_concepts.len()
    }

    /// Neuron responses to one input vector; distractors draw from `rng`.
    pub fn respond(&self, x: &[f64], rng: &mut impl Rng) -> Vec<f32> {
        self.neuron_concepts
            .iter()
            .map(|nc| match nc {
                Some(c) => (dot(x, &self.generation_dirs[*c]) - MARGIN).max(0.0) as f32,
                None => distractor(rng),
            })
            .collect()
    }
}

#[derive(Debug, Clone)]
pub struct SyntheticWorld {
    pub spec: SyntheticWorldSpec,
    pub model: NeuronModel,
    pub acts: ActivationTable,
    pub maps: ActivationMapStack,
    pub patch_embs: EmbeddingTable,
    pub concept_embs: EmbeddingTable,
    pub concepts: ConceptSet,
    pub truth: GroundTruth,
}

fn unit_vector(rng: &mut impl Rng, dim: usize) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..dim).map(|_| rng.sample(StandardNormal)).collect();
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 1e-9 {
            return v.into_iter().map(|x| x / norm).collect();
        }
    }
}

fn noisy_copy(rng: &mut impl Rng, dir: &[f64], sigma: f64) -> Vec<f64> {
    dir.iter()
        .map(|&d| d + sigma * rng.sample::<f64, _>(StandardNormal))
        .collect()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn to_f32(v: &[f64]) -> Vec<f32> {
    v.iter().map(|&x| x as f32).collect()
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Deterministic pseudo-random peak cell for one (sample, neuron).
pub fn peak_cell(seed: u64, sample: usize, neuron: usize, cells: usize) -> usize {
    let h = splitmix64(seed ^ splitmix64((sample as u64) << 32 | neuron as u64));
    (h % cells as u64) as usize
}

fn concept_name(i: usize) -> String {
    format!("concept {i:03}")
}

fn distractor(rng: &mut impl Rng) -> f32 {
    (DISTRACTOR_MEAN + DISTRACTOR_SD * rng.sample::<f64, _>(StandardNormal)).max(0.0) as f32
}

/// Builds a world; a pure function of `spec`.
pub fn generate_world(spec: &SyntheticWorldSpec) -> Result<SyntheticWorld> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let dim = spec.embed_dim;
    let sigma = spec.noise_sigma;

    let visual: Vec<Vec<f64>> = (0..spec.n_concepts)
        .map(|_| unit_vector(&mut rng, dim))
        .collect();
    let mut names: Vec<String> = (0..spec.n_concepts).map(concept_name).collect();
    let mut text: Vec<Vec<f64>> = visual
        .iter()
        .map(|v| {
            if spec.text_gap == 0.0 {
                return v.clone();
            }
            let r = unit_vector(&mut rng, dim);
            let t: Vec<f64> = v
                .iter()
                .zip(&r)
                .map(|(a, b)| a + spec.text_gap * b)
                .collect();
            let n = dot(&t, &t).sqrt();
            t.into_iter().map(|x| x / n).collect()
        })
        .collect();
    let mut generation_dirs = visual.clone();
    let mut decoys = BTreeMap::new();
    for j in 0..spec.n_decoys {
        let target = j % spec.n_planted_concepts();
        let name = format!("decoy {j:03}");
        decoys.insert(name.clone(), names[target].clone());
        names.push(name);
        text.push(visual[target].clone());
        generation_dirs.push(unit_vector(&mut rng, dim));
    }

    let mut samples: Vec<(String, Vec<f64>)> = Vec::new();
    for (c, v) in visual.iter().enumerate() {
        for r in 0..spec.samples_per_concept {
            samples.push((format!("c{c:03}-{r:03}"), noisy_copy(&mut rng, v, sigma)));
        }
    }
    for i in 0..spec.n_background() {
        let u = unit_vector(&mut rng, dim);
        samples.push((format!("bg-{i:05}"), noisy_copy(&mut rng, &u, sigma)));
    }
    samples.shuffle(&mut rng);

    let mut neuron_concepts: Vec<Option<usize>> = (0..spec.n_planted_neurons)
        .map(|k| Some(k % spec.n_concepts))
        .chain(std::iter::repeat_n(None, spec.n_distractor_neurons))
        .collect();
    neuron_concepts.shuffle(&mut rng);
    let model = NeuronModel {
        generation_dirs,
        neuron_concepts,
    };
    let n_neurons = model.n_neurons();

    let sample_ids: Vec<String> = samples.iter().map(|(id, _)| id.clone()).collect();
    let mut act_data = Vec::with_capacity(samples.len() * n_neurons);
    for (_, x) in &samples {
        act_data.extend(model.respond(x, &mut rng));
    }

    let side = spec.map_size;
    let cells = side * side;
    let mut map_data = vec![0.0f32; samples.len() * n_neurons * cells];
    for s in 0..samples.len() {
        for n in 0..n_neurons {
            let a = act_data[s * n_neurons + n];
            let base = (s * n_neurons + n) * cells;
            let p = peak_cell(spec.seed, s, n, cells);
            let (r, c) = (p / side, p % side);
            map_data[base + p] = a;
            let neighbours = [
                (r.wrapping_sub(1), c),
                (r + 1, c),
                (r, c.wrapping_sub(1)),
                (r, c + 1),
            ];
            for (nr, nc) in neighbours {
                if nr < side && nc < side {
                    map_data[base + nr * side + nc] = a * NEIGHBOUR_FRACTION;
                }
            }
        }
    }

    let acts = ActivationTable::from_rows(sample_ids.clone(), LAYER_ID, n_neurons, act_data)?;
    let maps = ActivationMapStack::new(
        DenseTensor::new(vec![samples.len(), n_neurons, side, side], map_data)?,
        (0..n_neurons).collect(),
        sample_ids.clone(),
    )?;
    let patch_rows: Vec<Vec<f32>> = samples.iter().map(|(_, x)| to_f32(x)).collect();
    let patch_embs = EmbeddingTable::from_rows(sample_ids, SPACE_ID, &patch_rows)?;
    let concept_rows: Vec<Vec<f32>> = text.iter().map(|t| to_f32(t)).collect();
    let concept_embs = EmbeddingTable::from_rows(names.clone(), SPACE_ID, &concept_rows)?;
    let concepts = ConceptSet::new(&names, "synth")?;

    let mut truth = GroundTruth {
        planted: BTreeMap::new(),
        distractors: Vec::new(),
        decoys,
    };
    for (n, nc) in model.neuron_concepts.iter().enumerate() {
        match nc {
            Some(c) => {
                truth.planted.insert(n, names[*c].clone());
            }
            None => truth.distractors.push(n),
        }
    }

    Ok(SyntheticWorld {
        spec: spec.clone(),
        model,
        acts,
        maps,
        patch_embs,
        concept_embs,
        concepts,
        truth,
    })
}

/// Fulfills a generation plan inside the world. Image `j` of entry `e`
/// draws from the ChaCha stream `j` seeded with the entry's seed.
pub fn synth_generate_images(
    plan: &GenerationPlan,
    world: &SyntheticWorld,
) -> Result<(ActivationTable, GenManifest)> {
    let n_neurons = world.model.n_neurons();
    let mut ids = Vec::new();
    let mut data = Vec::new();
    let mut entries = Vec::with_capacity(plan.entries.len());
    for e in &plan.entries {
        let c = world.concepts.index_of(&e.concept_text).ok_or_else(|| {
            SieveError::Key(format!(
                "concept {:?} is not in the synthetic world",
                e.concept_text
            ))
        })?;
        let mut sample_ids = Vec::with_capacity(e.n_images);
        for j in 0..e.n_images {
            let mut rng = ChaCha8Rng::seed_from_u64(e.seed_base);
            rng.set_stream(j as u64);
            let x = noisy_copy(
                &mut rng,
                &world.model.generation_dirs[c],
                world.spec.noise_sigma,
            );
            data.extend(world.model.respond(&x, &mut rng));
            let id = format!("gen-{:05}-{j:03}", e.entry_index);
            ids.push(id.clone());
            sample_ids.push(id);
        }
        entries.push(GeneratedEntry {
            entry_index: e.entry_index,
            status: EntryStatus::Ok,
            sample_ids,
            seed: e.seed_base,
            error: None,
        });
    }
    let table = if ids.is_empty() {
        ActivationTable::new(
            DenseTensor::new(vec![0, n_neurons], Vec::new())?,
            Vec::new(),
            LAYER_ID,
        )?
    } else {
        ActivationTable::from_rows(ids, LAYER_ID, n_neurons, data)?
    };
    Ok((
        table,
        GenManifest {
            generator: GENERATOR_ID.into(),
            deterministic: true,
            plan_digest: None,
            entries,
        },
    ))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecoveryMetrics {
    pub n_planted: usize,
    /// Planted neurons whose retained concepts include the planted one.
    pub recovery: f64,
    /// Planted neurons whose best retained concept is the planted one.
    pub top1_recovery: f64,
    pub n_distractors: usize,
    /// Distractor neurons rejected by the discriminative filter.
    pub distractor_exclusion: f64,
    pub n_correct_pairs: usize,
    pub correct_mean_ar: Option<f64>,
    pub n_mismatched_pairs: usize,
    pub mismatched_mean_ar: Option<f64>,
}

fn mean(v: &[f64]) -> Option<f64> {
    (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
}

fn fraction(hits: usize, n: usize) -> f64 {
    if n == 0 {
        0.0
    } else {
        hits as f64 / n as f64
    }
}

/// Scores a report against the world's ground truth. AR pairs count only
/// verified hypotheses of planted neurons.
pub fn planted_recovery_check(report: &RunReport, truth: &GroundTruth) -> RecoveryMetrics {
    let (mut hits, mut top1) = (0, 0);
    let (mut correct, mut mismatched) = (Vec::new(), Vec::new());
    for (&n, concept) in &truth.planted {
        let Some(nr) = report.neuron(n) else { continue };
        if nr.retained_concepts.iter().any(|c| c == concept) {
            hits += 1;
        }
        if nr.retained_concepts.first() == Some(concept) {
            top1 += 1;
        }
        for h in nr
            .hypotheses
            .iter()
            .filter(|h| h.status == HypothesisStatus::Verified)
        {
            let Some(ar) = h.activation_rate else {
                continue;
            };
            if &h.hypothesis.concept_text == concept {
                correct.push(ar);
            } else {
                mismatched.push(ar);
            }
        }
    }
    let excluded = truth
        .distractors
        .iter()
        .filter(|&&n| report.neuron(n).is_some_and(|r| !r.discriminative))
        .count();
    RecoveryMetrics {
        n_planted: truth.planted.len(),
        recovery: fraction(hits, truth.planted.len()),
        top1_recovery: fraction(top1, truth.planted.len()),
        n_distractors: truth.distractors.len(),
        distractor_exclusion: fraction(excluded, truth.distractors.len()),
        n_correct_pairs: correct.len(),
        correct_mean_ar: mean(&correct),
        n_mismatched_pairs: mismatched.len(),
        mismatched_mean_ar: mean(&mismatched),
    }
}
