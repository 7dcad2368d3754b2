//! Resolved pipeline configuration: one JSON file, overridden by flags.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use sieve_core::pipeline::PipelineParams;
use sieve_core::selection::SelectionConfig;
use sieve_core::tensor::jsonio::read_json;

use crate::error::{CliError, CliResult};

/// Name of the config file picked up from the run directory when
/// `--config` is not given.
pub const RUN_DIR_CONFIG: &str = "config.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AgreementSpace {
    pub predictions: PathBuf,
    pub labels: PathBuf,
}

/// Final-layer agreement inputs. `pairing` is a JSON array of
/// `[prediction item id, label item id]` pairs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AgreementConfig {
    pub pairing: PathBuf,
    pub spaces: Vec<AgreementSpace>,
}

/// Input files by role. Relative paths are resolved against the run
/// directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct InputPaths {
    pub activations: PathBuf,
    /// Used when the file exists; otherwise crops cover the whole image.
    pub maps: PathBuf,
    pub patch_embeddings: PathBuf,
    pub concept_embeddings: PathBuf,
    pub concepts: PathBuf,
    pub generated_activations: PathBuf,
    pub gen_manifest: PathBuf,
    /// Synthetic world spec; when present, `verify` can fulfill the plan itself.
    pub synth_world: PathBuf,
    pub ground_truth: PathBuf,
    pub agreement: Option<AgreementConfig>,
}

impl Default for InputPaths {
    fn default() -> Self {
        Self {
            activations: "inputs/acts.svt1".into(),
            maps: "inputs/maps.svt1".into(),
            patch_embeddings: "inputs/patch_embs.svt1".into(),
            concept_embeddings: "inputs/concept_embs.svt1".into(),
            concepts: "inputs/concepts.json".into(),
            generated_activations: "generate/gen_acts.svt1".into(),
            gen_manifest: "generate/gen_manifest.json".into(),
            synth_world: "inputs/world.json".into(),
            ground_truth: "inputs/ground_truth.json".into(),
            agreement: None,
        }
    }
}

impl InputPaths {
    fn resolve(&mut self, base: &Path) {
        let join = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        for p in [
            &mut self.activations,
            &mut self.maps,
            &mut self.patch_embeddings,
            &mut self.concept_embeddings,
            &mut self.concepts,
            &mut self.generated_activations,
            &mut self.gen_manifest,
            &mut self.synth_world,
            &mut self.ground_truth,
        ] {
            join(p);
        }
        if let Some(a) = &mut self.agreement {
            join(&mut a.pairing);
            for s in &mut a.spaces {
                join(&mut s.predictions);
                join(&mut s.labels);
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PipelineConfig {
    pub beta: f64,
    pub top_k_samples: usize,
    pub crop_tau: f64,
    pub epsilon: f64,
    /// Concepts kept per cluster.
    pub top_k: usize,
    pub max_m: usize,
    pub n_images: usize,
    pub seed: u64,
    pub verify: bool,
    pub paths: InputPaths,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        let p = PipelineParams::default();
        Self {
            beta: p.selection.beta,
            top_k_samples: p.selection.top_k_samples,
            crop_tau: p.selection.crop_tau,
            epsilon: p.selection.epsilon,
            top_k: p.top_k_concepts,
            max_m: p.max_clusters,
            n_images: p.n_images,
            seed: p.seed,
            verify: p.verify,
            paths: InputPaths::default(),
        }
    }
}

/// Command-line values that replace config-file values.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Overrides {
    pub beta: Option<f64>,
    pub top_k: Option<usize>,
    pub concepts: Option<PathBuf>,
    pub n_images: Option<usize>,
    pub seed: Option<u64>,
    pub no_verify: bool,
}

impl PipelineConfig {
    /// Reads `config` (or `<run_dir>/config.json` when present), applies
    /// overrides, resolves paths and validates.
    pub fn load(config: Option<&Path>, run_dir: &Path, overrides: &Overrides) -> CliResult<Self> {
        let implicit = run_dir.join(RUN_DIR_CONFIG);
        let mut cfg: PipelineConfig = match config {
            Some(p) => read_json(p)?,
            None if implicit.exists() => read_json(&implicit)?,
            None => PipelineConfig::default(),
        };
        if let Some(v) = overrides.beta {
            cfg.beta = v;
        }
        if let Some(v) = overrides.top_k {
            cfg.top_k = v;
        }
        if let Some(v) = &overrides.concepts {
            cfg.paths.concepts = v.clone();
        }
        if let Some(v) = overrides.n_images {
            cfg.n_images = v;
        }
        if let Some(v) = overrides.seed {
            cfg.seed = v;
        }
        if overrides.no_verify {
            cfg.verify = false;
        }
        cfg.paths.resolve(run_dir);
        cfg.params()?;
        Ok(cfg)
    }

    pub fn params(&self) -> CliResult<PipelineParams> {
        let p = PipelineParams {
            selection: SelectionConfig {
                beta: self.beta,
                top_k_samples: self.top_k_samples,
                crop_tau: self.crop_tau,
                epsilon: self.epsilon,
            },
            top_k_concepts: self.top_k,
            max_clusters: self.max_m,
            n_images: self.n_images,
            seed: self.seed,
            verify: self.verify,
        };
        p.validate().map_err(|e| CliError::Config(e.to_string()))?;
        Ok(p)
    }

    /// sha256 of the resolved configuration's JSON encoding.
    pub fn digest(&self) -> String {
        let bytes = serde_json::to_vec(self).expect("config serializes");
        hex::encode(Sha256::digest(&bytes))
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}
