//! Neuron concept interpretation by selection, hypothesis and verification.
//!
//! The pipeline works over three kinds of numeric input produced by model
//! adapters (activation tables, spatial activation maps and embedding
//! tables) and owns all of the statistics:
//!
//! 1. [`selection`] keeps neurons whose 99th-percentile/median activation
//!    ratio exceeds a threshold and picks their top samples and crop regions.
//! 2. [`clustering`] groups the selected patch embeddings with Ward linkage,
//!    choosing the cluster count by silhouette.
//! 3. [`hypothesis`] scores every concept against every cluster by mean
//!    cosine similarity and keeps the top-K per cluster.
//! 4. [`verification`] measures how often concept-conditioned generated
//!    inputs push the neuron above its top-1% probe threshold, then filters
//!    hypotheses by the run's mean activation rate.
//!
//! [`synth`] provides an analytic world with planted ground truth so the whole
//! chain can be exercised without any model.

pub mod clustering;
pub mod error;
pub mod hypothesis;
pub mod pipeline;
pub mod selection;
pub mod synth;
pub mod tensor;
pub mod verification;

mod ratio_serde;

pub use error::{Result, SieveError};
pub use tensor::{
    ActivationMapStack, ActivationTable, AlignmentReport, ConceptSet, DenseTensor, EmbeddingTable,
    RunManifest, Stage,
};
