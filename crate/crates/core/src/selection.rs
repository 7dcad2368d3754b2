//! Discriminative-neuron selection.
//!
//! A neuron is kept when the ratio of its 99th-percentile activation to its
//! median activation exceeds `beta`. Kept neurons contribute their
//! `top_k_samples` strongest samples, each with a crop rectangle taken from
//! the neuron's activation map.

use std::cmp::Ordering;

use serde::{Deserialize, Serialize};

use crate::error::{Result, SieveError};
use crate::tensor::MapView;
use crate::tensor::{ActivationMapStack, ActivationTable};

/// Linear-interpolation quantile on `(n - 1)`-scaled ranks.
///
/// With `x` sorted ascending, `r = q·(n-1)` and `l = ⌊r⌋`, returns
/// `x[l] + (r - l)·(x[l+1] - x[l])`, or `x[n-1]` when `l = n-1`. Runs in
/// expected linear time via selection rather than a full sort.
pub fn quantile<T: Copy + Into<f64>>(values: &[T], q: f64) -> Result<f64> {
    if values.is_empty() {
        return Err(SieveError::EmptyInput("quantile of an empty sequence"));
    }
    if !(0.0..=1.0).contains(&q) {
        return Err(SieveError::Range(format!(
            "quantile level {q} outside [0, 1]"
        )));
    }
    let mut xs: Vec<f64> = values.iter().map(|&v| v.into()).collect();
    if xs.iter().any(|v| !v.is_finite()) {
        return Err(SieveError::Validation(
            "quantile input must be finite".into(),
        ));
    }
    let n = xs.len();
    let rank = q * (n - 1) as f64;
    let lo = (rank.floor() as usize).min(n - 1);
    let (_, &mut pivot, upper) = xs.select_nth_unstable_by(lo, f64::total_cmp);
    if lo == n - 1 {
        return Ok(pivot);
    }
    let next = upper.iter().copied().fold(f64::INFINITY, f64::min);
    Ok(pivot + (rank - lo as f64) * (next - pivot))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SelectionConfig {
    /// Discriminativeness threshold on p99/median.
    pub beta: f64,
    pub top_k_samples: usize,
    /// Fraction of the map maximum a cell must reach to enter the crop box.
    pub crop_tau: f64,
    pub epsilon: f64,
}

impl Default for SelectionConfig {
    fn default() -> Self {
        Self {
            beta: 10.0,
            top_k_samples: 20,
            crop_tau: 0.5,
            epsilon: 1e-12,
        }
    }
}

impl SelectionConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.beta > 0.0 && self.beta.is_finite()) {
            return Err(SieveError::Range(format!(
                "beta must be > 0, got {}",
                self.beta
            )));
        }
        if self.top_k_samples == 0 {
            return Err(SieveError::Range("top_k_samples must be >= 1".into()));
        }
        if !(self.crop_tau > 0.0 && self.crop_tau <= 1.0) {
            return Err(SieveError::Range(format!(
                "crop_tau must be in (0, 1], got {}",
                self.crop_tau
            )));
        }
        if !(self.epsilon >= 0.0 && self.epsilon.is_finite()) {
            return Err(SieveError::Range(format!(
                "epsilon must be >= 0, got {}",
                self.epsilon
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NeuronStats {
    pub neuron_id: usize,
    pub median: f64,
    pub p99: f64,
    /// `p99 / median`, `+inf` for a near-zero median under a positive tail,
    /// `0` when both are near zero.
    #[serde(with = "crate::ratio_serde")]
    pub ratio: f64,
    pub n_samples: usize,
}

pub fn neuron_stats<T: Copy + Into<f64>>(
    neuron_id: usize,
    column: &[T],
    cfg: &SelectionConfig,
) -> Result<NeuronStats> {
    if column.is_empty() {
        return Err(SieveError::EmptyInput("activation column"));
    }
    let median = quantile(column, 0.5)?;
    let p99 = quantile(column, 0.99)?;
    let ratio = if median > cfg.epsilon {
        p99 / median
    } else if p99 > cfg.epsilon {
        f64::INFINITY
    } else {
        0.0
    };
    Ok(NeuronStats {
        neuron_id,
        median,
        p99,
        ratio,
        n_samples: column.len(),
    })
}

/// Strict `ratio > beta`.
pub fn discriminative_filter(stats: &NeuronStats, cfg: &SelectionConfig) -> bool {
    stats.ratio > cfg.beta
}

/// Normalized half-open rectangle relative to the source image.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CropRect {
    pub x0: f64,
    pub y0: f64,
    pub x1: f64,
    pub y1: f64,
}

impl CropRect {
    pub const FULL: CropRect = CropRect {
        x0: 0.0,
        y0: 0.0,
        x1: 1.0,
        y1: 1.0,
    };

    pub fn is_valid(&self) -> bool {
        0.0 <= self.x0
            && self.x0 < self.x1
            && self.x1 <= 1.0
            && 0.0 <= self.y0
            && self.y0 < self.y1
            && self.y1 <= 1.0
    }

    /// Whether grid cell `(row, col)` of an `height × width` map lies inside.
    pub fn contains_cell(&self, row: usize, col: usize, height: usize, width: usize) -> bool {
        let cx = (col as f64 + 0.5) / width as f64;
        let cy = (row as f64 + 0.5) / height as f64;
        self.x0 <= cx && cx < self.x1 && self.y0 <= cy && cy < self.y1
    }
}

/// Bounding box of all cells at or above `crop_tau · max`. Flat maps
/// (max ≤ epsilon) yield the full image.
pub fn crop_rect_from_map(map: MapView<'_>, cfg: &SelectionConfig) -> CropRect {
    let max = map.values.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    let max = f64::from(max);
    if max.is_nan() || max <= cfg.epsilon {
        return CropRect::FULL;
    }
    let cut = cfg.crop_tau * max;
    let (mut r0, mut r1, mut c0, mut c1) = (usize::MAX, 0, usize::MAX, 0);
    for (i, &v) in map.values.iter().enumerate() {
        if f64::from(v) >= cut {
            let (r, c) = (i / map.width, i % map.width);
            r0 = r0.min(r);
            r1 = r1.max(r);
            c0 = c0.min(c);
            c1 = c1.max(c);
        }
    }
    let (h, w) = (map.height as f64, map.width as f64);
    CropRect {
        x0: c0 as f64 / w,
        y0: r0 as f64 / h,
        x1: (c1 + 1) as f64 / w,
        y1: (r1 + 1) as f64 / h,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectionResult {
    pub neuron_id: usize,
    pub discriminative: bool,
    pub stats: NeuronStats,
    /// Descending activation; ties by ascending sample index.
    pub selected_sample_ids: Vec<String>,
    pub selected_activations: Vec<f32>,
    pub crop_rects: Vec<CropRect>,
}

/// Indices of the `k` largest values, descending, ties by lower index first.
pub(crate) fn top_indices(values: &[f32], k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..values.len()).collect();
    let order =
        |&a: &usize, &b: &usize| -> Ordering { values[b].total_cmp(&values[a]).then(a.cmp(&b)) };
    let k = k.min(values.len());
    if k < idx.len() && k > 0 {
        idx.select_nth_unstable_by(k - 1, order);
        idx.truncate(k);
    }
    idx.sort_unstable_by(order);
    idx.truncate(k);
    idx
}

/// Statistics, verdict and top samples for one neuron. Crops default to the
/// full image; see [`SelectionResult::with_crops`].
pub fn select_high_activation(
    acts: &ActivationTable,
    neuron_id: usize,
    cfg: &SelectionConfig,
) -> Result<SelectionResult> {
    let column = acts.column(neuron_id)?;
    let stats = neuron_stats(neuron_id, &column, cfg)?;
    let discriminative = discriminative_filter(&stats, cfg);
    let picked = if discriminative {
        top_indices(&column, cfg.top_k_samples)
    } else {
        Vec::new()
    };
    Ok(SelectionResult {
        neuron_id,
        discriminative,
        stats,
        selected_sample_ids: picked
            .iter()
            .map(|&i| acts.sample_ids()[i].clone())
            .collect(),
        selected_activations: picked.iter().map(|&i| column[i]).collect(),
        crop_rects: vec![CropRect::FULL; picked.len()],
    })
}

impl SelectionResult {
    /// Replaces the crop rectangles with ones derived from `maps`.
    pub fn with_crops(mut self, maps: &ActivationMapStack, cfg: &SelectionConfig) -> Result<Self> {
        let index: std::collections::HashMap<&str, usize> = maps
            .sample_ids()
            .iter()
            .enumerate()
            .map(|(i, s)| (s.as_str(), i))
            .collect();
        self.crop_rects = self
            .selected_sample_ids
            .iter()
            .map(|id| {
                let sample = *index
                    .get(id.as_str())
                    .ok_or_else(|| SieveError::Key(format!("activation map for sample {id:?}")))?;
                let map = maps.map(sample, self.neuron_id).ok_or_else(|| {
                    SieveError::Key(format!("activation map for neuron {}", self.neuron_id))
                })?;
                Ok(crop_rect_from_map(map, cfg))
            })
            .collect::<Result<_>>()?;
        Ok(self)
    }
}
