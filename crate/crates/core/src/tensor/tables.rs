use std::collections::{HashMap, HashSet};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::jsonio::{read_json, write_json};
use super::{read_tensor, write_tensor, DenseTensor};
use crate::error::{Result, SieveError};

#[derive(Debug, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
enum Sidecar {
    ActivationTable {
        layer_id: String,
        sample_ids: Vec<String>,
    },
    ActivationMaps {
        neuron_ids: Vec<usize>,
        sample_ids: Vec<String>,
    },
    EmbeddingTable {
        space_id: String,
        item_ids: Vec<String>,
    },
}

/// `acts.svt1` → `acts.json`.
pub fn sidecar_path(tensor_path: &Path) -> PathBuf {
    tensor_path.with_extension("json")
}

fn index_ids(ids: &[String], what: &str) -> Result<HashMap<String, usize>> {
    let mut index = HashMap::with_capacity(ids.len());
    for (i, id) in ids.iter().enumerate() {
        if index.insert(id.clone(), i).is_some() {
            return Err(SieveError::Validation(format!(
                "duplicate {what} id {id:?}"
            )));
        }
    }
    Ok(index)
}

fn load_sidecar(tensor_path: &Path) -> Result<Sidecar> {
    read_json(&sidecar_path(tensor_path))
}

fn wrong_kind(path: &Path, expected: &str) -> SieveError {
    SieveError::Validation(format!(
        "{} does not describe {expected}",
        sidecar_path(path).display()
    ))
}

/// Per-sample, per-neuron scalar activations of one layer, shape `[S, N]`.
/// Neurons are addressed by column index.
#[derive(Debug, Clone)]
pub struct ActivationTable {
    tensor: DenseTensor,
    sample_ids: Vec<String>,
    layer_id: String,
    index: HashMap<String, usize>,
}

impl ActivationTable {
    pub fn new(
        tensor: DenseTensor,
        sample_ids: Vec<String>,
        layer_id: impl Into<String>,
    ) -> Result<Self> {
        let shape = tensor.shape();
        if shape.len() != 2 {
            return Err(SieveError::Validation(format!(
                "activation table must be [S, N], got {shape:?}"
            )));
        }
        if shape[0] != sample_ids.len() {
            return Err(SieveError::Validation(format!(
                "{} sample ids for {} rows",
                sample_ids.len(),
                shape[0]
            )));
        }
        let index = index_ids(&sample_ids, "sample")?;
        Ok(Self {
            tensor,
            sample_ids,
            layer_id: layer_id.into(),
            index,
        })
    }

    pub fn from_rows(
        sample_ids: Vec<String>,
        layer_id: impl Into<String>,
        n_neurons: usize,
        data: Vec<f32>,
    ) -> Result<Self> {
        let tensor = DenseTensor::new(vec![sample_ids.len(), n_neurons], data)?;
        Self::new(tensor, sample_ids, layer_id)
    }

    pub fn n_samples(&self) -> usize {
        self.tensor.shape()[0]
    }

    pub fn n_neurons(&self) -> usize {
        self.tensor.shape()[1]
    }

    pub fn sample_ids(&self) -> &[String] {
        &self.sample_ids
    }

    pub fn layer_id(&self) -> &str {
        &self.layer_id
    }

    pub fn tensor(&self) -> &DenseTensor {
        &self.tensor
    }

    pub fn sample_index(&self, id: &str) -> Option<usize> {
        self.index.get(id).copied()
    }

    pub fn row(&self, sample: usize) -> &[f32] {
        let n = self.n_neurons();
        &self.tensor.data()[sample * n..(sample + 1) * n]
    }

    pub fn value(&self, sample: usize, neuron: usize) -> f32 {
        self.tensor.data()[sample * self.n_neurons() + neuron]
    }

    /// The activation distribution of one neuron over all samples.
    pub fn column(&self, neuron: usize) -> Result<Vec<f32>> {
        let n = self.n_neurons();
        if neuron >= n {
            return Err(SieveError::Key(format!("neuron {neuron} (table has {n})")));
        }
        Ok(self
            .tensor
            .data()
            .iter()
            .skip(neuron)
            .step_by(n.max(1))
            .copied()
            .collect())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_tensor(&self.tensor, path)?;
        write_json(
            &sidecar_path(path),
            &Sidecar::ActivationTable {
                layer_id: self.layer_id.clone(),
                sample_ids: self.sample_ids.clone(),
            },
        )
    }

    pub fn load(path: &Path) -> Result<Self> {
        let tensor = read_tensor(path)?;
        match load_sidecar(path)? {
            Sidecar::ActivationTable {
                layer_id,
                sample_ids,
            } => Self::new(tensor, sample_ids, layer_id),
            _ => Err(wrong_kind(path, "an activation table")),
        }
    }
}

/// Spatial activation grids, shape `[S, H, W]` (one neuron) or `[S, N, H, W]`.
#[derive(Debug, Clone)]
pub struct ActivationMapStack {
    tensor: DenseTensor,
    neuron_ids: Vec<usize>,
    sample_ids: Vec<String>,
    neuron_slot: HashMap<usize, usize>,
}

/// One `H × W` map, row-major.
#[derive(Debug, Clone, Copy)]
pub struct MapView<'a> {
    pub height: usize,
    pub width: usize,
    pub values: &'a [f32],
}

impl ActivationMapStack {
    pub fn new(
        tensor: DenseTensor,
        neuron_ids: Vec<usize>,
        sample_ids: Vec<String>,
    ) -> Result<Self> {
        let shape = tensor.shape();
        let (s, n, h, w) = match *shape {
            [s, h, w] => (s, 1, h, w),
            [s, n, h, w] => (s, n, h, w),
            _ => {
                return Err(SieveError::Validation(format!(
                    "activation maps must be [S, H, W] or [S, N, H, W], got {shape:?}"
                )))
            }
        };
        if h == 0 || w == 0 {
            return Err(SieveError::Validation(
                "map extents must be at least 1".into(),
            ));
        }
        if s != sample_ids.len() {
            return Err(SieveError::Validation(format!(
                "{} sample ids for {s} map rows",
                sample_ids.len()
            )));
        }
        if n != neuron_ids.len() {
            return Err(SieveError::Validation(format!(
                "{} neuron ids for {n} map channels",
                neuron_ids.len()
            )));
        }
        index_ids(&sample_ids, "sample")?;
        let mut neuron_slot = HashMap::new();
        for (slot, &id) in neuron_ids.iter().enumerate() {
            if neuron_slot.insert(id, slot).is_some() {
                return Err(SieveError::Validation(format!("duplicate neuron id {id}")));
            }
        }
        Ok(Self {
            tensor,
            neuron_ids,
            sample_ids,
            neuron_slot,
        })
    }

    pub fn sample_ids(&self) -> &[String] {
        &self.sample_ids
    }

    pub fn neuron_ids(&self) -> &[usize] {
        &self.neuron_ids
    }

    pub fn tensor(&self) -> &DenseTensor {
        &self.tensor
    }

    fn dims(&self) -> (usize, usize) {
        let shape = self.tensor.shape();
        (shape[shape.len() - 2], shape[shape.len() - 1])
    }

    pub fn map(&self, sample: usize, neuron_id: usize) -> Option<MapView<'_>> {
        let slot = *self.neuron_slot.get(&neuron_id)?;
        if sample >= self.sample_ids.len() {
            return None;
        }
        let (height, width) = self.dims();
        let cells = height * width;
        let start = (sample * self.neuron_ids.len() + slot) * cells;
        Some(MapView {
            height,
            width,
            values: &self.tensor.data()[start..start + cells],
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_tensor(&self.tensor, path)?;
        write_json(
            &sidecar_path(path),
            &Sidecar::ActivationMaps {
                neuron_ids: self.neuron_ids.clone(),
                sample_ids: self.sample_ids.clone(),
            },
        )
    }

    pub fn load(path: &Path) -> Result<Self> {
        let tensor = read_tensor(path)?;
        match load_sidecar(path)? {
            Sidecar::ActivationMaps {
                neuron_ids,
                sample_ids,
            } => Self::new(tensor, neuron_ids, sample_ids),
            _ => Err(wrong_kind(path, "activation maps")),
        }
    }
}

/// Feature vectors `[M, D]` living in one named embedding space.
#[derive(Debug, Clone)]
pub struct EmbeddingTable {
    tensor: DenseTensor,
    item_ids: Vec<String>,
    space_id: String,
    index: HashMap<String, usize>,
}

impl EmbeddingTable {
    pub fn new(
        tensor: DenseTensor,
        item_ids: Vec<String>,
        space_id: impl Into<String>,
    ) -> Result<Self> {
        let shape = tensor.shape();
        if shape.len() != 2 || shape[1] == 0 {
            return Err(SieveError::Validation(format!(
                "embedding table must be [M, D] with D >= 1, got {shape:?}"
            )));
        }
        if shape[0] != item_ids.len() {
            return Err(SieveError::Validation(format!(
                "{} item ids for {} rows",
                item_ids.len(),
                shape[0]
            )));
        }
        let index = index_ids(&item_ids, "item")?;
        let d = shape[1];
        if let Some(row) = tensor
            .data()
            .chunks_exact(d)
            .position(|r| r.iter().all(|&v| v == 0.0))
        {
            return Err(SieveError::Validation(format!(
                "item {:?} has a zero-norm embedding",
                item_ids[row]
            )));
        }
        Ok(Self {
            tensor,
            item_ids,
            space_id: space_id.into(),
            index,
        })
    }

    pub fn from_rows(
        item_ids: Vec<String>,
        space_id: impl Into<String>,
        rows: &[Vec<f32>],
    ) -> Result<Self> {
        let d = rows.first().map_or(1, Vec::len);
        if rows.iter().any(|r| r.len() != d) {
            return Err(SieveError::Validation("ragged embedding rows".into()));
        }
        let data = rows.iter().flatten().copied().collect();
        Self::new(
            DenseTensor::new(vec![rows.len(), d], data)?,
            item_ids,
            space_id,
        )
    }

    pub fn len(&self) -> usize {
        self.item_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.item_ids.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.tensor.shape()[1]
    }

    pub fn item_ids(&self) -> &[String] {
        &self.item_ids
    }

    pub fn space_id(&self) -> &str {
        &self.space_id
    }

    pub fn tensor(&self) -> &DenseTensor {
        &self.tensor
    }

    pub fn row(&self, i: usize) -> &[f32] {
        let d = self.dim();
        &self.tensor.data()[i * d..(i + 1) * d]
    }

    pub fn index_of(&self, id: &str) -> Option<usize> {
        self.index.get(id).copied()
    }

    pub fn row_by_id(&self, id: &str) -> Option<&[f32]> {
        self.index_of(id).map(|i| self.row(i))
    }

    pub fn rows(&self) -> impl Iterator<Item = &[f32]> {
        self.tensor.data().chunks_exact(self.dim())
    }

    /// A copy with every row scaled to unit L2 norm.
    pub fn normalized(&self) -> Self {
        let data = self
            .rows()
            .flat_map(|r| {
                let norm = r
                    .iter()
                    .map(|&v| f64::from(v) * f64::from(v))
                    .sum::<f64>()
                    .sqrt();
                r.iter().map(move |&v| (f64::from(v) / norm) as f32)
            })
            .collect();
        Self {
            tensor: DenseTensor::new(self.tensor.shape().to_vec(), data).expect("same shape"),
            item_ids: self.item_ids.clone(),
            space_id: self.space_id.clone(),
            index: self.index.clone(),
        }
    }

    /// Rows for the given ids, in the given order.
    pub fn subset(&self, ids: &[String]) -> Result<Self> {
        let mut data = Vec::with_capacity(ids.len() * self.dim());
        for id in ids {
            let row = self
                .row_by_id(id)
                .ok_or_else(|| SieveError::Key(format!("embedding for item {id:?}")))?;
            data.extend_from_slice(row);
        }
        let unique: HashSet<&String> = ids.iter().collect();
        if unique.len() != ids.len() {
            return Err(SieveError::Validation("subset ids must be unique".into()));
        }
        Self::new(
            DenseTensor::new(vec![ids.len(), self.dim()], data)?,
            ids.to_vec(),
            self.space_id.clone(),
        )
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_tensor(&self.tensor, path)?;
        write_json(
            &sidecar_path(path),
            &Sidecar::EmbeddingTable {
                space_id: self.space_id.clone(),
                item_ids: self.item_ids.clone(),
            },
        )
    }

    pub fn load(path: &Path) -> Result<Self> {
        let tensor = read_tensor(path)?;
        match load_sidecar(path)? {
            Sidecar::EmbeddingTable { space_id, item_ids } => Self::new(tensor, item_ids, space_id),
            _ => Err(wrong_kind(path, "an embedding table")),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ids(n: usize) -> Vec<String> {
        (0..n).map(|i| format!("s{i}")).collect()
    }

    #[test]
    fn activation_columns() {
        let t = ActivationTable::from_rows(ids(3), "layer4", 2, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0])
            .unwrap();
        assert_eq!(t.column(1).unwrap(), vec![2.0, 4.0, 6.0]);
        assert_eq!(t.value(2, 0), 5.0);
        assert!(matches!(t.column(2), Err(SieveError::Key(_))));
    }

    #[test]
    fn duplicate_sample_ids_rejected() {
        let err = ActivationTable::from_rows(vec!["a".into(), "a".into()], "l", 1, vec![0.0, 1.0]);
        assert!(matches!(err, Err(SieveError::Validation(_))));
    }

    #[test]
    fn zero_rows_rejected() {
        let err = EmbeddingTable::from_rows(ids(2), "clip", &[vec![1.0, 0.0], vec![0.0, 0.0]]);
        assert!(matches!(err, Err(SieveError::Validation(_))));
    }

    #[test]
    fn maps_single_and_multi_neuron() {
        let single = DenseTensor::new(vec![2, 1, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let stack = ActivationMapStack::new(single, vec![7], ids(2)).unwrap();
        assert_eq!(stack.map(1, 7).unwrap().values, &[3.0, 4.0]);
        assert!(stack.map(0, 0).is_none());

        let multi = DenseTensor::new(vec![1, 2, 1, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let stack = ActivationMapStack::new(multi, vec![0, 1], ids(1)).unwrap();
        let m = stack.map(0, 1).unwrap();
        assert_eq!((m.height, m.width), (1, 2));
        assert_eq!(m.values, &[3.0, 4.0]);
    }

    #[test]
    fn zero_extent_maps_rejected() {
        let t = DenseTensor::new(vec![1, 0, 3], vec![]).unwrap();
        assert!(ActivationMapStack::new(t, vec![0], ids(1)).is_err());
    }

    #[test]
    fn tables_round_trip_through_files() {
        let dir = tempfile::tempdir().unwrap();
        let acts =
            ActivationTable::from_rows(ids(2), "penultimate", 2, vec![0.0, 1.0, 2.0, 3.0]).unwrap();
        let p = dir.path().join("acts.svt1");
        acts.save(&p).unwrap();
        assert!(sidecar_path(&p).exists());
        let back = ActivationTable::load(&p).unwrap();
        assert_eq!(back.sample_ids(), acts.sample_ids());
        assert_eq!(back.tensor(), acts.tensor());
        assert_eq!(back.layer_id(), "penultimate");

        let embs =
            EmbeddingTable::from_rows(ids(2), "clip", &[vec![3.0, 4.0], vec![0.0, 1.0]]).unwrap();
        let p = dir.path().join("embs.svt1");
        embs.save(&p).unwrap();
        let back = EmbeddingTable::load(&p).unwrap();
        assert_eq!(back.space_id(), "clip");
        assert_eq!(back.row_by_id("s0").unwrap(), &[3.0, 4.0]);
        // wrong kind
        assert!(ActivationTable::load(&p).is_err());
    }

    #[test]
    fn normalization_and_subset() {
        let embs =
            EmbeddingTable::from_rows(ids(2), "clip", &[vec![3.0, 4.0], vec![0.0, 2.0]]).unwrap();
        let n = embs.normalized();
        assert_eq!(n.row(0), &[0.6, 0.8]);
        assert_eq!(n.row(1), &[0.0, 1.0]);
        let sub = embs.subset(&["s1".to_string()]).unwrap();
        assert_eq!(sub.row(0), &[0.0, 2.0]);
        assert!(matches!(
            embs.subset(&["nope".to_string()]),
            Err(SieveError::Key(_))
        ));
    }
}
