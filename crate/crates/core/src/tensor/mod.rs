//! Tensor container, typed tables and run manifests.
//!
//! # SVT1 layout
//!
//! ```text
//! "SVT1" | header_len: u32 LE | header: UTF-8 JSON | payload: f32 LE, row-major
//! ```
//!
//! The header is `{"dtype":"f32","shape":[...],"order":"row-major"}` with an
//! optional trailing `"allow_nonfinite":true`. Keys are written in exactly
//! that order so files are byte-identical across platforms.
//!
//! Typed tables (activations, maps, embeddings) store their ids in a JSON
//! sidecar next to the tensor: `acts.svt1` pairs with `acts.json`.

mod alignment;
mod concepts;
pub mod jsonio;
mod manifest;
mod tables;

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Result, SieveError};

pub use alignment::{
    compare_ids, sample_of_item, validate_alignment, AlignmentReport, AlignmentStatus,
    PairAlignment,
};
pub use concepts::{normalize_concept, ConceptSet};
pub use manifest::{timestamp_now, RunManifest, Stage};
pub use tables::{sidecar_path, ActivationMapStack, ActivationTable, EmbeddingTable, MapView};

pub const MAGIC: &[u8; 4] = b"SVT1";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Dtype {
    #[serde(rename = "f32")]
    F32,
}

/// Row-major f32 tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseTensor {
    shape: Vec<usize>,
    data: Vec<f32>,
    allow_nonfinite: bool,
}

#[derive(Serialize, Deserialize)]
struct Header {
    dtype: Dtype,
    shape: Vec<u64>,
    order: String,
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    allow_nonfinite: bool,
}

const ROW_MAJOR: &str = "row-major";

fn element_count(shape: &[usize]) -> Option<usize> {
    shape.iter().try_fold(1usize, |acc, &d| acc.checked_mul(d))
}

impl DenseTensor {
    pub fn new(shape: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        Self::build(shape, data, false)
    }

    /// Like [`DenseTensor::new`] but permits NaN and infinities.
    pub fn new_nonfinite(shape: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        Self::build(shape, data, true)
    }

    fn build(shape: Vec<usize>, data: Vec<f32>, allow_nonfinite: bool) -> Result<Self> {
        let n = element_count(&shape)
            .ok_or_else(|| SieveError::Validation(format!("shape {shape:?} overflows")))?;
        if n != data.len() {
            return Err(SieveError::Validation(format!(
                "shape {shape:?} needs {n} elements, got {}",
                data.len()
            )));
        }
        if !allow_nonfinite {
            if let Some(pos) = data.iter().position(|v| !v.is_finite()) {
                return Err(SieveError::Validation(format!(
                    "non-finite element {} at flat index {pos}",
                    data[pos]
                )));
            }
        }
        Ok(Self {
            shape,
            data,
            allow_nonfinite,
        })
    }

    pub fn dtype(&self) -> Dtype {
        Dtype::F32
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn allows_nonfinite(&self) -> bool {
        self.allow_nonfinite
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let header = Header {
            dtype: Dtype::F32,
            shape: self.shape.iter().map(|&d| d as u64).collect(),
            order: ROW_MAJOR.to_string(),
            allow_nonfinite: self.allow_nonfinite,
        };
        let header = serde_json::to_vec(&header).expect("header serializes");
        let mut out = Vec::with_capacity(8 + header.len() + self.data.len() * 4);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(header.len() as u32).to_le_bytes());
        out.extend_from_slice(&header);
        for v in &self.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    /// Parses an SVT1 byte string. Never panics; every malformed input maps to
    /// [`SieveError::Format`] (or `Validation` for forbidden non-finite data).
    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let fmt = |m: String| SieveError::Format(m);
        if bytes.len() < 8 {
            return Err(fmt(format!("file too short ({} bytes)", bytes.len())));
        }
        if &bytes[..4] != MAGIC {
            return Err(fmt(format!("bad magic {:?}", &bytes[..4])));
        }
        let header_len = u32::from_le_bytes([bytes[4], bytes[5], bytes[6], bytes[7]]) as usize;
        let header_end = 8usize
            .checked_add(header_len)
            .filter(|&end| end <= bytes.len())
            .ok_or_else(|| fmt(format!("header length {header_len} exceeds file")))?;
        let header: Header = serde_json::from_slice(&bytes[8..header_end])
            .map_err(|e| fmt(format!("bad header: {e}")))?;
        if header.order != ROW_MAJOR {
            return Err(fmt(format!("unsupported order {:?}", header.order)));
        }
        let shape = header
            .shape
            .iter()
            .map(|&d| usize::try_from(d))
            .collect::<Result<Vec<_>, _>>()
            .map_err(|_| fmt("shape extent does not fit usize".into()))?;
        let n = element_count(&shape).ok_or_else(|| fmt(format!("shape {shape:?} overflows")))?;
        let payload = &bytes[header_end..];
        if n.checked_mul(4) != Some(payload.len()) {
            return Err(fmt(format!(
                "payload is {} bytes, shape {shape:?} needs {} elements",
                payload.len(),
                n
            )));
        }
        let data = payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        Self::build(shape, data, header.allow_nonfinite)
    }
}

pub fn write_tensor(t: &DenseTensor, path: &Path) -> Result<()> {
    fs::write(path, t.to_bytes()).map_err(|e| SieveError::io(path, e))
}

pub fn read_tensor(path: &Path) -> Result<DenseTensor> {
    let bytes = fs::read(path).map_err(|e| SieveError::io(path, e))?;
    DenseTensor::from_bytes(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn identity_2x2_layout() {
        let t = DenseTensor::new(vec![2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let bytes = t.to_bytes();
        let header = br#"{"dtype":"f32","shape":[2,2],"order":"row-major"}"#;
        assert_eq!(&bytes[..4], b"SVT1");
        assert_eq!(&bytes[4..8], &(header.len() as u32).to_le_bytes());
        assert_eq!(&bytes[8..8 + header.len()], header);
        assert_eq!(bytes.len(), 4 + 4 + header.len() + 16);
        assert_eq!(&bytes[bytes.len() - 4..], &1.0f32.to_le_bytes());
        assert_eq!(DenseTensor::from_bytes(&bytes).unwrap(), t);
    }

    #[test]
    fn empty_tensor() {
        let t = DenseTensor::new(vec![0], vec![]).unwrap();
        let back = DenseTensor::from_bytes(&t.to_bytes()).unwrap();
        assert_eq!(back.shape(), &[0]);
        assert!(back.is_empty());
    }

    #[test]
    fn nan_rejected_without_flag() {
        let err = DenseTensor::new(vec![3], vec![1.0, f32::NAN, 2.0]).unwrap_err();
        assert!(matches!(err, SieveError::Validation(_)));
        let t = DenseTensor::new_nonfinite(vec![3], vec![1.0, f32::NAN, 2.0]).unwrap();
        let bytes = t.to_bytes();
        let back = DenseTensor::from_bytes(&bytes).unwrap();
        assert!(back.data()[1].is_nan());
        assert!(back.allows_nonfinite());
    }

    #[test]
    fn bad_magic_and_truncation() {
        let t = DenseTensor::new(vec![3], vec![1.0, 2.0, 3.0]).unwrap();
        let mut bytes = t.to_bytes();
        let mut bad = bytes.clone();
        bad[..4].copy_from_slice(b"XXXX");
        assert!(matches!(
            DenseTensor::from_bytes(&bad),
            Err(SieveError::Format(_))
        ));
        bytes.pop();
        assert!(matches!(
            DenseTensor::from_bytes(&bytes),
            Err(SieveError::Format(_))
        ));
    }

    #[test]
    fn shape_mismatch_on_construction() {
        assert!(DenseTensor::new(vec![2, 3], vec![0.0; 5]).is_err());
    }

    #[test]
    fn file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.svt1");
        let t = DenseTensor::new(vec![2, 1, 3], (0..6).map(|v| v as f32 * 0.5).collect()).unwrap();
        write_tensor(&t, &path).unwrap();
        assert_eq!(read_tensor(&path).unwrap(), t);
        assert!(matches!(
            read_tensor(&dir.path().join("missing.svt1")),
            Err(SieveError::Io { .. })
        ));
    }

    proptest! {
        #[test]
        fn write_read_identity(shape in prop::collection::vec(0usize..5, 0..4), seed in any::<u64>()) {
            let n: usize = shape.iter().product();
            let data: Vec<f32> = (0..n)
                .map(|i| ((seed.wrapping_mul(6364136223846793005).wrapping_add(i as u64) >> 11) as f32) * 1e-9 - 3.0)
                .collect();
            let t = DenseTensor::new(shape, data).unwrap();
            prop_assert_eq!(DenseTensor::from_bytes(&t.to_bytes()).unwrap(), t);
        }

        #[test]
        fn parsing_is_total(bytes in prop::collection::vec(any::<u8>(), 0..64)) {
            let _ = DenseTensor::from_bytes(&bytes);
        }

        #[test]
        fn parsing_is_total_with_valid_prefix(tail in prop::collection::vec(any::<u8>(), 0..64), len in any::<u32>()) {
            let mut bytes = b"SVT1".to_vec();
            bytes.extend_from_slice(&len.to_le_bytes());
            bytes.extend_from_slice(&tail);
            let _ = DenseTensor::from_bytes(&bytes);
        }
    }
}
