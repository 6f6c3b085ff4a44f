//! On-disk checkpoint: `index.json` describing each tensor (shape, dtype,
//! byte offset) plus `weights.bin` holding the little-endian `f64` data
//! concatenated in index order.

use std::fs;
use std::path::Path;

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};

use super::Tensor;
use crate::error::{Error, Result};

pub const INDEX_FILE: &str = "index.json";
pub const WEIGHTS_FILE: &str = "weights.bin";
const DTYPE: &str = "f64";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub shape: Vec<usize>,
    pub dtype: String,
    pub offset: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Index {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub arch: Option<serde_json::Value>,
    pub tensors: IndexMap<String, TensorEntry>,
}

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub arch: Option<serde_json::Value>,
    pub tensors: IndexMap<String, Tensor>,
}

impl Checkpoint {
    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.tensors
            .get(name)
            .ok_or_else(|| Error::Checkpoint(format!("missing tensor '{name}'")))
    }

    /// Sum of element counts over all stored tensors.
    pub fn numel(&self) -> usize {
        self.tensors.values().map(Tensor::numel).sum()
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let mut tensors = IndexMap::new();
        let mut bytes = Vec::with_capacity(self.numel() * 8);
        for (name, t) in &self.tensors {
            tensors.insert(
                name.clone(),
                TensorEntry {
                    shape: t.shape().to_vec(),
                    dtype: DTYPE.to_string(),
                    offset: bytes.len() as u64,
                },
            );
            for v in t.data() {
                bytes.extend_from_slice(&v.to_le_bytes());
            }
        }
        let index = Index {
            arch: self.arch.clone(),
            tensors,
        };
        let index_path = dir.join(INDEX_FILE);
        fs::write(&index_path, serde_json::to_string_pretty(&index)? + "\n")
            .map_err(|e| Error::io(&index_path, e))?;
        let weights_path = dir.join(WEIGHTS_FILE);
        fs::write(&weights_path, bytes).map_err(|e| Error::io(&weights_path, e))
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let index_path = dir.join(INDEX_FILE);
        let text = fs::read_to_string(&index_path).map_err(|e| Error::io(&index_path, e))?;
        let index: Index = serde_json::from_str(&text)?;
        let weights_path = dir.join(WEIGHTS_FILE);
        let bytes = fs::read(&weights_path).map_err(|e| Error::io(&weights_path, e))?;

        let mut tensors = IndexMap::new();
        for (name, entry) in index.tensors {
            if entry.dtype != DTYPE {
                return Err(Error::Checkpoint(format!(
                    "tensor '{name}' has unsupported dtype '{}'",
                    entry.dtype
                )));
            }
            let numel: usize = entry.shape.iter().product();
            let start = entry.offset as usize;
            let end = start + numel * 8;
            if end > bytes.len() {
                return Err(Error::Checkpoint(format!(
                    "tensor '{name}' extends past end of {WEIGHTS_FILE}"
                )));
            }
            let data = bytes[start..end]
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
                .collect();
            tensors.insert(name, Tensor::new(entry.shape, data)?);
        }
        Ok(Self {
            arch: index.arch,
            tensors,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_preserves_order_and_bits() {
        let dir = tempfile::tempdir().unwrap();
        let mut tensors = IndexMap::new();
        tensors.insert("b".to_string(), Tensor::vector(&[0.1, -2.5e-300]));
        tensors.insert("a".to_string(), Tensor::new(vec![1, 2, 2], vec![1.0, 2.0, 3.0, f64::MAX]).unwrap());
        let ckpt = Checkpoint {
            arch: Some(serde_json::json!({"preset": "tiny"})),
            tensors,
        };
        ckpt.save(dir.path()).unwrap();
        let back = Checkpoint::load(dir.path()).unwrap();
        assert_eq!(back.tensors.keys().collect::<Vec<_>>(), vec!["b", "a"]);
        assert_eq!(back.tensors["a"], ckpt.tensors["a"]);
        assert_eq!(back.tensors["b"], ckpt.tensors["b"]);
        assert_eq!(back.arch, ckpt.arch);

        let index: Index =
            serde_json::from_str(&fs::read_to_string(dir.path().join(INDEX_FILE)).unwrap()).unwrap();
        assert_eq!(index.tensors["a"].offset, 16);
        assert_eq!(fs::metadata(dir.path().join(WEIGHTS_FILE)).unwrap().len(), 48);
    }

    #[test]
    fn truncated_weights_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let mut tensors = IndexMap::new();
        tensors.insert("w".to_string(), Tensor::vector(&[1.0, 2.0]));
        Checkpoint { arch: None, tensors }.save(dir.path()).unwrap();
        fs::write(dir.path().join(WEIGHTS_FILE), [0u8; 8]).unwrap();
        assert!(Checkpoint::load(dir.path()).is_err());
    }
}
