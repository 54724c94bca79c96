// SPDX-License-Identifier: MIT OR Apache-2.0

//! Named-tensor weight containers (safetensors layout: little-endian `u64`
//! header length, JSON header, raw tensor bytes).
//!
//! A checkpoint is either a single file or a directory of shards. Every
//! floating-point dtype we accept is widened to `f32` at load time.

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::path::{Path, PathBuf};

use safetensors::tensor::{Dtype, TensorView};
use safetensors::SafeTensors;

use crate::error::{Error, Result};

/// A dequantized tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

/// All tensors of a checkpoint, widened to `f32`, plus the string metadata
/// stored in the container header.
#[derive(Debug, Default)]
pub struct TensorStore {
    tensors: HashMap<String, Tensor>,
    metadata: BTreeMap<String, String>,
    source: PathBuf,
}

impl TensorStore {
    /// Load a `.safetensors` file, or every `.safetensors` shard inside a
    /// directory (in file-name order).
    pub fn load(path: &Path) -> Result<Self> {
        let shards = if path.is_dir() {
            let mut shards: Vec<PathBuf> = fs::read_dir(path)
                .map_err(|e| Error::io(path, e))?
                .filter_map(|entry| entry.ok().map(|e| e.path()))
                .filter(|p| p.extension().is_some_and(|ext| ext == "safetensors"))
                .collect();
            shards.sort();
            if shards.is_empty() {
                return Err(Error::Container(format!("no .safetensors files in {}", path.display())));
            }
            shards
        } else {
            vec![path.to_path_buf()]
        };

        let mut store = TensorStore {
            source: path.to_path_buf(),
            ..Default::default()
        };
        for shard in &shards {
            let bytes = fs::read(shard).map_err(|e| Error::io(shard, e))?;
            store.extend_from_bytes(&bytes)?;
        }
        Ok(store)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut store = TensorStore::default();
        store.extend_from_bytes(bytes)?;
        Ok(store)
    }

    fn extend_from_bytes(&mut self, bytes: &[u8]) -> Result<()> {
        let (_, header) =
            SafeTensors::read_metadata(bytes).map_err(|e| Error::Container(format!("bad header: {e}")))?;
        if let Some(meta) = header.metadata() {
            self.metadata.extend(meta.iter().map(|(k, v)| (k.clone(), v.clone())));
        }
        let parsed = SafeTensors::deserialize(bytes).map_err(|e| Error::Container(format!("bad container: {e}")))?;
        for (name, view) in parsed.tensors() {
            let data = widen(&name, &view)?;
            self.tensors.insert(
                name,
                Tensor {
                    shape: view.shape().to_vec(),
                    data,
                },
            );
        }
        Ok(())
    }

    pub fn metadata(&self) -> &BTreeMap<String, String> {
        &self.metadata
    }

    pub fn source(&self) -> &Path {
        &self.source
    }

    pub fn contains(&self, name: &str) -> bool {
        self.tensors.contains_key(name)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    /// Remove a tensor, checking its shape.
    pub fn take(&mut self, name: &str, expected: &[usize]) -> Result<Vec<f32>> {
        let tensor = self
            .tensors
            .remove(name)
            .ok_or_else(|| Error::MissingTensor(name.to_string()))?;
        if tensor.shape != expected {
            return Err(Error::ShapeMismatch {
                name: name.to_string(),
                expected: expected.to_vec(),
                actual: tensor.shape,
            });
        }
        Ok(tensor.data)
    }
}

fn widen(name: &str, view: &TensorView<'_>) -> Result<Vec<f32>> {
    let bytes = view.data();
    let out = match view.dtype() {
        Dtype::F32 => bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect(),
        Dtype::F16 => bytes
            .chunks_exact(2)
            .map(|c| half::f16::from_le_bytes([c[0], c[1]]).to_f32())
            .collect(),
        Dtype::BF16 => bytes
            .chunks_exact(2)
            .map(|c| half::bf16::from_le_bytes([c[0], c[1]]).to_f32())
            .collect(),
        Dtype::F64 => bytes
            .chunks_exact(8)
            .map(|c| {
                let mut b = [0u8; 8];
                b.copy_from_slice(c);
                f64::from_le_bytes(b) as f32
            })
            .collect(),
        other => {
            return Err(Error::UnsupportedDtype {
                name: name.to_string(),
                dtype: format!("{other:?}"),
            })
        }
    };
    Ok(out)
}

/// Storage precision used when writing a container.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StoreDtype {
    F32,
    F16,
    BF16,
}

/// Serialize named `f32` tensors into a container, converting to `dtype`.
pub fn serialize_tensors(
    tensors: &[(String, Tensor)],
    metadata: &BTreeMap<String, String>,
    dtype: StoreDtype,
) -> Result<Vec<u8>> {
    let encoded: Vec<(String, Vec<usize>, Vec<u8>)> = tensors
        .iter()
        .map(|(name, t)| {
            let bytes = match dtype {
                StoreDtype::F32 => t.data.iter().flat_map(|v| v.to_le_bytes()).collect(),
                StoreDtype::F16 => t
                    .data
                    .iter()
                    .flat_map(|v| half::f16::from_f32(*v).to_le_bytes())
                    .collect(),
                StoreDtype::BF16 => t
                    .data
                    .iter()
                    .flat_map(|v| half::bf16::from_f32(*v).to_le_bytes())
                    .collect(),
            };
            (name.clone(), t.shape.clone(), bytes)
        })
        .collect();
    let st_dtype = match dtype {
        StoreDtype::F32 => Dtype::F32,
        StoreDtype::F16 => Dtype::F16,
        StoreDtype::BF16 => Dtype::BF16,
    };
    let views = encoded
        .iter()
        .map(|(name, shape, bytes)| {
            TensorView::new(st_dtype, shape.clone(), bytes)
                .map(|v| (name.clone(), v))
                .map_err(|e| Error::Container(format!("tensor `{name}`: {e}")))
        })
        .collect::<Result<Vec<_>>>()?;
    let meta: HashMap<String, String> = metadata.clone().into_iter().collect();
    safetensors::serialize(views, Some(meta)).map_err(|e| Error::Container(e.to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Vec<(String, Tensor)> {
        vec![
            (
                "a".to_string(),
                Tensor {
                    shape: vec![2, 3],
                    data: vec![0.5, -1.0, 2.0, 0.0, 3.25, -0.125],
                },
            ),
            (
                "b".to_string(),
                Tensor {
                    shape: vec![1],
                    data: vec![7.0],
                },
            ),
        ]
    }

    #[test]
    fn f32_and_f16_widen_exactly_for_representable_values() {
        let mut meta = BTreeMap::new();
        meta.insert("k".to_string(), "v".to_string());
        for dtype in [StoreDtype::F32, StoreDtype::F16, StoreDtype::BF16] {
            let bytes = serialize_tensors(&sample(), &meta, dtype).unwrap();
            let mut store = TensorStore::from_bytes(&bytes).unwrap();
            assert_eq!(store.metadata().get("k").map(String::as_str), Some("v"));
            assert_eq!(
                store.take("a", &[2, 3]).unwrap(),
                vec![0.5, -1.0, 2.0, 0.0, 3.25, -0.125]
            );
        }
    }

    #[test]
    fn take_reports_name_on_missing_and_mismatch() {
        let bytes = serialize_tensors(&sample(), &BTreeMap::new(), StoreDtype::F32).unwrap();
        let mut store = TensorStore::from_bytes(&bytes).unwrap();
        match store.take("a", &[3, 2]) {
            Err(Error::ShapeMismatch { name, .. }) => assert_eq!(name, "a"),
            other => panic!("unexpected {other:?}"),
        }
        match store.take("zzz", &[1]) {
            Err(Error::MissingTensor(name)) => assert_eq!(name, "zzz"),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn integer_tensors_are_rejected_by_name() {
        let data = [1u8, 0, 0, 0];
        let view = TensorView::new(Dtype::I32, vec![1], &data).unwrap();
        let bytes = safetensors::serialize(vec![("ids", view)], None).unwrap();
        match TensorStore::from_bytes(&bytes) {
            Err(Error::UnsupportedDtype { name, .. }) => assert_eq!(name, "ids"),
            other => panic!("unexpected {other:?}"),
        }
    }
}
