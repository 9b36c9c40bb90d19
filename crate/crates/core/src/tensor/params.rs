use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use ndarray::Array2;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::TensorError;

pub const CHECKPOINT_VERSION: u32 = 1;

/// Named parameter tensors, ordered by path.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    tensors: BTreeMap<String, Array2<f64>>,
}

#[derive(Debug, Serialize, Deserialize)]
struct StoredTensor {
    shape: [usize; 2],
    values: Vec<f64>,
}

#[derive(Debug, Serialize, Deserialize)]
struct Checkpoint {
    version: u32,
    #[serde(default)]
    meta: BTreeMap<String, serde_json::Value>,
    params: BTreeMap<String, StoredTensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, path: impl Into<String>, value: Array2<f64>) -> Result<(), TensorError> {
        let path = path.into();
        if self.tensors.contains_key(&path) {
            return Err(TensorError::DuplicateParam(path));
        }
        self.tensors.insert(path, value);
        Ok(())
    }

    /// Fills a `rows x cols` tensor uniformly in `[-bound, bound]`.
    pub fn insert_uniform<R: Rng>(
        &mut self,
        path: impl Into<String>,
        rows: usize,
        cols: usize,
        bound: f64,
        rng: &mut R,
    ) -> Result<(), TensorError> {
        let v = Array2::from_shape_fn((rows, cols), |_| rng.gen_range(-bound..=bound));
        self.insert(path, v)
    }

    pub fn insert_zeros(&mut self, path: impl Into<String>, rows: usize, cols: usize) -> Result<(), TensorError> {
        self.insert(path, Array2::zeros((rows, cols)))
    }

    pub fn get(&self, path: &str) -> Option<&Array2<f64>> {
        self.tensors.get(path)
    }

    pub fn get_mut(&mut self, path: &str) -> Option<&mut Array2<f64>> {
        self.tensors.get_mut(path)
    }

    pub fn paths(&self) -> impl Iterator<Item = &str> {
        self.tensors.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Array2<f64>)> {
        self.tensors.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Array2<f64>)> {
        self.tensors.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn scalar_count(&self) -> usize {
        self.tensors.values().map(|t| t.len()).sum()
    }

    /// Moves every tensor of `other` in under `prefix.`.
    pub fn merge_prefixed(&mut self, prefix: &str, other: ParamStore) -> Result<(), TensorError> {
        for (k, v) in other.tensors {
            self.insert(format!("{prefix}.{k}"), v)?;
        }
        Ok(())
    }

    /// Tensors whose path starts with `prefix.`, with the prefix removed.
    pub fn subset(&self, prefix: &str) -> ParamStore {
        let head = format!("{prefix}.");
        ParamStore {
            tensors: self.tensors.iter().filter_map(|(k, v)| k.strip_prefix(&head).map(|rest| (rest.to_string(), v.clone()))).collect(),
        }
    }

    pub fn all_finite(&self) -> bool {
        self.tensors.values().all(|t| t.iter().all(|x| x.is_finite()))
    }

    pub fn to_json(&self, meta: &BTreeMap<String, serde_json::Value>) -> Result<String, TensorError> {
        let ck = Checkpoint {
            version: CHECKPOINT_VERSION,
            meta: meta.clone(),
            params: self
                .tensors
                .iter()
                .map(|(k, v)| {
                    let (r, c) = v.dim();
                    (k.clone(), StoredTensor { shape: [r, c], values: v.iter().copied().collect() })
                })
                .collect(),
        };
        Ok(serde_json::to_string(&ck)?)
    }

    pub fn from_json(text: &str) -> Result<(Self, BTreeMap<String, serde_json::Value>), TensorError> {
        let ck: Checkpoint = serde_json::from_str(text)?;
        if ck.version != CHECKPOINT_VERSION {
            return Err(TensorError::CheckpointVersion { found: ck.version, expected: CHECKPOINT_VERSION });
        }
        let mut tensors = BTreeMap::new();
        for (k, t) in ck.params {
            let [r, c] = t.shape;
            let v =
                Array2::from_shape_vec((r, c), t.values).map_err(|_| TensorError::CheckpointShape { path: k.clone(), shape: (r, c) })?;
            tensors.insert(k, v);
        }
        Ok((Self { tensors }, ck.meta))
    }

    pub fn save(&self, path: &Path, meta: &BTreeMap<String, serde_json::Value>) -> Result<(), TensorError> {
        fs::write(path, self.to_json(meta)?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<(Self, BTreeMap<String, serde_json::Value>), TensorError> {
        Self::from_json(&fs::read_to_string(path)?)
    }
}
