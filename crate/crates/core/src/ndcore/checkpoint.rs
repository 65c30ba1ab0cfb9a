//! Checkpoint directories: `manifest.json` describing every tensor plus a
//! raw little-endian f64 blob `weights.bin`.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::tensor::Tensor;
use crate::error::{Error, Result};

pub const MANIFEST_FILE: &str = "manifest.json";
pub const BLOB_FILE: &str = "weights.bin";
const FORMAT: &str = "dppo-checkpoint-v1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub dtype: String,
    pub offset: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format: String,
    pub seed: u64,
    pub config: serde_json::Value,
    pub tensors: Vec<TensorEntry>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub seed: u64,
    pub config: serde_json::Value,
    pub tensors: Vec<(String, Tensor)>,
}

impl Checkpoint {
    pub fn new(seed: u64, config: serde_json::Value) -> Self {
        Self {
            seed,
            config,
            tensors: Vec::new(),
        }
    }

    pub fn push(&mut self, name: impl Into<String>, t: Tensor) {
        self.tensors.push((name.into(), t));
    }

    /// Adds every tensor with `prefix/` prepended to its name.
    pub fn push_all<'a>(
        &mut self,
        prefix: &str,
        names: Vec<String>,
        tensors: impl IntoIterator<Item = &'a Tensor>,
    ) {
        for (n, t) in names.into_iter().zip(tensors) {
            self.push(format!("{prefix}/{n}"), t.clone());
        }
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn has_prefix(&self, prefix: &str) -> bool {
        let p = format!("{prefix}/");
        self.tensors.iter().any(|(n, _)| n.starts_with(&p))
    }

    /// Copies `prefix/<name>` into each destination tensor, checking shapes.
    pub fn load_into(&self, prefix: &str, names: Vec<String>, dst: Vec<&mut Tensor>) -> Result<()> {
        for (n, d) in names.into_iter().zip(dst) {
            let key = format!("{prefix}/{n}");
            let src = self
                .get(&key)
                .ok_or_else(|| Error::Checkpoint(format!("missing tensor {key}")))?;
            if !src.same_shape(d) {
                return Err(Error::Checkpoint(format!(
                    "tensor {key} has shape {:?}, expected {:?}",
                    src.shape(),
                    d.shape()
                )));
            }
            *d = src.clone();
        }
        Ok(())
    }

    pub fn manifest(&self) -> Manifest {
        let mut offset = 0u64;
        let tensors = self
            .tensors
            .iter()
            .map(|(name, t)| {
                let e = TensorEntry {
                    name: name.clone(),
                    shape: t.shape().to_vec(),
                    dtype: "f64-le".into(),
                    offset,
                };
                offset += 8 * t.len() as u64;
                e
            })
            .collect();
        Manifest {
            format: FORMAT.into(),
            seed: self.seed,
            config: self.config.clone(),
            tensors,
        }
    }

    pub fn blob(&self) -> Vec<u8> {
        let n: usize = self.tensors.iter().map(|(_, t)| t.len()).sum();
        let mut out = Vec::with_capacity(8 * n);
        for (_, t) in &self.tensors {
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        let manifest = serde_json::to_string_pretty(&self.manifest())?;
        fs::write(dir.join(MANIFEST_FILE), manifest + "\n")?;
        fs::write(dir.join(BLOB_FILE), self.blob())?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let mpath = dir.join(MANIFEST_FILE);
        if !mpath.exists() {
            return Err(Error::MissingFile(mpath));
        }
        let manifest: Manifest = serde_json::from_str(&fs::read_to_string(&mpath)?)?;
        if manifest.format != FORMAT {
            return Err(Error::Checkpoint(format!(
                "unknown format {}",
                manifest.format
            )));
        }
        let blob = fs::read(dir.join(BLOB_FILE))?;
        let mut tensors = Vec::with_capacity(manifest.tensors.len());
        for e in &manifest.tensors {
            if e.dtype != "f64-le" || e.shape.len() != 2 {
                return Err(Error::Checkpoint(format!("unsupported entry {}", e.name)));
            }
            let n = e.shape[0] * e.shape[1];
            let start = e.offset as usize;
            let end = start + 8 * n;
            if end > blob.len() {
                return Err(Error::Checkpoint(format!(
                    "tensor {} runs past blob end",
                    e.name
                )));
            }
            let data = blob[start..end]
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
                .collect();
            tensors.push((e.name.clone(), Tensor::new(e.shape[0], e.shape[1], data)?));
        }
        Ok(Self {
            seed: manifest.seed,
            config: manifest.config,
            tensors,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    proptest! {
        #[test]
        fn round_trip_is_bit_exact(vals in proptest::collection::vec(proptest::num::f64::NORMAL | proptest::num::f64::SUBNORMAL | proptest::num::f64::ZERO, 1..40), seed in any::<u64>()) {
            let dir = tempfile::tempdir().unwrap();
            let mut ck = Checkpoint::new(seed, serde_json::json!({"k": 20}));
            let n = vals.len();
            ck.push("a/w", Tensor::new(1, n, vals.clone()).unwrap());
            ck.push("b/w", Tensor::new(n, 1, vals.iter().rev().copied().collect()).unwrap());
            ck.save(dir.path()).unwrap();
            let back = Checkpoint::load(dir.path()).unwrap();
            prop_assert_eq!(back.seed, seed);
            for ((n1, t1), (n2, t2)) in ck.tensors.iter().zip(&back.tensors) {
                prop_assert_eq!(n1, n2);
                let b1: Vec<u64> = t1.data().iter().map(|v| v.to_bits()).collect();
                let b2: Vec<u64> = t2.data().iter().map(|v| v.to_bits()).collect();
                prop_assert_eq!(b1, b2);
            }
        }
    }

    #[test]
    fn missing_manifest_is_reported() {
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(
            Checkpoint::load(dir.path()),
            Err(Error::MissingFile(_))
        ));
    }

    #[test]
    fn load_into_checks_shapes() {
        let mut ck = Checkpoint::new(0, serde_json::Value::Null);
        ck.push("net/w", Tensor::zeros(2, 2));
        let mut dst = Tensor::zeros(3, 2);
        assert!(ck
            .load_into("net", vec!["w".into()], vec![&mut dst])
            .is_err());
        let mut ok = Tensor::full(2, 2, 1.0);
        ck.load_into("net", vec!["w".into()], vec![&mut ok])
            .unwrap();
        assert_eq!(ok, Tensor::zeros(2, 2));
    }
}
