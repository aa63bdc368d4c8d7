//! Named-tensor archive used for every checkpoint.
//!
//! Layout (little-endian): `b"LFCK"`, version `u32`, header length `u64`,
//! a JSON header `{"meta": ..., "tensors": [{"name", "shape"}...]}`, then the
//! `f32` payload of each tensor in header order. Tensors are kept sorted by
//! name, so serialization is canonical: save, load, save is byte-identical.

use crate::error::{Error, Result};
use crate::nn::{Module, Real};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::path::Path;

pub const ARCHIVE_MAGIC: &[u8; 4] = b"LFCK";
pub const ARCHIVE_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct TensorRecord {
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

#[derive(Clone, Debug, PartialEq, Default)]
pub struct Archive {
    pub meta: serde_json::Value,
    pub tensors: BTreeMap<String, TensorRecord>,
}

#[derive(Serialize, Deserialize)]
struct Header {
    meta: serde_json::Value,
    tensors: Vec<HeaderEntry>,
}

#[derive(Serialize, Deserialize)]
struct HeaderEntry {
    name: String,
    shape: Vec<usize>,
}

impl Archive {
    pub fn new(meta: serde_json::Value) -> Self {
        Self { meta, tensors: BTreeMap::new() }
    }

    pub fn put(&mut self, name: impl Into<String>, shape: Vec<usize>, data: Vec<f32>) {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        self.tensors.insert(name.into(), TensorRecord { shape, data });
    }

    pub fn get(&self, name: &str) -> Result<&TensorRecord> {
        self.tensors
            .get(name)
            .ok_or_else(|| Error::Checkpoint(format!("archive has no tensor {name:?}")))
    }

    pub fn has_prefix(&self, prefix: &str) -> bool {
        let p = format!("{prefix}/");
        self.tensors.keys().any(|k| k.starts_with(&p))
    }

    /// Store every parameter of `module` under `prefix/`.
    pub fn put_module<R: Real>(&mut self, prefix: &str, module: &dyn Module<R>) {
        for (name, p) in module.params() {
            let data = p.value.iter().map(|v| v.as_f64() as f32).collect();
            self.put(format!("{prefix}/{name}"), p.shape.clone(), data);
        }
    }

    /// Overwrite the parameters of `module` from `prefix/`; every parameter
    /// must be present with a matching shape.
    pub fn load_module<R: Real>(&self, prefix: &str, module: &mut dyn Module<R>) -> Result<()> {
        for (name, p) in module.params_mut() {
            let rec = self.get(&format!("{prefix}/{name}"))?;
            if rec.shape != p.shape {
                return Err(Error::Checkpoint(format!(
                    "{prefix}/{name}: shape {:?} does not match architecture {:?}",
                    rec.shape, p.shape
                )));
            }
            p.value = rec.data.iter().map(|&v| R::lit(v as f64)).collect();
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let header = Header {
            meta: self.meta.clone(),
            tensors: self
                .tensors
                .iter()
                .map(|(name, t)| HeaderEntry { name: name.clone(), shape: t.shape.clone() })
                .collect(),
        };
        let json = serde_json::to_vec(&header)?;
        let payload: usize = self.tensors.values().map(|t| t.data.len() * 4).sum();
        let mut out = Vec::with_capacity(16 + json.len() + payload);
        out.extend_from_slice(ARCHIVE_MAGIC);
        out.extend_from_slice(&ARCHIVE_VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        for t in self.tensors.values() {
            for v in &t.data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let fmt = |m: &str| Error::Checkpoint(m.to_string());
        if bytes.len() < 16 {
            return Err(fmt("archive truncated in header"));
        }
        if &bytes[..4] != ARCHIVE_MAGIC {
            return Err(fmt("bad archive magic"));
        }
        let version = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
        if version != ARCHIVE_VERSION {
            return Err(Error::Checkpoint(format!("unsupported archive version {version}")));
        }
        let hlen = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
        let hend = 16usize.checked_add(hlen).filter(|&e| e <= bytes.len()).ok_or_else(|| fmt("archive header truncated"))?;
        let header: Header = serde_json::from_slice(&bytes[16..hend])
            .map_err(|e| Error::Checkpoint(format!("archive header: {e}")))?;
        let mut pos = hend;
        let mut tensors = BTreeMap::new();
        for entry in header.tensors {
            let n: usize = entry.shape.iter().product();
            let end = pos.checked_add(n * 4).filter(|&e| e <= bytes.len()).ok_or_else(|| fmt("archive payload truncated"))?;
            let data = bytes[pos..end]
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
                .collect();
            pos = end;
            tensors.insert(entry.name, TensorRecord { shape: entry.shape, data });
        }
        if pos != bytes.len() {
            return Err(fmt("trailing bytes after archive payload"));
        }
        Ok(Self { meta: header.meta, tensors })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))?;
        Self::from_bytes(&bytes)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::Linear;
    use rand::SeedableRng;

    #[test]
    fn module_roundtrip_and_canonical_bytes() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
        let lin = Linear::<f32>::new(3, 4, 1.0, &mut rng);
        let mut a = Archive::new(serde_json::json!({"kind": "test", "step": 3}));
        a.put_module("lin", &lin);
        let bytes = a.to_bytes().unwrap();
        let b = Archive::from_bytes(&bytes).unwrap();
        assert_eq!(a, b);
        assert_eq!(b.to_bytes().unwrap(), bytes);

        let mut other = Linear::<f32>::new(3, 4, 1.0, &mut rng);
        assert_ne!(other, lin);
        b.load_module("lin", &mut other).unwrap();
        assert_eq!(other.weight.value, lin.weight.value);
    }

    #[test]
    fn shape_mismatch_and_corruption_are_checkpoint_errors() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
        let lin = Linear::<f32>::new(3, 4, 1.0, &mut rng);
        let mut a = Archive::new(serde_json::Value::Null);
        a.put_module("lin", &lin);
        let mut wrong = Linear::<f32>::new(2, 4, 1.0, &mut rng);
        assert!(matches!(a.load_module("lin", &mut wrong), Err(Error::Checkpoint(_))));
        assert!(matches!(a.load_module("missing", &mut wrong), Err(Error::Checkpoint(_))));

        let bytes = a.to_bytes().unwrap();
        assert!(Archive::from_bytes(&bytes[..bytes.len() - 2]).is_err());
        let mut bad = bytes.clone();
        bad[0] = b'Z';
        assert!(Archive::from_bytes(&bad).is_err());
    }
}
