//! Binary feature store.
//!
//! Layout (little-endian): `b"LFTF"`, version `u32`, `d` as `u32`, `N` as
//! `u64`, then `N * d` `f32` values row-major. The manifest lives in a
//! sibling JSON-lines file (same path, extension `jsonl`) with one
//! `{"row", "source", "caption"}` object per row.

use crate::error::{Error, Result};
use crate::features::FeatureVector;
use serde::{Deserialize, Serialize};
use std::io::{BufRead, BufWriter, Write};
use std::path::{Path, PathBuf};

pub const STORE_MAGIC: &[u8; 4] = b"LFTF";
pub const STORE_VERSION: u32 = 1;
const HEADER_LEN: usize = 4 + 4 + 4 + 8;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestRow {
    pub row: usize,
    pub source: String,
    pub caption: Option<String>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct FeatureStore {
    d: usize,
    rows: Vec<f32>,
    manifest: Vec<ManifestRow>,
}

impl FeatureStore {
    pub fn new(d: usize) -> Self {
        Self { d, rows: Vec::new(), manifest: Vec::new() }
    }

    pub fn d(&self) -> usize {
        self.d
    }

    pub fn len(&self) -> usize {
        self.manifest.len()
    }

    pub fn is_empty(&self) -> bool {
        self.manifest.is_empty()
    }

    pub fn push(&mut self, values: &[f32], source: impl Into<String>, caption: Option<String>) -> Result<()> {
        if values.len() != self.d {
            return Err(Error::dim(self.d, values.len()));
        }
        let row = self.len();
        self.rows.extend_from_slice(values);
        self.manifest.push(ManifestRow { row, source: source.into(), caption });
        Ok(())
    }

    pub fn push_feature(&mut self, f: &FeatureVector, source: impl Into<String>, caption: Option<String>) -> Result<()> {
        let v: Vec<f32> = f.values.iter().map(|&x| x as f32).collect();
        self.push(&v, source, caption)
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.rows[i * self.d..(i + 1) * self.d]
    }

    pub fn feature(&self, i: usize) -> Result<FeatureVector> {
        FeatureVector::new(self.row(i).iter().map(|&v| v as f64).collect())
    }

    pub fn manifest(&self) -> &[ManifestRow] {
        &self.manifest
    }

    pub fn raw(&self) -> &[f32] {
        &self.rows
    }

    pub fn manifest_path(path: &Path) -> PathBuf {
        path.with_extension("jsonl")
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(HEADER_LEN + self.rows.len() * 4);
        out.extend_from_slice(STORE_MAGIC);
        out.extend_from_slice(&STORE_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.d as u32).to_le_bytes());
        out.extend_from_slice(&(self.len() as u64).to_le_bytes());
        for v in &self.rows {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    /// Parse the binary payload; the manifest is left empty-captioned with
    /// sources equal to the row index when `manifest` is `None`.
    pub fn from_bytes(bytes: &[u8], manifest: Option<Vec<ManifestRow>>) -> Result<Self> {
        if bytes.len() < HEADER_LEN {
            return Err(Error::Format("feature store truncated in header".into()));
        }
        if &bytes[0..4] != STORE_MAGIC {
            return Err(Error::Format("bad feature store magic".into()));
        }
        let version = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
        if version != STORE_VERSION {
            return Err(Error::Format(format!("unsupported feature store version {version}")));
        }
        let d = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes")) as usize;
        let n = u64::from_le_bytes(bytes[12..20].try_into().expect("8 bytes")) as usize;
        let want = n
            .checked_mul(d)
            .and_then(|x| x.checked_mul(4))
            .and_then(|x| x.checked_add(HEADER_LEN))
            .ok_or_else(|| Error::Format("feature store size overflows".into()))?;
        if bytes.len() != want {
            return Err(Error::Format(format!("feature store payload is {} bytes, expected {want}", bytes.len())));
        }
        let rows = bytes[HEADER_LEN..]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        let manifest = match manifest {
            Some(m) => m,
            None => (0..n).map(|row| ManifestRow { row, source: row.to_string(), caption: None }).collect(),
        };
        if manifest.len() != n {
            return Err(Error::Format(format!("manifest lists {} rows, store has {n}", manifest.len())));
        }
        if let Some(bad) = manifest.iter().enumerate().find(|(i, r)| r.row != *i) {
            return Err(Error::Format(format!("manifest row {} is out of order", bad.0)));
        }
        Ok(Self { d, rows, manifest })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes())?;
        let mut w = BufWriter::new(std::fs::File::create(Self::manifest_path(path))?);
        for r in &self.manifest {
            serde_json::to_writer(&mut w, r)?;
            w.write_all(b"\n")?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path)?;
        let mpath = Self::manifest_path(path);
        let file = std::fs::File::open(&mpath)
            .map_err(|e| Error::Format(format!("missing manifest {}: {e}", mpath.display())))?;
        let mut manifest = Vec::new();
        for line in std::io::BufReader::new(file).lines() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            manifest.push(serde_json::from_str(&line).map_err(|e| Error::Format(format!("manifest line: {e}")))?);
        }
        Self::from_bytes(&bytes, Some(manifest))
    }
}
