//! Flat parameter storage shared by the neural fields, the light table,
//! and (optionally) trainable roughness, plus checkpoint serialization.

use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};
use std::fs;
use std::io::{Read, Write};
use std::path::Path;
use std::sync::Arc;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ParamEntry {
    pub name: String,
    pub offset: usize,
    pub shape: Vec<usize>,
}

impl ParamEntry {
    pub fn len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// All trainable scalars of a model in one flat vector, addressed by
/// named contiguous segments.
#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    entries: Vec<ParamEntry>,
    values: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct CheckpointHeader {
    arrays: Vec<ParamEntry>,
    total: usize,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Appends a named array initialized by `init`; returns its offset.
    pub fn register(
        &mut self,
        name: &str,
        shape: &[usize],
        mut init: impl FnMut() -> f64,
    ) -> usize {
        let offset = self.values.len();
        let n: usize = shape.iter().product();
        self.values.extend(std::iter::repeat_with(&mut init).take(n));
        self.entries.push(ParamEntry {
            name: name.to_string(),
            offset,
            shape: shape.to_vec(),
        });
        offset
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    /// Immutable copy of the current values for concurrent tape evaluation.
    pub fn snapshot(&self) -> Arc<Vec<f64>> {
        Arc::new(self.values.clone())
    }

    pub fn entries(&self) -> &[ParamEntry] {
        &self.entries
    }

    pub fn entry(&self, name: &str) -> Option<&ParamEntry> {
        self.entries.iter().find(|e| e.name == name)
    }

    pub fn segment(&self, name: &str) -> Option<&[f64]> {
        self.entry(name)
            .map(|e| &self.values[e.offset..e.offset + e.len()])
    }

    /// Binary container: u64 little-endian header length, JSON index
    /// header (name, offset, shape per array), then all values as
    /// little-endian f64.
    pub fn save(&self, path: &Path) -> Result<()> {
        let header = serde_json::to_vec(&CheckpointHeader {
            arrays: self.entries.clone(),
            total: self.values.len(),
        })
        .expect("header serialization cannot fail");
        let mut f = fs::File::create(path)?;
        f.write_all(&(header.len() as u64).to_le_bytes())?;
        f.write_all(&header)?;
        let mut buf = Vec::with_capacity(self.values.len() * 8);
        for v in &self.values {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        f.write_all(&buf)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bad = |reason: &str| Error::FileFormat {
            path: path.display().to_string(),
            reason: reason.to_string(),
        };
        let mut f = fs::File::open(path).map_err(|_| Error::MissingFile(path.display().to_string()))?;
        let mut len_bytes = [0u8; 8];
        f.read_exact(&mut len_bytes).map_err(|_| bad("truncated header length"))?;
        let header_len = u64::from_le_bytes(len_bytes) as usize;
        let mut header_bytes = vec![0u8; header_len];
        f.read_exact(&mut header_bytes).map_err(|_| bad("truncated header"))?;
        let header: CheckpointHeader =
            serde_json::from_slice(&header_bytes).map_err(|_| bad("malformed JSON header"))?;
        let mut payload = Vec::new();
        f.read_to_end(&mut payload)?;
        if payload.len() != header.total * 8 {
            return Err(bad("payload size does not match header"));
        }
        let values: Vec<f64> = payload
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        for e in &header.arrays {
            if e.offset + e.len() > values.len() {
                return Err(bad("array extends past payload"));
            }
        }
        Ok(ParamStore {
            entries: header.arrays,
            values,
        })
    }
}
