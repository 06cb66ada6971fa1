//! Vector storage, the DVEC embedding file, and exhaustive inner-product search.
//!
//! DVEC layout (little-endian):
//!
//! ```text
//! magic     4 bytes  "DVEC"
//! version   u32      1
//! dtype     u32      1 = f32
//! rows      u64
//! dim       u32
//! ids       rows × (u32 byte length, UTF-8 bytes)
//! matrix    rows × dim f32, row-major
//! ```

use std::collections::HashMap;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;

use crate::binio::{ByteReader, ByteWriter};
use crate::error::{Error, Result};
use crate::ranking::{top_k, ScoredDoc, ScoredList};

pub const DVEC_MAGIC: &[u8; 4] = b"DVEC";
pub const DVEC_VERSION: u32 = 1;
pub const DTYPE_F32: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct VectorStore {
    dim: usize,
    ids: Vec<String>,
    data: Vec<f32>,
    lookup: HashMap<String, usize>,
}

impl VectorStore {
    pub fn new(dim: usize) -> Self {
        Self {
            dim,
            ids: Vec::new(),
            data: Vec::new(),
            lookup: HashMap::new(),
        }
    }

    pub fn push(&mut self, id: &str, row: &[f32]) -> Result<()> {
        if row.len() != self.dim {
            return Err(Error::DimensionMismatch {
                expected: self.dim,
                actual: row.len(),
            });
        }
        if let Some(j) = row.iter().position(|v| !v.is_finite()) {
            return Err(Error::Invalid(format!(
                "non-finite value in row `{id}` at {j}"
            )));
        }
        if self.lookup.contains_key(id) {
            return Err(Error::DuplicateId(id.to_string()));
        }
        self.lookup.insert(id.to_string(), self.ids.len());
        self.ids.push(id.to_string());
        self.data.extend_from_slice(row);
        Ok(())
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub fn get(&self, id: &str) -> Option<&[f32]> {
        self.lookup.get(id).map(|&i| self.row(i))
    }

    pub fn export(&self, path: &Path) -> Result<()> {
        let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = ByteWriter::new(BufWriter::new(file));
        self.write_to(&mut w).map_err(|e| Error::io(path, e))?;
        w.into_inner().flush().map_err(|e| Error::io(path, e))
    }

    fn write_to<W: Write>(&self, w: &mut ByteWriter<W>) -> std::io::Result<()> {
        w.bytes(DVEC_MAGIC)?;
        w.u32(DVEC_VERSION)?;
        w.u32(DTYPE_F32)?;
        w.u64(self.ids.len() as u64)?;
        w.u32(self.dim as u32)?;
        for id in &self.ids {
            w.str(id)?;
        }
        for &v in &self.data {
            w.f32(v)?;
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = ByteWriter::new(Vec::new());
        self.write_to(&mut w).expect("writing to memory");
        w.into_inner()
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = ByteReader::new(bytes);
        if r.take(4)? != DVEC_MAGIC {
            return Err(Error::Format("not a DVEC file (bad magic)".into()));
        }
        let version = r.u32()?;
        if version != DVEC_VERSION {
            return Err(Error::Format(format!("unsupported DVEC version {version}")));
        }
        let dtype = r.u32()?;
        if dtype != DTYPE_F32 {
            return Err(Error::Format(format!("unsupported DVEC dtype {dtype}")));
        }
        let rows = r.u64()? as usize;
        let dim = r.u32()? as usize;
        if dim == 0 {
            return Err(Error::Format("DVEC dimension is zero".into()));
        }
        let mut ids = Vec::with_capacity(rows.min(r.remaining() / 4));
        for _ in 0..rows {
            ids.push(r.str()?);
        }
        let mut store = VectorStore::new(dim);
        store
            .data
            .reserve(rows.saturating_mul(dim).min(r.remaining() / 4));
        let mut row = vec![0f32; dim];
        for id in &ids {
            for v in row.iter_mut() {
                *v = r.f32()?;
            }
            store.push(id, &row)?;
        }
        if r.remaining() != 0 {
            return Err(Error::Format("trailing bytes after DVEC matrix".into()));
        }
        Ok(store)
    }
}

pub fn import_store(path: &Path) -> Result<VectorStore> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    VectorStore::from_bytes(&bytes)
}

#[inline]
pub(crate) fn dot(a: &[f32], b: &[f32]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(&x, &y)| f64::from(x) * f64::from(y))
        .sum()
}

/// Exact top-`k` rows by inner product with `query`; ties by ascending id.
pub fn dense_search(
    store: &VectorStore,
    query_id: &str,
    query: &[f32],
    k: usize,
) -> Result<ScoredList> {
    if query.len() != store.dim() {
        return Err(Error::DimensionMismatch {
            expected: store.dim(),
            actual: query.len(),
        });
    }
    if k == 0 {
        return Err(Error::Invalid("k must be at least 1".into()));
    }
    let hits = top_k(
        (0..store.len()).map(|i| (dot(store.row(i), query), store.ids[i].as_str(), ())),
        k,
    );
    Ok(ScoredList {
        query_id: query_id.to_string(),
        entries: hits
            .into_iter()
            .map(|(score, id, ())| ScoredDoc {
                id: id.to_string(),
                score,
            })
            .collect(),
        k,
    })
}
