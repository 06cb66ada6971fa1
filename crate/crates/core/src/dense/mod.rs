//! Dense representations and exact inner-product retrieval.
//!
//! A text is scored against a context as `dot(η(concat(U)), η(r))`, where
//! `η` mean-pools per-token vectors produced by an [`Encoder`].

mod store;

use std::collections::HashMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use store::{dense_search, import_store, VectorStore, DTYPE_F32, DVEC_MAGIC, DVEC_VERSION};

use crate::corpus::{Analyzer, Collection};
use crate::error::{Error, Result};

/// A fixed-dimension vector of finite values.
#[derive(Debug, Clone, PartialEq)]
pub struct Vector(Vec<f32>);

impl Vector {
    pub fn new(values: Vec<f32>) -> Result<Self> {
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::Invalid(format!("non-finite vector entry at {i}")));
        }
        Ok(Self(values))
    }

    pub fn zeros(dim: usize) -> Self {
        Self(vec![0.0; dim])
    }

    pub fn from_f64(values: &[f64]) -> Result<Self> {
        Self::new(values.iter().map(|&v| v as f32).collect())
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn as_slice(&self) -> &[f32] {
        &self.0
    }

    pub fn into_inner(self) -> Vec<f32> {
        self.0
    }

    pub fn scaled(&self, c: f32) -> Self {
        Self(self.0.iter().map(|v| v * c).collect())
    }
}

/// Maps token lists to per-token vectors; representations are their mean.
pub trait Encoder {
    fn dim(&self) -> usize;

    fn token_vector(&self, token: &str) -> Vec<f64>;

    /// Mean of the per-token vectors; the zero vector for no tokens.
    fn encode_tokens(&self, tokens: &[String]) -> Vec<f64> {
        let mut out = vec![0.0; self.dim()];
        if tokens.is_empty() {
            return out;
        }
        for t in tokens {
            for (o, v) in out.iter_mut().zip(self.token_vector(t)) {
                *o += v;
            }
        }
        let n = tokens.len() as f64;
        out.iter_mut().for_each(|o| *o /= n);
        out
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Encoded {
    pub vector: Vector,
    /// The text analyzed to no tokens and `vector` is zero.
    pub empty: bool,
}

pub fn encode<E: Encoder + ?Sized>(encoder: &E, text: &str, analyzer: &Analyzer) -> Encoded {
    let tokens = analyzer.analyze(text);
    let empty = tokens.is_empty();
    if empty {
        log::debug!("encoding empty text as the zero vector");
    }
    let values = encoder.encode_tokens(&tokens);
    Encoded {
        vector: Vector::from_f64(&values).unwrap_or_else(|_| Vector::zeros(encoder.dim())),
        empty,
    }
}

/// One row per response, in collection order.
pub fn build_store<E: Encoder + ?Sized>(
    encoder: &E,
    collection: &Collection,
    analyzer: &Analyzer,
) -> Result<VectorStore> {
    if collection.is_empty() {
        return Err(Error::EmptyCollection);
    }
    let mut store = VectorStore::new(encoder.dim());
    let mut empty = 0usize;
    for p in collection.iter() {
        let enc = encode(encoder, &p.text, analyzer);
        empty += usize::from(enc.empty);
        store.push(&p.id, enc.vector.as_slice())?;
    }
    if empty > 0 {
        log::warn!("{empty} responses encoded as zero vectors (no tokens)");
    }
    Ok(store)
}

/// 64-bit FNV-1a.
pub fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HashedEncoderConfig {
    pub buckets: usize,
    pub dim: usize,
    /// Table entries start uniform in `[-init_scale, init_scale]`.
    pub init_scale: f64,
}

impl Default for HashedEncoderConfig {
    fn default() -> Self {
        Self {
            buckets: 1 << 18,
            dim: 64,
            init_scale: 0.1,
        }
    }
}

/// Reference encoder: each token's vector is the table row at
/// `fnv1a64(token) mod buckets`. The table is the trainable parameter set.
#[derive(Debug, Clone, PartialEq)]
pub struct HashedEncoder {
    buckets: usize,
    dim: usize,
    table: Vec<f64>,
}

impl HashedEncoder {
    pub fn zeros(buckets: usize, dim: usize) -> Self {
        assert!(buckets > 0 && dim > 0, "buckets and dim must be positive");
        Self {
            buckets,
            dim,
            table: vec![0.0; buckets * dim],
        }
    }

    pub fn random(cfg: &HashedEncoderConfig, seed: u64) -> Self {
        let mut enc = Self::zeros(cfg.buckets, cfg.dim);
        if cfg.init_scale > 0.0 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            for v in &mut enc.table {
                *v = rng.gen_range(-cfg.init_scale..=cfg.init_scale);
            }
        }
        enc
    }

    pub fn from_table(buckets: usize, dim: usize, table: Vec<f64>) -> Result<Self> {
        if buckets == 0 || dim == 0 {
            return Err(Error::Invalid("buckets and dim must be positive".into()));
        }
        if table.len() != buckets * dim {
            return Err(Error::DimensionMismatch {
                expected: buckets * dim,
                actual: table.len(),
            });
        }
        Ok(Self {
            buckets,
            dim,
            table,
        })
    }

    pub fn buckets(&self) -> usize {
        self.buckets
    }

    pub fn bucket(&self, token: &str) -> usize {
        (fnv1a64(token.as_bytes()) % self.buckets as u64) as usize
    }

    pub fn row(&self, bucket: usize) -> &[f64] {
        &self.table[bucket * self.dim..(bucket + 1) * self.dim]
    }

    pub fn row_mut(&mut self, bucket: usize) -> &mut [f64] {
        &mut self.table[bucket * self.dim..(bucket + 1) * self.dim]
    }

    pub fn table(&self) -> &[f64] {
        &self.table
    }

    pub fn param(&self, bucket: usize, j: usize) -> f64 {
        self.table[bucket * self.dim + j]
    }

    pub fn set_param(&mut self, bucket: usize, j: usize, value: f64) {
        self.table[bucket * self.dim + j] = value;
    }

    pub fn token_buckets(&self, tokens: &[String]) -> Vec<usize> {
        tokens.iter().map(|t| self.bucket(t)).collect()
    }

    /// Mean of the rows at `buckets`.
    pub fn encode_buckets(&self, buckets: &[usize]) -> Vec<f64> {
        let mut out = vec![0.0; self.dim];
        if buckets.is_empty() {
            return out;
        }
        for &b in buckets {
            for (o, v) in out.iter_mut().zip(self.row(b)) {
                *o += v;
            }
        }
        let n = buckets.len() as f64;
        out.iter_mut().for_each(|o| *o /= n);
        out
    }

    /// Table as a vector store with one row per bucket (ids are bucket numbers).
    pub fn to_store(&self) -> Result<VectorStore> {
        let mut store = VectorStore::new(self.dim);
        for b in 0..self.buckets {
            let row: Vec<f32> = self.row(b).iter().map(|&v| v as f32).collect();
            store.push(&b.to_string(), &row)?;
        }
        Ok(store)
    }

    pub fn from_store(store: &VectorStore) -> Result<Self> {
        let mut enc = Self::zeros(store.len().max(1), store.dim().max(1));
        if store.is_empty() {
            return Err(Error::EmptyCollection);
        }
        for (i, id) in store.ids().iter().enumerate() {
            let b: usize = id
                .parse()
                .ok()
                .filter(|&b| b < store.len())
                .ok_or_else(|| Error::Format(format!("bad bucket id `{id}`")))?;
            for (dst, &src) in enc.row_mut(b).iter_mut().zip(store.row(i)) {
                *dst = f64::from(src);
            }
        }
        Ok(enc)
    }
}

impl Encoder for HashedEncoder {
    fn dim(&self) -> usize {
        self.dim
    }

    fn token_vector(&self, token: &str) -> Vec<f64> {
        self.row(self.bucket(token)).to_vec()
    }

    fn encode_tokens(&self, tokens: &[String]) -> Vec<f64> {
        self.encode_buckets(&self.token_buckets(tokens))
    }
}

/// Fixed per-token vectors looked up by analyzed token; unknown tokens map to
/// the zero vector. Loaded from a vector store whose ids are tokens.
#[derive(Debug, Clone, PartialEq)]
pub struct LexiconEncoder {
    dim: usize,
    vectors: HashMap<String, Vec<f64>>,
}

impl LexiconEncoder {
    pub fn new(dim: usize) -> Self {
        Self {
            dim,
            vectors: HashMap::new(),
        }
    }

    pub fn insert(&mut self, token: impl Into<String>, vector: Vec<f64>) -> Result<()> {
        if vector.len() != self.dim {
            return Err(Error::DimensionMismatch {
                expected: self.dim,
                actual: vector.len(),
            });
        }
        self.vectors.insert(token.into(), vector);
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.vectors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vectors.is_empty()
    }

    pub fn from_store(store: &VectorStore) -> Self {
        let mut enc = Self::new(store.dim());
        for (i, id) in store.ids().iter().enumerate() {
            let row = store.row(i).iter().map(|&v| f64::from(v)).collect();
            enc.vectors.insert(id.clone(), row);
        }
        enc
    }

    /// Tokens in ascending order, one row each.
    pub fn to_store(&self) -> Result<VectorStore> {
        let mut tokens: Vec<&String> = self.vectors.keys().collect();
        tokens.sort();
        let mut store = VectorStore::new(self.dim);
        for t in tokens {
            let row: Vec<f32> = self.vectors[t].iter().map(|&v| v as f32).collect();
            store.push(t, &row)?;
        }
        Ok(store)
    }
}

impl Encoder for LexiconEncoder {
    fn dim(&self) -> usize {
        self.dim
    }

    fn token_vector(&self, token: &str) -> Vec<f64> {
        self.vectors
            .get(token)
            .cloned()
            .unwrap_or_else(|| vec![0.0; self.dim])
    }
}
