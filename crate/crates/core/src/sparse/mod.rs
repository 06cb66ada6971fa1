//! Inverted index and BM25 retrieval.
//!
//! Scoring follows the Lucene form of BM25:
//!
//! ```text
//! idf(t)     = ln(1 + (N - df + 0.5) / (df + 0.5))
//! score(t,d) = idf(t) * tf / (tf + k1 * (1 - b + b * |d| / avgdl))
//! ```
//!
//! with `k1 = 0.9`, `b = 0.4` by default. A [`WeightedQuery`] multiplies each
//! term's contribution by its weight; a plain text query weights each term by
//! its count in the analyzed query. Accumulation is term-at-a-time in
//! lexicographic term order, followed by an exact bounded-heap top-k.

mod persist;

use std::collections::{BTreeMap, HashMap};

use serde::{Deserialize, Serialize};

use crate::corpus::{Analyzer, AnalyzerConfig, Collection};
use crate::error::{Error, Result};
use crate::ranking::top_k;
pub use crate::ranking::{ScoredDoc, ScoredList};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Bm25Params {
    pub k1: f64,
    pub b: f64,
}

impl Default for Bm25Params {
    fn default() -> Self {
        Self { k1: 0.9, b: 0.4 }
    }
}

impl Bm25Params {
    pub fn idf(num_docs: usize, df: usize) -> f64 {
        let n = num_docs as f64;
        let df = df as f64;
        (1.0 + (n - df + 0.5) / (df + 0.5)).ln()
    }

    pub fn term_score(&self, idf: f64, tf: f64, doc_len: f64, avgdl: f64) -> f64 {
        idf * tf / (tf + self.k1 * (1.0 - self.b + self.b * doc_len / avgdl))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Posting {
    pub doc: u32,
    pub tf: u32,
}

#[derive(Debug, Clone)]
pub struct InvertedIndex {
    analyzer: Analyzer,
    params: Bm25Params,
    use_expansions: bool,
    doc_ids: Vec<String>,
    doc_lengths: Vec<u32>,
    total_length: u64,
    terms: Vec<String>,
    term_ids: HashMap<String, u32>,
    postings: Vec<Vec<Posting>>,
    // per document, (term id, tf) sorted by term id
    forward: Vec<Vec<(u32, u32)>>,
    doc_lookup: HashMap<String, u32>,
}

/// Term weights for a query, keyed by analyzed term.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeightedQuery {
    weights: BTreeMap<String, f64>,
}

impl WeightedQuery {
    /// Drops zero weights. Fails on negative or non-finite weights, or when
    /// no positive weight remains.
    pub fn new(weights: impl IntoIterator<Item = (String, f64)>) -> Result<Self> {
        let mut out = BTreeMap::new();
        for (term, w) in weights {
            if !w.is_finite() || w < 0.0 {
                return Err(Error::Invalid(format!("weight for `{term}` is {w}")));
            }
            if w > 0.0 {
                *out.entry(term).or_insert(0.0) += w;
            }
        }
        if out.is_empty() {
            return Err(Error::Invalid(
                "weighted query has no positive weight".into(),
            ));
        }
        Ok(Self { weights: out })
    }

    /// Term counts of `tokens`.
    pub fn from_tokens(tokens: &[String]) -> Option<Self> {
        let mut out = BTreeMap::new();
        for t in tokens {
            *out.entry(t.clone()).or_insert(0.0) += 1.0;
        }
        (!out.is_empty()).then_some(Self { weights: out })
    }

    pub fn weights(&self) -> &BTreeMap<String, f64> {
        &self.weights
    }

    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }

    pub fn scaled(&self, factor: f64) -> Result<Self> {
        Self::new(self.weights.iter().map(|(t, w)| (t.clone(), w * factor)))
    }
}

#[derive(Debug, Clone, Copy)]
pub enum Query<'a> {
    Text(&'a str),
    Weighted(&'a WeightedQuery),
}

impl<'a> From<&'a str> for Query<'a> {
    fn from(s: &'a str) -> Self {
        Query::Text(s)
    }
}

impl<'a> From<&'a WeightedQuery> for Query<'a> {
    fn from(q: &'a WeightedQuery) -> Self {
        Query::Weighted(q)
    }
}

pub fn build_index(
    collection: &Collection,
    config: &AnalyzerConfig,
    use_expansions: bool,
) -> Result<InvertedIndex> {
    InvertedIndex::build(collection, config, Bm25Params::default(), use_expansions)
}

impl InvertedIndex {
    pub fn build(
        collection: &Collection,
        config: &AnalyzerConfig,
        params: Bm25Params,
        use_expansions: bool,
    ) -> Result<Self> {
        if collection.is_empty() {
            return Err(Error::EmptyCollection);
        }
        let analyzer = Analyzer::new(config.clone());
        let mut doc_ids = Vec::with_capacity(collection.len());
        let mut doc_lengths = Vec::with_capacity(collection.len());
        let mut term_docs: BTreeMap<String, Vec<Posting>> = BTreeMap::new();
        for (doc, passage) in collection.iter().enumerate() {
            let text = if use_expansions {
                passage.indexed_text()
            } else {
                passage.text.clone()
            };
            let tokens = analyzer.analyze(&text);
            let mut counts: BTreeMap<&str, u32> = BTreeMap::new();
            for t in &tokens {
                *counts.entry(t.as_str()).or_insert(0) += 1;
            }
            for (term, tf) in counts {
                term_docs
                    .entry(term.to_string())
                    .or_default()
                    .push(Posting {
                        doc: doc as u32,
                        tf,
                    });
            }
            doc_ids.push(passage.id.clone());
            doc_lengths.push(tokens.len() as u32);
        }
        let (terms, postings): (Vec<String>, Vec<Vec<Posting>>) = term_docs.into_iter().unzip();
        Ok(Self::assemble(
            analyzer,
            params,
            use_expansions,
            doc_ids,
            doc_lengths,
            terms,
            postings,
        ))
    }

    fn assemble(
        analyzer: Analyzer,
        params: Bm25Params,
        use_expansions: bool,
        doc_ids: Vec<String>,
        doc_lengths: Vec<u32>,
        terms: Vec<String>,
        postings: Vec<Vec<Posting>>,
    ) -> Self {
        let term_ids = terms
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i as u32))
            .collect();
        let mut forward = vec![Vec::new(); doc_ids.len()];
        for (term, list) in postings.iter().enumerate() {
            for p in list {
                forward[p.doc as usize].push((term as u32, p.tf));
            }
        }
        let doc_lookup = doc_ids
            .iter()
            .enumerate()
            .map(|(i, id)| (id.clone(), i as u32))
            .collect();
        let total_length = doc_lengths.iter().map(|&l| u64::from(l)).sum();
        Self {
            analyzer,
            params,
            use_expansions,
            doc_ids,
            doc_lengths,
            total_length,
            terms,
            term_ids,
            postings,
            forward,
            doc_lookup,
        }
    }

    pub fn num_docs(&self) -> usize {
        self.doc_ids.len()
    }

    pub fn num_terms(&self) -> usize {
        self.terms.len()
    }

    pub fn avgdl(&self) -> f64 {
        self.total_length as f64 / self.num_docs() as f64
    }

    pub fn params(&self) -> Bm25Params {
        self.params
    }

    pub fn with_params(mut self, params: Bm25Params) -> Self {
        self.params = params;
        self
    }

    pub fn analyzer(&self) -> &Analyzer {
        &self.analyzer
    }

    pub fn uses_expansions(&self) -> bool {
        self.use_expansions
    }

    pub fn df(&self, term: &str) -> usize {
        self.postings(term).map_or(0, <[Posting]>::len)
    }

    pub fn postings(&self, term: &str) -> Option<&[Posting]> {
        self.term_ids
            .get(term)
            .map(|&t| self.postings[t as usize].as_slice())
    }

    pub fn doc_id(&self, doc: u32) -> &str {
        &self.doc_ids[doc as usize]
    }

    pub fn doc_ids(&self) -> &[String] {
        &self.doc_ids
    }

    pub fn doc_number(&self, id: &str) -> Option<u32> {
        self.doc_lookup.get(id).copied()
    }

    pub fn doc_length(&self, doc: u32) -> u32 {
        self.doc_lengths[doc as usize]
    }

    /// `(term, tf)` pairs of one document in term order.
    pub fn doc_terms(&self, doc: u32) -> impl Iterator<Item = (&str, u32)> {
        self.forward[doc as usize]
            .iter()
            .map(|&(t, tf)| (self.terms[t as usize].as_str(), tf))
    }

    pub fn terms(&self) -> &[String] {
        &self.terms
    }

    /// Analyzed term counts of `text`, or `None` when nothing survives analysis.
    pub fn text_query(&self, text: &str) -> Option<WeightedQuery> {
        WeightedQuery::from_tokens(&self.analyzer.analyze(text))
    }

    pub fn search<'q>(&self, query_id: &str, query: impl Into<Query<'q>>, k: usize) -> ScoredList {
        let weighted;
        let query = match query.into() {
            Query::Weighted(q) => q,
            Query::Text(text) => match self.text_query(text) {
                Some(q) => {
                    weighted = q;
                    &weighted
                }
                None => return ScoredList::empty(query_id, k),
            },
        };
        let scores = self.accumulate(query);
        let hits = top_k(
            scores
                .into_iter()
                .map(|(doc, s)| (s, self.doc_ids[doc as usize].as_str(), ())),
            k,
        );
        ScoredList {
            query_id: query_id.to_string(),
            entries: hits
                .into_iter()
                .map(|(score, id, ())| ScoredDoc {
                    id: id.to_string(),
                    score,
                })
                .collect(),
            k,
        }
    }

    /// Sparse `(doc, score)` accumulator for every document matching a query term.
    fn accumulate(&self, query: &WeightedQuery) -> Vec<(u32, f64)> {
        let n = self.num_docs();
        let avgdl = match self.avgdl() {
            a if a > 0.0 => a,
            _ => 1.0,
        };
        let mut acc = vec![0.0f64; n];
        let mut touched = vec![false; n];
        let mut docs = Vec::new();
        for (term, &weight) in query.weights() {
            let Some(list) = self.postings(term) else {
                continue;
            };
            let idf = Bm25Params::idf(n, list.len());
            for p in list {
                let d = p.doc as usize;
                let s = self.params.term_score(
                    idf,
                    f64::from(p.tf),
                    f64::from(self.doc_lengths[d]),
                    avgdl,
                );
                acc[d] += weight * s;
                if !touched[d] {
                    touched[d] = true;
                    docs.push(p.doc);
                }
            }
        }
        docs.into_iter().map(|d| (d, acc[d as usize])).collect()
    }
}

pub fn search<'q>(
    index: &InvertedIndex,
    query_id: &str,
    query: impl Into<Query<'q>>,
    k: usize,
) -> Result<ScoredList> {
    if k == 0 {
        return Err(Error::Invalid("k must be at least 1".into()));
    }
    Ok(index.search(query_id, query, k))
}
