//! Dialogue-context expansion with RM3 and response expansion files.
//!
//! RM3 runs a first BM25 pass with the analyzed context, treats the top
//! `fb_docs` responses as relevant and builds a feedback distribution
//!
//! ```text
//! fb(t) ∝ Σ_d  tf(t, d) / |d| · w(d)
//! ```
//!
//! where `w(d)` are the first-pass scores shifted by their minimum and divided
//! by their sum (uniform when all scores are equal). The `fb_terms` heaviest
//! terms are kept and renormalized, then interpolated with the original query
//! term distribution: `orig_weight · p_orig + (1 − orig_weight) · p_fb`.

use std::collections::{BTreeMap, HashSet};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::corpus::{for_each_line, write_jsonl, Collection, DatasetSplit};
use crate::error::{Error, Result};
use crate::sparse::{InvertedIndex, WeightedQuery};

/// Largest number of predictions accepted per response.
pub const MAX_PREDICTIONS: usize = 5;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Rm3Config {
    pub fb_terms: usize,
    pub fb_docs: usize,
    pub orig_weight: f64,
}

impl Default for Rm3Config {
    fn default() -> Self {
        Self {
            fb_terms: 10,
            fb_docs: 10,
            orig_weight: 0.5,
        }
    }
}

impl Rm3Config {
    pub fn new(fb_terms: usize, fb_docs: usize, orig_weight: f64) -> Result<Self> {
        let cfg = Self {
            fb_terms,
            fb_docs,
            orig_weight,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.fb_terms == 0 || self.fb_docs == 0 {
            return Err(Error::Invalid(
                "fb_terms and fb_docs must be positive".into(),
            ));
        }
        if !(0.0..=1.0).contains(&self.orig_weight) {
            return Err(Error::Invalid(format!(
                "orig_weight {} outside [0, 1]",
                self.orig_weight
            )));
        }
        Ok(())
    }

    /// The 18-point hyperparameter grid: terms × docs × weight over
    /// {5, 10, 15} × {5, 10, 15} × {0.5, 0.7}, in that nesting order.
    pub fn grid() -> Vec<Rm3Config> {
        let mut out = Vec::with_capacity(18);
        for fb_terms in [5, 10, 15] {
            for fb_docs in [5, 10, 15] {
                for orig_weight in [0.5, 0.7] {
                    out.push(Rm3Config {
                        fb_terms,
                        fb_docs,
                        orig_weight,
                    });
                }
            }
        }
        out
    }

    /// `terms-docs-weight`, e.g. `10-15-0.5`.
    pub fn label(&self) -> String {
        format!("{}-{}-{}", self.fb_terms, self.fb_docs, self.orig_weight)
    }

    /// First-pass depth used when none is given.
    pub fn default_first_pass_k(&self) -> usize {
        self.fb_docs.max(100)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Rm3Expansion {
    pub query: WeightedQuery,
    /// The first pass returned nothing and `query` is the original query.
    pub fell_back: bool,
}

pub fn rm3_expand(
    index: &InvertedIndex,
    context_text: &str,
    cfg: &Rm3Config,
    first_pass_k: usize,
) -> Result<Rm3Expansion> {
    cfg.validate()?;
    if first_pass_k < cfg.fb_docs {
        return Err(Error::Invalid(format!(
            "first_pass_k {first_pass_k} is smaller than fb_docs {}",
            cfg.fb_docs
        )));
    }
    let original = index
        .text_query(context_text)
        .ok_or_else(|| Error::Invalid("context has no terms after analysis".into()))?;
    let first = index.search("rm3", &original, first_pass_k);
    if first.is_empty() {
        log::warn!("rm3: first pass retrieved nothing; keeping the original query");
        return Ok(Rm3Expansion {
            query: original,
            fell_back: true,
        });
    }
    let feedback: Vec<_> = first.entries.iter().take(cfg.fb_docs).collect();

    let min = feedback
        .iter()
        .map(|e| e.score)
        .fold(f64::INFINITY, f64::min);
    let shifted: Vec<f64> = feedback.iter().map(|e| e.score - min).collect();
    let total: f64 = shifted.iter().sum();
    let doc_weights: Vec<f64> = if total > 0.0 {
        shifted.iter().map(|s| s / total).collect()
    } else {
        vec![1.0 / feedback.len() as f64; feedback.len()]
    };

    let mut fb: BTreeMap<&str, f64> = BTreeMap::new();
    for (entry, &w) in feedback.iter().zip(&doc_weights) {
        let doc = index
            .doc_number(&entry.id)
            .expect("search returns indexed ids");
        let len = f64::from(index.doc_length(doc));
        for (term, tf) in index.doc_terms(doc) {
            *fb.entry(term).or_insert(0.0) += f64::from(tf) / len * w;
        }
    }
    let mut ranked: Vec<(&str, f64)> = fb.into_iter().collect();
    ranked.sort_by(|a, b| b.1.total_cmp(&a.1).then_with(|| a.0.cmp(b.0)));
    ranked.truncate(cfg.fb_terms);
    let fb_total: f64 = ranked.iter().map(|(_, w)| w).sum();

    let orig_total: f64 = original.weights().values().sum();
    let mut combined: BTreeMap<String, f64> = original
        .weights()
        .iter()
        .map(|(t, c)| (t.clone(), cfg.orig_weight * c / orig_total))
        .collect();
    if fb_total > 0.0 {
        for (term, w) in ranked {
            *combined.entry(term.to_string()).or_insert(0.0) +=
                (1.0 - cfg.orig_weight) * w / fb_total;
        }
    }
    Ok(Rm3Expansion {
        query: WeightedQuery::new(combined)?,
        fell_back: false,
    })
}

/// One line of an expansion file.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExpansionRecord {
    pub id: String,
    pub predictions: Vec<String>,
}

pub fn read_expansions(path: &Path) -> Result<Vec<ExpansionRecord>> {
    let mut out = Vec::new();
    for_each_line(path, |line_no, line| {
        let rec: ExpansionRecord =
            serde_json::from_str(line).map_err(|e| Error::parse(path, line_no, e.to_string()))?;
        if rec.predictions.len() > MAX_PREDICTIONS {
            return Err(Error::parse(
                path,
                line_no,
                format!(
                    "{} predictions for `{}` (at most {MAX_PREDICTIONS})",
                    rec.predictions.len(),
                    rec.id
                ),
            ));
        }
        out.push(rec);
        Ok(())
    })?;
    Ok(out)
}

pub fn write_expansions(path: &Path, records: &[ExpansionRecord]) -> Result<()> {
    write_jsonl(path, records)
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct AttachReport {
    pub matched: usize,
    /// Ids present in the expansion file but not in the collection.
    pub unmatched: Vec<String>,
}

/// Appends each response's predictions to its `expansions`. Refuses to touch
/// a collection that already carries expansions for any matched id.
pub fn attach_expansions(
    collection: &Collection,
    expansion_file: &Path,
) -> Result<(Collection, AttachReport)> {
    let records = read_expansions(expansion_file)?;
    attach_records(collection, &records)
}

pub fn attach_records(
    collection: &Collection,
    records: &[ExpansionRecord],
) -> Result<(Collection, AttachReport)> {
    let mut report = AttachReport::default();
    let present: Vec<String> = records
        .iter()
        .filter(|r| !r.predictions.is_empty())
        .filter(|r| {
            collection
                .get(&r.id)
                .is_some_and(|p| !p.expansions.is_empty())
        })
        .map(|r| r.id.clone())
        .collect();
    if !present.is_empty() {
        return Err(Error::ExpansionsPresent(present));
    }
    let mut out = collection.clone();
    let mut seen = HashSet::new();
    for rec in records {
        if !seen.insert(rec.id.as_str()) {
            return Err(Error::DuplicateId(rec.id.clone()));
        }
        match out.get_mut(&rec.id) {
            Some(p) => {
                p.expansions.extend(rec.predictions.iter().cloned());
                report.matched += 1;
            }
            None => report.unmatched.push(rec.id.clone()),
        }
    }
    if !report.unmatched.is_empty() {
        log::warn!(
            "{} expansion ids not in the collection",
            report.unmatched.len()
        );
    }
    Ok((out, report))
}

/// Whitespace-token statistics of a response expansion.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ExpansionStats {
    pub avg_context_len: f64,
    pub avg_response_len: f64,
    pub avg_expansion_len: f64,
    /// Fraction of expansion tokens absent from the response they expand.
    pub pct_new_words: f64,
}

pub fn expansion_stats(
    split: &DatasetSplit,
    before: &Collection,
    after: &Collection,
) -> Result<ExpansionStats> {
    if before.len() != after.len() || before.iter().any(|p| !after.contains(&p.id)) {
        return Err(Error::Invalid(
            "collections before and after expansion hold different ids".into(),
        ));
    }
    let tokens = |s: &str| {
        s.split_whitespace()
            .map(str::to_lowercase)
            .collect::<Vec<_>>()
    };
    let mean = |total: usize, n: usize| if n == 0 { 0.0 } else { total as f64 / n as f64 };

    let ctx_tokens: usize = split
        .iter()
        .map(|ex| tokens(&ex.context.joined_text()).len())
        .sum();
    let resp_tokens: usize = before.iter().map(|p| tokens(&p.text).len()).sum();

    let mut exp_tokens = 0usize;
    let mut new_tokens = 0usize;
    for orig in before.iter() {
        let expanded = after.get(&orig.id).expect("ids checked");
        let vocab: HashSet<String> = tokens(&orig.text).into_iter().collect();
        for e in expanded.expansions.iter().skip(orig.expansions.len()) {
            for t in tokens(e) {
                exp_tokens += 1;
                if !vocab.contains(&t) {
                    new_tokens += 1;
                }
            }
        }
    }
    Ok(ExpansionStats {
        avg_context_len: mean(ctx_tokens, split.len()),
        avg_response_len: mean(resp_tokens, before.len()),
        avg_expansion_len: mean(exp_tokens, before.len()),
        pct_new_words: mean(new_tokens, exp_tokens),
    })
}
