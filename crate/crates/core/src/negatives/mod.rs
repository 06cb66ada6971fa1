//! Negative sampling over the entire collection.
//!
//! Samplers draw `m` negatives per training context: uniformly at random, or
//! from the top of a sparse or dense ranking after deleting the ground truth.
//! Modifiers select the bottom of a deeper list (denoising), query with the
//! last utterance only, or drop candidates that literally repeat part of the
//! context. Each context is sampled with its own seed so results do not
//! depend on iteration order.

mod annotation;
mod generated;

use std::collections::{BTreeMap, HashSet};
use std::path::{Path, PathBuf};

use rand::seq::index;
use serde::{Deserialize, Serialize};

pub use annotation::{
    export_annotation_sample, AnnotationSource, ANNOTATION_HEADER, DEFAULT_CONTEXTS_PER_DATASET,
    DEFAULT_NEGATIVES_PER_CONTEXT,
};
pub use generated::{ingest_generated, read_generated, GeneratedNegatives, GeneratedRecord};

use crate::corpus::{
    concat_context, Analyzer, Collection, DatasetSplit, DialogueExample, ResponsePassage,
};
use crate::dense::{dense_search, encode, Encoder, VectorStore};
use crate::error::{Error, Result};
use crate::ranking::ScoredList;
use crate::seeds::rng_for;
use crate::sparse::InvertedIndex;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum SamplerKind {
    Random,
    SparseTopk,
    DenseTopk,
    /// Generated responses read from a JSONL file of `{context_id, text}`.
    GeneratedFile {
        path: PathBuf,
    },
    /// Parts fill the list in order; later parts only add ids not yet taken.
    Composite {
        parts: Vec<SamplerSpec>,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Denoise {
    pub list_size: usize,
    pub keep: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QueryMode {
    #[default]
    FullContext,
    LastUtterance,
}

/// Which collection candidates come from. `Expanded` is recorded for
/// provenance; the caller passes the union collection and backends built on it.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CorpusChoice {
    #[default]
    Native,
    Expanded,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SamplerSpec {
    pub kind: SamplerKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub denoise: Option<Denoise>,
    #[serde(default)]
    pub query_mode: QueryMode,
    #[serde(default)]
    pub subset_filter: bool,
    #[serde(default)]
    pub corpus: CorpusChoice,
    #[serde(default)]
    pub seed: u64,
}

impl Default for SamplerSpec {
    fn default() -> Self {
        Self::new(SamplerKind::Random, 0)
    }
}

impl SamplerSpec {
    pub fn new(kind: SamplerKind, seed: u64) -> Self {
        Self {
            kind,
            denoise: None,
            query_mode: QueryMode::FullContext,
            subset_filter: false,
            corpus: CorpusChoice::Native,
            seed,
        }
    }

    pub fn with_denoise(mut self, list_size: usize, keep: usize) -> Self {
        self.denoise = Some(Denoise { list_size, keep });
        self
    }

    pub fn validate(&self) -> Result<()> {
        if let Some(d) = self.denoise {
            if !matches!(self.kind, SamplerKind::SparseTopk | SamplerKind::DenseTopk) {
                return Err(Error::Invalid("denoising needs a top-k sampler".into()));
            }
            if d.keep == 0 || d.list_size < d.keep {
                return Err(Error::Invalid(format!(
                    "denoise needs list_size >= keep >= 1, got {}/{}",
                    d.list_size, d.keep
                )));
            }
        }
        if let SamplerKind::Composite { parts } = &self.kind {
            if parts.is_empty() {
                return Err(Error::Invalid("composite sampler without parts".into()));
            }
            parts.iter().try_for_each(SamplerSpec::validate)?;
        }
        Ok(())
    }

    /// Short human-readable name, e.g. `dense_topk+denoise(100,10)`.
    pub fn label(&self) -> String {
        let mut s = match &self.kind {
            SamplerKind::Random => "random".to_string(),
            SamplerKind::SparseTopk => "sparse_topk".to_string(),
            SamplerKind::DenseTopk => "dense_topk".to_string(),
            SamplerKind::GeneratedFile { .. } => "generated".to_string(),
            SamplerKind::Composite { parts } => parts
                .iter()
                .map(SamplerSpec::label)
                .collect::<Vec<_>>()
                .join("|"),
        };
        if let Some(d) = self.denoise {
            s.push_str(&format!("+denoise({},{})", d.list_size, d.keep));
        }
        if self.query_mode == QueryMode::LastUtterance {
            s.push_str("+last_utterance");
        }
        if self.subset_filter {
            s.push_str("+subset_filter");
        }
        if self.corpus == CorpusChoice::Expanded {
            s.push_str("+expanded");
        }
        s
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Negative {
    pub id: String,
    /// 1-based rank in the retrieval list the negative was taken from.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rank: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub score: Option<f64>,
    /// Text of a passage that is not part of the collection (generated).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub text: Option<String>,
}

impl Negative {
    fn plain(id: impl Into<String>) -> Self {
        Self {
            id: id.into(),
            rank: None,
            score: None,
            text: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct SampleEntry {
    pub negatives: Vec<Negative>,
    /// Fewer than the requested number of eligible candidates existed.
    pub exhausted: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SampleSet {
    pub entries: BTreeMap<String, SampleEntry>,
    pub provenance: SamplerSpec,
    /// The denoising list size exceeded the collection and was clamped.
    pub clamped: bool,
}

impl SampleSet {
    pub fn negatives(&self, context_id: &str) -> Option<&[Negative]> {
        self.entries.get(context_id).map(|e| e.negatives.as_slice())
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn exhausted_contexts(&self) -> Vec<&str> {
        self.entries
            .iter()
            .filter(|(_, e)| e.exhausted)
            .map(|(id, _)| id.as_str())
            .collect()
    }

    /// Passages referenced by negatives that carry their own text.
    pub fn extra_passages(&self) -> Vec<ResponsePassage> {
        let mut seen = HashSet::new();
        self.entries
            .values()
            .flat_map(|e| &e.negatives)
            .filter_map(|n| {
                let text = n.text.as_ref()?;
                seen.insert(n.id.as_str())
                    .then(|| ResponsePassage::new(n.id.clone(), text.clone()))
            })
            .collect()
    }

    /// `collection` plus the generated passages this set refers to.
    pub fn augment(&self, collection: &Collection) -> Result<Collection> {
        let extra = self.extra_passages();
        if extra.is_empty() {
            return Ok(collection.clone());
        }
        let mut out = collection.clone();
        for p in extra {
            out.insert(p)?;
        }
        Ok(out)
    }

    /// Checks that no entry contains its context's ground-truth response.
    pub fn check_exclusion(&self, split: &DatasetSplit) -> Result<()> {
        let bad: Vec<String> = self
            .entries
            .iter()
            .filter(|(ctx, e)| {
                split
                    .get(ctx)
                    .is_some_and(|ex| e.negatives.iter().any(|n| n.id == ex.response_id))
            })
            .map(|(ctx, _)| ctx.clone())
            .collect();
        if bad.is_empty() {
            Ok(())
        } else {
            Err(Error::Invalid(format!(
                "ground truth sampled as negative for {bad:?}"
            )))
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct NegativesRecord {
    context_id: String,
    negatives: Vec<Negative>,
    sampler: SamplerSpec,
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    exhausted: bool,
}

/// One JSON line per context, in context-id order.
pub fn write_negatives(path: &Path, set: &SampleSet) -> Result<()> {
    crate::corpus::write_jsonl(
        path,
        set.entries.iter().map(|(ctx, e)| NegativesRecord {
            context_id: ctx.clone(),
            negatives: e.negatives.clone(),
            sampler: set.provenance.clone(),
            exhausted: e.exhausted,
        }),
    )
}

pub fn read_negatives(path: &Path) -> Result<SampleSet> {
    let mut entries = BTreeMap::new();
    let mut provenance: Option<SamplerSpec> = None;
    crate::corpus::for_each_line(path, |line_no, line| {
        let rec: NegativesRecord =
            serde_json::from_str(line).map_err(|e| Error::parse(path, line_no, e.to_string()))?;
        match &provenance {
            None => provenance = Some(rec.sampler.clone()),
            Some(p) if *p != rec.sampler => {
                return Err(Error::parse(
                    path,
                    line_no,
                    "sampler differs from earlier lines",
                ))
            }
            Some(_) => {}
        }
        if entries
            .insert(
                rec.context_id.clone(),
                SampleEntry {
                    negatives: rec.negatives,
                    exhausted: rec.exhausted,
                },
            )
            .is_some()
        {
            return Err(Error::parse(
                path,
                line_no,
                format!("duplicate context `{}`", rec.context_id),
            ));
        }
        Ok(())
    })?;
    let provenance =
        provenance.ok_or_else(|| Error::Invalid(format!("{} holds no entries", path.display())))?;
    Ok(SampleSet {
        entries,
        provenance,
        clamped: false,
    })
}

/// Dense retrieval backend: stored response vectors plus the query encoder.
#[derive(Clone, Copy)]
pub struct DenseBackend<'a> {
    pub store: &'a VectorStore,
    pub encoder: &'a dyn Encoder,
    pub analyzer: &'a Analyzer,
}

#[derive(Clone, Copy, Default)]
pub struct Backends<'a> {
    pub index: Option<&'a InvertedIndex>,
    pub dense: Option<DenseBackend<'a>>,
}

/// Lowercases and collapses whitespace runs to one space.
pub fn normalize_text(text: &str) -> String {
    text.split_whitespace()
        .map(str::to_lowercase)
        .collect::<Vec<_>>()
        .join(" ")
}

/// Whether `candidate` appears verbatim (after normalization) in `context`.
pub fn is_context_subset(candidate: &str, normalized_context: &str) -> bool {
    let c = normalize_text(candidate);
    normalized_context.contains(&c)
}

/// Samples `m` negatives for every context of `split`.
pub fn sample(
    spec: &SamplerSpec,
    split: &DatasetSplit,
    collection: &Collection,
    backends: Backends<'_>,
    m: usize,
) -> Result<SampleSet> {
    spec.validate()?;
    if m == 0 {
        return Err(Error::Invalid(
            "number of negatives must be at least 1".into(),
        ));
    }
    if collection.is_empty() {
        return Err(Error::EmptyCollection);
    }
    let mut sampler = Sampler::new(spec, split, collection, backends)?;
    let mut entries = BTreeMap::new();
    for ex in split.iter() {
        entries.insert(ex.context.id.clone(), sampler.sample_one(ex, m)?);
    }
    let set = SampleSet {
        entries,
        provenance: spec.clone(),
        clamped: sampler.clamped,
    };
    let exhausted = set.exhausted_contexts().len();
    if exhausted > 0 {
        log::warn!("{exhausted} contexts received fewer than {m} negatives");
    }
    Ok(set)
}

struct Sampler<'a> {
    spec: &'a SamplerSpec,
    collection: &'a Collection,
    backends: Backends<'a>,
    generated: Option<GeneratedNegatives>,
    parts: Vec<Sampler<'a>>,
    clamped: bool,
}

impl<'a> Sampler<'a> {
    fn new(
        spec: &'a SamplerSpec,
        split: &DatasetSplit,
        collection: &'a Collection,
        backends: Backends<'a>,
    ) -> Result<Self> {
        let mut generated = None;
        let mut parts = Vec::new();
        match &spec.kind {
            SamplerKind::SparseTopk if backends.index.is_none() => {
                return Err(Error::MissingBackend("sparse index"))
            }
            SamplerKind::DenseTopk if backends.dense.is_none() => {
                return Err(Error::MissingBackend("vector store and encoder"))
            }
            SamplerKind::GeneratedFile { path } => {
                generated = Some(ingest_generated(path, split, collection)?);
            }
            SamplerKind::Composite { parts: specs } => {
                for p in specs {
                    parts.push(Sampler::new(p, split, collection, backends)?);
                }
            }
            _ => {}
        }
        Ok(Self {
            spec,
            collection,
            backends,
            generated,
            parts,
            clamped: false,
        })
    }

    fn sample_one(&mut self, ex: &DialogueExample, m: usize) -> Result<SampleEntry> {
        let ctx = &ex.context;
        match &self.spec.kind {
            SamplerKind::Random => Ok(self.random(ex, m)),
            SamplerKind::GeneratedFile { .. } => {
                let gen = self.generated.as_ref().expect("loaded in new");
                let negatives: Vec<Negative> = gen
                    .for_context(&ctx.id)
                    .iter()
                    .take(m)
                    .map(|p| Negative {
                        text: Some(p.text.clone()),
                        ..Negative::plain(p.id.clone())
                    })
                    .collect();
                Ok(SampleEntry {
                    exhausted: negatives.len() < m,
                    negatives,
                })
            }
            SamplerKind::Composite { .. } => {
                let mut out: Vec<Negative> = Vec::with_capacity(m);
                let mut taken: HashSet<String> = HashSet::new();
                for part in &mut self.parts {
                    if out.len() == m {
                        break;
                    }
                    // Ask for enough to cover overlaps with earlier parts.
                    let entry = part.sample_one(ex, m + out.len())?;
                    for n in entry.negatives {
                        if out.len() == m {
                            break;
                        }
                        if taken.insert(n.id.clone()) {
                            out.push(n);
                        }
                    }
                    self.clamped |= part.clamped;
                }
                Ok(SampleEntry {
                    exhausted: out.len() < m,
                    negatives: out,
                })
            }
            SamplerKind::SparseTopk | SamplerKind::DenseTopk => self.top_k(ex, m),
        }
    }

    fn eligible(
        &self,
        ex: &DialogueExample,
        normalized_context: Option<&str>,
        id: &str,
    ) -> bool {
        if id == ex.response_id {
            return false;
        }
        match normalized_context {
            Some(ctx) => {
                let text = self.collection.get(id).map_or("", |p| p.text.as_str());
                !is_context_subset(text, ctx)
            }
            None => true,
        }
    }

    fn random(&self, ex: &DialogueExample, m: usize) -> SampleEntry {
        let n = self.collection.len();
        let mut rng = rng_for(self.spec.seed, &ex.context.id);
        let normalized = self
            .spec
            .subset_filter
            .then(|| normalize_text(&ex.context.joined_text()));
        // Without filtering, m + 1 draws always cover the deleted ground truth.
        let amount = if normalized.is_some() {
            n
        } else {
            (m + 1).min(n)
        };
        let negatives: Vec<Negative> = index::sample(&mut rng, n, amount)
            .into_iter()
            .map(|i| self.collection.passages()[i].id.as_str())
            .filter(|id| self.eligible(ex, normalized.as_deref(), id))
            .take(m)
            .map(Negative::plain)
            .collect();
        SampleEntry {
            exhausted: negatives.len() < m,
            negatives,
        }
    }

    fn query_text(&self, ex: &DialogueExample, dense: bool) -> String {
        match self.spec.query_mode {
            QueryMode::LastUtterance => ex.context.last_utterance().text.clone(),
            QueryMode::FullContext if dense => concat_context(&ex.context),
            QueryMode::FullContext => ex.context.joined_text(),
        }
    }

    fn retrieve(&self, ex: &DialogueExample, depth: usize) -> Result<ScoredList> {
        let id = &ex.context.id;
        match self.spec.kind {
            SamplerKind::SparseTopk => {
                let index = self.backends.index.expect("checked in new");
                Ok(index.search(id, self.query_text(ex, false).as_str(), depth))
            }
            _ => {
                let dense = self.backends.dense.expect("checked in new");
                let q = encode(dense.encoder, &self.query_text(ex, true), dense.analyzer);
                dense_search(dense.store, id, q.vector.as_slice(), depth)
            }
        }
    }

    fn backend_size(&self) -> usize {
        match self.spec.kind {
            SamplerKind::SparseTopk => self.backends.index.map_or(0, |i| i.num_docs()),
            _ => self.backends.dense.map_or(0, |d| d.store.len()),
        }
    }

    /// Retrieves progressively deeper until `enough` says the list suffices
    /// or the ranking is exhausted.
    fn deepen(
        &self,
        ex: &DialogueExample,
        start: usize,
        mut enough: impl FnMut(&ScoredList) -> bool,
    ) -> Result<ScoredList> {
        let n = self.backend_size();
        let mut depth = start.clamp(1, n.max(1));
        loop {
            let list = self.retrieve(ex, depth)?;
            if enough(&list) || list.len() < depth || depth >= n {
                return Ok(list);
            }
            depth = (depth * 2).min(n);
        }
    }

    fn top_k(&mut self, ex: &DialogueExample, m: usize) -> Result<SampleEntry> {
        let normalized = self
            .spec
            .subset_filter
            .then(|| normalize_text(&ex.context.joined_text()));
        let eligible = |s: &Self, id: &str| s.eligible(ex, normalized.as_deref(), id);
        let to_negative = |rank: usize, list: &ScoredList| Negative {
            id: list.entries[rank - 1].id.clone(),
            rank: Some(rank),
            score: Some(list.entries[rank - 1].score),
            text: None,
        };

        let Some(d) = self.spec.denoise else {
            let list = self.deepen(ex, m + 1, |l| {
                l.ids().filter(|id| eligible(self, id)).count() >= m
            })?;
            let negatives: Vec<Negative> = (1..=list.len())
                .filter(|&r| eligible(self, &list.entries[r - 1].id))
                .take(m)
                .map(|r| to_negative(r, &list))
                .collect();
            return Ok(SampleEntry {
                exhausted: negatives.len() < m,
                negatives,
            });
        };

        let n = self.backend_size();
        let mut k = d.list_size;
        if k > n {
            if !self.clamped {
                log::warn!("denoise list size {k} exceeds collection size {n}; clamped");
            }
            self.clamped = true;
            k = n;
        }
        let keep = d.keep.min(k).min(m);
        // Window ranks k-keep+1..=k, refilled downward from k+1, then upward.
        let window_start = k + 1 - keep;
        let list = self.deepen(ex, k + keep, |l| {
            let inside = (window_start..=k.min(l.len()))
                .filter(|&r| eligible(self, &l.entries[r - 1].id))
                .count();
            let below = (k + 1..=l.len())
                .filter(|&r| eligible(self, &l.entries[r - 1].id))
                .count();
            inside + below >= keep
        })?;
        let mut ranks: Vec<usize> = (window_start..=k.min(list.len()))
            .filter(|&r| eligible(self, &list.entries[r - 1].id))
            .collect();
        let mut next = k + 1;
        while ranks.len() < keep && next <= list.len() {
            if eligible(self, &list.entries[next - 1].id) {
                ranks.push(next);
            }
            next += 1;
        }
        let mut prev = window_start.min(list.len() + 1);
        while ranks.len() < keep && prev > 1 {
            prev -= 1;
            if eligible(self, &list.entries[prev - 1].id) {
                ranks.push(prev);
            }
        }
        ranks.sort_unstable();
        Ok(SampleEntry {
            exhausted: ranks.len() < keep,
            negatives: ranks.into_iter().map(|r| to_negative(r, &list)).collect(),
        })
    }
}
