//! Fine-tuning of the hashed reference encoder.
//!
//! Each batch of `B` examples yields a `B × C` score matrix whose columns are
//! the `B` positives followed by every example's hard negatives. Gradients of
//! the batch loss flow back through the dot products and the mean pooling
//! into the embedding rows of the tokens involved; parameters are updated
//! with plain SGD.

mod loss;

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

pub use loss::{contrastive_loss, mnrl_loss, ScoreMatrix};

use crate::corpus::{concat_context, Analyzer, Collection, DatasetSplit, DialogueContext};
use crate::dense::{Encoder, HashedEncoder, VectorStore};
use crate::error::{Error, Result};
use crate::eval::rerank_map;
use crate::negatives::SampleSet;
use crate::seeds::rng_for;

#[derive(Debug, Clone, PartialEq)]
pub struct TrainingExample {
    pub context: DialogueContext,
    pub positive_id: String,
    pub negative_ids: Vec<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub examples: Vec<TrainingExample>,
}

impl Batch {
    pub fn new(examples: Vec<TrainingExample>) -> Result<Self> {
        let mut seen = BTreeSet::new();
        for ex in &examples {
            if !seen.insert(ex.context.id.as_str()) {
                return Err(Error::Invalid(format!(
                    "context `{}` appears twice in a batch",
                    ex.context.id
                )));
            }
            if ex.negative_ids.contains(&ex.positive_id) {
                return Err(Error::Invalid(format!(
                    "positive `{}` listed as a negative",
                    ex.positive_id
                )));
            }
        }
        Ok(Self { examples })
    }

    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    #[default]
    Mnrl,
    Contrastive,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub loss: LossKind,
    /// Include the positive in the log-sum-exp denominator.
    pub inclusive_denominator: bool,
    pub margin: f64,
    pub steps: usize,
    pub validate_every: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    /// Decoupled decay applied to the rows updated in a step.
    pub weight_decay: f64,
    pub negatives_per_example: usize,
    /// Candidates per validation list (one positive, the rest random).
    pub validation_candidates: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            loss: LossKind::Mnrl,
            inclusive_denominator: false,
            margin: 0.5,
            steps: 10_000,
            validate_every: 100,
            batch_size: 5,
            learning_rate: 0.1,
            weight_decay: 0.0,
            negatives_per_example: 10,
            validation_candidates: 10,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.validate_every == 0 || self.steps < self.validate_every {
            return Err(Error::Invalid("need steps >= validate_every >= 1".into()));
        }
        if self.batch_size == 0 || self.validation_candidates < 2 {
            return Err(Error::Invalid(
                "batch_size and validation_candidates too small".into(),
            ));
        }
        if !(self.learning_rate > 0.0) || !(self.weight_decay >= 0.0) {
            return Err(Error::Invalid(
                "learning_rate must be positive, weight_decay non-negative".into(),
            ));
        }
        if self.loss == LossKind::Contrastive && !(self.margin > 0.0) {
            return Err(Error::Invalid("contrastive margin must be positive".into()));
        }
        Ok(())
    }
}

/// A batch resolved to token lists, with duplicate candidates collapsed.
#[derive(Debug, Clone)]
struct PreparedBatch {
    contexts: Vec<Vec<String>>,
    candidates: Vec<Vec<String>>,
    candidate_ids: Vec<String>,
    positive_cols: Vec<usize>,
    context_ids: Vec<String>,
}

fn prepare(batch: &Batch, collection: &Collection, analyzer: &Analyzer) -> Result<PreparedBatch> {
    let mut candidate_ids: Vec<String> = Vec::new();
    let mut column: HashMap<&str, usize> = HashMap::new();
    let mut collapsed = 0usize;
    let ids = batch.examples.iter().map(|e| e.positive_id.as_str()).chain(
        batch
            .examples
            .iter()
            .flat_map(|e| e.negative_ids.iter().map(String::as_str)),
    );
    for id in ids {
        if column.contains_key(id) {
            collapsed += 1;
            continue;
        }
        column.insert(id, candidate_ids.len());
        candidate_ids.push(id.to_string());
    }
    if collapsed > 0 {
        log::debug!("{collapsed} duplicate candidates collapsed in batch");
    }
    let missing: Vec<String> = candidate_ids
        .iter()
        .filter(|id| !collection.contains(id))
        .cloned()
        .collect();
    if !missing.is_empty() {
        return Err(Error::DanglingIds(missing));
    }
    let candidates = candidate_ids
        .iter()
        .map(|id| analyzer.analyze(&collection.get(id).expect("checked").text))
        .collect();
    Ok(PreparedBatch {
        contexts: batch
            .examples
            .iter()
            .map(|e| analyzer.analyze(&concat_context(&e.context)))
            .collect(),
        candidates,
        positive_cols: batch
            .examples
            .iter()
            .map(|e| column[e.positive_id.as_str()])
            .collect(),
        candidate_ids,
        context_ids: batch
            .examples
            .iter()
            .map(|e| e.context.id.clone())
            .collect(),
    })
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn scores_of(ctx: &[Vec<f64>], cand: &[Vec<f64>]) -> Vec<f64> {
    ctx.iter()
        .flat_map(|u| cand.iter().map(move |v| dot(u, v)))
        .collect()
}

/// Entry `(i, c)` is `dot(η(concat(U_i)), η(candidate_c))`; candidates are the
/// batch positives in order followed by all hard negatives, duplicates
/// collapsed to their first column.
pub fn score_matrix<E: Encoder + ?Sized>(
    encoder: &E,
    batch: &Batch,
    collection: &Collection,
    analyzer: &Analyzer,
) -> Result<ScoreMatrix> {
    let prepared = prepare(batch, collection, analyzer)?;
    let ctx: Vec<Vec<f64>> = prepared
        .contexts
        .iter()
        .map(|t| encoder.encode_tokens(t))
        .collect();
    let cand: Vec<Vec<f64>> = prepared
        .candidates
        .iter()
        .map(|t| encoder.encode_tokens(t))
        .collect();
    Ok(ScoreMatrix {
        rows: ctx.len(),
        cols: cand.len(),
        scores: scores_of(&ctx, &cand),
        positive_cols: prepared.positive_cols,
        candidate_ids: prepared.candidate_ids,
    })
}

/// Sparse gradient over encoder rows.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct RowGradient {
    rows: BTreeMap<usize, Vec<f64>>,
}

impl RowGradient {
    pub fn get(&self, bucket: usize, j: usize) -> f64 {
        self.rows.get(&bucket).map_or(0.0, |r| r[j])
    }

    pub fn buckets(&self) -> impl Iterator<Item = usize> + '_ {
        self.rows.keys().copied()
    }

    fn add_pooled(&mut self, buckets: &[usize], upstream: &[f64]) {
        if buckets.is_empty() {
            return;
        }
        let inv = 1.0 / buckets.len() as f64;
        for &b in buckets {
            let row = self
                .rows
                .entry(b)
                .or_insert_with(|| vec![0.0; upstream.len()]);
            for (r, g) in row.iter_mut().zip(upstream) {
                *r += g * inv;
            }
        }
    }
}

struct Forward {
    ctx_buckets: Vec<Vec<usize>>,
    cand_buckets: Vec<Vec<usize>>,
    ctx: Vec<Vec<f64>>,
    cand: Vec<Vec<f64>>,
}

fn forward(encoder: &HashedEncoder, p: &PreparedBatch) -> Forward {
    let ctx_buckets: Vec<Vec<usize>> = p
        .contexts
        .iter()
        .map(|t| encoder.token_buckets(t))
        .collect();
    let cand_buckets: Vec<Vec<usize>> = p
        .candidates
        .iter()
        .map(|t| encoder.token_buckets(t))
        .collect();
    let ctx = ctx_buckets
        .iter()
        .map(|b| encoder.encode_buckets(b))
        .collect();
    let cand = cand_buckets
        .iter()
        .map(|b| encoder.encode_buckets(b))
        .collect();
    Forward {
        ctx_buckets,
        cand_buckets,
        ctx,
        cand,
    }
}

/// Loss of a prepared batch and its gradient with respect to the table.
fn loss_and_grad(
    encoder: &HashedEncoder,
    p: &PreparedBatch,
    cfg: &TrainConfig,
) -> Result<(f64, RowGradient, ScoreMatrix)> {
    let f = forward(encoder, p);
    let dim = encoder.dim();
    let (b, c) = (f.ctx.len(), f.cand.len());
    let matrix = ScoreMatrix {
        rows: b,
        cols: c,
        scores: scores_of(&f.ctx, &f.cand),
        positive_cols: p.positive_cols.clone(),
        candidate_ids: p.candidate_ids.clone(),
    };
    let mut d_ctx = vec![vec![0.0; dim]; b];
    let mut d_cand = vec![vec![0.0; dim]; c];
    let loss = match cfg.loss {
        LossKind::Mnrl => {
            let (loss, g) = mnrl_loss(&matrix, cfg.inclusive_denominator)?;
            for i in 0..b {
                for k in 0..c {
                    let gik = g[i * c + k];
                    if gik == 0.0 {
                        continue;
                    }
                    for j in 0..dim {
                        d_ctx[i][j] += gik * f.cand[k][j];
                        d_cand[k][j] += gik * f.ctx[i][j];
                    }
                }
            }
            loss
        }
        LossKind::Contrastive => {
            let mut pairs = Vec::with_capacity(b * c);
            let mut diffs = Vec::with_capacity(b * c);
            for i in 0..b {
                for k in 0..c {
                    let diff: Vec<f64> = f.ctx[i]
                        .iter()
                        .zip(&f.cand[k])
                        .map(|(x, y)| x - y)
                        .collect();
                    let d = dot(&diff, &diff).sqrt();
                    pairs.push((d, k == p.positive_cols[i]));
                    diffs.push(diff);
                }
            }
            let (loss, g) = contrastive_loss(&pairs, cfg.margin)?;
            for i in 0..b {
                for k in 0..c {
                    let idx = i * c + k;
                    let d = pairs[idx].0;
                    if d == 0.0 || g[idx] == 0.0 {
                        continue;
                    }
                    let scale = g[idx] / d;
                    for j in 0..dim {
                        let v = scale * diffs[idx][j];
                        d_ctx[i][j] += v;
                        d_cand[k][j] -= v;
                    }
                }
            }
            loss
        }
    };
    let mut grad = RowGradient::default();
    for (buckets, g) in f.ctx_buckets.iter().zip(&d_ctx) {
        grad.add_pooled(buckets, g);
    }
    for (buckets, g) in f.cand_buckets.iter().zip(&d_cand) {
        grad.add_pooled(buckets, g);
    }
    Ok((loss, grad, matrix))
}

/// Batch loss and table gradient for `encoder`.
pub fn batch_gradient(
    encoder: &HashedEncoder,
    batch: &Batch,
    collection: &Collection,
    analyzer: &Analyzer,
    cfg: &TrainConfig,
) -> Result<(f64, RowGradient)> {
    let p = prepare(batch, collection, analyzer)?;
    loss_and_grad(encoder, &p, cfg).map(|(l, g, _)| (l, g))
}

fn sgd_step(encoder: &mut HashedEncoder, grad: &RowGradient, lr: f64, weight_decay: f64) {
    for (&b, g) in &grad.rows {
        for (w, gj) in encoder.row_mut(b).iter_mut().zip(g) {
            *w -= lr * (gj + weight_decay * *w);
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FiniteDiffReport {
    pub max_relative_error: f64,
    /// Coordinates of rows used by the batch that were compared.
    pub checked: usize,
    /// Coordinates of rows not used by the batch; both gradients must be 0.
    pub untouched_checked: usize,
    pub untouched_nonzero: usize,
}

/// Compares the analytic table gradient with central differences on up to
/// `coords` randomly chosen coordinates of rows touched by the batch, plus a
/// sample of untouched rows.
///
/// Relative error is `|a − n| / max(|a|, |n|)`, taken as 0 when both are 0.
pub fn finite_diff_check(
    encoder: &HashedEncoder,
    batch: &Batch,
    collection: &Collection,
    analyzer: &Analyzer,
    cfg: &TrainConfig,
    epsilon: f64,
    coords: usize,
    seed: u64,
) -> Result<FiniteDiffReport> {
    if !(1e-7..=1e-2).contains(&epsilon) {
        return Err(Error::Invalid(format!(
            "epsilon {epsilon} outside [1e-7, 1e-2]"
        )));
    }
    let p = prepare(batch, collection, analyzer)?;
    let (_, grad, _) = loss_and_grad(encoder, &p, cfg)?;
    let f = forward(encoder, &p);
    let touched: BTreeSet<usize> = f
        .ctx_buckets
        .iter()
        .chain(&f.cand_buckets)
        .flatten()
        .copied()
        .collect();
    let dim = encoder.dim();
    let mut rng = rng_for(seed, "finite-diff");
    let mut pool: Vec<(usize, usize)> = touched
        .iter()
        .flat_map(|&b| (0..dim).map(move |j| (b, j)))
        .collect();
    pool.shuffle(&mut rng);
    pool.truncate(coords);
    let untouched: Vec<usize> = (0..encoder.buckets())
        .filter(|b| !touched.contains(b))
        .collect();
    let untouched_sample: Vec<(usize, usize)> = untouched
        .choose_multiple(&mut rng, 8)
        .map(|&b| (b, rng.gen_range(0..dim)))
        .collect();

    let mut work = encoder.clone();
    let mut numeric = |b: usize, j: usize| -> Result<f64> {
        let orig = work.param(b, j);
        work.set_param(b, j, orig + epsilon);
        let plus = loss_and_grad(&work, &p, cfg)?.0;
        work.set_param(b, j, orig - epsilon);
        let minus = loss_and_grad(&work, &p, cfg)?.0;
        work.set_param(b, j, orig);
        Ok((plus - minus) / (2.0 * epsilon))
    };
    let mut max_rel: f64 = 0.0;
    for &(b, j) in &pool {
        let a = grad.get(b, j);
        let n = numeric(b, j)?;
        let denom = a.abs().max(n.abs());
        let rel = if denom == 0.0 {
            0.0
        } else {
            (a - n).abs() / denom
        };
        max_rel = max_rel.max(rel);
    }
    let mut nonzero = 0;
    for &(b, j) in &untouched_sample {
        if grad.get(b, j) != 0.0 || numeric(b, j)? != 0.0 {
            nonzero += 1;
        }
    }
    Ok(FiniteDiffReport {
        max_relative_error: max_rel,
        checked: pool.len(),
        untouched_checked: untouched_sample.len(),
        untouched_nonzero: nonzero,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ValidationPoint {
    pub step: usize,
    pub map: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogEntry {
    pub step: usize,
    pub loss: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub validation_map: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct TrainState {
    /// Parameters of the best validation step.
    pub encoder: HashedEncoder,
    pub step: usize,
    pub best_validation_map: f64,
    pub best_step: usize,
    /// Validation MAP of the untrained parameters; not part of `validations`.
    pub initial_validation_map: f64,
    pub validations: Vec<ValidationPoint>,
    pub log: Vec<LogEntry>,
    pub seed: u64,
}

/// Validation lists: each context's positive plus random negatives, shuffled
/// once, frozen for the whole run.
struct ValidationSet {
    contexts: Vec<Vec<String>>,
    candidates: Vec<Vec<(Vec<String>, bool)>>,
}

impl ValidationSet {
    fn build(
        split: &DatasetSplit,
        collection: &Collection,
        analyzer: &Analyzer,
        size: usize,
        seed: u64,
    ) -> Result<Self> {
        if collection.len() < size {
            return Err(Error::Invalid(format!(
                "validation lists need {size} responses, collection has {}",
                collection.len()
            )));
        }
        let mut rng = rng_for(seed, "validation");
        let mut contexts = Vec::with_capacity(split.len());
        let mut candidates = Vec::with_capacity(split.len());
        for ex in split.iter() {
            let mut picked: Vec<(&str, bool)> = vec![(ex.response_id.as_str(), true)];
            let mut chosen = BTreeSet::from([ex.response_id.as_str()]);
            while picked.len() < size {
                let p = &collection.passages()[rng.gen_range(0..collection.len())];
                if chosen.insert(p.id.as_str()) {
                    picked.push((p.id.as_str(), false));
                }
            }
            picked.shuffle(&mut rng);
            contexts.push(analyzer.analyze(&concat_context(&ex.context)));
            candidates.push(
                picked
                    .into_iter()
                    .map(|(id, rel)| {
                        (
                            analyzer.analyze(&collection.get(id).expect("sampled").text),
                            rel,
                        )
                    })
                    .collect(),
            );
        }
        Ok(Self {
            contexts,
            candidates,
        })
    }

    fn map(&self, encoder: &HashedEncoder) -> Result<f64> {
        let lists: Vec<Vec<bool>> = self
            .contexts
            .iter()
            .zip(&self.candidates)
            .map(|(ctx, cands)| {
                let u = encoder.encode_tokens(ctx);
                let mut scored: Vec<(f64, bool)> = cands
                    .iter()
                    .map(|(toks, rel)| (dot(&u, &encoder.encode_tokens(toks)), *rel))
                    .collect();
                scored.sort_by(|a, b| b.0.total_cmp(&a.0));
                scored.into_iter().map(|(_, r)| r).collect()
            })
            .collect();
        rerank_map(&lists)
    }
}

/// Trains `encoder` with SGD, validating every `cfg.validate_every` steps
/// and keeping the parameters of the best validation MAP.
pub fn train(
    train_split: &DatasetSplit,
    validation: &DatasetSplit,
    collection: &Collection,
    analyzer: &Analyzer,
    encoder: HashedEncoder,
    negatives: &SampleSet,
    cfg: &TrainConfig,
) -> Result<TrainState> {
    cfg.validate()?;
    if train_split.is_empty() || validation.is_empty() {
        return Err(Error::Invalid(
            "training and validation splits must be non-empty".into(),
        ));
    }
    let m = cfg.negatives_per_example;
    let short: Vec<String> = train_split
        .iter()
        .filter(|ex| negatives.negatives(&ex.context.id).map_or(0, |n| n.len()) < m)
        .map(|ex| ex.context.id.clone())
        .collect();
    if !short.is_empty() {
        return Err(Error::Invalid(format!(
            "{} training contexts have fewer than {m} negatives (first: {})",
            short.len(),
            short[0]
        )));
    }
    let batch_size = cfg.batch_size.min(train_split.len());
    if batch_size < 2 && !cfg.inclusive_denominator && cfg.loss == LossKind::Mnrl {
        return Err(Error::EmptyNegativeSet);
    }

    let validation_set = ValidationSet::build(
        validation,
        collection,
        analyzer,
        cfg.validation_candidates,
        cfg.seed,
    )?;
    let mut encoder = encoder;
    let initial = validation_set.map(&encoder)?;
    let mut best: Option<(f64, usize, HashedEncoder)> = None;
    let mut validations = Vec::new();
    let mut log = Vec::with_capacity(cfg.steps);
    let mut rng = rng_for(cfg.seed, "batches");
    let mut order: Vec<usize> = (0..train_split.len()).collect();
    let mut cursor = order.len();

    for step in 1..=cfg.steps {
        if cursor + batch_size > order.len() {
            order.shuffle(&mut rng);
            cursor = 0;
        }
        let examples = order[cursor..cursor + batch_size]
            .iter()
            .map(|&i| {
                let ex = &train_split.examples[i];
                TrainingExample {
                    context: ex.context.clone(),
                    positive_id: ex.response_id.clone(),
                    negative_ids: negatives
                        .negatives(&ex.context.id)
                        .expect("checked above")
                        .iter()
                        .take(m)
                        .map(|n| n.id.clone())
                        .collect(),
                }
            })
            .collect();
        cursor += batch_size;
        let batch = Batch::new(examples)?;
        let prepared = prepare(&batch, collection, analyzer)?;
        let (loss, grad, matrix) = loss_and_grad(&encoder, &prepared, cfg)?;
        if !loss.is_finite() {
            let max_abs = matrix.scores.iter().fold(0.0f64, |m, s| m.max(s.abs()));
            return Err(Error::NonFiniteLoss {
                step,
                diagnostics: format!(
                    "loss={loss} max|score|={max_abs} contexts={:?}",
                    prepared.context_ids
                ),
            });
        }
        sgd_step(&mut encoder, &grad, cfg.learning_rate, cfg.weight_decay);

        let mut entry = LogEntry {
            step,
            loss,
            validation_map: None,
        };
        if step % cfg.validate_every == 0 {
            let map = validation_set.map(&encoder)?;
            entry.validation_map = Some(map);
            validations.push(ValidationPoint { step, map });
            if best.as_ref().is_none_or(|(b, _, _)| map > *b) {
                best = Some((map, step, encoder.clone()));
            }
        }
        log.push(entry);
    }

    let (best_map, best_step, best_encoder) = best.expect("at least one validation");
    Ok(TrainState {
        encoder: best_encoder,
        step: cfg.steps,
        best_validation_map: best_map,
        best_step,
        initial_validation_map: initial,
        validations,
        log,
        seed: cfg.seed,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub step: usize,
    pub best_step: usize,
    pub best_validation_map: f64,
    pub initial_validation_map: f64,
    pub validations: Vec<ValidationPoint>,
    pub config: TrainConfig,
    pub seed: u64,
    pub buckets: usize,
    pub dim: usize,
}

/// Writes `table.dvec` (one row per bucket) and `checkpoint.json` into `dir`.
pub fn save_checkpoint(dir: &Path, state: &TrainState, cfg: &TrainConfig) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    state.encoder.to_store()?.export(&dir.join("table.dvec"))?;
    let meta = CheckpointMeta {
        step: state.step,
        best_step: state.best_step,
        best_validation_map: state.best_validation_map,
        initial_validation_map: state.initial_validation_map,
        validations: state.validations.clone(),
        config: cfg.clone(),
        seed: state.seed,
        buckets: state.encoder.buckets(),
        dim: state.encoder.dim(),
    };
    let path = dir.join("checkpoint.json");
    std::fs::write(&path, serde_json::to_string_pretty(&meta)?).map_err(|e| Error::io(&path, e))
}

pub fn load_checkpoint(dir: &Path) -> Result<(HashedEncoder, CheckpointMeta)> {
    let path = dir.join("checkpoint.json");
    let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let meta: CheckpointMeta = serde_json::from_str(&text)?;
    let store: VectorStore = crate::dense::import_store(&dir.join("table.dvec"))?;
    let encoder = HashedEncoder::from_store(&store)?;
    if encoder.buckets() != meta.buckets || encoder.dim() != meta.dim {
        return Err(Error::Format(
            "checkpoint table does not match its sidecar".into(),
        ));
    }
    Ok((encoder, meta))
}

/// Training log as JSON lines.
pub fn write_log(path: &Path, log: &[LogEntry]) -> Result<()> {
    crate::corpus::write_jsonl(path, log)
}

#[cfg(test)]
mod tests;
