//! Worksheet of sampled negatives for manual relevance annotation.

use std::path::Path;

use rand::seq::index;

use super::SampleSet;
use crate::corpus::{concat_context, Collection, DatasetSplit};
use crate::error::{Error, Result};
use crate::seeds::rng_for;

pub const DEFAULT_CONTEXTS_PER_DATASET: usize = 3;
pub const DEFAULT_NEGATIVES_PER_CONTEXT: usize = 10;

pub const ANNOTATION_HEADER: [&str; 7] = [
    "dataset",
    "context_id",
    "context",
    "sampler",
    "negative_id",
    "negative",
    "relevance",
];

/// One dataset with the sample sets to draw from, each under a display name.
pub struct AnnotationSource<'a> {
    pub dataset: &'a str,
    pub split: &'a DatasetSplit,
    pub collection: &'a Collection,
    pub samplers: Vec<(&'a str, &'a SampleSet)>,
}

/// Writes the worksheet to `path` and returns the number of data rows.
///
/// For every dataset, `contexts_per_dataset` contexts are drawn with a seed
/// derived from `seed` and the dataset name; each sampler contributes its
/// first `negs_per_context` negatives for each drawn context.
pub fn export_annotation_sample(
    sources: &[AnnotationSource<'_>],
    contexts_per_dataset: usize,
    negs_per_context: usize,
    seed: u64,
    path: &Path,
) -> Result<usize> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(ANNOTATION_HEADER)?;
    let mut rows = 0usize;
    for src in sources {
        if src.split.len() < contexts_per_dataset {
            return Err(Error::Invalid(format!(
                "dataset `{}` has {} contexts, {contexts_per_dataset} requested",
                src.dataset,
                src.split.len()
            )));
        }
        let mut rng = rng_for(seed, &format!("annotation:{}", src.dataset));
        let mut picked = index::sample(&mut rng, src.split.len(), contexts_per_dataset).into_vec();
        picked.sort_unstable();
        let examples: Vec<_> = picked.into_iter().map(|i| &src.split.examples[i]).collect();

        let mut uncovered = Vec::new();
        for (name, set) in &src.samplers {
            for ex in &examples {
                let have = set.negatives(&ex.context.id).map_or(0, <[_]>::len);
                if have < negs_per_context {
                    uncovered.push(format!("{}/{name}/{}", src.dataset, ex.context.id));
                }
            }
        }
        if !uncovered.is_empty() {
            return Err(Error::Invalid(format!(
                "samplers lack {negs_per_context} negatives for: {}",
                uncovered.join(", ")
            )));
        }

        for ex in &examples {
            let context = concat_context(&ex.context);
            for (name, set) in &src.samplers {
                for neg in &set.negatives(&ex.context.id).expect("checked")[..negs_per_context] {
                    let text = match (&neg.text, src.collection.get(&neg.id)) {
                        (Some(t), _) => t.as_str(),
                        (None, Some(p)) => p.text.as_str(),
                        (None, None) => return Err(Error::DanglingIds(vec![neg.id.clone()])),
                    };
                    w.write_record([
                        src.dataset,
                        &ex.context.id,
                        &context,
                        name,
                        &neg.id,
                        text,
                        "",
                    ])?;
                    rows += 1;
                }
            }
        }
    }
    let bytes = w.into_inner().map_err(|e| Error::Invalid(e.to_string()))?;
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))?;
    Ok(rows)
}
