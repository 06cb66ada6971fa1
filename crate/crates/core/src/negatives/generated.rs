//! Negatives produced by a generative model, read from JSONL.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::corpus::{for_each_line, Collection, DatasetSplit, ResponsePassage};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GeneratedRecord {
    pub context_id: String,
    pub text: String,
}

pub fn read_generated(path: &Path) -> Result<Vec<GeneratedRecord>> {
    let mut out = Vec::new();
    for_each_line(path, |line_no, line| {
        let rec: GeneratedRecord =
            serde_json::from_str(line).map_err(|e| Error::parse(path, line_no, e.to_string()))?;
        out.push(rec);
        Ok(())
    })?;
    Ok(out)
}

/// Generated passages grouped by context, with ids `gen:{context}:{j}`.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct GeneratedNegatives {
    pub by_context: BTreeMap<String, Vec<ResponsePassage>>,
    /// Context ids in the file but not in the split.
    pub unknown_contexts: Vec<String>,
    /// Contexts whose generation equalled the ground-truth text.
    pub rejected: Vec<String>,
}

impl GeneratedNegatives {
    pub fn for_context(&self, context_id: &str) -> &[ResponsePassage] {
        self.by_context.get(context_id).map_or(&[], Vec::as_slice)
    }
}

pub fn ingest_generated(
    path: &Path,
    split: &DatasetSplit,
    collection: &Collection,
) -> Result<GeneratedNegatives> {
    let mut out = GeneratedNegatives::default();
    for rec in read_generated(path)? {
        let Some(ex) = split.get(&rec.context_id) else {
            out.unknown_contexts.push(rec.context_id);
            continue;
        };
        let truth = collection.get(&ex.response_id).map(|p| p.text.as_str());
        if truth == Some(rec.text.as_str()) {
            log::warn!(
                "generation for `{}` equals its ground truth; rejected as a likely false negative",
                rec.context_id
            );
            out.rejected.push(rec.context_id);
            continue;
        }
        let list = out.by_context.entry(rec.context_id.clone()).or_default();
        let id = format!("gen:{}:{}", rec.context_id, list.len());
        list.push(ResponsePassage::new(id, rec.text));
    }
    if !out.unknown_contexts.is_empty() {
        log::warn!(
            "{} generated entries reference unknown contexts: {:?}",
            out.unknown_contexts.len(),
            out.unknown_contexts
        );
    }
    Ok(out)
}
