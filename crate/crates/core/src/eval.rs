//! Full-rank recall, re-ranking MAP, paired t-tests and TREC run files.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, StudentsT};

use crate::corpus::DatasetSplit;
use crate::error::{Error, Result};
use crate::ranking::ScoredList;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRow {
    pub qid: String,
    pub docid: String,
    pub rank: usize,
    pub score: f64,
    pub tag: String,
}

/// Ranked rows grouped by query; per query, ranks run 1..k and scores never
/// increase.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct RunFile {
    rows: Vec<RunRow>,
    // qid -> row range
    queries: Vec<(String, std::ops::Range<usize>)>,
}

impl RunFile {
    pub fn new(rows: Vec<RunRow>) -> Result<Self> {
        Self::validated(rows, None)
    }

    /// `origin` maps row indices back to source file lines for error messages.
    fn validated(rows: Vec<RunRow>, origin: Option<(&Path, &[usize])>) -> Result<Self> {
        let fail = |i: usize, msg: String| match origin {
            Some((p, lines)) => Error::parse(p, lines[i], msg),
            None => Error::Invalid(format!("row {}: {msg}", i + 1)),
        };
        let mut queries: Vec<(String, std::ops::Range<usize>)> = Vec::new();
        let mut seen = HashSet::new();
        for (i, row) in rows.iter().enumerate() {
            let continues = queries.last().is_some_and(|(q, _)| *q == row.qid);
            if continues {
                let prev = &rows[i - 1];
                if row.rank != prev.rank + 1 {
                    return Err(fail(
                        i,
                        format!(
                            "rank {} follows rank {} for `{}`",
                            row.rank, prev.rank, row.qid
                        ),
                    ));
                }
                if row.score > prev.score {
                    return Err(fail(i, format!("score increases for `{}`", row.qid)));
                }
                queries.last_mut().expect("continues").1.end = i + 1;
            } else {
                if !seen.insert(row.qid.clone()) {
                    return Err(fail(
                        i,
                        format!("rows for `{}` are not contiguous", row.qid),
                    ));
                }
                if row.rank != 1 {
                    return Err(fail(
                        i,
                        format!("first rank for `{}` is {}", row.qid, row.rank),
                    ));
                }
                queries.push((row.qid.clone(), i..i + 1));
            }
            if !row.score.is_finite() {
                return Err(fail(i, "non-finite score".into()));
            }
        }
        Ok(Self { rows, queries })
    }

    pub fn from_scored_lists<'a>(
        lists: impl IntoIterator<Item = &'a ScoredList>,
        tag: &str,
    ) -> Result<Self> {
        let mut rows = Vec::new();
        for list in lists {
            for (i, e) in list.entries.iter().enumerate() {
                rows.push(RunRow {
                    qid: list.query_id.clone(),
                    docid: e.id.clone(),
                    rank: i + 1,
                    score: e.score,
                    tag: tag.to_string(),
                });
            }
        }
        Self::new(rows)
    }

    pub fn rows(&self) -> &[RunRow] {
        &self.rows
    }

    pub fn query_ids(&self) -> impl Iterator<Item = &str> {
        self.queries.iter().map(|(q, _)| q.as_str())
    }

    pub fn ranking(&self, qid: &str) -> Option<&[RunRow]> {
        self.queries
            .iter()
            .find(|(q, _)| q == qid)
            .map(|(_, r)| &self.rows[r.clone()])
    }

    fn rankings(&self) -> HashMap<&str, &[RunRow]> {
        self.queries
            .iter()
            .map(|(q, r)| (q.as_str(), &self.rows[r.clone()]))
            .collect()
    }

    pub fn to_trec_string(&self) -> String {
        let mut out = String::new();
        for r in &self.rows {
            writeln!(
                out,
                "{} Q0 {} {} {} {}",
                r.qid, r.docid, r.rank, r.score, r.tag
            )
            .expect("writing to a String");
        }
        out
    }
}

/// Writes `qid Q0 docid rank score tag` lines. Scores use the shortest
/// representation that parses back to the same value.
pub fn write_run(path: &Path, run: &RunFile) -> Result<()> {
    fs::write(path, run.to_trec_string()).map_err(|e| Error::io(path, e))
}

pub fn read_run(path: &Path) -> Result<RunFile> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_run(&text, path)
}

pub fn parse_run(text: &str, path: &Path) -> Result<RunFile> {
    let mut rows = Vec::new();
    let mut line_of_row = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let cols: Vec<&str> = line.split_whitespace().collect();
        if cols.len() != 6 {
            return Err(Error::parse(
                path,
                i + 1,
                format!("expected 6 columns, got {}", cols.len()),
            ));
        }
        let rank = cols[3]
            .parse()
            .map_err(|_| Error::parse(path, i + 1, format!("bad rank `{}`", cols[3])))?;
        let score = cols[4]
            .parse()
            .map_err(|_| Error::parse(path, i + 1, format!("bad score `{}`", cols[4])))?;
        rows.push(RunRow {
            qid: cols[0].to_string(),
            docid: cols[2].to_string(),
            rank,
            score,
            tag: cols[5].to_string(),
        });
        line_of_row.push(i + 1);
    }
    RunFile::validated(rows, Some((path, &line_of_row)))
}

/// What to do with split queries that have no rows in the run.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MissingPolicy {
    #[default]
    Error,
    /// Count them as misses at every cutoff.
    Miss,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueryOutcome {
    pub qid: String,
    /// Rank of the ground-truth response within the run, if retrieved.
    pub rank: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub ks: Vec<usize>,
    /// Keys are `R@K`.
    pub recall: BTreeMap<String, f64>,
    pub num_queries: usize,
    pub missing_queries: usize,
    pub per_query: Vec<QueryOutcome>,
}

impl EvalReport {
    pub fn recall_at(&self, k: usize) -> Option<f64> {
        self.recall.get(&format!("R@{k}")).copied()
    }

    /// Per-query hit indicators at `k`, in split order.
    pub fn hits(&self, k: usize) -> Vec<f64> {
        self.per_query
            .iter()
            .map(|q| {
                if q.rank.is_some_and(|r| r <= k) {
                    1.0
                } else {
                    0.0
                }
            })
            .collect()
    }
}

pub fn evaluate_full_rank(
    run: &RunFile,
    split: &DatasetSplit,
    ks: &[usize],
    missing: MissingPolicy,
) -> Result<EvalReport> {
    let mut ks: Vec<usize> = ks.to_vec();
    ks.sort_unstable();
    ks.dedup();
    if ks.is_empty() || ks[0] == 0 {
        return Err(Error::Invalid(
            "cutoffs must be positive and non-empty".into(),
        ));
    }
    let rankings = run.rankings();
    let absent: Vec<String> = split
        .iter()
        .filter(|ex| !rankings.contains_key(ex.context.id.as_str()))
        .map(|ex| ex.context.id.clone())
        .collect();
    if !absent.is_empty() && missing == MissingPolicy::Error {
        return Err(Error::DanglingIds(absent));
    }
    let per_query: Vec<QueryOutcome> = split
        .iter()
        .map(|ex| QueryOutcome {
            qid: ex.context.id.clone(),
            rank: rankings
                .get(ex.context.id.as_str())
                .and_then(|rows| rows.iter().find(|r| r.docid == ex.response_id))
                .map(|r| r.rank),
        })
        .collect();
    let n = per_query.len();
    let recall = ks
        .iter()
        .map(|&k| {
            let hits = per_query
                .iter()
                .filter(|q| q.rank.is_some_and(|r| r <= k))
                .count();
            let value = if n == 0 { 0.0 } else { hits as f64 / n as f64 };
            (format!("R@{k}"), value)
        })
        .collect();
    Ok(EvalReport {
        ks,
        recall,
        num_queries: n,
        missing_queries: absent.len(),
        per_query,
    })
}

/// MAP over candidate lists with exactly one relevant entry each; the
/// average precision of such a list is the reciprocal rank of its relevant
/// entry. `lists[q][i]` is the relevance of the candidate at rank `i + 1`.
pub fn rerank_map(lists: &[Vec<bool>]) -> Result<f64> {
    if lists.is_empty() {
        return Err(Error::Invalid("no lists to evaluate".into()));
    }
    let mut total = 0.0;
    for (q, list) in lists.iter().enumerate() {
        let relevant: Vec<usize> = list
            .iter()
            .enumerate()
            .filter(|(_, &r)| r)
            .map(|(i, _)| i)
            .collect();
        if relevant.len() != 1 {
            return Err(Error::Invalid(format!(
                "list {q} has {} relevant candidates, expected 1",
                relevant.len()
            )));
        }
        total += 1.0 / (relevant[0] + 1) as f64;
    }
    Ok(total / lists.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SignificanceReport {
    pub label: String,
    /// `None` when the differences have zero variance.
    pub t_statistic: Option<f64>,
    pub p_value: f64,
    pub corrected_alpha: f64,
    pub significant: bool,
    pub m_comparisons: usize,
    pub n: usize,
    pub mean_difference: f64,
}

/// Two-sided paired Student's t-test with a Bonferroni-corrected threshold
/// `(1 - confidence) / m_comparisons`.
///
/// When all differences are zero the test is undefined and the report
/// carries `p = 1`. When they are constant but non-zero, `p = 0`.
pub fn paired_ttest(
    label: &str,
    a: &[f64],
    b: &[f64],
    confidence: f64,
    m_comparisons: usize,
) -> Result<SignificanceReport> {
    if a.len() != b.len() {
        return Err(Error::Invalid(format!(
            "paired samples differ in length: {} vs {}",
            a.len(),
            b.len()
        )));
    }
    if a.len() < 2 {
        return Err(Error::Invalid(
            "a paired t-test needs at least 2 pairs".into(),
        ));
    }
    if m_comparisons == 0 || !(0.0..1.0).contains(&confidence) {
        return Err(Error::Invalid(
            "invalid confidence or comparison count".into(),
        ));
    }
    let n = a.len() as f64;
    let diffs: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    let mean = diffs.iter().sum::<f64>() / n;
    let var = diffs.iter().map(|d| (d - mean).powi(2)).sum::<f64>() / (n - 1.0);
    let corrected_alpha = (1.0 - confidence) / m_comparisons as f64;
    let (t, p) = if var == 0.0 {
        (None, if mean == 0.0 { 1.0 } else { 0.0 })
    } else {
        let t = mean / (var.sqrt() / n.sqrt());
        let dist = StudentsT::new(0.0, 1.0, n - 1.0).expect("degrees of freedom >= 1");
        (Some(t), (2.0 * dist.sf(t.abs())).min(1.0))
    };
    Ok(SignificanceReport {
        label: label.to_string(),
        t_statistic: t,
        p_value: p,
        corrected_alpha,
        significant: p < corrected_alpha,
        m_comparisons,
        n: a.len(),
        mean_difference: mean,
    })
}

/// Method × dataset recall table, one CSV row per method.
#[derive(Debug, Clone, Default)]
pub struct SummaryTable {
    ks: Vec<usize>,
    datasets: Vec<String>,
    rows: Vec<(String, BTreeMap<String, Vec<f64>>)>,
}

impl SummaryTable {
    pub fn new(ks: &[usize]) -> Self {
        Self {
            ks: ks.to_vec(),
            ..Self::default()
        }
    }

    pub fn add(&mut self, method: &str, dataset: &str, report: &EvalReport) {
        if !self.datasets.iter().any(|d| d == dataset) {
            self.datasets.push(dataset.to_string());
        }
        let values = self
            .ks
            .iter()
            .map(|&k| report.recall_at(k).unwrap_or(f64::NAN))
            .collect();
        match self.rows.iter_mut().find(|(m, _)| m == method) {
            Some((_, per)) => {
                per.insert(dataset.to_string(), values);
            }
            None => self.rows.push((
                method.to_string(),
                BTreeMap::from([(dataset.to_string(), values)]),
            )),
        }
    }

    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        let mut header = vec!["method".to_string()];
        for d in &self.datasets {
            for k in &self.ks {
                header.push(format!("{d} R@{k}"));
            }
        }
        w.write_record(&header)?;
        for (method, per) in &self.rows {
            let mut rec = vec![method.clone()];
            for d in &self.datasets {
                match per.get(d) {
                    Some(vals) => rec.extend(vals.iter().map(|v| format!("{v:.3}"))),
                    None => rec.extend(self.ks.iter().map(|_| String::new())),
                }
            }
            w.write_record(&rec)?;
        }
        let bytes = w.into_inner().map_err(|e| Error::Invalid(e.to_string()))?;
        Ok(String::from_utf8(bytes).expect("csv output is UTF-8"))
    }
}
