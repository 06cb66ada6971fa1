//! Ranked result lists and exact top-k selection.

use std::cmp::{Ordering, Reverse};
use std::collections::BinaryHeap;

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoredDoc {
    pub id: String,
    pub score: f64,
}

/// A ranked list for one query: scores non-increasing, ties by ascending id.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoredList {
    pub query_id: String,
    pub entries: Vec<ScoredDoc>,
    pub k: usize,
}

impl ScoredList {
    pub fn empty(query_id: impl Into<String>, k: usize) -> Self {
        Self {
            query_id: query_id.into(),
            entries: Vec::new(),
            k,
        }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|e| e.id.as_str())
    }

    /// 1-based rank of `id`, if present.
    pub fn rank_of(&self, id: &str) -> Option<usize> {
        self.entries.iter().position(|e| e.id == id).map(|p| p + 1)
    }
}

/// Folds `-0.0` into `0.0` so that total ordering agrees with numeric equality.
#[inline]
pub(crate) fn canonical(score: f64) -> f64 {
    if score == 0.0 {
        0.0
    } else {
        score
    }
}

/// Ranking order: higher score first, then ascending id.
#[inline]
pub fn rank_order(a_score: f64, a_id: &str, b_score: f64, b_id: &str) -> Ordering {
    canonical(b_score)
        .total_cmp(&canonical(a_score))
        .then_with(|| a_id.cmp(b_id))
}

struct Candidate<'a, T> {
    score: f64,
    id: &'a str,
    payload: T,
}

impl<T> PartialEq for Candidate<'_, T> {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other) == Ordering::Equal
    }
}
impl<T> Eq for Candidate<'_, T> {}
impl<T> PartialOrd for Candidate<'_, T> {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}
impl<T> Ord for Candidate<'_, T> {
    // Greater = ranks earlier.
    fn cmp(&self, other: &Self) -> Ordering {
        rank_order(other.score, other.id, self.score, self.id)
    }
}

/// Exact top-`k` of `(score, id, payload)` triples via a bounded min-heap.
/// Returned best first.
pub fn top_k<'a, T, I>(items: I, k: usize) -> Vec<(f64, &'a str, T)>
where
    I: IntoIterator<Item = (f64, &'a str, T)>,
{
    if k == 0 {
        return Vec::new();
    }
    let mut heap: BinaryHeap<Reverse<Candidate<'a, T>>> = BinaryHeap::with_capacity(k + 1);
    for (score, id, payload) in items {
        let cand = Candidate {
            score: canonical(score),
            id,
            payload,
        };
        if heap.len() < k {
            heap.push(Reverse(cand));
        } else if let Some(worst) = heap.peek() {
            if cand > worst.0 {
                heap.pop();
                heap.push(Reverse(cand));
            }
        }
    }
    heap.into_sorted_vec()
        .into_iter()
        .map(|Reverse(c)| (c.score, c.id, c.payload))
        .collect()
}
