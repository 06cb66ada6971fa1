//! Batch losses over context × candidate score matrices, with analytic
//! gradients with respect to the scores (or distances).

use crate::error::{Error, Result};

/// Row-major `rows × cols` scores plus the positive column of each row.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreMatrix {
    pub rows: usize,
    pub cols: usize,
    pub scores: Vec<f64>,
    pub positive_cols: Vec<usize>,
    pub candidate_ids: Vec<String>,
}

impl ScoreMatrix {
    pub fn new(
        rows: usize,
        cols: usize,
        scores: Vec<f64>,
        positive_cols: Vec<usize>,
    ) -> Result<Self> {
        if scores.len() != rows * cols || positive_cols.len() != rows {
            return Err(Error::Invalid("score matrix shape mismatch".into()));
        }
        if positive_cols.iter().any(|&c| c >= cols) {
            return Err(Error::Invalid("positive column out of range".into()));
        }
        Ok(Self {
            rows,
            cols,
            scores,
            positive_cols,
            candidate_ids: (0..cols).map(|c| c.to_string()).collect(),
        })
    }

    /// Square matrix whose positives sit on the diagonal.
    pub fn diagonal(n: usize, scores: Vec<f64>) -> Result<Self> {
        Self::new(n, n, scores, (0..n).collect())
    }

    pub fn get(&self, i: usize, c: usize) -> f64 {
        self.scores[i * self.cols + c]
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.scores[i * self.cols..(i + 1) * self.cols]
    }
}

/// In-batch ranking loss
///
/// ```text
/// J = −1/B Σ_i [ s(i, p_i) − log Σ_{j ∈ D_i} exp s(i, j) ]
/// ```
///
/// where `D_i` is every column except the positive `p_i` (exclusive) or every
/// column (inclusive). Returns the loss and `∂J/∂s`.
pub fn mnrl_loss(scores: &ScoreMatrix, inclusive_denominator: bool) -> Result<(f64, Vec<f64>)> {
    let b = scores.rows;
    if b == 0 {
        return Err(Error::Invalid("empty batch".into()));
    }
    if !inclusive_denominator && (b < 2 || scores.cols < 2) {
        return Err(Error::EmptyNegativeSet);
    }
    let inv_b = 1.0 / b as f64;
    let mut loss = 0.0;
    let mut grad = vec![0.0; scores.scores.len()];
    for i in 0..b {
        let row = scores.row(i);
        let p = scores.positive_cols[i];
        let in_denominator = |j: usize| inclusive_denominator || j != p;
        let max = row
            .iter()
            .enumerate()
            .filter(|&(j, _)| in_denominator(j))
            .map(|(_, &s)| s)
            .fold(f64::NEG_INFINITY, f64::max);
        let sum: f64 = row
            .iter()
            .enumerate()
            .filter(|&(j, _)| in_denominator(j))
            .map(|(_, &s)| (s - max).exp())
            .sum();
        let lse = max + sum.ln();
        loss -= row[p] - lse;
        let g = &mut grad[i * scores.cols..(i + 1) * scores.cols];
        for (j, &s) in row.iter().enumerate() {
            if in_denominator(j) {
                g[j] += inv_b * (s - max).exp() / sum;
            }
        }
        g[p] -= inv_b;
    }
    Ok((loss * inv_b, grad))
}

/// Margin contrastive loss, mean over pairs of
/// `y·d² + (1 − y)·max(0, margin − d)²`. Returns the loss and `∂L/∂d` per pair.
pub fn contrastive_loss(pairs: &[(f64, bool)], margin: f64) -> Result<(f64, Vec<f64>)> {
    if !(margin > 0.0) {
        return Err(Error::Invalid(format!(
            "margin must be positive, got {margin}"
        )));
    }
    if pairs.is_empty() {
        return Err(Error::Invalid("no pairs".into()));
    }
    let inv_n = 1.0 / pairs.len() as f64;
    let mut loss = 0.0;
    let mut grad = Vec::with_capacity(pairs.len());
    for &(d, positive) in pairs {
        if !(d >= 0.0) {
            return Err(Error::Invalid(format!("negative distance {d}")));
        }
        if positive {
            loss += d * d;
            grad.push(2.0 * d * inv_n);
        } else {
            let gap = (margin - d).max(0.0);
            loss += gap * gap;
            grad.push(-2.0 * gap * inv_n);
        }
    }
    Ok((loss * inv_n, grad))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn hand_cases() {
        let zeros = ScoreMatrix::diagonal(2, vec![0.0; 4]).unwrap();
        let (l, _) = mnrl_loss(&zeros, false).unwrap();
        assert!(l.abs() < 1e-12);
        let diag = ScoreMatrix::diagonal(2, vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let (l, _) = mnrl_loss(&diag, false).unwrap();
        assert!((l + 1.0).abs() < 1e-12);
        // Inclusive: −(1 − ln(e + 1)) per row.
        let (l, _) = mnrl_loss(&diag, true).unwrap();
        assert!((l - ((1f64.exp() + 1.0).ln() - 1.0)).abs() < 1e-12);
    }

    #[test]
    fn exclusive_needs_two_rows() {
        let one = ScoreMatrix::new(1, 3, vec![0.0; 3], vec![0]).unwrap();
        assert!(matches!(
            mnrl_loss(&one, false),
            Err(Error::EmptyNegativeSet)
        ));
        assert!(mnrl_loss(&one, true).is_ok());
    }

    #[test]
    fn contrastive_hand_cases() {
        assert_eq!(contrastive_loss(&[(0.0, true)], 0.5).unwrap().0, 0.0);
        assert_eq!(contrastive_loss(&[(0.7, false)], 0.5).unwrap().0, 0.0);
        assert_eq!(contrastive_loss(&[(0.5, false)], 0.5).unwrap().0, 0.0);
        assert!((contrastive_loss(&[(0.0, false)], 0.5).unwrap().0 - 0.25).abs() < 1e-12);
        assert!(contrastive_loss(&[(-0.1, true)], 0.5).is_err());
        assert!(contrastive_loss(&[(0.1, true)], 0.0).is_err());
    }

    fn central_diff(f: impl Fn(&[f64]) -> f64, x: &[f64], i: usize, eps: f64) -> f64 {
        let mut p = x.to_vec();
        p[i] += eps;
        let mut m = x.to_vec();
        m[i] -= eps;
        (f(&p) - f(&m)) / (2.0 * eps)
    }

    #[test]
    fn score_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for inclusive in [false, true] {
            let scores: Vec<f64> = (0..27).map(|_| rng.gen_range(-2.0..2.0)).collect();
            let m = ScoreMatrix::new(3, 9, scores.clone(), vec![0, 1, 2]).unwrap();
            let (_, grad) = mnrl_loss(&m, inclusive).unwrap();
            let f = |s: &[f64]| {
                mnrl_loss(
                    &ScoreMatrix::new(3, 9, s.to_vec(), vec![0, 1, 2]).unwrap(),
                    inclusive,
                )
                .unwrap()
                .0
            };
            for i in 0..27 {
                let num = central_diff(f, &scores, i, 1e-6);
                let rel = (grad[i] - num).abs() / grad[i].abs().max(num.abs()).max(1e-12);
                assert!(rel < 1e-4, "coord {i}: {} vs {num}", grad[i]);
            }
        }
    }

    proptest! {
        #[test]
        fn gradient_signs(scores in prop::collection::vec(-5.0f64..5.0, 12), inclusive in any::<bool>()) {
            let m = ScoreMatrix::new(3, 4, scores, vec![0, 1, 2]).unwrap();
            let (_, g) = mnrl_loss(&m, inclusive).unwrap();
            for i in 0..3 {
                for c in 0..4 {
                    let v = g[i * 4 + c];
                    if c == i { prop_assert!(v <= 0.0) } else { prop_assert!(v >= 0.0) }
                }
            }
        }

        #[test]
        fn inclusive_is_row_shift_invariant(scores in prop::collection::vec(-5.0f64..5.0, 9), c in -3.0f64..3.0, row in 0usize..3) {
            let m = ScoreMatrix::diagonal(3, scores.clone()).unwrap();
            let mut shifted = scores;
            for v in &mut shifted[row * 3..row * 3 + 3] { *v += c; }
            let m2 = ScoreMatrix::diagonal(3, shifted).unwrap();
            let a = mnrl_loss(&m, true).unwrap().0;
            let b = mnrl_loss(&m2, true).unwrap().0;
            prop_assert!((a - b).abs() < 1e-9);
        }

        #[test]
        fn two_column_exclusive_depends_on_difference(s in prop::collection::vec(-5.0f64..5.0, 4), c in -3.0f64..3.0) {
            let m = ScoreMatrix::diagonal(2, s.clone()).unwrap();
            let shifted: Vec<f64> = s.iter().map(|v| v + c).collect();
            let m2 = ScoreMatrix::diagonal(2, shifted).unwrap();
            let a = mnrl_loss(&m, false).unwrap().0;
            let b = mnrl_loss(&m2, false).unwrap().0;
            prop_assert!((a - b).abs() < 1e-9);
            let expected = -((s[0] - s[1]) + (s[3] - s[2])) / 2.0;
            prop_assert!((a - expected).abs() < 1e-9);
        }
    }
}
