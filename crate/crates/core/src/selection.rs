//! Hard top-k partition and the residual straight-through backward.
//!
//! The forward pass is a deterministic top-k: exactly `k` tokens are
//! gathered for processing, the rest ride the identity skip. Because the
//! count is exact on every call, downstream shapes are static and the
//! gather/scatter round trip is bit-exact.
//!
//! The backward pass estimates dL/dpi from the single executed path per
//! token: the inner product of that path's feature gradient with the token
//! features, negated for rejected tokens. The exact two-path surrogate
//! gradient is also provided for verification.

use crate::error::{Result, ShivaError};
use crate::numeric::{dot, Matrix};

/// Result of a hard top-k partition.
#[derive(Debug, Clone)]
pub struct SelectionOutcome {
    /// Selected token indices, ascending; always exactly k of them.
    pub indices_sel: Vec<usize>,
    /// Rejected token indices, ascending.
    pub indices_rej: Vec<usize>,
    /// Gathered selected rows, k x D.
    pub x_sel: Matrix,
    /// Gathered rejected rows, (N - k) x D.
    pub x_rej: Matrix,
    /// `mask[i] == true` iff token i was selected.
    pub mask: Vec<bool>,
}

impl SelectionOutcome {
    pub fn n_tokens(&self) -> usize {
        self.mask.len()
    }

    pub fn k(&self) -> usize {
        self.indices_sel.len()
    }
}

/// Per-path loss gradients for the straight-through estimator. Each token
/// contributes exactly one row, in the executed path's matrix.
#[derive(Debug, Clone)]
pub struct PathGradients {
    /// dL/dx along the processed block path, rows aligned with `indices_sel`.
    pub grad_sel: Matrix,
    /// dL/dx along the identity skip, rows aligned with `indices_rej`.
    pub grad_rej: Matrix,
}

/// Maps a retention ratio to the integer budget: max(1, floor(n * r)).
/// The floor never reaches zero; an empty selection would degenerate the
/// block.
pub fn budget_for_ratio(n: usize, r: f64) -> usize {
    (((n as f64) * r).floor() as usize).clamp(1, n)
}

/// Deterministic top-k partition of `x` by `scores`. Ties break toward the
/// lower index; indices in both partitions are sorted ascending so
/// gather/scatter round trips are order-stable.
pub fn hard_topk(scores: &[f64], k: usize, x: &Matrix) -> Result<SelectionOutcome> {
    let n = scores.len();
    if n == 0 || x.rows() != n {
        return Err(ShivaError::dims(format!(
            "hard_topk: {} scores for {} rows",
            n,
            x.rows()
        )));
    }
    if k == 0 || k > n {
        return Err(ShivaError::invalid(format!(
            "budget k must satisfy 1 <= k <= {n}, got {k}"
        )));
    }
    let mut order: Vec<usize> = (0..n).collect();
    // Descending by score; equal scores keep index order (stable sort).
    order.sort_by(|&a, &b| scores[b].partial_cmp(&scores[a]).expect("finite scores"));
    let mut indices_sel: Vec<usize> = order[..k].to_vec();
    let mut indices_rej: Vec<usize> = order[k..].to_vec();
    indices_sel.sort_unstable();
    indices_rej.sort_unstable();
    let mut mask = vec![false; n];
    for &i in &indices_sel {
        mask[i] = true;
    }
    let x_sel = x.gather_rows(&indices_sel)?;
    let x_rej = x.gather_rows(&indices_rej)?;
    Ok(SelectionOutcome {
        indices_sel,
        indices_rej,
        x_sel,
        x_rej,
        mask,
    })
}

/// Scatters processed selected rows and untouched rejected rows back to the
/// original token order.
pub fn scatter_back(outcome: &SelectionOutcome, y_sel: &Matrix, x_rej: &Matrix) -> Result<Matrix> {
    let n = outcome.n_tokens();
    if y_sel.rows() != outcome.indices_sel.len() || x_rej.rows() != outcome.indices_rej.len() {
        return Err(ShivaError::dims(format!(
            "scatter_back: {} + {} rows for outcome with {} + {}",
            y_sel.rows(),
            x_rej.rows(),
            outcome.indices_sel.len(),
            outcome.indices_rej.len()
        )));
    }
    if y_sel.cols() != x_rej.cols() && !outcome.indices_rej.is_empty() {
        return Err(ShivaError::dims("scatter_back: column mismatch".to_string()));
    }
    let cols = y_sel.cols();
    let mut out = Matrix::zeros(n, cols);
    for (row, &i) in outcome.indices_sel.iter().enumerate() {
        out.row_mut(i).copy_from_slice(y_sel.row(row));
    }
    for (row, &i) in outcome.indices_rej.iter().enumerate() {
        out.row_mut(i).copy_from_slice(x_rej.row(row));
    }
    Ok(out)
}

/// Single-path straight-through estimate of dL/dpi for every token:
/// <grad_sel_i, x_i> when selected, -<grad_rej_i, x_i> when rejected. The
/// negative sign penalizes routing decisions whose skip path turned out to
/// carry loss sensitivity.
pub fn residual_ste_grad(
    paths: &PathGradients,
    outcome: &SelectionOutcome,
    x: &Matrix,
) -> Result<Vec<f64>> {
    let n = outcome.n_tokens();
    if x.rows() != n {
        return Err(ShivaError::dims("residual_ste_grad: token count".to_string()));
    }
    if paths.grad_sel.rows() != outcome.indices_sel.len()
        || paths.grad_rej.rows() != outcome.indices_rej.len()
        || paths.grad_sel.cols() != x.cols()
        || (paths.grad_rej.cols() != x.cols() && !outcome.indices_rej.is_empty())
    {
        return Err(ShivaError::contract(
            "residual_ste_grad: every token needs exactly one executed-path gradient".to_string(),
        ));
    }
    let mut out = vec![0.0; n];
    for (row, &i) in outcome.indices_sel.iter().enumerate() {
        out[i] = dot(paths.grad_sel.row(row), x.row(i));
    }
    for (row, &i) in outcome.indices_rej.iter().enumerate() {
        out[i] = -dot(paths.grad_rej.row(row), x.row(i));
    }
    Ok(out)
}

/// Exact gradient of the two-path input-gating surrogate:
/// g*_i = <grad_sel_i - grad_rej_i, x_i>. Requires both paths evaluated for
/// every token, so it only exists in verification/oracle settings.
pub fn surrogate_grad_exact(
    grad_sel_full: &Matrix,
    grad_rej_full: &Matrix,
    x: &Matrix,
) -> Result<Vec<f64>> {
    if !grad_sel_full.same_shape(x) || !grad_rej_full.same_shape(x) {
        return Err(ShivaError::dims(
            "surrogate_grad_exact: gradients must be full N x D".to_string(),
        ));
    }
    let mut out = vec![0.0; x.rows()];
    for (i, o) in out.iter_mut().enumerate() {
        let gs = grad_sel_full.row(i);
        let gr = grad_rej_full.row(i);
        let xi = x.row(i);
        *o = gs
            .iter()
            .zip(gr)
            .zip(xi)
            .map(|((s, r), xv)| (s - r) * xv)
            .sum();
    }
    Ok(out)
}

/// Aggregates token sensitivities into the budget gradient:
/// dL/dk = sum_i dL/dpi_i * dpi_i/dk.
pub fn budget_grad(dl_dpi: &[f64], dpi_dk: &[f64]) -> Result<f64> {
    if dl_dpi.len() != dpi_dk.len() {
        return Err(ShivaError::dims(format!(
            "budget_grad: {} vs {}",
            dl_dpi.len(),
            dpi_dk.len()
        )));
    }
    Ok(dot(dl_dpi, dpi_dk))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numeric::Rng;
    use proptest::prelude::*;

    fn random_matrix(rng: &mut Rng, rows: usize, cols: usize, std: f64) -> Matrix {
        Matrix::from_fn(rows, cols, |_, _| rng.gaussian(0.0, std).unwrap())
    }

    #[test]
    fn direct_order_example() {
        let x = Matrix::from_vec(3, 1, vec![10.0, 20.0, 30.0]).unwrap();
        let out = hard_topk(&[0.1, 0.9, 0.5], 2, &x).unwrap();
        assert_eq!(out.indices_sel, vec![1, 2]);
        assert_eq!(out.indices_rej, vec![0]);
        assert_eq!(out.mask, vec![false, true, true]);
    }

    #[test]
    fn full_budget_copies_input() {
        let x = Matrix::from_vec(3, 2, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        let out = hard_topk(&[0.3, 0.1, 0.2], 3, &x).unwrap();
        assert!(out.indices_rej.is_empty());
        assert_eq!(out.x_sel, x);
    }

    #[test]
    fn ties_break_toward_lower_index() {
        let x = Matrix::zeros(3, 1);
        let out = hard_topk(&[1.0, 1.0, 1.0], 2, &x).unwrap();
        assert_eq!(out.indices_sel, vec![0, 1]);
    }

    #[test]
    fn rejects_bad_budget() {
        let x = Matrix::zeros(3, 1);
        assert!(hard_topk(&[1.0, 2.0, 3.0], 0, &x).is_err());
        assert!(hard_topk(&[1.0, 2.0, 3.0], 4, &x).is_err());
    }

    // Sort oracle over random instances: the selected set must equal the
    // top-k of a full sort.
    #[test]
    fn matches_full_sort_oracle() {
        let mut rng = Rng::new(13);
        for _ in 0..1000 {
            let n = 1 + rng.below(24);
            let k = 1 + rng.below(n);
            let scores: Vec<f64> = (0..n).map(|_| rng.gaussian(0.0, 1.0).unwrap()).collect();
            let x = Matrix::zeros(n, 1);
            let out = hard_topk(&scores, k, &x).unwrap();

            let mut order: Vec<usize> = (0..n).collect();
            order.sort_by(|&a, &b| scores[b].partial_cmp(&scores[a]).unwrap());
            let mut expected = order[..k].to_vec();
            expected.sort_unstable();
            assert_eq!(out.indices_sel, expected);
            assert_eq!(out.k(), k, "exact budget adherence");
        }
    }

    #[test]
    fn identity_processing_round_trips() {
        let mut rng = Rng::new(3);
        let x = random_matrix(&mut rng, 6, 4, 1.0);
        let scores: Vec<f64> = (0..6).map(|_| rng.gaussian(0.0, 1.0).unwrap()).collect();
        let out = hard_topk(&scores, 2, &x).unwrap();
        let back = scatter_back(&out, &out.x_sel, &out.x_rej).unwrap();
        assert_eq!(back, x);
    }

    #[test]
    fn full_budget_scatter_returns_processed_rows() {
        let mut rng = Rng::new(4);
        let x = random_matrix(&mut rng, 4, 3, 1.0);
        let y = random_matrix(&mut rng, 4, 3, 1.0);
        let scores = [0.4, 0.2, 0.9, 0.1];
        let out = hard_topk(&scores, 4, &x).unwrap();
        let back = scatter_back(&out, &y, &out.x_rej).unwrap();
        assert_eq!(back, y);
    }

    #[test]
    fn scatter_rejects_shape_mismatch() {
        let x = Matrix::zeros(4, 2);
        let out = hard_topk(&[1.0, 2.0, 3.0, 4.0], 2, &x).unwrap();
        let wrong = Matrix::zeros(3, 2);
        assert!(scatter_back(&out, &wrong, &out.x_rej).is_err());
    }

    #[test]
    fn ste_zero_features_give_zero_gradient() {
        let x = Matrix::zeros(3, 4);
        let out = hard_topk(&[3.0, 2.0, 1.0], 2, &x).unwrap();
        let mut rng = Rng::new(8);
        let paths = PathGradients {
            grad_sel: random_matrix(&mut rng, 2, 4, 1.0),
            grad_rej: random_matrix(&mut rng, 1, 4, 1.0),
        };
        let g = residual_ste_grad(&paths, &out, &x).unwrap();
        assert_eq!(g, vec![0.0, 0.0, 0.0]);
    }

    // Sign inversion on the skip path: a rejected token whose skip gradient
    // equals its features gets -(norm squared).
    #[test]
    fn ste_rejected_token_sign_inversion() {
        let x = Matrix::from_vec(2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let out = hard_topk(&[5.0, 1.0], 1, &x).unwrap();
        let paths = PathGradients {
            grad_sel: Matrix::zeros(1, 2),
            grad_rej: x.gather_rows(&[1]).unwrap(),
        };
        let g = residual_ste_grad(&paths, &out, &x).unwrap();
        assert_eq!(g[1], -(3.0 * 3.0 + 4.0 * 4.0));
    }

    #[test]
    fn ste_rejects_missing_path_gradient() {
        let x = Matrix::zeros(3, 2);
        let out = hard_topk(&[3.0, 2.0, 1.0], 2, &x).unwrap();
        let paths = PathGradients {
            grad_sel: Matrix::zeros(1, 2), // one selected row missing
            grad_rej: Matrix::zeros(1, 2),
        };
        assert!(residual_ste_grad(&paths, &out, &x).is_err());
    }

    #[test]
    fn surrogate_indifferent_paths_vanish() {
        let mut rng = Rng::new(6);
        let g = random_matrix(&mut rng, 4, 3, 1.0);
        let x = random_matrix(&mut rng, 4, 3, 1.0);
        let out = surrogate_grad_exact(&g, &g, &x).unwrap();
        assert_eq!(out, vec![0.0; 4]);
    }

    // With a zero skip-path gradient the estimator coincides with the exact
    // surrogate on selected tokens.
    #[test]
    fn estimator_equals_exact_when_rej_grad_zero() {
        let mut rng = Rng::new(7);
        let n = 5;
        let x = random_matrix(&mut rng, n, 3, 1.0);
        let grad_sel = random_matrix(&mut rng, n, 3, 1.0);
        let grad_rej = Matrix::zeros(n, 3);
        let scores: Vec<f64> = (0..n).map(|_| rng.gaussian(0.0, 1.0).unwrap()).collect();
        let out = hard_topk(&scores, n, &x).unwrap();

        let paths = PathGradients {
            grad_sel: grad_sel.gather_rows(&out.indices_sel).unwrap(),
            grad_rej: Matrix::zeros(0, 3),
        };
        let estimate = residual_ste_grad(&paths, &out, &x).unwrap();
        let exact = surrogate_grad_exact(&grad_sel, &grad_rej, &x).unwrap();
        for (e, g) in estimate.iter().zip(&exact) {
            assert!((e - g).abs() < 1e-12);
        }
    }

    // Sign consistency: the single-path estimate equals the corresponding
    // term of the exact surrogate gradient exactly.
    #[test]
    fn estimator_terms_match_exact_per_path() {
        let mut rng = Rng::new(9);
        for _ in 0..50 {
            let n = 2 + rng.below(10);
            let d = 1 + rng.below(6);
            let x = random_matrix(&mut rng, n, d, 1.0);
            let grad_sel = random_matrix(&mut rng, n, d, 1.0);
            let grad_rej = random_matrix(&mut rng, n, d, 1.0);
            let scores: Vec<f64> = (0..n).map(|_| rng.gaussian(0.0, 1.0).unwrap()).collect();
            let k = 1 + rng.below(n);
            let out = hard_topk(&scores, k, &x).unwrap();
            let paths = PathGradients {
                grad_sel: grad_sel.gather_rows(&out.indices_sel).unwrap(),
                grad_rej: grad_rej.gather_rows(&out.indices_rej).unwrap(),
            };
            let estimate = residual_ste_grad(&paths, &out, &x).unwrap();
            for &i in &out.indices_sel {
                let term = dot(grad_sel.row(i), x.row(i));
                assert_eq!(estimate[i], term);
            }
            for &i in &out.indices_rej {
                let term = -dot(grad_rej.row(i), x.row(i));
                assert_eq!(estimate[i], term);
            }
        }
    }

    // Monte Carlo consistency: the estimator never points away from the
    // exact surrogate gradient (positive cosine in every trial).
    #[test]
    fn estimator_cosine_positive_over_random_trials() {
        let mut rng = Rng::new(29);
        for _ in 0..200 {
            let (n, d) = (64, 8);
            let x = random_matrix(&mut rng, n, d, 1.0);
            let grad_sel = random_matrix(&mut rng, n, d, 1.0);
            let grad_rej = random_matrix(&mut rng, n, d, 1.0);
            let scores: Vec<f64> = (0..n).map(|_| rng.gaussian(0.0, 1.0).unwrap()).collect();
            let out = hard_topk(&scores, n / 2, &x).unwrap();
            let paths = PathGradients {
                grad_sel: grad_sel.gather_rows(&out.indices_sel).unwrap(),
                grad_rej: grad_rej.gather_rows(&out.indices_rej).unwrap(),
            };
            let estimate = residual_ste_grad(&paths, &out, &x).unwrap();
            let exact = surrogate_grad_exact(&grad_sel, &grad_rej, &x).unwrap();
            let cos = dot(&estimate, &exact)
                / (dot(&estimate, &estimate).sqrt() * dot(&exact, &exact).sqrt());
            assert!(cos > 0.0, "cosine {cos}");
        }
    }

    #[test]
    fn budget_grad_signs() {
        let dpi_dk = vec![0.2, 0.5, 0.1];
        assert!(budget_grad(&[1.0, 2.0, 0.5], &dpi_dk).unwrap() > 0.0);
        assert_eq!(budget_grad(&[0.0, 0.0, 0.0], &dpi_dk).unwrap(), 0.0);
        assert!(budget_grad(&[1.0], &dpi_dk).is_err());
    }

    #[test]
    fn budget_for_ratio_clamps() {
        assert_eq!(budget_for_ratio(100, 0.5), 50);
        assert_eq!(budget_for_ratio(100, 0.001), 1);
        assert_eq!(budget_for_ratio(100, 1.0), 100);
        assert_eq!(budget_for_ratio(7, 0.99), 6);
    }

    proptest! {
        // Gather/scatter round trip is bit-exact for arbitrary masks.
        #[test]
        fn gather_scatter_round_trip(seed in 0u64..500) {
            let mut rng = Rng::new(seed);
            let n = 1 + rng.below(20);
            let d = 1 + rng.below(6);
            let x = Matrix::from_fn(n, d, |_, _| rng.gaussian(0.0, 2.0).unwrap());
            let scores: Vec<f64> = (0..n).map(|_| rng.gaussian(0.0, 1.0).unwrap()).collect();
            let k = 1 + rng.below(n);
            let out = hard_topk(&scores, k, &x).unwrap();
            prop_assert_eq!(out.k(), k);
            let back = scatter_back(&out, &out.x_sel, &out.x_rej).unwrap();
            prop_assert_eq!(back, x);
        }
    }
}
