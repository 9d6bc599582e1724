//! Tangent-space metric and kernel.
//!
//! The metric is estimated from per-sample gradients as a weighted sum of
//! rank-one terms, `G = sum_i w_i g_i g_i^T` (arithmetic mean by default),
//! either in full or as its diagonal. The kernel between two samples is
//! `g_i^T (G + eps I)^{-1} g_j`.
//!
//! Kernels are evaluated by whitening: with `G + eps I = L L^T`, each
//! gradient is mapped to `y = L^{-1} g` and the kernel is `y_i . y_j`. This
//! avoids forming an inverse and makes the Gram matrix exactly symmetric.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Largest parameter count for which a full `n x n` metric is built.
pub const MAX_FULL_DIM: usize = 5_000;
/// Largest number of samples in a Gram matrix.
pub const MAX_GRAM_SAMPLES: usize = 2_000;
/// Default ridge, relative to the mean diagonal of `G`.
pub const DEFAULT_RELATIVE_RIDGE: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MetricMode {
    Diagonal,
    Full,
}

impl MetricMode {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "diag" | "diagonal" => Ok(MetricMode::Diagonal),
            "full" => Ok(MetricMode::Full),
            other => Err(Error::validation(format!("unknown metric mode `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum MetricStorage {
    Diagonal(Vec<f64>),
    Full(DMatrix<f64>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricEstimate {
    pub storage: MetricStorage,
    pub ridge: f64,
    pub weights: Vec<f64>,
}

impl MetricEstimate {
    pub fn dim(&self) -> usize {
        match &self.storage {
            MetricStorage::Diagonal(d) => d.len(),
            MetricStorage::Full(m) => m.nrows(),
        }
    }

    pub fn mode(&self) -> MetricMode {
        match self.storage {
            MetricStorage::Diagonal(_) => MetricMode::Diagonal,
            MetricStorage::Full(_) => MetricMode::Full,
        }
    }

    pub fn diagonal(&self) -> Vec<f64> {
        match &self.storage {
            MetricStorage::Diagonal(d) => d.clone(),
            MetricStorage::Full(m) => m.diagonal().iter().copied().collect(),
        }
    }

    pub fn trace(&self) -> f64 {
        self.diagonal().iter().sum()
    }

    /// `1e-6 * trace(G) / n`.
    pub fn default_ridge(&self) -> f64 {
        DEFAULT_RELATIVE_RIDGE * self.trace() / self.dim() as f64
    }

    pub fn with_ridge(mut self, ridge: f64) -> Result<Self> {
        if !(ridge.is_finite() && ridge >= 0.0) {
            return Err(Error::validation(format!(
                "ridge {ridge} must be non-negative"
            )));
        }
        self.ridge = ridge;
        Ok(self)
    }

    /// Factorizes `G + eps I` once so that many kernels can be evaluated.
    pub fn whitener(&self) -> Result<Whitener> {
        match &self.storage {
            MetricStorage::Diagonal(d) => {
                let inv_sqrt = d
                    .iter()
                    .enumerate()
                    .map(|(k, &v)| {
                        let s = v + self.ridge;
                        if s > 0.0 {
                            Ok(1.0 / s.sqrt())
                        } else {
                            Err(Error::Numerical(format!(
                                "metric entry {k} is zero; set a positive ridge"
                            )))
                        }
                    })
                    .collect::<Result<Vec<_>>>()?;
                Ok(Whitener::Diagonal(inv_sqrt))
            }
            MetricStorage::Full(m) => {
                let n = m.nrows();
                let shifted = m + DMatrix::identity(n, n) * self.ridge;
                let chol = shifted.cholesky().ok_or_else(|| {
                    Error::Numerical("metric is not positive definite; set a positive ridge".into())
                })?;
                Ok(Whitener::Full(chol.l()))
            }
        }
    }
}

/// `y = L^{-1} g` for the factor `L` of `G + eps I`.
#[derive(Debug, Clone)]
pub enum Whitener {
    Diagonal(Vec<f64>),
    Full(DMatrix<f64>),
}

impl Whitener {
    pub fn dim(&self) -> usize {
        match self {
            Whitener::Diagonal(d) => d.len(),
            Whitener::Full(l) => l.nrows(),
        }
    }

    pub fn whiten(&self, g: &[f64]) -> Result<Vec<f64>> {
        if g.len() != self.dim() {
            return Err(Error::validation(format!(
                "gradient of length {} against a metric of dimension {}",
                g.len(),
                self.dim()
            )));
        }
        match self {
            Whitener::Diagonal(s) => Ok(g.iter().zip(s).map(|(a, b)| a * b).collect()),
            Whitener::Full(l) => {
                let y = l
                    .solve_lower_triangular(&DVector::from_column_slice(g))
                    .ok_or_else(|| Error::Numerical("singular triangular factor".into()))?;
                Ok(y.as_slice().to_vec())
            }
        }
    }

    pub fn kernel(&self, gi: &[f64], gj: &[f64]) -> Result<f64> {
        let yi = self.whiten(gi)?;
        let yj = self.whiten(gj)?;
        Ok(yi.iter().zip(&yj).map(|(a, b)| a * b).sum())
    }
}

/// `G = sum_i w_i g_i g_i^T` (or its diagonal). `weights = None` uses `1/T`.
/// The ridge is set to [`MetricEstimate::default_ridge`].
pub fn metric_accumulate(
    grads: &[Vec<f64>],
    weights: Option<&[f64]>,
    mode: MetricMode,
) -> Result<MetricEstimate> {
    let first = grads
        .first()
        .ok_or_else(|| Error::validation("metric needs at least one gradient"))?;
    let n = first.len();
    if n == 0 {
        return Err(Error::validation("gradients must be non-empty"));
    }
    if grads.iter().any(|g| g.len() != n) {
        return Err(Error::validation("gradients have different lengths"));
    }
    let weights = match weights {
        Some(w) => {
            if w.len() != grads.len() {
                return Err(Error::validation(format!(
                    "{} weights for {} gradients",
                    w.len(),
                    grads.len()
                )));
            }
            if let Some(bad) = w.iter().find(|w| !(w.is_finite() && **w >= 0.0)) {
                return Err(Error::validation(format!(
                    "weight {bad} is negative or not finite"
                )));
            }
            w.to_vec()
        }
        None => vec![1.0 / grads.len() as f64; grads.len()],
    };
    let storage = match mode {
        MetricMode::Diagonal => {
            let mut d = vec![0.0; n];
            for (g, &w) in grads.iter().zip(&weights) {
                for (acc, &v) in d.iter_mut().zip(g) {
                    *acc += w * v * v;
                }
            }
            MetricStorage::Diagonal(d)
        }
        MetricMode::Full => {
            if n > MAX_FULL_DIM {
                return Err(Error::Capacity(format!(
                    "full metric of dimension {n} exceeds {MAX_FULL_DIM}; use diagonal mode"
                )));
            }
            // G = A^T diag(w) A with the gradients as rows of A.
            let a = DMatrix::from_fn(grads.len(), n, |i, k| grads[i][k]);
            let wa = DMatrix::from_fn(grads.len(), n, |i, k| weights[i] * grads[i][k]);
            let mut g = a.transpose() * wa;
            // Enforce exact symmetry.
            for i in 0..n {
                for j in 0..i {
                    let s = 0.5 * (g[(i, j)] + g[(j, i)]);
                    g[(i, j)] = s;
                    g[(j, i)] = s;
                }
            }
            MetricStorage::Full(g)
        }
    };
    let estimate = MetricEstimate {
        storage,
        ridge: 0.0,
        weights,
    };
    let ridge = estimate.default_ridge();
    estimate.with_ridge(ridge)
}

/// `g_i^T (G + eps I)^{-1} g_j`.
pub fn tangent_kernel(gi: &[f64], gj: &[f64], metric: &MetricEstimate) -> Result<f64> {
    metric.whitener()?.kernel(gi, gj)
}

/// Pairwise kernel matrix of `grads`.
pub fn gram_matrix(grads: &[Vec<f64>], metric: &MetricEstimate) -> Result<DMatrix<f64>> {
    let m = grads.len();
    if m > MAX_GRAM_SAMPLES {
        return Err(Error::Capacity(format!(
            "Gram matrix of {m} samples exceeds {MAX_GRAM_SAMPLES}"
        )));
    }
    let whitener = metric.whitener()?;
    let ys = grads
        .iter()
        .map(|g| whitener.whiten(g))
        .collect::<Result<Vec<_>>>()?;
    let mut gram = DMatrix::zeros(m, m);
    for i in 0..m {
        for j in 0..=i {
            let k: f64 = ys[i].iter().zip(&ys[j]).map(|(a, b)| a * b).sum();
            gram[(i, j)] = k;
            gram[(j, i)] = k;
        }
    }
    Ok(gram)
}

/// Smallest eigenvalue of a symmetric matrix.
pub fn psd_check(gram: &DMatrix<f64>) -> Result<f64> {
    if gram.nrows() != gram.ncols() || gram.nrows() == 0 {
        return Err(Error::validation(
            "psd_check needs a non-empty square matrix",
        ));
    }
    let eig = gram.clone().symmetric_eigen();
    Ok(eig
        .eigenvalues
        .iter()
        .copied()
        .fold(f64::INFINITY, f64::min))
}

/// `x` with nine significant digits, fixed notation when the exponent is
/// in `[-5, 9)` and scientific otherwise; trailing zeros are dropped.
pub fn format_sig9(x: f64) -> String {
    if x == 0.0 || !x.is_finite() {
        return if x == 0.0 { "0".into() } else { format!("{x}") };
    }
    let sci = format!("{x:.8e}");
    let (mantissa, exp) = sci.split_once('e').expect("scientific notation");
    let exp: i32 = exp.parse().expect("integer exponent");
    let trim = |s: String| -> String {
        if s.contains('.') {
            s.trim_end_matches('0').trim_end_matches('.').to_string()
        } else {
            s
        }
    };
    if (-5..9).contains(&exp) {
        let decimals = (8 - exp).max(0) as usize;
        trim(format!("{x:.decimals$}"))
    } else {
        format!("{}e{exp}", trim(mantissa.to_string()))
    }
}

/// Row-major CSV, one matrix row per line.
pub fn gram_csv(gram: &DMatrix<f64>) -> String {
    let mut out = String::new();
    for i in 0..gram.nrows() {
        let row: Vec<String> = (0..gram.ncols())
            .map(|j| format_sig9(gram[(i, j)]))
            .collect();
        out.push_str(&row.join(","));
        out.push('\n');
    }
    out
}

#[cfg(test)]
mod tests {
    #[test]
    fn nine_significant_digits() {
        assert_eq!(format_sig9(0.0), "0");
        assert_eq!(format_sig9(1.0), "1");
        assert_eq!(format_sig9(1.0 / 3.0), "0.333333333");
        assert_eq!(format_sig9(-2.0 / 3.0 * 1e4), "-6666.66667");
        assert_eq!(format_sig9(123456789012.0), "1.23456789e11");
        assert_eq!(format_sig9(1.5e-7), "1.5e-7");
        assert_eq!(format_sig9(0.000123456789123), "0.000123456789");
        let m = DMatrix::from_row_slice(2, 2, &[1.0, 0.5, 0.5, 2.0]);
        assert_eq!(gram_csv(&m), "1,0.5\n0.5,2\n");
    }

    use super::*;
    use proptest::prelude::*;

    #[test]
    fn single_gradient_is_rank_one() {
        let g = vec![1.0, -2.0, 0.5];
        let m =
            metric_accumulate(std::slice::from_ref(&g), Some(&[1.0]), MetricMode::Full).unwrap();
        let MetricStorage::Full(mat) = &m.storage else {
            panic!()
        };
        for i in 0..3 {
            for j in 0..3 {
                assert_eq!(mat[(i, j)], g[i] * g[j]);
            }
        }
        let rank = mat
            .clone()
            .svd(false, false)
            .singular_values
            .iter()
            .filter(|&&s| s > 1e-12)
            .count();
        assert_eq!(rank, 1);
    }

    #[test]
    fn two_unit_vectors_give_half_identity() {
        let grads = vec![vec![1.0, 0.0], vec![0.0, 1.0]];
        let m = metric_accumulate(&grads, None, MetricMode::Full).unwrap();
        assert_eq!(
            m.storage,
            MetricStorage::Full(DMatrix::identity(2, 2) * 0.5)
        );
        assert_eq!(m.weights, vec![0.5, 0.5]);
        assert!((m.ridge - 1e-6 * 0.5).abs() < 1e-20);
    }

    #[test]
    fn diagonal_mode_matches_full_diagonal() {
        let grads = vec![
            vec![1.0, 2.0, -3.0],
            vec![0.5, 0.0, 4.0],
            vec![-1.0, 1.0, 1.0],
        ];
        let w = [0.2, 0.3, 0.5];
        let full = metric_accumulate(&grads, Some(&w), MetricMode::Full).unwrap();
        let diag = metric_accumulate(&grads, Some(&w), MetricMode::Diagonal).unwrap();
        assert_eq!(full.diagonal(), diag.diagonal());
    }

    #[test]
    fn validation_errors() {
        let grads = vec![vec![1.0; 3]];
        assert!(matches!(
            metric_accumulate(&grads, Some(&[-1.0]), MetricMode::Diagonal),
            Err(Error::Validation(_))
        ));
        assert!(metric_accumulate(&grads, Some(&[1.0, 1.0]), MetricMode::Diagonal).is_err());
        assert!(metric_accumulate(&[], None, MetricMode::Diagonal).is_err());
        let big = vec![vec![0.0; MAX_FULL_DIM + 1]];
        assert!(matches!(
            metric_accumulate(&big, None, MetricMode::Full),
            Err(Error::Capacity(_))
        ));
    }

    #[test]
    fn identity_metric_is_dot_product() {
        let m = MetricEstimate {
            storage: MetricStorage::Full(DMatrix::identity(3, 3)),
            ridge: 0.0,
            weights: vec![],
        };
        let k = tangent_kernel(&[1.0, 2.0, 3.0], &[4.0, -5.0, 6.0], &m).unwrap();
        assert!((k - 12.0).abs() < 1e-12);
    }

    #[test]
    fn diagonal_hand_example() {
        let g = [1.0, 1.0, 1.0];
        for storage in [
            MetricStorage::Diagonal(vec![1.0, 2.0, 4.0]),
            MetricStorage::Full(DMatrix::from_diagonal(&DVector::from_vec(vec![
                1.0, 2.0, 4.0,
            ]))),
        ] {
            let m = MetricEstimate {
                storage,
                ridge: 0.0,
                weights: vec![],
            };
            assert!((tangent_kernel(&g, &g, &m).unwrap() - 1.75).abs() < 1e-12);
        }
    }

    #[test]
    fn singular_metric_without_ridge_is_reported() {
        let grads = vec![vec![1.0, 0.0]];
        let m = metric_accumulate(&grads, None, MetricMode::Full)
            .unwrap()
            .with_ridge(0.0)
            .unwrap();
        assert!(matches!(
            tangent_kernel(&[1.0, 0.0], &[1.0, 0.0], &m),
            Err(Error::Numerical(_))
        ));
        let d = metric_accumulate(&grads, None, MetricMode::Diagonal)
            .unwrap()
            .with_ridge(0.0)
            .unwrap();
        assert!(matches!(
            tangent_kernel(&[1.0, 0.0], &[1.0, 0.0], &d),
            Err(Error::Numerical(_))
        ));
    }

    #[test]
    fn gram_of_orthonormal_vectors_under_identity() {
        let m = MetricEstimate {
            storage: MetricStorage::Diagonal(vec![1.0; 3]),
            ridge: 0.0,
            weights: vec![],
        };
        let grads = vec![
            vec![1.0, 0.0, 0.0],
            vec![0.0, 1.0, 0.0],
            vec![0.0, 0.0, 1.0],
        ];
        assert_eq!(gram_matrix(&grads, &m).unwrap(), DMatrix::identity(3, 3));
        let one = gram_matrix(&grads[..1], &m).unwrap();
        assert_eq!(one.shape(), (1, 1));
        assert!(one[(0, 0)] >= 0.0);
        let too_many = vec![vec![0.0; 3]; MAX_GRAM_SAMPLES + 1];
        assert!(matches!(
            gram_matrix(&too_many, &m),
            Err(Error::Capacity(_))
        ));
    }

    #[test]
    fn psd_check_finds_negative_eigenvalue() {
        let m = DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 2.0, 1.0]);
        assert!((psd_check(&m).unwrap() + 1.0).abs() < 1e-12);
    }

    fn grads_strategy() -> impl Strategy<Value = Vec<Vec<f64>>> {
        (2usize..8, 1usize..12).prop_flat_map(|(n, m)| {
            proptest::collection::vec(proptest::collection::vec(-3.0f64..3.0, n), m)
        })
    }

    proptest! {
        #[test]
        fn metric_is_psd(grads in grads_strategy(), v in proptest::collection::vec(-1.0f64..1.0, 8)) {
            let n = grads[0].len();
            let m = metric_accumulate(&grads, None, MetricMode::Full).unwrap();
            let MetricStorage::Full(g) = &m.storage else { unreachable!() };
            let v = DVector::from_column_slice(&v[..n]);
            let q = (v.transpose() * g * &v)[(0, 0)];
            prop_assert!(q >= -1e-9 * v.norm_squared());
            prop_assert!(g == &g.transpose());
        }

        #[test]
        fn kernel_is_symmetric_and_bilinear(grads in grads_strategy(), a in -5.0f64..5.0) {
            for mode in [MetricMode::Diagonal, MetricMode::Full] {
                let m = metric_accumulate(&grads, None, mode).unwrap().with_ridge(0.1).unwrap();
                let gi = &grads[0];
                let gj = grads.last().unwrap();
                let kij = tangent_kernel(gi, gj, &m).unwrap();
                let kji = tangent_kernel(gj, gi, &m).unwrap();
                prop_assert!((kij - kji).abs() <= 1e-10 * (1.0 + kij.abs()));
                let scaled: Vec<f64> = gi.iter().map(|v| a * v).collect();
                let ks = tangent_kernel(&scaled, gj, &m).unwrap();
                prop_assert!((ks - a * kij).abs() <= 1e-9 * (1.0 + kij.abs() * a.abs()));
                prop_assert!(tangent_kernel(gi, gi, &m).unwrap() >= 0.0);
            }
        }

        #[test]
        fn diagonal_equals_full_for_diagonal_metrics(d in proptest::collection::vec(0.1f64..4.0, 1..6), g in proptest::collection::vec(-2.0f64..2.0, 6)) {
            let n = d.len();
            let full = MetricEstimate {
                storage: MetricStorage::Full(DMatrix::from_diagonal(&DVector::from_vec(d.clone()))),
                ridge: 0.01,
                weights: vec![],
            };
            let diag = MetricEstimate { storage: MetricStorage::Diagonal(d), ridge: 0.01, weights: vec![] };
            let a = tangent_kernel(&g[..n], &g[..n], &full).unwrap();
            let b = tangent_kernel(&g[..n], &g[..n], &diag).unwrap();
            prop_assert!((a - b).abs() <= 1e-12 * (1.0 + a.abs()));
        }
    }
}
