//! Dense symmetric matrices, sample covariances and the Gaussian likelihood.

use nalgebra::{DMatrix, SymmetricEigen};

use crate::error::{Error, Result};

/// Default relative tolerance for positive-definiteness checks.
pub const PD_TOL: f64 = 1e-10;

/// Relative eigenvalue tolerance for accepting a covariance as semidefinite.
const PSD_TOL: f64 = 1e-8;

/// Tolerance used when validating that a loaded matrix is symmetric.
const SYMMETRY_TOL: f64 = 1e-9;

/// A dense real symmetric matrix. The upper triangle is authoritative: on
/// construction the lower triangle is overwritten with its mirror.
#[derive(Debug, Clone, PartialEq)]
pub struct SymmetricMatrix(DMatrix<f64>);

impl SymmetricMatrix {
    /// Wraps `m` after checking that it is square and symmetric to a
    /// relative tolerance of 1e-9.
    pub fn new(m: DMatrix<f64>) -> Result<Self> {
        if m.nrows() != m.ncols() || m.nrows() == 0 {
            return Err(Error::Dimension(format!(
                "expected a non-empty square matrix, got {}x{}",
                m.nrows(),
                m.ncols()
            )));
        }
        if m.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite);
        }
        let scale = m.amax().max(1.0);
        let asym = max_asymmetry(&m);
        if asym > SYMMETRY_TOL * scale {
            return Err(Error::NotSymmetric {
                max_asymmetry: asym,
            });
        }
        Ok(Self::from_upper(m))
    }

    /// Mirrors the upper triangle of `m` into its lower triangle.
    pub fn from_upper(mut m: DMatrix<f64>) -> Self {
        assert_eq!(m.nrows(), m.ncols(), "square matrix required");
        let p = m.nrows();
        for j in 0..p {
            for i in (j + 1)..p {
                m[(i, j)] = m[(j, i)];
            }
        }
        Self(m)
    }

    /// Returns `(m + mᵀ) / 2`.
    pub fn symmetrize(m: &DMatrix<f64>) -> Self {
        assert_eq!(m.nrows(), m.ncols(), "square matrix required");
        let p = m.nrows();
        let mut out = m.clone();
        for j in 0..p {
            for i in (j + 1)..p {
                let v = 0.5 * (m[(i, j)] + m[(j, i)]);
                out[(i, j)] = v;
                out[(j, i)] = v;
            }
        }
        Self(out)
    }

    pub fn identity(p: usize) -> Self {
        Self(DMatrix::identity(p, p))
    }

    pub fn from_diagonal(d: &[f64]) -> Self {
        let p = d.len();
        Self(DMatrix::from_fn(
            p,
            p,
            |i, j| if i == j { d[i] } else { 0.0 },
        ))
    }

    pub fn dim(&self) -> usize {
        self.0.nrows()
    }

    pub fn as_matrix(&self) -> &DMatrix<f64> {
        &self.0
    }

    pub fn into_inner(self) -> DMatrix<f64> {
        self.0
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.0[(i, j)]
    }

    /// Eigenvalues in ascending order.
    pub fn eigenvalues(&self) -> Vec<f64> {
        let mut ev: Vec<f64> = SymmetricEigen::new(self.0.clone())
            .eigenvalues
            .iter()
            .copied()
            .collect();
        ev.sort_by(f64::total_cmp);
        ev
    }
}

impl AsRef<DMatrix<f64>> for SymmetricMatrix {
    fn as_ref(&self) -> &DMatrix<f64> {
        &self.0
    }
}

pub(crate) fn max_asymmetry(m: &DMatrix<f64>) -> f64 {
    let p = m.nrows();
    let mut worst = 0.0f64;
    for j in 0..p {
        for i in (j + 1)..p {
            worst = worst.max((m[(i, j)] - m[(j, i)]).abs());
        }
    }
    worst
}

/// Sample covariance matrix `S` together with the number of observations it
/// was computed from.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleCovariance {
    pub matrix: SymmetricMatrix,
    pub n: usize,
    pub centered: bool,
}

impl SampleCovariance {
    /// Wraps a user-supplied covariance matrix, validating positive
    /// semidefiniteness (all eigenvalues ≥ −tol·λ_max).
    pub fn from_matrix(matrix: SymmetricMatrix, n: usize) -> Result<Self> {
        let ev = matrix.eigenvalues();
        let max = ev[ev.len() - 1].abs();
        if ev[0] < -PSD_TOL * max {
            return Err(Error::NotPositiveDefinite {
                min_eigenvalue: ev[0],
            });
        }
        Ok(Self {
            matrix,
            n,
            centered: true,
        })
    }

    pub fn dim(&self) -> usize {
        self.matrix.dim()
    }

    pub fn as_matrix(&self) -> &DMatrix<f64> {
        self.matrix.as_matrix()
    }

    /// Largest absolute off-diagonal entry.
    pub fn max_abs_offdiag(&self) -> f64 {
        let m = self.as_matrix();
        let p = m.nrows();
        let mut best = 0.0f64;
        for j in 0..p {
            for i in 0..p {
                if i != j {
                    best = best.max(m[(i, j)].abs());
                }
            }
        }
        best
    }
}

/// Precision matrix estimate with its objective value and the solver's final
/// consensus residual.
#[derive(Debug, Clone, PartialEq)]
pub struct PrecisionEstimate {
    pub omega: SymmetricMatrix,
    pub objective_value: f64,
    pub converged_residual: f64,
}

/// Maximum-likelihood covariance `(1/n)·Xcᵀ·Xc` of the column-centered data.
pub fn sample_covariance(data: &DMatrix<f64>) -> Result<SampleCovariance> {
    let (n, p) = data.shape();
    if n < 2 {
        return Err(Error::InvalidInput(format!(
            "at least 2 observations are required, got {n}"
        )));
    }
    if p < 1 {
        return Err(Error::InvalidInput("data has no columns".into()));
    }
    if data.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite);
    }
    let means = data.row_mean();
    let mut centered = data.clone();
    for mut row in centered.row_iter_mut() {
        row -= &means;
    }
    let s = centered.tr_mul(&centered) / n as f64;
    for j in 0..p {
        if s[(j, j)] == 0.0 {
            log::warn!("column {j} is constant; its sample variance is zero");
        }
    }
    Ok(SampleCovariance {
        matrix: SymmetricMatrix::from_upper(s),
        n,
        centered: true,
    })
}

/// Covariance of `data` around externally supplied column means, normalized by
/// the number of rows.
pub(crate) fn covariance_about(data: &DMatrix<f64>, means: &[f64]) -> SymmetricMatrix {
    let mut centered = data.clone();
    for mut row in centered.row_iter_mut() {
        for (v, m) in row.iter_mut().zip(means) {
            *v -= m;
        }
    }
    let s = centered.tr_mul(&centered) / data.nrows() as f64;
    SymmetricMatrix::from_upper(s)
}

/// True iff the smallest eigenvalue of `m` exceeds `tol` times its largest
/// eigenvalue.
pub fn is_positive_definite(m: &SymmetricMatrix, tol: f64) -> Result<bool> {
    if m.as_matrix().iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite);
    }
    let ev = m.eigenvalues();
    let (min, max) = (ev[0], ev[ev.len() - 1]);
    Ok(max > 0.0 && min > tol * max)
}

/// Natural log-determinant of a symmetric positive definite matrix via
/// Cholesky, or `None` if the factorization fails.
pub fn log_det_pd(m: &DMatrix<f64>) -> Option<f64> {
    let chol = m.clone().cholesky()?;
    let l = chol.l_dirty();
    let mut acc = 0.0;
    for i in 0..m.nrows() {
        let v = l[(i, i)];
        if v <= 0.0 || !v.is_finite() {
            return None;
        }
        acc += v.ln();
    }
    Some(2.0 * acc)
}

/// `tr(AB)` for square matrices of equal size, computed without forming the
/// product.
pub(crate) fn trace_product(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    let p = a.nrows();
    let mut acc = 0.0;
    for i in 0..p {
        for k in 0..p {
            acc += a[(i, k)] * b[(k, i)];
        }
    }
    acc
}

/// Gaussian negative log-likelihood `−logdet(Ω) + tr(SΩ)` (up to constants).
pub fn neg_log_likelihood(omega: &SymmetricMatrix, s: &SampleCovariance) -> Result<f64> {
    if omega.dim() != s.dim() {
        return Err(Error::Dimension(format!(
            "omega is {0}x{0} but S is {1}x{1}",
            omega.dim(),
            s.dim()
        )));
    }
    let logdet = log_det_pd(omega.as_matrix()).ok_or_else(|| Error::NotPositiveDefinite {
        min_eigenvalue: omega.eigenvalues()[0],
    })?;
    Ok(-logdet + trace_product(s.as_matrix(), omega.as_matrix()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_matrix(rows: usize, cols: usize, seed: u64) -> DMatrix<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        DMatrix::from_fn(rows, cols, |_, _| rng.gen_range(-2.0..2.0))
    }

    fn random_pd(p: usize, seed: u64) -> SymmetricMatrix {
        let b = random_matrix(p, p, seed);
        SymmetricMatrix::from_upper(&b * b.transpose() + DMatrix::identity(p, p) * 0.5)
    }

    // Determinant by cofactor expansion along the first row.
    fn cofactor_det(m: &DMatrix<f64>) -> f64 {
        let p = m.nrows();
        if p == 1 {
            return m[(0, 0)];
        }
        let mut acc = 0.0;
        for j in 0..p {
            let minor = m.clone().remove_row(0).remove_column(j);
            let sign = if j % 2 == 0 { 1.0 } else { -1.0 };
            acc += sign * m[(0, j)] * cofactor_det(&minor);
        }
        acc
    }

    #[test]
    fn covariance_of_two_rows() {
        let data = DMatrix::from_row_slice(2, 2, &[1.0, 0.0, -1.0, 0.0]);
        let s = sample_covariance(&data).unwrap();
        assert_eq!(
            s.as_matrix(),
            &DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, 0.0])
        );
        assert!(s.centered);
        assert_eq!(s.n, 2);
    }

    #[test]
    fn covariance_of_repeated_row_is_zero() {
        let data = DMatrix::from_fn(5, 3, |_, j| j as f64 * 1.5 - 2.0);
        let s = sample_covariance(&data).unwrap();
        assert!(s.as_matrix().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn covariance_matches_double_loop() {
        let data = random_matrix(10, 4, 3);
        let s = sample_covariance(&data).unwrap();
        let (n, p) = data.shape();
        for a in 0..p {
            for b in 0..p {
                let ma: f64 = (0..n).map(|i| data[(i, a)]).sum::<f64>() / n as f64;
                let mb: f64 = (0..n).map(|i| data[(i, b)]).sum::<f64>() / n as f64;
                let mut acc = 0.0;
                for i in 0..n {
                    acc += (data[(i, a)] - ma) * (data[(i, b)] - mb);
                }
                assert!((s.as_matrix()[(a, b)] - acc / n as f64).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn covariance_rejects_single_row() {
        let data = DMatrix::from_row_slice(1, 2, &[1.0, 2.0]);
        assert!(matches!(
            sample_covariance(&data),
            Err(Error::InvalidInput(_))
        ));
    }

    #[test]
    fn positive_definiteness() {
        assert!(is_positive_definite(&SymmetricMatrix::identity(4), PD_TOL).unwrap());
        let ones = SymmetricMatrix::new(DMatrix::from_element(2, 2, 1.0)).unwrap();
        assert!(!is_positive_definite(&ones, PD_TOL).unwrap());
        let bad = DMatrix::from_row_slice(2, 2, &[1.0, f64::NAN, f64::NAN, 1.0]);
        assert!(matches!(
            is_positive_definite(&SymmetricMatrix(bad), PD_TOL),
            Err(Error::NonFinite)
        ));
    }

    #[test]
    fn likelihood_closed_forms() {
        let s3 = SampleCovariance::from_matrix(SymmetricMatrix::identity(3), 10).unwrap();
        let v = neg_log_likelihood(&SymmetricMatrix::identity(3), &s3).unwrap();
        assert!((v - 3.0).abs() < 1e-15);

        let s2 = SampleCovariance::from_matrix(SymmetricMatrix::identity(2), 10).unwrap();
        let two = SymmetricMatrix::from_diagonal(&[2.0, 2.0]);
        let v = neg_log_likelihood(&two, &s2).unwrap();
        assert!((v - (4.0 - 2.0 * 2f64.ln())).abs() < 1e-12);
        assert!((v - 2.61371).abs() < 1e-5);
    }

    #[test]
    fn likelihood_matches_cofactor_oracle() {
        let omega = random_pd(5, 11);
        let s = SampleCovariance::from_matrix(random_pd(5, 12), 50).unwrap();
        let det = cofactor_det(omega.as_matrix());
        let mut tr = 0.0;
        for i in 0..5 {
            for k in 0..5 {
                tr += s.as_matrix()[(i, k)] * omega.as_matrix()[(k, i)];
            }
        }
        let expected = -det.ln() + tr;
        let got = neg_log_likelihood(&omega, &s).unwrap();
        assert!((got - expected).abs() < 1e-10 * expected.abs().max(1.0));
    }

    #[test]
    fn likelihood_rejects_indefinite() {
        let s = SampleCovariance::from_matrix(SymmetricMatrix::identity(2), 10).unwrap();
        let bad = SymmetricMatrix::from_diagonal(&[1.0, -1.0]);
        assert!(matches!(
            neg_log_likelihood(&bad, &s),
            Err(Error::NotPositiveDefinite { .. })
        ));
    }

    #[test]
    fn inverse_covariance_minimizes_likelihood() {
        let sigma = random_pd(4, 21);
        let s = SampleCovariance::from_matrix(sigma.clone(), 100).unwrap();
        let inv = SymmetricMatrix::symmetrize(&sigma.as_matrix().clone().try_inverse().unwrap());
        let best = neg_log_likelihood(&inv, &s).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..200 {
            let e = DMatrix::from_fn(4, 4, |_, _| rng.gen_range(-0.05..0.05));
            let cand = SymmetricMatrix::symmetrize(&(inv.as_matrix() + e));
            if let Ok(v) = neg_log_likelihood(&cand, &s) {
                assert!(v >= best - 1e-12);
            }
        }
    }

    #[test]
    fn symmetric_new_rejects_asymmetry() {
        let m = DMatrix::from_row_slice(2, 2, &[1.0, 0.5, 0.4, 1.0]);
        assert!(matches!(
            SymmetricMatrix::new(m),
            Err(Error::NotSymmetric { .. })
        ));
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn covariance_is_shift_invariant(seed in 0u64..1000, shift in prop::collection::vec(-50.0f64..50.0, 4)) {
                let data = random_matrix(12, 4, seed);
                let mut shifted = data.clone();
                for mut row in shifted.row_iter_mut() {
                    for (v, c) in row.iter_mut().zip(&shift) {
                        *v += c;
                    }
                }
                let a = sample_covariance(&data).unwrap();
                let b = sample_covariance(&shifted).unwrap();
                let diff = (a.as_matrix() - b.as_matrix()).amax();
                prop_assert!(diff < 1e-12 * 50.0);
            }
        }
    }
}
