//! Closed-form proximal maps used by the ADMM subproblems.

use nalgebra::{DMatrix, SymmetricEigen};

use crate::error::{Error, Result};

/// Minimizer of `−logdet(X) + tr(SX) + (ρ/2)‖X − target/ρ‖²_F` over
/// symmetric positive definite `X`.
///
/// With `target − S = QΛQᵀ` the solution is `Q·diag(x_j)·Qᵀ` where
/// `x_j = (δ_j + √(δ_j² + 4ρ)) / (2ρ)`, which satisfies `ρX − X⁻¹ = target − S`.
/// The input is symmetrized before the eigendecomposition.
pub fn prox_logdet(target: &DMatrix<f64>, s: &DMatrix<f64>, rho: f64) -> Result<DMatrix<f64>> {
    let p = target.nrows();
    let mut out = DMatrix::zeros(p, p);
    prox_logdet_into(target, s, rho, &mut out)?;
    Ok(out)
}

pub(crate) fn prox_logdet_into(
    target: &DMatrix<f64>,
    s: &DMatrix<f64>,
    rho: f64,
    out: &mut DMatrix<f64>,
) -> Result<()> {
    let p = target.nrows();
    let mut w = DMatrix::zeros(p, p);
    for j in 0..p {
        for i in 0..p {
            w[(i, j)] = 0.5 * (target[(i, j)] + target[(j, i)]) - s[(i, j)];
        }
    }
    if w.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite);
    }
    let eig = SymmetricEigen::new(w);
    let q = eig.eigenvectors;
    let mut qs = q.clone();
    for (j, mut col) in qs.column_iter_mut().enumerate() {
        col *= eigen_map(eig.eigenvalues[j], rho);
    }
    qs.mul_to(&q.transpose(), out);
    for j in 0..p {
        for i in (j + 1)..p {
            let v = 0.5 * (out[(i, j)] + out[(j, i)]);
            out[(i, j)] = v;
            out[(j, i)] = v;
        }
    }
    Ok(())
}

/// Positive root of `ρx − 1/x = δ`, computed without cancellation for
/// strongly negative `δ`.
pub(crate) fn eigen_map(delta: f64, rho: f64) -> f64 {
    let root = (delta * delta + 4.0 * rho).sqrt();
    if delta >= 0.0 {
        (delta + root) / (2.0 * rho)
    } else {
        2.0 / (root - delta)
    }
}

/// Group soft-thresholding of every non-root row at `λ₁/ρ`; the root row is
/// replaced by its mean replicated across all columns. Killed rows are exact
/// zeros.
pub fn prox_group_rows(
    target: &DMatrix<f64>,
    rho: f64,
    lambda1: f64,
    root_row: usize,
) -> DMatrix<f64> {
    let mut out = target.clone();
    group_rows_in_place(&mut out, rho, lambda1, root_row);
    out
}

pub(crate) fn group_rows_in_place(m: &mut DMatrix<f64>, rho: f64, lambda1: f64, root_row: usize) {
    let threshold = lambda1 / rho;
    for (u, mut row) in m.row_iter_mut().enumerate() {
        if u == root_row {
            let mean = row.mean();
            row.fill(mean);
            continue;
        }
        let norm = row.norm();
        if norm <= threshold || norm == 0.0 {
            row.fill(0.0);
        } else {
            row *= 1.0 - threshold / norm;
        }
    }
}

/// Scalar soft-threshold `sign(v)·max(|v| − t, 0)`.
pub fn soft_threshold(v: f64, t: f64) -> f64 {
    if v > t {
        v - t
    } else if v < -t {
        v + t
    } else {
        0.0
    }
}

/// Elementwise soft-thresholding of off-diagonal entries at `λ₂/ρ`; the
/// diagonal passes through unchanged.
pub fn prox_l1_offdiag(target: &DMatrix<f64>, rho: f64, lambda2: f64) -> DMatrix<f64> {
    let mut out = target.clone();
    l1_offdiag_in_place(&mut out, rho, lambda2);
    out
}

pub(crate) fn l1_offdiag_in_place(m: &mut DMatrix<f64>, rho: f64, lambda2: f64) {
    let t = lambda2 / rho;
    let p = m.nrows();
    for j in 0..p {
        for i in 0..p {
            if i != j {
                m[(i, j)] = soft_threshold(m[(i, j)], t);
            }
        }
    }
}

/// Projection onto `{Γ : rows outside keep are zero, root row constant}`.
pub fn project_rows(target: &DMatrix<f64>, keep: &[bool], root_row: usize) -> DMatrix<f64> {
    let mut out = target.clone();
    project_rows_in_place(&mut out, keep, root_row);
    out
}

pub(crate) fn project_rows_in_place(m: &mut DMatrix<f64>, keep: &[bool], root_row: usize) {
    for (u, mut row) in m.row_iter_mut().enumerate() {
        if u == root_row {
            let mean = row.mean();
            row.fill(mean);
        } else if !keep[u] {
            row.fill(0.0);
        }
    }
}

/// Projection onto matrices vanishing outside `pattern` (diagonal always
/// retained).
pub fn project_pattern(target: &DMatrix<f64>, pattern: &DMatrix<bool>) -> DMatrix<f64> {
    let mut out = target.clone();
    project_pattern_in_place(&mut out, pattern);
    out
}

pub(crate) fn project_pattern_in_place(m: &mut DMatrix<f64>, pattern: &DMatrix<bool>) {
    let p = m.nrows();
    for j in 0..p {
        for i in 0..p {
            if i != j && !pattern[(i, j)] {
                m[(i, j)] = 0.0;
            }
        }
    }
}
