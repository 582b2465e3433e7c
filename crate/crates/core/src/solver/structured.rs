//! Joint projection onto `{(Ω, Γ, D) : Ω = AΓ + D, D diagonal, D ≥ 0}`.
//!
//! Writing `Ã = [A; I]`, `M̃ = [Ω_target; Γ_target]` and `D̃ = [D; 0]`, the
//! subproblem is `min ½‖ÃΓ + D̃ − M̃‖²_F`. For fixed `D` the optimal
//! `Γ = (AᵀA + I)⁻¹ (Aᵀ(Ω_target − D) + Γ_target)`; substituting back leaves
//! `min ½‖B − C·D‖²_F` with `C = [I_p; 0] − Ã(AᵀA + I)⁻¹Aᵀ`, which decouples
//! per column: `d_j = max(B_jᵀC_j, 0) / C_jᵀC_j`. Since `I − Ã(ÃᵀÃ)⁻¹Ãᵀ` is an
//! orthogonal projector, `B_jᵀC_j = M̃_jᵀC_j` and `B` never needs forming.

use nalgebra::{DMatrix, DVector};

use crate::tree::AncestorMatrix;

/// Quantities of the structured projection that depend only on `A`.
#[derive(Debug, Clone)]
pub struct StructuredFactor {
    /// `A` restricted to the active columns (`p×m`).
    a: DMatrix<f64>,
    /// Tree-node index of each active column.
    columns: Vec<usize>,
    n_nodes: usize,
    root: usize,
    /// `(AᵀA + I)⁻¹` (`m×m`).
    gram_inv: DMatrix<f64>,
    /// Top `p×p` block of `C`: `I − A(AᵀA + I)⁻¹Aᵀ`.
    c_top: DMatrix<f64>,
    /// Bottom `m×p` block of `C`: `−(AᵀA + I)⁻¹Aᵀ`.
    c_bottom: DMatrix<f64>,
    /// Squared column norms `C_jᵀC_j`.
    c_norm_sq: Vec<f64>,
}

/// Output of [`structured_update`].
#[derive(Debug, Clone)]
pub struct StructuredUpdate {
    pub omega: DMatrix<f64>,
    /// Full `|T|×p` matrix; rows of inactive nodes are zero.
    pub gamma: DMatrix<f64>,
    pub d: DVector<f64>,
    /// Columns with `C_jᵀC_j = 0`, for which `d_j` was set to zero.
    pub degenerate: Vec<usize>,
}

impl StructuredFactor {
    /// Factor over all columns of `A`.
    pub fn new(a: &AncestorMatrix) -> Self {
        let all: Vec<usize> = (0..a.n_nodes()).collect();
        Self::restricted(a, &all)
    }

    /// Factor over the columns `active` of `A` (the remaining rows of Γ are
    /// held at zero).
    pub fn restricted(a: &AncestorMatrix, active: &[usize]) -> Self {
        let p = a.n_vars();
        let m = active.len();
        let sub = DMatrix::from_fn(p, m, |j, c| a.a[(j, active[c])]);
        let gram = sub.tr_mul(&sub) + DMatrix::identity(m, m);
        let gram_inv = gram
            .cholesky()
            .expect("AᵀA + I is positive definite")
            .inverse();
        let c_bottom = -(&gram_inv * sub.transpose());
        let c_top = DMatrix::identity(p, p) + &sub * &c_bottom;
        let c_norm_sq = (0..p)
            .map(|j| c_top.column(j).norm_squared() + c_bottom.column(j).norm_squared())
            .collect();
        Self {
            a: sub,
            columns: active.to_vec(),
            n_nodes: a.n_nodes(),
            root: a.root_column,
            gram_inv,
            c_top,
            c_bottom,
            c_norm_sq,
        }
    }

    pub fn n_vars(&self) -> usize {
        self.a.nrows()
    }

    pub fn n_nodes(&self) -> usize {
        self.n_nodes
    }

    /// Row of Γ holding the root node.
    pub fn root(&self) -> usize {
        self.root
    }

    pub fn active_columns(&self) -> &[usize] {
        &self.columns
    }

    /// `A` restricted to the active columns.
    pub fn active_a(&self) -> &DMatrix<f64> {
        &self.a
    }
}

/// Projects `(target_omega, target_gamma)` onto `Ω = AΓ + D`, `D ≥ 0`
/// diagonal, in the joint Frobenius norm.
pub fn structured_update(
    factor: &StructuredFactor,
    target_omega: &DMatrix<f64>,
    target_gamma: &DMatrix<f64>,
) -> StructuredUpdate {
    let p = factor.n_vars();
    let mut out = StructuredUpdate {
        omega: DMatrix::zeros(p, p),
        gamma: DMatrix::zeros(factor.n_nodes, p),
        d: DVector::zeros(p),
        degenerate: Vec::new(),
    };
    let mut scratch = StructuredScratch::new(factor);
    structured_update_into(factor, target_omega, target_gamma, &mut out, &mut scratch);
    out
}

/// Work buffers for [`structured_update_into`].
#[derive(Debug, Clone)]
pub(crate) struct StructuredScratch {
    gamma_active: DMatrix<f64>,
    rhs_omega: DMatrix<f64>,
    rhs: DMatrix<f64>,
    gamma_sub: DMatrix<f64>,
}

impl StructuredScratch {
    pub(crate) fn new(factor: &StructuredFactor) -> Self {
        let p = factor.n_vars();
        let m = factor.columns.len();
        Self {
            gamma_active: DMatrix::zeros(m, p),
            rhs_omega: DMatrix::zeros(p, p),
            rhs: DMatrix::zeros(m, p),
            gamma_sub: DMatrix::zeros(m, p),
        }
    }
}

pub(crate) fn structured_update_into(
    factor: &StructuredFactor,
    target_omega: &DMatrix<f64>,
    target_gamma: &DMatrix<f64>,
    out: &mut StructuredUpdate,
    scratch: &mut StructuredScratch,
) {
    let p = factor.n_vars();
    assert_eq!(target_omega.shape(), (p, p), "Ω target shape");
    assert_eq!(target_gamma.shape(), (factor.n_nodes, p), "Γ target shape");

    let gamma_active = &mut scratch.gamma_active;
    for (c, &u) in factor.columns.iter().enumerate() {
        gamma_active.row_mut(c).copy_from(&target_gamma.row(u));
    }

    out.degenerate.clear();
    for j in 0..p {
        let denom = factor.c_norm_sq[j];
        if denom == 0.0 {
            out.degenerate.push(j);
            out.d[j] = 0.0;
            continue;
        }
        let num = target_omega.column(j).dot(&factor.c_top.column(j))
            + gamma_active.column(j).dot(&factor.c_bottom.column(j));
        out.d[j] = num.max(0.0) / denom;
    }

    scratch.rhs_omega.copy_from(target_omega);
    for j in 0..p {
        scratch.rhs_omega[(j, j)] -= out.d[j];
    }
    scratch.rhs.copy_from(gamma_active);
    scratch.rhs.gemm_tr(1.0, &factor.a, &scratch.rhs_omega, 1.0);
    scratch
        .gamma_sub
        .gemm(1.0, &factor.gram_inv, &scratch.rhs, 0.0);

    out.omega.gemm(1.0, &factor.a, &scratch.gamma_sub, 0.0);
    for j in 0..p {
        out.omega[(j, j)] += out.d[j];
    }
    out.gamma.fill(0.0);
    for (c, &u) in factor.columns.iter().enumerate() {
        out.gamma.row_mut(u).copy_from(&scratch.gamma_sub.row(c));
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tree::{ancestor_matrix, AggregationTree, TreeSpec};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn names(p: usize) -> Vec<String> {
        (1..=p).map(|j| format!("X{j}")).collect()
    }

    fn small_tree() -> AncestorMatrix {
        let mut s = TreeSpec::default();
        s.push("r", None, "root");
        s.push("g", Some("r"), "g");
        s.push("a", Some("g"), "X1");
        s.push("b", Some("g"), "X2");
        s.push("c", Some("r"), "X3");
        s.push("d", Some("r"), "X4");
        ancestor_matrix(&AggregationTree::from_spec(&s, &names(4)).unwrap())
    }

    #[test]
    fn output_satisfies_the_constraint_exactly() {
        let a = small_tree();
        let f = StructuredFactor::new(&a);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let to = DMatrix::from_fn(4, 4, |_, _| rng.gen_range(-1.0..1.0));
        let tg = DMatrix::from_fn(a.n_nodes(), 4, |_, _| rng.gen_range(-1.0..1.0));
        let out = structured_update(&f, &to, &tg);
        let mut rebuilt = &a.a * &out.gamma;
        for j in 0..4 {
            rebuilt[(j, j)] += out.d[j];
        }
        assert_eq!(rebuilt, out.omega);
        assert!(out.d.iter().all(|v| *v >= 0.0));
        assert!(out.degenerate.is_empty());
    }

    #[test]
    fn feasible_targets_are_fixed_points() {
        let a = small_tree();
        let f = StructuredFactor::new(&a);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let g = DMatrix::from_fn(a.n_nodes(), 4, |_, _| rng.gen_range(-1.0..1.0));
        let d = [0.5, 0.0, 1.5, 0.25];
        let mut omega = &a.a * &g;
        for j in 0..4 {
            omega[(j, j)] += d[j];
        }
        let out = structured_update(&f, &omega, &g);
        assert!((&out.omega - &omega).amax() < 1e-12);
        assert!((&out.gamma - &g).amax() < 1e-12);
        for j in 0..4 {
            assert!((out.d[j] - d[j]).abs() < 1e-12);
        }
    }

    #[test]
    fn restricted_factor_zeroes_inactive_rows() {
        let a = small_tree();
        let f = StructuredFactor::restricted(&a, &[0, 1]);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let to = DMatrix::from_fn(4, 4, |_, _| rng.gen_range(-1.0..1.0));
        let tg = DMatrix::from_fn(a.n_nodes(), 4, |_, _| rng.gen_range(-1.0..1.0));
        let out = structured_update(&f, &to, &tg);
        for u in 2..a.n_nodes() {
            assert!(out.gamma.row(u).iter().all(|v| v.to_bits() == 0));
        }
    }
    #[test]
    fn no_nearby_feasible_point_does_better() {
        let a = small_tree();
        let f = StructuredFactor::new(&a);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let objective =
            |omega: &DMatrix<f64>, gamma: &DMatrix<f64>, to: &DMatrix<f64>, tg: &DMatrix<f64>| {
                0.5 * ((omega - to).norm_squared() + (gamma - tg).norm_squared())
            };
        for _ in 0..20 {
            let to = DMatrix::from_fn(4, 4, |_, _| rng.gen_range(-2.0..2.0));
            let tg = DMatrix::from_fn(a.n_nodes(), 4, |_, _| rng.gen_range(-2.0..2.0));
            let out = structured_update(&f, &to, &tg);
            let best = objective(&out.omega, &out.gamma, &to, &tg);
            for _ in 0..200 {
                let g = &out.gamma
                    + DMatrix::from_fn(a.n_nodes(), 4, |_, _| rng.gen_range(-0.05..0.05));
                let mut omega = &a.a * &g;
                for j in 0..4 {
                    omega[(j, j)] += (out.d[j] + rng.gen_range(-0.05..0.05)).max(0.0);
                }
                assert!(objective(&omega, &g, &to, &tg) >= best - 1e-12);
            }
        }
    }
}
