//! One stage of consensus ADMM over three Ω copies and two Γ copies.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use super::prox::{
    group_rows_in_place, l1_offdiag_in_place, project_pattern_in_place, project_rows_in_place,
    prox_logdet_into,
};
use super::structured::{
    structured_update_into, StructuredFactor, StructuredScratch, StructuredUpdate,
};
use super::Penalties;
use crate::error::{Error, Result};
use crate::model::SampleCovariance;

/// Starting point `(Ω₀, Γ₀)` of a stage, optionally with dual variables
/// carried over from a previous stage.
#[derive(Debug, Clone, PartialEq)]
pub struct WarmStart {
    pub omega: DMatrix<f64>,
    pub gamma: DMatrix<f64>,
    pub duals: Option<Duals>,
}

/// Dual variables `U⁽¹⁾..U⁽³⁾` and `U⁽⁴⁾, U⁽⁵⁾`.
#[derive(Debug, Clone, PartialEq)]
pub struct Duals {
    pub omega: [DMatrix<f64>; 3],
    pub gamma: [DMatrix<f64>; 2],
}

impl WarmStart {
    pub fn zeros(p: usize, n_nodes: usize) -> Self {
        Self {
            omega: DMatrix::zeros(p, p),
            gamma: DMatrix::zeros(n_nodes, p),
            duals: None,
        }
    }
}

/// How a stage initializes its dual variables.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DualStart {
    /// Each dual starts at the warm-start value of its block (`U⁽ⁱ⁾ = Ω₀`,
    /// `U⁽ʲ⁺³⁾ = Γ₀`).
    WarmValues,
    /// Duals start at zero in every stage.
    Zero,
    /// Duals are carried over from the previous stage (zero in the first).
    #[default]
    Carry,
}

/// Consensus residuals `max_i ‖Ω⁽ⁱ⁾ − Ω̂‖_F` and `max_j ‖Γ⁽ʲ⁾ − Γ̂‖_F`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Residuals {
    pub omega: f64,
    pub gamma: f64,
}

impl Residuals {
    pub fn max(&self) -> f64 {
        self.omega.max(self.gamma)
    }
}

/// Largest absolute entry of the averaged duals `Ū^Ω`, `Ū^Γ` entering the
/// consensus step of one iteration.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DualMeans {
    pub omega: f64,
    pub gamma: f64,
}

/// How the Ω⁽³⁾ and Γ⁽¹⁾ copies are updated.
#[derive(Debug, Clone, Copy)]
pub(crate) enum CopyRule<'a> {
    /// Penalized problem: ℓ₁ and group soft-thresholding.
    Penalized(Penalties),
    /// Constrained refit: projections onto a fixed sparsity pattern and a
    /// fixed set of retained tree nodes.
    Constrained {
        keep_rows: &'a [bool],
        pattern: &'a DMatrix<bool>,
    },
}

/// Full iterate of the splitting after a stage.
#[derive(Debug, Clone)]
pub struct AdmmState {
    /// `Ω⁽¹⁾` (log-det prox), `Ω⁽²⁾` (structured), `Ω⁽³⁾` (sparsity).
    pub omega_copies: [DMatrix<f64>; 3],
    /// `Γ⁽¹⁾` (group prox), `Γ⁽²⁾` (structured).
    pub gamma_copies: [DMatrix<f64>; 2],
    pub d: DVector<f64>,
    pub consensus_omega: DMatrix<f64>,
    pub consensus_gamma: DMatrix<f64>,
    /// `U⁽¹⁾..U⁽³⁾`.
    pub duals_omega: [DMatrix<f64>; 3],
    /// `U⁽⁴⁾, U⁽⁵⁾`.
    pub duals_gamma: [DMatrix<f64>; 2],
    pub rho: f64,
    pub iterations: usize,
    /// Averaged duals used at each iteration, in order.
    pub dual_means: Vec<DualMeans>,
    /// Columns flagged degenerate by the structured update.
    pub degenerate_columns: Vec<usize>,
}

impl AdmmState {
    pub fn residuals(&self) -> Residuals {
        let omega = self
            .omega_copies
            .iter()
            .map(|c| (c - &self.consensus_omega).norm())
            .fold(0.0, f64::max);
        let gamma = self
            .gamma_copies
            .iter()
            .map(|c| (c - &self.consensus_gamma).norm())
            .fold(0.0, f64::max);
        Residuals { omega, gamma }
    }

    /// Consensus point and duals, for starting the next stage.
    pub fn warm_start(&self) -> WarmStart {
        WarmStart {
            omega: self.consensus_omega.clone(),
            gamma: self.consensus_gamma.clone(),
            duals: Some(Duals {
                omega: self.duals_omega.clone(),
                gamma: self.duals_gamma.clone(),
            }),
        }
    }
}

/// Runs `maxit` iterations (at least one) of the penalized ADMM at fixed
/// `rho`, starting from `warm`.
pub fn admm_stage(
    s: &SampleCovariance,
    factor: &StructuredFactor,
    penalties: Penalties,
    rho: f64,
    maxit: usize,
    warm: &WarmStart,
) -> Result<AdmmState> {
    run_stage(
        s,
        factor,
        CopyRule::Penalized(penalties),
        rho,
        maxit,
        warm,
        DualStart::WarmValues,
        None,
        0,
    )
}

fn max_abs(m: &DMatrix<f64>) -> f64 {
    m.iter().fold(0.0f64, |acc, v| acc.max(v.abs()))
}

/// `out = a − c·b`, elementwise.
fn sub_scaled(out: &mut DMatrix<f64>, a: &DMatrix<f64>, c: f64, b: &DMatrix<f64>) {
    for ((o, x), y) in out
        .as_mut_slice()
        .iter_mut()
        .zip(a.as_slice())
        .zip(b.as_slice())
    {
        *o = x - c * y;
    }
}

/// `u += ρ(copy − hat)`, elementwise.
fn dual_step(u: &mut DMatrix<f64>, rho: f64, copy: &DMatrix<f64>, hat: &DMatrix<f64>) {
    for ((o, x), y) in u
        .as_mut_slice()
        .iter_mut()
        .zip(copy.as_slice())
        .zip(hat.as_slice())
    {
        *o += rho * (x - y);
    }
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn run_stage(
    s: &SampleCovariance,
    factor: &StructuredFactor,
    rule: CopyRule<'_>,
    rho: f64,
    maxit: usize,
    warm: &WarmStart,
    dual_start: DualStart,
    tolerance: Option<f64>,
    stage: usize,
) -> Result<AdmmState> {
    let p = s.dim();
    let t = factor.n_nodes();
    if warm.omega.shape() != (p, p) || warm.gamma.shape() != (t, p) {
        return Err(Error::Dimension(format!(
            "warm start shapes {:?}/{:?} do not match p = {p}, |T| = {t}",
            warm.omega.shape(),
            warm.gamma.shape()
        )));
    }
    let root = factor.root();
    let s_mat = s.as_matrix();
    let inv_rho = 1.0 / rho;

    let mut omega_hat = warm.omega.clone();
    let mut gamma_hat = warm.gamma.clone();
    let zo = || DMatrix::zeros(p, p);
    let zg = || DMatrix::zeros(t, p);
    let (mut u, mut v) = match (dual_start, &warm.duals) {
        (DualStart::WarmValues, _) => (
            [warm.omega.clone(), warm.omega.clone(), warm.omega.clone()],
            [warm.gamma.clone(), warm.gamma.clone()],
        ),
        (DualStart::Carry, Some(du)) => {
            if du.omega.iter().any(|m| m.shape() != (p, p))
                || du.gamma.iter().any(|m| m.shape() != (t, p))
            {
                return Err(Error::Dimension("carried dual shapes do not match".into()));
            }
            (du.omega.clone(), du.gamma.clone())
        }
        _ => ([zo(), zo(), zo()], [zg(), zg()]),
    };
    let mut omega1 = zo();
    let mut omega3 = zo();
    let mut gamma1 = zg();
    let mut upd = StructuredUpdate {
        omega: zo(),
        gamma: zg(),
        d: DVector::zeros(p),
        degenerate: Vec::new(),
    };
    let mut scratch = StructuredScratch::new(factor);
    let mut target_o = zo();
    let mut target_g = zg();
    let mut ubar_omega = zo();
    let mut ubar_gamma = zg();
    let mut dual_means = Vec::with_capacity(maxit.max(1));

    let iterations = maxit.max(1);
    let mut done = 0;
    for k in 1..=iterations {
        for (((o, a), b), c) in ubar_omega
            .as_mut_slice()
            .iter_mut()
            .zip(u[0].as_slice())
            .zip(u[1].as_slice())
            .zip(u[2].as_slice())
        {
            *o = ((a + b) + c) / 3.0;
        }
        for ((o, a), b) in ubar_gamma
            .as_mut_slice()
            .iter_mut()
            .zip(v[0].as_slice())
            .zip(v[1].as_slice())
        {
            *o = (a + b) / 2.0;
        }
        dual_means.push(DualMeans {
            omega: max_abs(&ubar_omega),
            gamma: max_abs(&ubar_gamma),
        });

        // Ω⁽¹⁾: prox of −logdet + tr(S·) at ρΩ̂ − U⁽¹⁾.
        for ((o, x), y) in target_o
            .as_mut_slice()
            .iter_mut()
            .zip(omega_hat.as_slice())
            .zip(u[0].as_slice())
        {
            *o = rho * x - y;
        }
        prox_logdet_into(&target_o, s_mat, rho, &mut omega1).map_err(|_| Error::Diverged {
            stage,
            iteration: k,
        })?;

        sub_scaled(&mut omega3, &omega_hat, inv_rho, &u[2]);
        sub_scaled(&mut gamma1, &gamma_hat, inv_rho, &v[0]);
        match rule {
            CopyRule::Penalized(pen) => {
                l1_offdiag_in_place(&mut omega3, rho, pen.lambda2);
                group_rows_in_place(&mut gamma1, rho, pen.lambda1, root);
            }
            CopyRule::Constrained { keep_rows, pattern } => {
                project_pattern_in_place(&mut omega3, pattern);
                project_rows_in_place(&mut gamma1, keep_rows, root);
            }
        }

        sub_scaled(&mut target_o, &omega_hat, inv_rho, &u[1]);
        sub_scaled(&mut target_g, &gamma_hat, inv_rho, &v[1]);
        structured_update_into(factor, &target_o, &target_g, &mut upd, &mut scratch);

        // Consensus: Ω̂ = Ω̄ + Ū/ρ, Γ̂ = Γ̄ + Ū/ρ.
        let mut finite = true;
        for ((((o, a), b), c), w) in omega_hat
            .as_mut_slice()
            .iter_mut()
            .zip(omega1.as_slice())
            .zip(upd.omega.as_slice())
            .zip(omega3.as_slice())
            .zip(ubar_omega.as_slice())
        {
            *o = ((a + b) + c) / 3.0 + inv_rho * w;
            finite &= o.is_finite();
        }
        for (((o, a), b), w) in gamma_hat
            .as_mut_slice()
            .iter_mut()
            .zip(gamma1.as_slice())
            .zip(upd.gamma.as_slice())
            .zip(ubar_gamma.as_slice())
        {
            *o = (a + b) / 2.0 + inv_rho * w;
            finite &= o.is_finite();
        }
        if !finite {
            return Err(Error::Diverged {
                stage,
                iteration: k,
            });
        }

        // The duals average to zero after every update; store the last copy
        // of each block as the negated sum of the others so the average is
        // exactly zero.
        dual_step(&mut u[0], rho, &omega1, &omega_hat);
        dual_step(&mut u[1], rho, &upd.omega, &omega_hat);
        {
            let [u0, u1, u2] = &mut u;
            for ((o, a), b) in u2
                .as_mut_slice()
                .iter_mut()
                .zip(u0.as_slice())
                .zip(u1.as_slice())
            {
                *o = -(a + b);
            }
        }
        dual_step(&mut v[0], rho, &gamma1, &gamma_hat);
        {
            let [v0, v1] = &mut v;
            for (o, a) in v1.as_mut_slice().iter_mut().zip(v0.as_slice()) {
                *o = -a;
            }
        }
        done = k;

        if let Some(tol) = tolerance {
            let r = stage_residual(
                &[&omega1, &upd.omega, &omega3],
                &[&gamma1, &upd.gamma],
                &omega_hat,
                &gamma_hat,
            );
            if r <= tol {
                break;
            }
        }
    }

    Ok(AdmmState {
        omega_copies: [omega1, upd.omega, omega3],
        gamma_copies: [gamma1, upd.gamma],
        d: upd.d,
        consensus_omega: omega_hat,
        consensus_gamma: gamma_hat,
        duals_omega: u,
        duals_gamma: v,
        rho,
        iterations: done,
        dual_means,
        degenerate_columns: upd.degenerate,
    })
}

fn stage_residual(
    omega_copies: &[&DMatrix<f64>; 3],
    gamma_copies: &[&DMatrix<f64>; 2],
    omega_hat: &DMatrix<f64>,
    gamma_hat: &DMatrix<f64>,
) -> f64 {
    let a = omega_copies
        .iter()
        .map(|c| (*c - omega_hat).norm())
        .fold(0.0, f64::max);
    let b = gamma_copies
        .iter()
        .map(|c| (*c - gamma_hat).norm())
        .fold(0.0, f64::max);
    a.max(b)
}
