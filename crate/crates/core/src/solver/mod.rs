//! Locally adaptive ADMM for the tree-aggregated graphical lasso.
//!
//! The estimator solves
//!
//! ```text
//! min −logdet(Ω) + tr(SΩ) + λ₁ Σ_{u ≠ root} ‖γ_u‖₂ + λ₂ Σ_{i≠j} |Ω_ij|
//! s.t. Ω ≻ 0, Ω = AΓ + D, γ_root = γ·1, D diagonal ≥ 0
//! ```
//!
//! by splitting Ω into three copies and Γ into two, each handled by a
//! closed-form map ([`prox`], [`structured`]). Stages are restarted with the
//! penalty parameter multiplied by `rho_factor`, warm-started from the
//! previous consensus.

pub mod admm;
pub mod prox;
pub mod structured;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

pub use admm::{admm_stage, AdmmState, DualMeans, DualStart, Duals, Residuals, WarmStart};
pub use prox::{prox_group_rows, prox_l1_offdiag, prox_logdet, soft_threshold};
pub use structured::{structured_update, StructuredFactor, StructuredUpdate};

use crate::error::{Error, Result};
use crate::model::{SampleCovariance, SymmetricMatrix};
use crate::support::EdgeSupport;
use crate::tree::{
    ancestor_matrix, decode_partition, AggregationTree, AncestorMatrix, GammaMatrix, Partition,
};
use admm::{run_stage, CopyRule};

/// Aggregation (`lambda1`) and edge-sparsity (`lambda2`) penalties.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Penalties {
    pub lambda1: f64,
    pub lambda2: f64,
}

impl Penalties {
    pub fn new(lambda1: f64, lambda2: f64) -> Result<Self> {
        let p = Self { lambda1, lambda2 };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("lambda1", self.lambda1), ("lambda2", self.lambda2)] {
            if !v.is_finite() || v < 0.0 {
                return Err(Error::InvalidInput(format!(
                    "{name} must be finite and ≥ 0, got {v}"
                )));
            }
        }
        Ok(())
    }
}

/// Stage schedule of the locally adaptive ADMM.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SolverConfig {
    /// Penalty parameter of the first stage.
    pub rho1: f64,
    pub t_stages: usize,
    /// Iterations per stage.
    pub maxit: usize,
    /// Multiplier applied to rho between stages.
    pub rho_factor: f64,
    /// Optional early exit when the consensus residual drops below this
    /// value. Off by default: every stage runs `maxit` iterations.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tolerance: Option<f64>,
    /// Dual initialization at the start of each stage.
    #[serde(default)]
    pub dual_start: DualStart,
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self {
            rho1: 0.01,
            t_stages: 10,
            maxit: 100,
            rho_factor: 2.0,
            tolerance: None,
            dual_start: DualStart::default(),
        }
    }
}

impl SolverConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.rho1 > 0.0 && self.rho1.is_finite()) {
            return Err(Error::InvalidInput(format!(
                "rho1 must be > 0, got {}",
                self.rho1
            )));
        }
        if self.t_stages < 1 || self.maxit < 1 {
            return Err(Error::InvalidInput("t_stages and maxit must be ≥ 1".into()));
        }
        if !(self.rho_factor > 1.0 && self.rho_factor.is_finite()) {
            return Err(Error::InvalidInput(format!(
                "rho_factor must be > 1, got {}",
                self.rho_factor
            )));
        }
        Ok(())
    }

    /// Penalty parameter used in stage `t` (0-based).
    pub fn rho_at(&self, t: usize) -> f64 {
        self.rho1 * self.rho_factor.powi(t as i32)
    }
}

/// Ancestor matrix and structured factor of a tree, reusable across fits.
#[derive(Debug, Clone)]
pub struct PreparedTree {
    pub ancestors: AncestorMatrix,
    pub factor: StructuredFactor,
}

impl PreparedTree {
    pub fn new(tree: &AggregationTree) -> Self {
        let ancestors = ancestor_matrix(tree);
        let factor = StructuredFactor::new(&ancestors);
        Self { ancestors, factor }
    }

    pub fn n_vars(&self) -> usize {
        self.ancestors.n_vars()
    }

    pub fn n_nodes(&self) -> usize {
        self.ancestors.n_nodes()
    }
}

/// Solution of the penalized problem.
#[derive(Debug, Clone)]
pub struct TagLassoFit {
    /// Symmetrized consensus Ω̂.
    pub omega: SymmetricMatrix,
    /// Γ̂ from the group-prox copy (exact zero rows).
    pub gamma: GammaMatrix,
    /// Consensus Γ.
    pub consensus_gamma: DMatrix<f64>,
    pub d: Vec<f64>,
    /// Nonzero pattern of the sparsity copy Ω⁽³⁾.
    pub support: EdgeSupport,
    /// Tree nodes with nonzero Γ̂ rows (root included).
    pub aggregation_set: Vec<usize>,
    pub partition: Partition,
    pub residuals: Residuals,
    /// Largest `|Ū|` entering a consensus step after the first iteration of
    /// any stage (zero by construction).
    pub late_dual_mean: f64,
    pub penalties: Penalties,
    pub config: SolverConfig,
}

impl TagLassoFit {
    pub fn k(&self) -> usize {
        self.partition.k()
    }

    /// Warm start taken from this fit's consensus iterate.
    pub fn warm_start(&self) -> WarmStart {
        WarmStart {
            omega: self.omega.as_matrix().clone(),
            gamma: self.consensus_gamma.clone(),
            duals: None,
        }
    }
}

/// Final state of a staged run.
pub(crate) struct ScheduleOutcome {
    pub state: AdmmState,
    /// Largest averaged dual seen after the first iteration of any stage.
    pub late_dual_mean: f64,
}

/// Runs all stages of the schedule and returns the last stage's state.
pub(crate) fn run_schedule(
    s: &SampleCovariance,
    factor: &StructuredFactor,
    rule: CopyRule<'_>,
    config: &SolverConfig,
    warm: WarmStart,
) -> Result<ScheduleOutcome> {
    config.validate()?;
    let mut warm = warm;
    let mut last = None;
    let mut late_dual_mean = 0.0f64;
    for t in 0..config.t_stages {
        let state = run_stage(
            s,
            factor,
            rule,
            config.rho_at(t),
            config.maxit,
            &warm,
            config.dual_start,
            config.tolerance,
            t + 1,
        )?;
        for dm in state.dual_means.iter().skip(1) {
            late_dual_mean = late_dual_mean.max(dm.omega).max(dm.gamma);
        }
        warm = state.warm_start();
        last = Some(state);
    }
    Ok(ScheduleOutcome {
        state: last.expect("at least one stage"),
        late_dual_mean,
    })
}

/// Fits the tag-lasso with a prepared tree.
pub fn la_admm_prepared(
    s: &SampleCovariance,
    tree: &PreparedTree,
    penalties: Penalties,
    config: &SolverConfig,
) -> Result<TagLassoFit> {
    let p = s.dim();
    if tree.n_vars() != p {
        return Err(Error::Dimension(format!(
            "tree has {} leaves but S is {p}x{p}",
            tree.n_vars()
        )));
    }
    penalties.validate()?;
    let warm = WarmStart::zeros(p, tree.n_nodes());
    let out = run_schedule(
        s,
        &tree.factor,
        CopyRule::Penalized(penalties),
        config,
        warm,
    )?;
    let mut fit = extract_fit(&out.state, tree, penalties, *config);
    fit.late_dual_mean = out.late_dual_mean;
    Ok(fit)
}

fn extract_fit(
    state: &AdmmState,
    tree: &PreparedTree,
    penalties: Penalties,
    config: SolverConfig,
) -> TagLassoFit {
    let gamma = GammaMatrix {
        gamma: state.gamma_copies[0].clone(),
        root_row: tree.ancestors.root_column,
    };
    let aggregation_set = gamma.support(0.0);
    let partition = decode_partition(&gamma, &tree.ancestors, 0.0);
    TagLassoFit {
        omega: SymmetricMatrix::symmetrize(&state.consensus_omega),
        gamma,
        consensus_gamma: state.consensus_gamma.clone(),
        d: state.d.iter().copied().collect(),
        support: EdgeSupport::from_nonzeros(&state.omega_copies[2]),
        aggregation_set,
        partition,
        residuals: state.residuals(),
        late_dual_mean: 0.0,
        penalties,
        config,
    }
}

/// Fits the tag-lasso on sample covariance `s` with side-information `tree`.
pub fn la_admm(
    s: &SampleCovariance,
    tree: &AggregationTree,
    penalties: Penalties,
    config: &SolverConfig,
) -> Result<TagLassoFit> {
    if tree.n_leaves() != s.dim() {
        return Err(Error::Dimension(format!(
            "tree has {} leaves but S is {1}x{1}",
            tree.n_leaves(),
            s.dim()
        )));
    }
    la_admm_prepared(s, &PreparedTree::new(tree), penalties, config)
}

/// Default variable names `V1..Vp`.
pub fn default_names(p: usize) -> Vec<String> {
    (1..=p).map(|j| format!("V{j}")).collect()
}

/// Graphical lasso: the tag-lasso with `λ₁ = 0` on a star tree. The reported
/// partition is always the singleton partition.
pub fn fit_glasso(
    s: &SampleCovariance,
    lambda2: f64,
    config: &SolverConfig,
) -> Result<TagLassoFit> {
    let p = s.dim();
    if p < 2 {
        return Err(Error::InvalidInput("glasso needs p ≥ 2".into()));
    }
    let tree = PreparedTree::new(&AggregationTree::star(&default_names(p)));
    fit_glasso_prepared(s, &tree, lambda2, config)
}

pub(crate) fn fit_glasso_prepared(
    s: &SampleCovariance,
    star: &PreparedTree,
    lambda2: f64,
    config: &SolverConfig,
) -> Result<TagLassoFit> {
    let mut fit = la_admm_prepared(s, star, Penalties::new(0.0, lambda2)?, config)?;
    fit.partition = Partition::singletons(s.dim());
    Ok(fit)
}
