//! Penalty grids, K-fold cross-validation and constrained selection.

use nalgebra::DMatrix;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::model::SymmetricMatrix;
use crate::model::{covariance_about, neg_log_likelihood, sample_covariance, SampleCovariance};
use crate::refit::{check_feasibility, refit_prepared, ConstraintSet, Feasibility, RefitResult};
use crate::solver::{
    default_names, fit_glasso_prepared, la_admm_prepared, Penalties, PreparedTree, SolverConfig,
    TagLassoFit,
};
use crate::support::EdgeSupport;
use crate::tree::AggregationTree;

/// Ratio between the smallest and largest value of each penalty grid.
pub const GRID_EPS: f64 = 1e-3;

/// Cross-validation scores over a `λ₁ × λ₂` grid and the chosen cell.
#[derive(Debug, Clone, PartialEq)]
pub struct SelectionGrid {
    pub lambda1_values: Vec<f64>,
    pub lambda2_values: Vec<f64>,
    /// `cv_scores[(i, j)]` is the score of `(lambda1_values[i], lambda2_values[j])`.
    pub cv_scores: DMatrix<f64>,
    pub chosen: Penalties,
    pub chosen_cell: (usize, usize),
}

/// `size` values log-spaced from `max` down to `eps·max`.
pub fn log_grid(max: f64, size: usize, eps: f64) -> Vec<f64> {
    if size == 1 {
        return vec![max];
    }
    (0..size)
        .map(|i| max * eps.powf(i as f64 / (size - 1) as f64))
        .collect()
}

/// Median of a log-spaced grid (geometric mean of the two middle values when
/// the length is even).
fn log_median(values: &[f64]) -> f64 {
    let n = values.len();
    if n % 2 == 1 {
        values[n / 2]
    } else {
        (values[n / 2 - 1] * values[n / 2]).sqrt()
    }
}

/// Smallest `λ₂` for which the glasso has no off-diagonal support.
pub fn lambda2_max(s: &SampleCovariance) -> f64 {
    s.max_abs_offdiag()
}

/// Smallest `λ₁` on a doubling (or halving) sequence started at `start`
/// whose fit at `lambda2` has a single block.
pub fn lambda1_max(
    s: &SampleCovariance,
    tree: &PreparedTree,
    lambda2: f64,
    start: f64,
    config: &SolverConfig,
) -> Result<f64> {
    const MAX_STEPS: usize = 40;
    let k_at = |l1: f64| -> Result<usize> {
        Ok(la_admm_prepared(s, tree, Penalties::new(l1, lambda2)?, config)?.k())
    };
    let mut l1 = start;
    if k_at(l1)? == 1 {
        for _ in 0..MAX_STEPS {
            let next = l1 / 2.0;
            if k_at(next)? != 1 {
                return Ok(l1);
            }
            l1 = next;
        }
        return Ok(l1);
    }
    for _ in 0..MAX_STEPS {
        l1 *= 2.0;
        if k_at(l1)? == 1 {
            return Ok(l1);
        }
    }
    Err(Error::DegenerateGrid(format!(
        "no λ₁ up to {l1:e} aggregates all variables into one block"
    )))
}

/// Descending `λ₁` and `λ₂` grids of length `size`.
pub fn lambda_grid(
    s: &SampleCovariance,
    tree: &PreparedTree,
    size: usize,
    config: &SolverConfig,
) -> Result<(Vec<f64>, Vec<f64>)> {
    if s.dim() < 2 {
        return Err(Error::InvalidInput("a penalty grid needs p ≥ 2".into()));
    }
    if size == 0 {
        return Err(Error::InvalidInput("grid size must be ≥ 1".into()));
    }
    let l2max = lambda2_max(s);
    if !(l2max > 0.0) {
        return Err(Error::DegenerateGrid(
            "all off-diagonal entries of S are zero".into(),
        ));
    }
    let lambda2 = log_grid(l2max, size, GRID_EPS);
    let l1max = lambda1_max(s, tree, log_median(&lambda2), l2max, config)?;
    Ok((log_grid(l1max, size, GRID_EPS), lambda2))
}

/// Settings of a cross-validation run.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CvOptions {
    pub folds: usize,
    pub seed: u64,
    /// Score refitted estimates (tag-lasso) rather than the penalized fit
    /// (glasso baseline).
    pub refit: bool,
}

impl Default for CvOptions {
    fn default() -> Self {
        Self {
            folds: 5,
            seed: 0,
            refit: true,
        }
    }
}

/// Cross-validation result with solver diagnostics over every fold and cell.
#[derive(Debug, Clone)]
pub struct CvReport {
    pub selection: SelectionGrid,
    /// Largest final consensus residual of any penalized fit.
    pub max_fit_residual: f64,
    /// Largest final consensus residual of any refit.
    pub max_refit_residual: f64,
    /// Componentwise worst constraint violation over all refits.
    pub worst_feasibility: Option<Feasibility>,
    /// Number of refits that violated their constraints.
    pub infeasible_refits: usize,
    pub n_refits: usize,
    /// Largest distance moved by the final projection of a refit onto its
    /// constraint set.
    pub max_projection_shift: f64,
}

/// Row indices of each fold after a seeded shuffle; folds differ in size by
/// at most one.
pub fn fold_indices(n: usize, folds: usize, seed: u64) -> Result<Vec<Vec<usize>>> {
    if folds < 2 || n < folds {
        return Err(Error::InvalidInput(format!(
            "need n ≥ folds ≥ 2, got n = {n}, folds = {folds}"
        )));
    }
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let out: Vec<Vec<usize>> = (0..folds)
        .map(|k| {
            let mut f = idx[k * n / folds..(k + 1) * n / folds].to_vec();
            f.sort_unstable();
            f
        })
        .collect();
    if let Some((fold, f)) = out.iter().enumerate().find(|(_, f)| f.len() < 2) {
        return Err(Error::FoldSize {
            fold,
            rows: f.len(),
        });
    }
    Ok(out)
}

fn select_rows(data: &DMatrix<f64>, rows: &[usize]) -> DMatrix<f64> {
    DMatrix::from_fn(rows.len(), data.ncols(), |r, c| data[(rows[r], c)])
}

/// Training covariance and held-out covariance (centered by the training
/// means) of one fold.
pub fn fold_covariances(
    data: &DMatrix<f64>,
    held_out: &[usize],
) -> Result<(SampleCovariance, SampleCovariance)> {
    let mut is_test = vec![false; data.nrows()];
    for &r in held_out {
        is_test[r] = true;
    }
    let train_rows: Vec<usize> = (0..data.nrows()).filter(|&r| !is_test[r]).collect();
    let train = select_rows(data, &train_rows);
    let test = select_rows(data, held_out);
    let means: Vec<f64> = train.row_mean().iter().copied().collect();
    let s_train = sample_covariance(&train)?;
    let s_test = SampleCovariance {
        matrix: covariance_about(&test, &means),
        n: held_out.len(),
        centered: false,
    };
    Ok((s_train, s_test))
}

struct CellOutcome {
    score: f64,
    fit_residual: f64,
    refit_residual: f64,
    feasibility: Option<Feasibility>,
    projection_shift: f64,
}

/// Cross-validated negative log-likelihood over the grid `lambda1 × lambda2`.
pub fn cross_validate(
    data: &DMatrix<f64>,
    tree: &PreparedTree,
    lambda1: &[f64],
    lambda2: &[f64],
    options: &CvOptions,
    config: &SolverConfig,
) -> Result<CvReport> {
    if lambda1.is_empty() || lambda2.is_empty() {
        return Err(Error::InvalidInput("empty penalty grid".into()));
    }
    if data.ncols() != tree.n_vars() {
        return Err(Error::Dimension(format!(
            "data has {} columns but the tree has {} leaves",
            data.ncols(),
            tree.n_vars()
        )));
    }
    let folds = fold_indices(data.nrows(), options.folds, options.seed)?;
    let covs = folds
        .iter()
        .map(|f| fold_covariances(data, f))
        .collect::<Result<Vec<_>>>()?;

    let (n1, n2) = (lambda1.len(), lambda2.len());
    let tasks: Vec<(usize, usize, usize)> = (0..folds.len())
        .flat_map(|k| (0..n1).flat_map(move |i| (0..n2).map(move |j| (k, i, j))))
        .collect();
    let outcomes = tasks
        .par_iter()
        .map(|&(k, i, j)| -> Result<CellOutcome> {
            let (s_train, s_test) = &covs[k];
            let pen = Penalties::new(lambda1[i], lambda2[j])?;
            let fit = la_admm_prepared(s_train, tree, pen, config)?;
            if options.refit {
                let cs = ConstraintSet::from_fit(&fit);
                let rf = refit_prepared(s_train, tree, &cs, config, Some(fit.warm_start()))?;
                let feas = check_feasibility(&rf, &cs, tree);
                Ok(CellOutcome {
                    score: neg_log_likelihood(&rf.estimate.omega, s_test)?,
                    fit_residual: fit.residuals.max(),
                    refit_residual: rf.residuals.max(),
                    feasibility: Some(feas),
                    projection_shift: rf.projection_shift.unwrap_or(f64::INFINITY),
                })
            } else {
                Ok(CellOutcome {
                    score: neg_log_likelihood(&fit.omega, s_test)?,
                    fit_residual: fit.residuals.max(),
                    refit_residual: 0.0,
                    feasibility: None,
                    projection_shift: 0.0,
                })
            }
        })
        .collect::<Result<Vec<_>>>()?;

    let mut scores = DMatrix::zeros(n1, n2);
    let mut max_fit_residual = 0.0f64;
    let mut max_refit_residual = 0.0f64;
    let mut worst: Option<Feasibility> = None;
    let mut infeasible = 0;
    let mut n_refits = 0;
    let mut max_projection_shift = 0.0f64;
    for (&(_, i, j), o) in tasks.iter().zip(&outcomes) {
        scores[(i, j)] += o.score / folds.len() as f64;
        max_fit_residual = max_fit_residual.max(o.fit_residual);
        max_refit_residual = max_refit_residual.max(o.refit_residual);
        max_projection_shift = max_projection_shift.max(o.projection_shift);
        if let Some(f) = o.feasibility {
            n_refits += 1;
            if !f.is_feasible() {
                infeasible += 1;
            }
            worst = Some(match worst {
                None => f,
                Some(w) => Feasibility {
                    off_pattern: w.off_pattern.max(f.off_pattern),
                    outside_rows: w.outside_rows.max(f.outside_rows),
                    structure: w.structure.max(f.structure),
                },
            });
        }
    }
    let selection = choose(lambda1, lambda2, scores, |_, _| true).expect("grid is non-empty");
    Ok(CvReport {
        selection,
        max_fit_residual,
        max_refit_residual,
        worst_feasibility: worst,
        infeasible_refits: infeasible,
        n_refits,
        max_projection_shift,
    })
}

/// Argmin over the admissible cells; ties go to the larger `λ₁`, then the
/// larger `λ₂`.
fn choose(
    lambda1: &[f64],
    lambda2: &[f64],
    scores: DMatrix<f64>,
    admissible: impl Fn(usize, usize) -> bool,
) -> Option<SelectionGrid> {
    let mut best: Option<(usize, usize)> = None;
    for i in 0..lambda1.len() {
        for j in 0..lambda2.len() {
            if !admissible(i, j) || scores[(i, j)].is_nan() {
                continue;
            }
            let better = match best {
                None => true,
                Some((bi, bj)) => {
                    let (a, b) = (scores[(i, j)], scores[(bi, bj)]);
                    a < b
                        || (a == b
                            && (lambda1[i] > lambda1[bi]
                                || (lambda1[i] == lambda1[bi] && lambda2[j] > lambda2[bj])))
                }
            };
            if better {
                best = Some((i, j));
            }
        }
    }
    let (i, j) = best?;
    Some(SelectionGrid {
        lambda1_values: lambda1.to_vec(),
        lambda2_values: lambda2.to_vec(),
        cv_scores: scores,
        chosen: Penalties {
            lambda1: lambda1[i],
            lambda2: lambda2[j],
        },
        chosen_cell: (i, j),
    })
}

/// Block counts of full-data fits at every grid cell.
pub fn cell_block_counts(
    s: &SampleCovariance,
    tree: &PreparedTree,
    lambda1: &[f64],
    lambda2: &[f64],
    config: &SolverConfig,
) -> Result<DMatrix<usize>> {
    let cells: Vec<(usize, usize)> = (0..lambda1.len())
        .flat_map(|i| (0..lambda2.len()).map(move |j| (i, j)))
        .collect();
    let ks = cells
        .par_iter()
        .map(|&(i, j)| {
            Ok(la_admm_prepared(s, tree, Penalties::new(lambda1[i], lambda2[j])?, config)?.k())
        })
        .collect::<Result<Vec<usize>>>()?;
    let mut out = DMatrix::zeros(lambda1.len(), lambda2.len());
    for (&(i, j), k) in cells.iter().zip(ks) {
        out[(i, j)] = k;
    }
    Ok(out)
}

/// Best-scoring cell among those whose full-data fit has at most `k_max`
/// blocks.
pub fn constrained_select(
    selection: &SelectionGrid,
    block_counts: &DMatrix<usize>,
    k_max: usize,
) -> Result<SelectionGrid> {
    if block_counts.shape() != selection.cv_scores.shape() {
        return Err(Error::Dimension(
            "block counts do not match the grid".into(),
        ));
    }
    choose(
        &selection.lambda1_values,
        &selection.lambda2_values,
        selection.cv_scores.clone(),
        |i, j| block_counts[(i, j)] <= k_max,
    )
    .ok_or_else(|| Error::Selection {
        k_max,
        min_k: block_counts.iter().copied().min().unwrap_or(0),
    })
}

/// Cross-validated tag-lasso: grid, CV scores, full-data fit at the chosen
/// penalties and its refit.
#[derive(Debug, Clone)]
pub struct TunedFit {
    pub cv: CvReport,
    pub fit: TagLassoFit,
    /// Refit under the full-data fit's constraints; `None` for the glasso.
    pub refit: Option<RefitResult>,
    pub constraints: Option<ConstraintSet>,
}

impl TunedFit {
    /// Final precision estimate: the refit when present, the penalized fit
    /// otherwise.
    pub fn omega(&self) -> &SymmetricMatrix {
        match &self.refit {
            Some(r) => &r.estimate.omega,
            None => &self.fit.omega,
        }
    }

    /// Nonzero pattern of [`omega`](Self::omega): the refit's exact zeros
    /// when refitted, the sparsity copy's support otherwise (the consensus
    /// itself has no exact zeros).
    pub fn support(&self) -> EdgeSupport {
        match &self.refit {
            Some(r) => r.support(),
            None => self.fit.support.clone(),
        }
    }
}

/// Tag-lasso with penalties chosen by cross-validation on a `size × size`
/// grid, followed by a refit on the full data.
pub fn tune_taglasso(
    data: &DMatrix<f64>,
    tree: &PreparedTree,
    size: usize,
    options: &CvOptions,
    config: &SolverConfig,
) -> Result<TunedFit> {
    let s = sample_covariance(data)?;
    let (l1, l2) = lambda_grid(&s, tree, size, config)?;
    let cv = cross_validate(
        data,
        tree,
        &l1,
        &l2,
        &CvOptions {
            refit: true,
            ..*options
        },
        config,
    )?;
    finish_taglasso(&s, tree, cv, config)
}

/// Full-data fit and refit at the penalties chosen in `cv`.
pub fn finish_taglasso(
    s: &SampleCovariance,
    tree: &PreparedTree,
    cv: CvReport,
    config: &SolverConfig,
) -> Result<TunedFit> {
    let fit = la_admm_prepared(s, tree, cv.selection.chosen, config)?;
    let constraints = ConstraintSet::from_fit(&fit);
    let refit = refit_prepared(s, tree, &constraints, config, Some(fit.warm_start()))?;
    Ok(TunedFit {
        cv,
        fit,
        refit: Some(refit),
        constraints: Some(constraints),
    })
}

/// Glasso with `λ₂` chosen by cross-validation of the penalized estimate over
/// a `size`-point grid.
pub fn tune_glasso(
    data: &DMatrix<f64>,
    size: usize,
    options: &CvOptions,
    config: &SolverConfig,
) -> Result<TunedFit> {
    let p = data.ncols();
    let s = sample_covariance(data)?;
    if p < 2 {
        return Err(Error::InvalidInput("a penalty grid needs p ≥ 2".into()));
    }
    let l2max = lambda2_max(&s);
    if !(l2max > 0.0) {
        return Err(Error::DegenerateGrid(
            "all off-diagonal entries of S are zero".into(),
        ));
    }
    let star = PreparedTree::new(&AggregationTree::star(&default_names(p)));
    let l2 = log_grid(l2max, size, GRID_EPS);
    let cv = cross_validate(
        data,
        &star,
        &[0.0],
        &l2,
        &CvOptions {
            refit: false,
            ..*options
        },
        config,
    )?;
    let fit = fit_glasso_prepared(&s, &star, cv.selection.chosen.lambda2, config)?;
    Ok(TunedFit {
        cv,
        fit,
        refit: None,
        constraints: None,
    })
}
