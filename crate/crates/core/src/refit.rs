//! Constrained maximum-likelihood refit on a fixed aggregation set and edge
//! pattern.
//!
//! The penalized fit selects which tree nodes carry nonzero Γ rows (Ẑ) and
//! which precision entries are nonzero (P̂). The refit drops both penalties
//! and maximizes the likelihood subject to those selections, removing the
//! shrinkage bias of the penalized estimate.

use nalgebra::DMatrix;

use crate::error::{Error, Result};
use crate::model::{
    is_positive_definite, neg_log_likelihood, PrecisionEstimate, SampleCovariance, SymmetricMatrix,
    PD_TOL,
};
use crate::solver::admm::CopyRule;
use crate::solver::{
    run_schedule, PreparedTree, Residuals, SolverConfig, StructuredFactor, TagLassoFit, WarmStart,
};
use crate::support::EdgeSupport;
use crate::tree::{decode_from_nodes, AggregationTree, AncestorMatrix, GammaMatrix};

/// Retained tree nodes and permitted precision entries.
#[derive(Debug, Clone, PartialEq)]
pub struct ConstraintSet {
    /// Sorted node indices; always contains the root.
    z_hat: Vec<usize>,
    p_hat: EdgeSupport,
}

impl ConstraintSet {
    pub fn new(z_hat: &[usize], p_hat: EdgeSupport, tree: &AggregationTree) -> Result<Self> {
        if let Some(&bad) = z_hat.iter().find(|&&u| u >= tree.len()) {
            return Err(Error::InvalidInput(format!(
                "node index {bad} is outside the tree ({} nodes)",
                tree.len()
            )));
        }
        if p_hat.dim() != tree.n_leaves() {
            return Err(Error::Dimension(format!(
                "edge pattern is {0}x{0} but the tree has {1} leaves",
                p_hat.dim(),
                tree.n_leaves()
            )));
        }
        let mut z: Vec<usize> = z_hat.to_vec();
        z.push(tree.root());
        z.sort_unstable();
        z.dedup();
        Ok(Self { z_hat: z, p_hat })
    }

    /// Ẑ and P̂ of a penalized fit.
    pub fn from_fit(fit: &TagLassoFit) -> Self {
        let mut z = fit.aggregation_set.clone();
        z.push(fit.gamma.root_row);
        z.sort_unstable();
        z.dedup();
        Self {
            z_hat: z,
            p_hat: fit.support.clone(),
        }
    }

    pub fn z_hat(&self) -> &[usize] {
        &self.z_hat
    }

    pub fn p_hat(&self) -> &EdgeSupport {
        &self.p_hat
    }

    fn keep_rows(&self, n_nodes: usize) -> Vec<bool> {
        let mut keep = vec![false; n_nodes];
        for &u in &self.z_hat {
            keep[u] = true;
        }
        keep
    }
}

/// Output of [`refit`].
#[derive(Debug, Clone)]
pub struct RefitResult {
    /// Ω̂, its negative log-likelihood and the final ADMM consensus residual.
    pub estimate: PrecisionEstimate,
    /// Γ̂ with `Ω̂ = AΓ̂ + diag(d)`; rows outside Ẑ are exactly zero.
    pub gamma: GammaMatrix,
    pub d: Vec<f64>,
    /// ADMM consensus residuals before the final projection.
    pub residuals: Residuals,
    /// Frobenius distance moved by the final projection onto the constraint
    /// set; `None` if the projection was not positive definite and the raw
    /// consensus was kept.
    pub projection_shift: Option<f64>,
}

impl RefitResult {
    /// Nonzero off-diagonal pattern of Ω̂. It is contained in P̂ and can be
    /// smaller: a block pair with any pair outside P̂ is zero as a whole.
    pub fn support(&self) -> EdgeSupport {
        EdgeSupport::from_nonzeros(self.estimate.omega.as_matrix())
    }
}

/// Refits on `s` under `constraints`.
pub fn refit(
    s: &SampleCovariance,
    tree: &AggregationTree,
    constraints: &ConstraintSet,
    config: &SolverConfig,
) -> Result<RefitResult> {
    refit_prepared(s, &PreparedTree::new(tree), constraints, config, None)
}

/// Refit with a prepared tree and an optional warm start (projected onto the
/// constraints before use).
pub fn refit_prepared(
    s: &SampleCovariance,
    tree: &PreparedTree,
    constraints: &ConstraintSet,
    config: &SolverConfig,
    warm: Option<WarmStart>,
) -> Result<RefitResult> {
    let p = s.dim();
    let t = tree.n_nodes();
    if tree.n_vars() != p || constraints.p_hat.dim() != p {
        return Err(Error::Dimension(format!(
            "S is {p}x{p}, tree has {} leaves, pattern is {1}x{1}",
            tree.n_vars(),
            constraints.p_hat.dim()
        )));
    }
    if constraints.z_hat.iter().any(|&u| u >= t) {
        return Err(Error::InvalidInput(
            "constraint set refers to nodes outside the tree".into(),
        ));
    }
    let keep = constraints.keep_rows(t);
    let pattern = constraints.p_hat.mask();
    let factor = StructuredFactor::restricted(&tree.ancestors, &constraints.z_hat);

    let warm = match warm {
        Some(w) => {
            if w.omega.shape() != (p, p) || w.gamma.shape() != (t, p) {
                return Err(Error::Dimension("warm start shape does not match".into()));
            }
            WarmStart {
                omega: crate::solver::prox::project_pattern(&w.omega, pattern),
                gamma: crate::solver::prox::project_rows(
                    &w.gamma,
                    &keep,
                    tree.ancestors.root_column,
                ),
                duals: None,
            }
        }
        None => WarmStart::zeros(p, t),
    };

    let rule = CopyRule::Constrained {
        keep_rows: &keep,
        pattern,
    };
    let state = run_schedule(s, &factor, rule, config, warm)?.state;

    let consensus = SymmetricMatrix::symmetrize(&state.consensus_omega).into_inner();
    let residuals = state.residuals();
    let projected =
        project_onto_constraints(&consensus, &constraints.z_hat, pattern, &tree.ancestors);
    let (omega, gamma, d, projection_shift) =
        if is_positive_definite(&SymmetricMatrix::from_upper(projected.0.clone()), PD_TOL)? {
            let shift = (&projected.0 - &consensus).norm();
            (projected.0, projected.1, projected.2, Some(shift))
        } else {
            log::warn!("projected refit is not positive definite; keeping the ADMM consensus");
            let mut omega = consensus;
            for j in 0..p {
                for i in 0..p {
                    if i != j && !pattern[(i, j)] {
                        omega[(i, j)] = 0.0;
                    }
                }
            }
            (
                omega,
                state.consensus_gamma.clone(),
                state.d.iter().copied().collect(),
                None,
            )
        };
    let omega = SymmetricMatrix::from_upper(omega);
    let objective_value = neg_log_likelihood(&omega, s)?;
    Ok(RefitResult {
        estimate: PrecisionEstimate {
            omega,
            objective_value,
            converged_residual: residuals.max(),
        },
        gamma: GammaMatrix {
            gamma,
            root_row: tree.ancestors.root_column,
        },
        d,
        residuals,
        projection_shift,
    })
}

/// Projects a symmetric `omega` onto `{A_Ẑ Γ + D : root row of Γ constant,
/// D ≥ 0 diagonal, Ω_ij = 0 off the pattern}` and returns `(Ω, Γ, d)`.
///
/// Any such Ω has the form `M C Mᵀ + D` for the partition induced by Ẑ. The
/// row of `C` belonging to leaves covered only by the root is constant (it
/// comes from the root row of Γ alone), and a block pair containing any
/// off-pattern entry has `C_ab = 0`. Free entries of `C` are block means of
/// the off-diagonal entries of `omega`; `D` takes the remaining diagonal,
/// floored at zero.
fn project_onto_constraints(
    omega: &DMatrix<f64>,
    z_hat: &[usize],
    pattern: &DMatrix<bool>,
    ancestors: &AncestorMatrix,
) -> (DMatrix<f64>, DMatrix<f64>, Vec<f64>) {
    let a = &ancestors.a;
    let (p, t) = (a.nrows(), a.ncols());
    let root = ancestors.root_column;
    let partition = decode_from_nodes(z_hat, ancestors);
    let blocks = partition.blocks();
    let k = blocks.len();
    let leaf_count: Vec<f64> = (0..t).map(|u| a.column(u).sum()).collect();

    // Selected ancestors of each block and the deepest of them.
    let chains: Vec<Vec<usize>> = blocks
        .iter()
        .map(|m| {
            z_hat
                .iter()
                .copied()
                .filter(|&u| a[(m[0], u)] != 0.0)
                .collect()
        })
        .collect();
    let deepest: Vec<usize> = chains
        .iter()
        .map(|c| {
            let min = c
                .iter()
                .map(|&u| leaf_count[u])
                .fold(f64::INFINITY, f64::min);
            // A non-root node covering the same leaves as the root wins.
            let mut tied = c.iter().copied().filter(|&u| leaf_count[u] == min);
            let first = tied.next().expect("chain contains the root");
            tied.chain(std::iter::once(first))
                .find(|&u| u != root)
                .unwrap_or(first)
        })
        .collect();
    let root_block = deepest.iter().position(|&v| v == root);

    // Tie groups of C entries: the root block's row shares one value.
    let group = |x: usize, y: usize| -> (usize, usize) {
        match root_block {
            Some(r) if x == r || y == r => (r, r),
            _ => (x.min(y), x.max(y)),
        }
    };
    let mut sums = std::collections::HashMap::<(usize, usize), (f64, usize, bool)>::new();
    for j in 0..p {
        for i in 0..p {
            if i == j {
                continue;
            }
            let e = sums
                .entry(group(partition.block_of(i), partition.block_of(j)))
                .or_insert((0.0, 0, false));
            e.0 += omega[(i, j)];
            e.1 += 1;
            e.2 |= !pattern[(i, j)];
        }
    }
    let c = DMatrix::from_fn(k, k, |x, y| match sums.get(&group(x, y)) {
        Some(&(sum, n, broken)) if !broken && n > 0 => sum / n as f64,
        _ => 0.0,
    });

    let mut out = DMatrix::from_fn(p, p, |i, j| {
        c[(partition.block_of(i), partition.block_of(j))]
    });
    let mut d = vec![0.0; p];
    for j in 0..p {
        let cb = c[(partition.block_of(j), partition.block_of(j))];
        d[j] = (omega[(j, j)] - cb).max(0.0);
        out[(j, j)] = cb + d[j];
    }

    // Γ row of each block's deepest node, ancestors first.
    let mut gamma = DMatrix::zeros(t, p);
    let mut order: Vec<usize> = (0..k).collect();
    order.sort_by_key(|&b| chains[b].len());
    for b in order {
        let v = deepest[b];
        for j in 0..p {
            let above: f64 = chains[b]
                .iter()
                .filter(|&&u| u != v)
                .map(|&u| gamma[(u, j)])
                .sum();
            gamma[(v, j)] = c[(b, partition.block_of(j))] - above;
        }
    }
    (out, gamma, d)
}

/// How far a refit is from satisfying its constraints.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Feasibility {
    /// Largest `|Ω̂_ij|` over pairs outside P̂.
    pub off_pattern: f64,
    /// Largest `|Γ̂_uj|` over rows outside Ẑ.
    pub outside_rows: f64,
    /// `max |Ω̂ − (A_Ẑ Γ̂_Ẑ + D̂)|`.
    pub structure: f64,
}

impl Feasibility {
    /// Tolerances of a converged refit: 1e−8 off-pattern, exact zero rows,
    /// 1e−6 on the structural identity.
    pub fn is_feasible(&self) -> bool {
        self.off_pattern <= 1e-8 && self.outside_rows == 0.0 && self.structure <= 1e-6
    }
}

pub fn check_feasibility(
    result: &RefitResult,
    constraints: &ConstraintSet,
    tree: &PreparedTree,
) -> Feasibility {
    let omega = result.estimate.omega.as_matrix();
    let p = omega.nrows();
    let mask = constraints.p_hat.mask();
    let mut off_pattern = 0.0f64;
    for j in 0..p {
        for i in 0..p {
            if i != j && !mask[(i, j)] {
                off_pattern = off_pattern.max(omega[(i, j)].abs());
            }
        }
    }
    let keep = constraints.keep_rows(tree.n_nodes());
    let g = &result.gamma.gamma;
    let mut outside_rows = 0.0f64;
    for (u, row) in g.row_iter().enumerate() {
        if !keep[u] {
            outside_rows = outside_rows.max(row.amax());
        }
    }
    let mut rebuilt: DMatrix<f64> = &tree.ancestors.a * g;
    for j in 0..p {
        rebuilt[(j, j)] += result.d[j];
    }
    Feasibility {
        off_pattern,
        outside_rows,
        structure: (omega - rebuilt).amax(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::solver::{default_names, la_admm, Penalties};
    use crate::tree::{ancestor_matrix, TreeSpec};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_cov(p: usize, seed: u64) -> SampleCovariance {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let b = DMatrix::from_fn(p, p, |_, _| rng.gen_range(-1.0..1.0));
        let m = &b * b.transpose() / p as f64 + DMatrix::identity(p, p) * 0.3;
        SampleCovariance::from_matrix(SymmetricMatrix::from_upper(m), 100).unwrap()
    }

    fn all_nodes(tree: &AggregationTree) -> Vec<usize> {
        (0..tree.len()).collect()
    }

    #[test]
    fn unconstrained_refit_is_the_mle() {
        let s = random_cov(4, 21);
        let tree = AggregationTree::star(&default_names(4));
        let cs = ConstraintSet::new(&all_nodes(&tree), EdgeSupport::full(4), &tree).unwrap();
        let out = refit(&s, &tree, &cs, &SolverConfig::default()).unwrap();
        let inv = s.as_matrix().clone().try_inverse().unwrap();
        assert!((out.estimate.omega.as_matrix() - inv).amax() < 1e-4);
    }

    #[test]
    fn diagonal_pattern_gives_inverse_variances() {
        let s = random_cov(5, 22);
        let tree = AggregationTree::star(&default_names(5));
        let leaves_and_root = all_nodes(&tree);
        let cs = ConstraintSet::new(&leaves_and_root, EdgeSupport::diagonal(5), &tree).unwrap();
        let out = refit(&s, &tree, &cs, &SolverConfig::default()).unwrap();
        let o = out.estimate.omega.as_matrix();
        for i in 0..5 {
            for j in 0..5 {
                if i == j {
                    assert!((o[(i, i)] - 1.0 / s.as_matrix()[(i, i)]).abs() < 1e-4);
                } else {
                    assert_eq!(o[(i, j)], 0.0);
                }
            }
        }
    }

    #[test]
    fn refit_satisfies_constraints_and_beats_penalized_likelihood() {
        let s = random_cov(6, 23);
        let mut spec = TreeSpec::default();
        spec.push("r", None, "root");
        spec.push("g1", Some("r"), "g1");
        spec.push("g2", Some("r"), "g2");
        for (j, g) in ["g1", "g1", "g1", "g2", "g2", "g2"].iter().enumerate() {
            spec.push(format!("l{j}"), Some(g), format!("V{}", j + 1));
        }
        let tree = AggregationTree::from_spec(&spec, &default_names(6)).unwrap();
        let prepared = PreparedTree::new(&tree);
        let cfg = SolverConfig::default();
        let fit = la_admm(&s, &tree, Penalties::new(0.05, 0.05).unwrap(), &cfg).unwrap();
        let cs = ConstraintSet::from_fit(&fit);
        let out = refit_prepared(&s, &prepared, &cs, &cfg, Some(fit.warm_start())).unwrap();
        let feas = check_feasibility(&out, &cs, &prepared);
        assert!(feas.is_feasible(), "{feas:?}");
        let penalized = neg_log_likelihood(&fit.omega, &s).unwrap();
        assert!(out.estimate.objective_value <= penalized + 1e-6);
    }

    #[test]
    fn root_is_always_retained() {
        let tree = AggregationTree::star(&default_names(3));
        let cs = ConstraintSet::new(&[], EdgeSupport::full(3), &tree).unwrap();
        assert_eq!(cs.z_hat(), &[tree.root()]);
        assert!(ConstraintSet::new(&[99], EdgeSupport::full(3), &tree).is_err());
        assert!(ConstraintSet::new(&[], EdgeSupport::full(4), &tree).is_err());
    }

    #[test]
    fn root_only_refit_is_fully_aggregated() {
        let s = random_cov(4, 24);
        let tree = AggregationTree::star(&default_names(4));
        let a = ancestor_matrix(&tree);
        let cs = ConstraintSet::new(&[], EdgeSupport::full(4), &tree).unwrap();
        let out = refit(&s, &tree, &cs, &SolverConfig::default()).unwrap();
        let o = out.estimate.omega.as_matrix();
        for i in 0..4 {
            for j in 0..4 {
                if i != j {
                    assert!((o[(i, j)] - o[(0, 1)]).abs() < 1e-6);
                }
            }
        }
        for u in 0..a.n_nodes() {
            if u != a.root_column {
                assert!(out.gamma.gamma.row(u).iter().all(|v| *v == 0.0));
            }
        }
    }

    fn random_tree(p: usize, rng: &mut ChaCha8Rng) -> AggregationTree {
        // Random nested grouping: each internal node splits its leaves.
        let names = default_names(p);
        let mut spec = TreeSpec::default();
        spec.push("root", None, "root");
        let mut stack = vec![("root".to_string(), (0..p).collect::<Vec<_>>())];
        let mut next = 0;
        while let Some((id, leaves)) = stack.pop() {
            if leaves.len() <= 1 || rng.gen_bool(0.3) {
                for &j in &leaves {
                    spec.push(format!("leaf:{}", names[j]), Some(&id), names[j].clone());
                }
                continue;
            }
            let cut = rng.gen_range(1..leaves.len());
            for part in [leaves[..cut].to_vec(), leaves[cut..].to_vec()] {
                next += 1;
                let child = format!("n{next}");
                spec.push(child.clone(), Some(&id), child.clone());
                stack.push((child, part));
            }
        }
        AggregationTree::from_spec(&spec, &names).unwrap()
    }

    #[test]
    fn projection_is_exactly_feasible_and_idempotent() {
        let mut rng = ChaCha8Rng::seed_from_u64(404);
        for _ in 0..200 {
            let p = rng.gen_range(2..9);
            let tree = random_tree(p, &mut rng);
            let anc = ancestor_matrix(&tree);
            let z: Vec<usize> = (0..tree.len())
                .filter(|&u| u == tree.root() || rng.gen_bool(0.4))
                .collect();
            let mut pairs = Vec::new();
            for i in 0..p {
                for j in (i + 1)..p {
                    if rng.gen_bool(0.7) {
                        pairs.push((i, j));
                    }
                }
            }
            let cs = ConstraintSet::new(&z, EdgeSupport::from_pairs(p, &pairs), &tree).unwrap();
            let raw = DMatrix::from_fn(p, p, |_, _| rng.gen_range(-1.0..1.0));
            let raw =
                SymmetricMatrix::symmetrize(&raw).into_inner() + DMatrix::identity(p, p) * 2.0;
            let (omega, gamma, d) =
                project_onto_constraints(&raw, cs.z_hat(), cs.p_hat().mask(), &anc);

            let result = RefitResult {
                estimate: PrecisionEstimate {
                    omega: SymmetricMatrix::from_upper(omega.clone()),
                    objective_value: 0.0,
                    converged_residual: 0.0,
                },
                gamma: GammaMatrix {
                    gamma: gamma.clone(),
                    root_row: anc.root_column,
                },
                d: d.clone(),
                residuals: Residuals {
                    omega: 0.0,
                    gamma: 0.0,
                },
                projection_shift: None,
            };
            let prepared = PreparedTree::new(&tree);
            let f = check_feasibility(&result, &cs, &prepared);
            assert!(
                f.off_pattern == 0.0 && f.outside_rows == 0.0 && f.structure < 1e-12,
                "{f:?}"
            );
            assert!((&omega - omega.transpose()).amax() == 0.0);
            let root_row = gamma.row(anc.root_column);
            assert!(root_row.iter().all(|&g| g == root_row[0]));
            assert!(d.iter().all(|&x| x >= 0.0));

            let (again, _, d2) =
                project_onto_constraints(&omega, cs.z_hat(), cs.p_hat().mask(), &anc);
            assert!((&again - &omega).amax() < 1e-12);
            assert!(d2.iter().zip(&d).all(|(a, b)| (a - b).abs() < 1e-12));
        }
    }

    #[test]
    fn root_only_block_row_is_constant() {
        // Ẑ = {root, g} with g covering X1, X2: X3, X4 see only the root, so
        // their off-diagonal entries share one value with the g–rest entries.
        let names = default_names(4);
        let mut spec = TreeSpec::default();
        spec.push("root", None, "root");
        spec.push("g", Some("root"), "g");
        for (j, n) in names.iter().enumerate() {
            spec.push(
                format!("leaf:{n}"),
                Some(if j < 2 { "g" } else { "root" }),
                n.clone(),
            );
        }
        let tree = AggregationTree::from_spec(&spec, &names).unwrap();
        let anc = ancestor_matrix(&tree);
        let g = tree.node_index("g").unwrap();
        let raw = DMatrix::from_row_slice(
            4,
            4,
            &[
                2.0, 0.9, 0.1, 0.2, //
                0.9, 2.0, 0.3, 0.4, //
                0.1, 0.3, 2.0, 0.5, //
                0.2, 0.4, 0.5, 2.0,
            ],
        );
        let (omega, _, _) = project_onto_constraints(
            &raw,
            &[tree.root(), g],
            &DMatrix::from_element(4, 4, true),
            &anc,
        );
        // Shared value: mean of 0.1, 0.2, 0.3, 0.4 (twice each) and 0.5 (twice).
        let shared = (2.0 * (0.1 + 0.2 + 0.3 + 0.4) + 2.0 * 0.5) / 10.0;
        assert!((omega[(0, 1)] - 0.9).abs() < 1e-15);
        for (i, j) in [(0, 2), (1, 3), (2, 3), (3, 2)] {
            assert!((omega[(i, j)] - shared).abs() < 1e-15);
        }
    }
}
