//! Monte-Carlo comparison of the estimators on a simulation design.

use std::fmt;
use std::io::Write;
use std::str::FromStr;

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::design::{
    design_precision, ideal_tree, realistic_tree, sample_gaussian, Design, DesignSpec,
};
use super::metrics::{evaluate, StudyMetrics};
use crate::error::{Error, Result};
use crate::model::sample_covariance;
use crate::refit::{refit_prepared, ConstraintSet, Feasibility};
use crate::select::{tune_glasso, tune_taglasso, CvOptions, CvReport, TunedFit};
use crate::solver::{default_names, Penalties, PreparedTree, SolverConfig};
use crate::tree::AggregationTree;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Estimator {
    /// Refit under the true aggregation and sparsity constraints.
    Oracle,
    TaglassoIdeal,
    TaglassoRealistic,
    Glasso,
}

impl Estimator {
    pub const ALL: [Estimator; 4] = [
        Estimator::Oracle,
        Estimator::TaglassoIdeal,
        Estimator::TaglassoRealistic,
        Estimator::Glasso,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Estimator::Oracle => "oracle",
            Estimator::TaglassoIdeal => "taglasso_ideal",
            Estimator::TaglassoRealistic => "taglasso_realistic",
            Estimator::Glasso => "glasso",
        }
    }
}

impl fmt::Display for Estimator {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Estimator {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Estimator::ALL
            .into_iter()
            .find(|e| e.name() == s)
            .ok_or_else(|| {
                let valid: Vec<_> = Estimator::ALL.iter().map(|e| e.name()).collect();
                Error::InvalidInput(format!(
                    "unknown estimator '{s}' (valid: {})",
                    valid.join(", ")
                ))
            })
    }
}

#[derive(Debug, Clone)]
pub struct StudyConfig {
    pub design: DesignSpec,
    pub n: usize,
    pub reps: usize,
    pub estimators: Vec<Estimator>,
    pub solver: SolverConfig,
    pub seed: u64,
    pub folds: usize,
    pub grid_size: usize,
}

impl StudyConfig {
    pub fn new(design: DesignSpec, n: usize, reps: usize, seed: u64) -> Self {
        Self {
            design,
            n,
            reps,
            estimators: Estimator::ALL.to_vec(),
            solver: SolverConfig::default(),
            seed,
            folds: 5,
            grid_size: 10,
        }
    }
}

/// Seeds of one replication. `rep` is derived from the study seed and the
/// replication index; the others are drawn from `rep`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RepSeeds {
    pub rep: u64,
    pub data: u64,
    pub tree: u64,
    pub cv: u64,
}

impl RepSeeds {
    pub fn derive(study_seed: u64, rep: usize) -> Self {
        let mut outer = ChaCha8Rng::seed_from_u64(study_seed);
        outer.set_stream(rep as u64);
        let rep_seed = outer.next_u64();
        let mut inner = ChaCha8Rng::seed_from_u64(rep_seed);
        Self {
            rep: rep_seed,
            data: inner.next_u64(),
            tree: inner.next_u64(),
            cv: inner.next_u64(),
        }
    }
}

/// Compact record of a cross-validation run.
#[derive(Debug, Clone, PartialEq)]
pub struct CvSummary {
    pub max_fit_residual: f64,
    pub max_refit_residual: f64,
    pub worst_feasibility: Option<Feasibility>,
    pub infeasible_refits: usize,
    pub n_refits: usize,
    pub max_projection_shift: f64,
}

impl From<&CvReport> for CvSummary {
    fn from(r: &CvReport) -> Self {
        Self {
            max_fit_residual: r.max_fit_residual,
            max_refit_residual: r.max_refit_residual,
            worst_feasibility: r.worst_feasibility,
            infeasible_refits: r.infeasible_refits,
            n_refits: r.n_refits,
            max_projection_shift: r.max_projection_shift,
        }
    }
}

/// Everything recorded for a successful estimator-replication cell.
#[derive(Debug, Clone, PartialEq)]
pub struct CellOutcome {
    pub metrics: StudyMetrics,
    /// Estimated number of blocks.
    pub k: usize,
    /// Chosen penalties (`None` for the oracle).
    pub penalties: Option<Penalties>,
    pub fit_residual: Option<f64>,
    pub refit_residual: Option<f64>,
    pub late_dual_mean: Option<f64>,
    pub cv: Option<CvSummary>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StudyRow {
    pub estimator: Estimator,
    pub rep: usize,
    pub seeds: RepSeeds,
    /// Error message when the estimator failed on this replication.
    pub outcome: std::result::Result<CellOutcome, String>,
}

impl StudyRow {
    pub fn metrics(&self) -> Option<&StudyMetrics> {
        self.outcome.as_ref().ok().map(|o| &o.metrics)
    }
}

#[derive(Debug, Clone)]
pub struct StudyTable {
    pub design: DesignSpec,
    pub n: usize,
    pub rows: Vec<StudyRow>,
}

pub fn run_study(config: &StudyConfig) -> Result<StudyTable> {
    if config.reps == 0 {
        return Err(Error::InvalidInput(
            "a study needs at least one replication".into(),
        ));
    }
    if config.estimators.is_empty() {
        return Err(Error::InvalidInput("no estimators requested".into()));
    }
    config.solver.validate()?;
    let design = design_precision(&config.design)?;
    let names = default_names(config.design.p);
    let ideal_spec = ideal_tree(&design.partition, &names)?;
    let ideal = PreparedTree::new(&ideal_spec);
    let oracle = oracle_constraints(&ideal_spec, &design)?;

    let rows: Vec<Vec<StudyRow>> = (0..config.reps)
        .into_par_iter()
        .map(|rep| {
            let seeds = RepSeeds::derive(config.seed, rep);
            let data = sample_gaussian(&design.omega, config.n, seeds.data);
            config
                .estimators
                .iter()
                .map(|&estimator| {
                    let outcome = data.as_ref().map_err(|e| e.to_string()).and_then(|data| {
                        run_cell(
                            estimator, data, &design, &ideal, &oracle, &names, seeds, config,
                        )
                        .map_err(|e| e.to_string())
                    });
                    if let Err(msg) = &outcome {
                        log::warn!("rep {rep}, {estimator}: {msg}");
                    }
                    StudyRow {
                        estimator,
                        rep,
                        seeds,
                        outcome,
                    }
                })
                .collect()
        })
        .collect();

    Ok(StudyTable {
        design: config.design.clone(),
        n: config.n,
        rows: rows.into_iter().flatten().collect(),
    })
}

/// Oracle constraints: the root and the block nodes of the ideal tree, with
/// the true edge set.
fn oracle_constraints(tree: &AggregationTree, design: &Design) -> Result<ConstraintSet> {
    let root = tree.root();
    let nodes: Vec<usize> = (0..tree.len())
        .filter(|&v| v == root || tree.parent(v) == Some(root))
        .collect();
    ConstraintSet::new(&nodes, design.support.clone(), tree)
}

fn run_cell(
    estimator: Estimator,
    data: &nalgebra::DMatrix<f64>,
    design: &Design,
    ideal: &PreparedTree,
    oracle: &ConstraintSet,
    names: &[String],
    seeds: RepSeeds,
    config: &StudyConfig,
) -> Result<CellOutcome> {
    let cv_options = CvOptions {
        folds: config.folds,
        seed: seeds.cv,
        refit: true,
    };
    let tuned_outcome = |tuned: TunedFit| -> Result<CellOutcome> {
        let metrics = evaluate(
            &design.sigma,
            &design.partition,
            &design.support,
            tuned.omega(),
            &tuned.fit.partition,
            &tuned.support(),
        )?;
        Ok(CellOutcome {
            metrics,
            k: tuned.fit.k(),
            penalties: Some(tuned.fit.penalties),
            fit_residual: Some(tuned.fit.residuals.max()),
            refit_residual: tuned.refit.as_ref().map(|r| r.residuals.max()),
            late_dual_mean: Some(tuned.fit.late_dual_mean),
            cv: Some(CvSummary::from(&tuned.cv)),
        })
    };
    match estimator {
        Estimator::Oracle => {
            let s = sample_covariance(data)?;
            let r = refit_prepared(&s, ideal, oracle, &config.solver, None)?;
            let metrics = evaluate(
                &design.sigma,
                &design.partition,
                &design.support,
                &r.estimate.omega,
                &design.partition,
                &design.support,
            )?;
            Ok(CellOutcome {
                metrics,
                k: design.partition.k(),
                penalties: None,
                fit_residual: None,
                refit_residual: Some(r.residuals.max()),
                late_dual_mean: None,
                cv: None,
            })
        }
        Estimator::TaglassoIdeal => tuned_outcome(tune_taglasso(
            data,
            ideal,
            config.grid_size,
            &cv_options,
            &config.solver,
        )?),
        Estimator::TaglassoRealistic => {
            let tree: AggregationTree =
                realistic_tree(&config.design.block_sizes, names, seeds.tree)?;
            let prepared = PreparedTree::new(&tree);
            tuned_outcome(tune_taglasso(
                data,
                &prepared,
                config.grid_size,
                &cv_options,
                &config.solver,
            )?)
        }
        Estimator::Glasso => tuned_outcome(tune_glasso(
            data,
            config.grid_size,
            &cv_options,
            &config.solver,
        )?),
    }
}

pub const CSV_HEADER: [&str; 12] = [
    "design",
    "p",
    "n",
    "K_true",
    "estimator",
    "rep",
    "seed",
    "kl",
    "ri",
    "ari",
    "fpr",
    "fnr",
];

fn fmt_value(x: f64) -> String {
    format!("{x}")
}

impl StudyTable {
    /// Long-format metrics table, one row per estimator-replication. Failed
    /// cells and undefined ARIs are written as `NA`.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(CSV_HEADER).map_err(csv_error)?;
        let k_true = self.design.k().to_string();
        let (p, n) = (self.design.p.to_string(), self.n.to_string());
        for row in &self.rows {
            let na = || "NA".to_string();
            let m = row.metrics();
            let record = [
                self.design.kind.name().to_string(),
                p.clone(),
                n.clone(),
                k_true.clone(),
                row.estimator.name().to_string(),
                row.rep.to_string(),
                row.seeds.rep.to_string(),
                m.map_or_else(na, |m| fmt_value(m.kl)),
                m.map_or_else(na, |m| fmt_value(m.ri)),
                m.and_then(|m| m.ari).map_or_else(na, fmt_value),
                m.map_or_else(na, |m| fmt_value(m.fpr)),
                m.map_or_else(na, |m| fmt_value(m.fnr)),
            ];
            w.write_record(&record).map_err(csv_error)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn rows_for(&self, estimator: Estimator) -> impl Iterator<Item = &StudyRow> {
        self.rows.iter().filter(move |r| r.estimator == estimator)
    }

    /// Estimators in order of first appearance.
    pub fn estimators(&self) -> Vec<Estimator> {
        let mut seen = Vec::new();
        for r in &self.rows {
            if !seen.contains(&r.estimator) {
                seen.push(r.estimator);
            }
        }
        seen
    }

    pub fn summary(&self) -> Vec<EstimatorSummary> {
        self.estimators()
            .into_iter()
            .map(|e| {
                let ok: Vec<&StudyMetrics> =
                    self.rows_for(e).filter_map(StudyRow::metrics).collect();
                let col = |f: &dyn Fn(&StudyMetrics) -> Option<f64>| {
                    MeanSe::of(ok.iter().filter_map(|m| f(m)))
                };
                EstimatorSummary {
                    estimator: e,
                    completed: ok.len(),
                    failed: self.rows_for(e).count() - ok.len(),
                    kl: col(&|m| Some(m.kl)),
                    ri: col(&|m| Some(m.ri)),
                    ari: col(&|m| m.ari),
                    fpr: col(&|m| Some(m.fpr)),
                    fnr: col(&|m| Some(m.fnr)),
                }
            })
            .collect()
    }

    /// Per-estimator means with standard errors in parentheses.
    pub fn format_summary(&self) -> String {
        let mut s = format!(
            "{} design, p = {}, n = {}, K = {}, {} replications\n",
            self.design.kind,
            self.design.p,
            self.n,
            self.design.k(),
            self.rows.iter().map(|r| r.rep + 1).max().unwrap_or(0)
        );
        s.push_str(&format!(
            "{:<20}{:>16}{:>16}{:>16}{:>16}{:>16}\n",
            "estimator", "KL", "RI", "ARI", "FPR", "FNR"
        ));
        for e in self.summary() {
            s.push_str(&format!(
                "{:<20}{:>16}{:>16}{:>16}{:>16}{:>16}",
                e.estimator.name(),
                e.kl.to_string(),
                e.ri.to_string(),
                e.ari.to_string(),
                e.fpr.to_string(),
                e.fnr.to_string()
            ));
            if e.failed > 0 {
                s.push_str(&format!("   ({} failed)", e.failed));
            }
            s.push('\n');
        }
        s
    }
}

fn csv_error(e: csv::Error) -> Error {
    Error::InvalidInput(format!("writing CSV: {e}"))
}

/// Mean and standard error of the mean; `None` without observations.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MeanSe(pub Option<(f64, f64)>);

impl MeanSe {
    pub fn of(values: impl Iterator<Item = f64>) -> Self {
        let v: Vec<f64> = values.collect();
        if v.is_empty() {
            return MeanSe(None);
        }
        let n = v.len() as f64;
        let mean = v.iter().sum::<f64>() / n;
        let se = if v.len() > 1 {
            (v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0) / n).sqrt()
        } else {
            0.0
        };
        MeanSe(Some((mean, se)))
    }

    pub fn mean(&self) -> Option<f64> {
        self.0.map(|(m, _)| m)
    }
}

impl fmt::Display for MeanSe {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.0 {
            Some((m, se)) => write!(f, "{m:.2} ({se:.2})"),
            None => f.write_str("NA"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EstimatorSummary {
    pub estimator: Estimator,
    pub completed: usize,
    pub failed: usize,
    pub kl: MeanSe,
    pub ri: MeanSe,
    pub ari: MeanSe,
    pub fpr: MeanSe,
    pub fnr: MeanSe,
}
