//! Command-line front end.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::document::{sha256_file, FitDocument, Provenance, SelectionDoc};
use crate::dot::{aggregated_graph, full_graph, DEFAULT_CTOL};
use crate::error::{Error, Result};
use crate::io::{read_matrix_csv, read_symmetric_csv, read_tree_csv};
use crate::model::{sample_covariance, SampleCovariance};
use crate::refit::{refit_prepared, ConstraintSet};
use crate::select::{
    cell_block_counts, constrained_select, cross_validate, finish_taglasso, lambda_grid,
    tune_glasso, CvOptions, TunedFit,
};
use crate::simulation::{equal_sizes, run_study, DesignKind, DesignSpec, Estimator, StudyConfig};
use crate::solver::{fit_glasso, la_admm_prepared, Penalties, PreparedTree, SolverConfig};
use crate::tree::AggregationTree;

#[derive(Debug, Parser)]
#[command(name = "taglasso", version, about = "Tree-aggregated graphical lasso")]
pub struct Cli {
    /// Worker threads for CV cells and simulation replications.
    #[arg(long, global = true, env = "TAGLASSO_JOBS")]
    pub jobs: Option<usize>,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Fit on a data or covariance matrix and write a fit document.
    Fit(FitArgs),
    /// Run a simulation study and write its metrics table.
    Simulate(SimulateArgs),
    /// Export the full and aggregated networks of a fit document as DOT.
    ExportDot(ExportDotArgs),
}

#[derive(Debug, Clone, Args)]
pub struct SolverArgs {
    /// Initial ADMM step size.
    #[arg(long)]
    pub rho1: Option<f64>,
    /// Number of step-size stages.
    #[arg(long)]
    pub stages: Option<usize>,
    /// Iterations per stage.
    #[arg(long)]
    pub maxit: Option<usize>,
}

impl SolverArgs {
    pub fn config(&self) -> Result<SolverConfig> {
        let d = SolverConfig::default();
        let config = SolverConfig {
            rho1: self.rho1.unwrap_or(d.rho1),
            t_stages: self.stages.unwrap_or(d.t_stages),
            maxit: self.maxit.unwrap_or(d.maxit),
            ..d
        };
        config.validate()?;
        Ok(config)
    }
}

#[derive(Debug, Args)]
pub struct FitArgs {
    /// n×p data matrix (CSV, optional header of variable names).
    #[arg(long, conflicts_with = "cov", required_unless_present = "cov")]
    pub data: Option<PathBuf>,
    /// p×p sample covariance (CSV); requires --n.
    #[arg(long, requires = "n")]
    pub cov: Option<PathBuf>,
    /// Sample size behind --cov.
    #[arg(long)]
    pub n: Option<usize>,
    /// Tree CSV (node_id,parent_id,label). Without it the glasso is fitted.
    #[arg(long)]
    pub tree: Option<PathBuf>,
    #[arg(long, required_unless_present = "cv", conflicts_with = "cv")]
    pub lambda2: Option<f64>,
    #[arg(long, conflicts_with = "cv")]
    pub lambda1: Option<f64>,
    /// Choose the penalties by cross-validation (requires --data).
    #[arg(long)]
    pub cv: bool,
    /// Restrict CV to grid cells with at most this many blocks.
    #[arg(long, requires = "cv")]
    pub kmax: Option<usize>,
    #[arg(long, default_value_t = 5)]
    pub folds: usize,
    /// Points per penalty grid axis.
    #[arg(long, default_value_t = 10)]
    pub grid: usize,
    /// Refit under the selected constraints (always done with --cv and a tree).
    #[arg(long)]
    pub refit: bool,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Output fit document (JSON).
    #[arg(long)]
    pub out: PathBuf,
    #[command(flatten)]
    pub solver: SolverArgs,
}

#[derive(Debug, Args)]
pub struct SimulateArgs {
    #[arg(long)]
    pub design: DesignKind,
    #[arg(long, default_value_t = 15)]
    pub p: usize,
    #[arg(long, default_value_t = 120)]
    pub n: usize,
    #[arg(long, default_value_t = 100)]
    pub reps: usize,
    /// Comma-separated subset of oracle, taglasso_ideal, taglasso_realistic, glasso.
    #[arg(
        long,
        value_delimiter = ',',
        default_value = "oracle,taglasso_ideal,taglasso_realistic,glasso"
    )]
    pub estimators: Vec<Estimator>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Output metrics table (CSV).
    #[arg(long)]
    pub out: PathBuf,
    /// Comma-separated block sizes (sets p).
    #[arg(long, value_delimiter = ',', conflicts_with = "k")]
    pub sizes: Option<Vec<usize>>,
    /// Number of equal-size blocks.
    #[arg(long)]
    pub k: Option<usize>,
    /// Edge count of the unstructured design.
    #[arg(long)]
    pub edges: Option<usize>,
    /// Seed of the random parts of the design itself.
    #[arg(long, default_value_t = 0)]
    pub design_seed: u64,
    #[arg(long, default_value_t = 5)]
    pub folds: usize,
    #[arg(long, default_value_t = 10)]
    pub grid: usize,
    #[command(flatten)]
    pub solver: SolverArgs,
}

#[derive(Debug, Args)]
pub struct ExportDotArgs {
    /// Fit document written by `fit`.
    #[arg(long)]
    pub fit: PathBuf,
    /// Output prefix; writes `<out>.full.dot` and `<out>.aggregated.dot`.
    #[arg(long)]
    pub out: PathBuf,
    /// Block-core entries at or below this magnitude are not drawn.
    #[arg(long, default_value_t = DEFAULT_CTOL)]
    pub ctol: f64,
}

/// Process exit code for an error: 3 for divergence, 4 when no grid cell
/// meets the block limit, 2 for bad input.
pub fn exit_code(err: &Error) -> i32 {
    match err {
        Error::Diverged { .. } => 3,
        Error::Selection { .. } => 4,
        Error::BlockStructure { .. } => 1,
        _ => 2,
    }
}

/// Runs a parsed command and returns the summary for standard output.
pub fn run(cli: Cli) -> Result<String> {
    if let Some(jobs) = cli.jobs {
        // Fails only if the pool already exists, e.g. in tests.
        let _ = rayon::ThreadPoolBuilder::new()
            .num_threads(jobs.max(1))
            .build_global();
    }
    match cli.command {
        Command::Fit(args) => cmd_fit(&args),
        Command::Simulate(args) => cmd_simulate(&args),
        Command::ExportDot(args) => cmd_export_dot(&args),
    }
}

fn with_path(path: &Path, err: Error) -> Error {
    match err {
        Error::Io(e) => Error::InvalidInput(format!("{}: {e}", path.display())),
        other => other,
    }
}

pub fn cmd_fit(args: &FitArgs) -> Result<String> {
    let config = args.solver.config()?;
    let mut hashes = BTreeMap::new();

    let (data, s, header) = match (&args.data, &args.cov) {
        (Some(path), _) => {
            let m = read_matrix_csv(path).map_err(|e| with_path(path, e))?;
            hashes.insert("data".to_string(), sha256_file(path)?);
            let s = sample_covariance(&m.values)?;
            (Some(m.values.clone()), s, m.names)
        }
        (None, Some(path)) => {
            let (names, matrix) = read_symmetric_csv(path).map_err(|e| with_path(path, e))?;
            hashes.insert("cov".to_string(), sha256_file(path)?);
            let n = args
                .n
                .ok_or_else(|| Error::InvalidInput("--cov requires --n".into()))?;
            (None, SampleCovariance::from_matrix(matrix, n)?, names)
        }
        (None, None) => {
            return Err(Error::InvalidInput(
                "one of --data or --cov is required".into(),
            ))
        }
    };
    let names = header.unwrap_or_else(|| crate::solver::default_names(s.dim()));

    let tree = match &args.tree {
        Some(path) => {
            let spec = read_tree_csv(path).map_err(|e| with_path(path, e))?;
            hashes.insert("tree".to_string(), sha256_file(path)?);
            Some(AggregationTree::from_spec(&spec, &names)?)
        }
        None => None,
    };
    let display_tree = tree
        .clone()
        .unwrap_or_else(|| AggregationTree::star(&names));
    let prepared = PreparedTree::new(&display_tree);
    let provenance = Provenance::new(hashes, Some(args.seed));

    let doc = if args.cv {
        let data = data.ok_or_else(|| Error::InvalidInput("--cv requires --data".into()))?;
        let options = CvOptions {
            folds: args.folds,
            seed: args.seed,
            refit: true,
        };
        let tuned: TunedFit = match &tree {
            None => {
                if args.kmax.is_some() {
                    return Err(Error::InvalidInput("--kmax requires --tree".into()));
                }
                tune_glasso(&data, args.grid, &options, &config)?
            }
            Some(_) => {
                let (l1, l2) = lambda_grid(&s, &prepared, args.grid, &config)?;
                let mut cv = cross_validate(&data, &prepared, &l1, &l2, &options, &config)?;
                if let Some(k_max) = args.kmax {
                    let ks = cell_block_counts(&s, &prepared, &l1, &l2, &config)?;
                    cv.selection = constrained_select(&cv.selection, &ks, k_max)?;
                }
                finish_taglasso(&s, &prepared, cv, &config)?
            }
        };
        let selection = SelectionDoc::new(&tuned.cv.selection, args.folds, args.kmax);
        FitDocument::build(
            &tuned.fit,
            tuned.refit.as_ref(),
            &display_tree,
            Some(selection),
            provenance,
        )?
    } else {
        let lambda2 = args
            .lambda2
            .ok_or_else(|| Error::InvalidInput("--lambda2 is required without --cv".into()))?;
        let lambda1 = args.lambda1.unwrap_or(0.0);
        let fit = match &tree {
            None if lambda1 != 0.0 => {
                return Err(Error::InvalidInput(
                    "--lambda1 needs --tree (the glasso has no aggregation penalty)".into(),
                ))
            }
            None => fit_glasso(&s, lambda2, &config)?,
            Some(_) => la_admm_prepared(&s, &prepared, Penalties::new(lambda1, lambda2)?, &config)?,
        };
        let refit = if args.refit {
            let cs = ConstraintSet::from_fit(&fit);
            Some(refit_prepared(
                &s,
                &prepared,
                &cs,
                &config,
                Some(fit.warm_start()),
            )?)
        } else {
            None
        };
        FitDocument::build(&fit, refit.as_ref(), &display_tree, None, provenance)?
    };
    doc.write(&args.out)?;
    Ok(format!(
        "K={} edges={} residual={:.3e} lambda1={} lambda2={} estimate={}",
        doc.k(),
        doc.edges.len(),
        doc.residuals.omega.max(doc.residuals.gamma),
        doc.penalties.lambda1,
        doc.penalties.lambda2,
        serde_json::to_value(doc.estimate)?
            .as_str()
            .unwrap_or_default()
    ))
}

pub fn cmd_simulate(args: &SimulateArgs) -> Result<String> {
    let mut spec = DesignSpec::new(args.design, args.p, args.design_seed);
    if let Some(sizes) = &args.sizes {
        if args.design == DesignKind::Unstructured {
            return Err(Error::InvalidInput(
                "the unstructured design has singleton blocks; --sizes does not apply".into(),
            ));
        }
        spec = spec.with_sizes(sizes.clone());
    } else if let Some(k) = args.k {
        if args.design == DesignKind::Unstructured {
            return Err(Error::InvalidInput(
                "the unstructured design has singleton blocks; --k does not apply".into(),
            ));
        }
        if k == 0 || k > args.p {
            return Err(Error::InvalidInput(format!(
                "--k must be in 1..={}",
                args.p
            )));
        }
        spec.block_sizes = equal_sizes(args.p, k);
    }
    if let Some(edges) = args.edges {
        spec.n_edges = edges;
    }
    spec.validate()?;
    let mut estimators = args.estimators.clone();
    estimators.dedup();
    let config = StudyConfig {
        design: spec,
        n: args.n,
        reps: args.reps,
        estimators,
        solver: args.solver.config()?,
        seed: args.seed,
        folds: args.folds,
        grid_size: args.grid,
    };
    let table = run_study(&config)?;
    let file = std::fs::File::create(&args.out).map_err(|e| with_path(&args.out, e.into()))?;
    table.write_csv(std::io::BufWriter::new(file))?;
    Ok(table.format_summary())
}

pub fn cmd_export_dot(args: &ExportDotArgs) -> Result<String> {
    let doc = FitDocument::read(&args.fit).map_err(|e| with_path(&args.fit, e))?;
    let mut full = args.out.clone().into_os_string();
    full.push(".full.dot");
    let mut agg = args.out.clone().into_os_string();
    agg.push(".aggregated.dot");
    std::fs::write(&full, full_graph(&doc))?;
    std::fs::write(&agg, aggregated_graph(&doc, args.ctol))?;
    Ok(format!(
        "wrote {} and {}",
        PathBuf::from(full).display(),
        PathBuf::from(agg).display()
    ))
}
