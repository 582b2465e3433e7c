//! Tree-aggregated graphical lasso.
//!
//! Estimates a sparse precision matrix whose off-diagonal entries are
//! constant within groups of variables, where the candidate groupings are
//! the subtrees of a user-supplied hierarchy over the variables.

pub mod cli;
pub mod document;
pub mod dot;
pub mod error;
pub mod io;
pub mod model;
pub mod refit;
pub mod select;
pub mod simulation;
pub mod solver;
pub mod support;
pub mod tree;

pub use error::{Error, Result};
pub use model::{sample_covariance, PrecisionEstimate, SampleCovariance, SymmetricMatrix};
pub use solver::{fit_glasso, la_admm, Penalties, SolverConfig, TagLassoFit};
pub use support::EdgeSupport;
pub use tree::{AggregationTree, Partition, TreeSpec};
