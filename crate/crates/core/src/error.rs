use thiserror::Error;

/// Errors raised by the tag-lasso library.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("matrix is not symmetric (max asymmetry {max_asymmetry:e})")]
    NotSymmetric { max_asymmetry: f64 },

    #[error("matrix contains non-finite entries")]
    NonFinite,

    #[error("matrix is not positive definite (smallest eigenvalue {min_eigenvalue:e})")]
    NotPositiveDefinite { min_eigenvalue: f64 },

    #[error("invalid tree: {0}")]
    Tree(String),

    #[error(
        "matrix is not block-structured under the partition (max deviation {max_deviation:e})"
    )]
    BlockStructure { max_deviation: f64 },

    #[error("ADMM diverged at stage {stage}, iteration {iteration}")]
    Diverged { stage: usize, iteration: usize },

    #[error("degenerate penalty grid: {0}")]
    DegenerateGrid(String),

    #[error("fold {fold} has {rows} rows, at least 2 are required")]
    FoldSize { fold: usize, rows: usize },

    #[error("no grid cell has at most {k_max} blocks (smallest block count achieved: {min_k})")]
    Selection { k_max: usize, min_k: usize },

    #[error("design produced a non positive definite precision matrix (smallest eigenvalue {min_eigenvalue:e})")]
    Design { min_eigenvalue: f64 },

    #[error("{path}:{line}: {message}")]
    Parse {
        path: String,
        line: usize,
        message: String,
    },

    #[error("schema version mismatch: expected {expected}, found {found}")]
    Schema { expected: u32, found: u32 },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
