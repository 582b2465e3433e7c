//! Synthetic designs, evaluation metrics and the Monte-Carlo study driver.

pub mod design;
pub mod metrics;
pub mod study;

pub use design::{
    dendrogram_tree, design_precision, equal_sizes, ideal_tree, realistic_tree,
    realistic_tree_with, sample_gaussian, unbalanced_sizes, Design, DesignKind, DesignSpec,
};
pub use kodama::Method as Linkage;
pub use metrics::{evaluate, fpr_fnr, kl_distance, partition_similarity, EdgeRates, StudyMetrics};
pub use study::{run_study, Estimator, StudyConfig, StudyRow, StudyTable};
