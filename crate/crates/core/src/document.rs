//! Versioned JSON record of a fitted model.

use std::collections::BTreeMap;
use std::path::Path;
use std::time::{Duration, SystemTime, UNIX_EPOCH};

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::refit::{ConstraintSet, RefitResult};
use crate::select::SelectionGrid;
use crate::solver::{Penalties, SolverConfig, TagLassoFit};
use crate::support::EdgeSupport;
use crate::tree::{aggregate_precision, AggregationTree, Partition, D_FLOOR};

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EstimateKind {
    Penalized,
    Refit,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GammaRow {
    pub node: String,
    pub values: Vec<f64>,
}

/// Block core `C` and the aggregated precision `C + D_agg`, computed by
/// block-averaging `Ω − diag(d)`; `max_deviation` is the largest departure
/// from exact block constancy.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AggregatedDoc {
    pub c: Vec<Vec<f64>>,
    pub omega_agg: Vec<Vec<f64>>,
    pub max_deviation: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResidualsDoc {
    pub omega: f64,
    pub gamma: f64,
    pub late_dual_mean: f64,
    pub refit: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectionDoc {
    pub lambda1_values: Vec<f64>,
    pub lambda2_values: Vec<f64>,
    /// `cv_scores[a][b]` is the score at `(lambda1_values[a], lambda2_values[b])`.
    pub cv_scores: Vec<Vec<f64>>,
    pub chosen_cell: [usize; 2],
    pub folds: usize,
    pub k_max: Option<usize>,
}

impl SelectionDoc {
    pub fn new(grid: &SelectionGrid, folds: usize, k_max: Option<usize>) -> Self {
        Self {
            lambda1_values: grid.lambda1_values.clone(),
            lambda2_values: grid.lambda2_values.clone(),
            cv_scores: rows(&grid.cv_scores),
            chosen_cell: [grid.chosen_cell.0, grid.chosen_cell.1],
            folds,
            k_max,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    /// SHA-256 of each input file, keyed by role (`data`, `cov`, `tree`).
    pub input_sha256: BTreeMap<String, String>,
    pub seed: Option<u64>,
    /// RFC 3339 UTC; taken from `SOURCE_DATE_EPOCH` when set.
    pub timestamp: String,
    pub version: String,
}

impl Provenance {
    pub fn new(input_sha256: BTreeMap<String, String>, seed: Option<u64>) -> Self {
        Self {
            input_sha256,
            seed,
            timestamp: timestamp(),
            version: env!("CARGO_PKG_VERSION").to_string(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitDocument {
    pub schema_version: u32,
    pub estimate: EstimateKind,
    pub variables: Vec<String>,
    pub penalties: Penalties,
    pub config: SolverConfig,
    /// Dense, row-major.
    pub omega: Vec<Vec<f64>>,
    /// Rows of `Γ` for the selected nodes (root included).
    pub gamma: Vec<GammaRow>,
    pub d: Vec<f64>,
    /// 0-based block of each variable.
    pub partition: Vec<usize>,
    pub aggregated: AggregatedDoc,
    /// Off-diagonal support, `i < j`, 0-based.
    pub edges: Vec<[usize; 2]>,
    pub residuals: ResidualsDoc,
    pub selection: Option<SelectionDoc>,
    pub provenance: Provenance,
}

fn rows(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    (0..m.nrows())
        .map(|i| m.row(i).iter().copied().collect())
        .collect()
}

impl FitDocument {
    /// Records `fit`, or its refit when given. The partition is that of the
    /// penalized fit; the edges are the nonzeros of the recorded estimate.
    pub fn build(
        fit: &TagLassoFit,
        refit: Option<&RefitResult>,
        tree: &AggregationTree,
        selection: Option<SelectionDoc>,
        provenance: Provenance,
    ) -> Result<Self> {
        let constraints = ConstraintSet::from_fit(fit);
        let (omega, gamma, d) = match refit {
            Some(r) => (&r.estimate.omega, &r.gamma.gamma, &r.d),
            None => (&fit.omega, &fit.gamma.gamma, &fit.d),
        };
        let agg = aggregate_precision(omega, d, &fit.partition, D_FLOOR, f64::INFINITY)?;
        let variables = (0..tree.n_leaves())
            .map(|j| tree.label(tree.leaf_of(j)).to_string())
            .collect();
        Ok(Self {
            schema_version: SCHEMA_VERSION,
            estimate: if refit.is_some() {
                EstimateKind::Refit
            } else {
                EstimateKind::Penalized
            },
            variables,
            penalties: fit.penalties,
            config: fit.config,
            omega: rows(omega.as_matrix()),
            gamma: constraints
                .z_hat()
                .iter()
                .map(|&u| GammaRow {
                    node: tree.id(u).to_string(),
                    values: gamma.row(u).iter().copied().collect(),
                })
                .collect(),
            d: d.clone(),
            partition: fit.partition.assignment().to_vec(),
            aggregated: AggregatedDoc {
                c: rows(agg.c.as_matrix()),
                omega_agg: rows(agg.omega_agg.as_matrix()),
                max_deviation: agg.max_deviation,
            },
            edges: refit
                .map_or_else(|| fit.support.clone(), RefitResult::support)
                .edges()
                .into_iter()
                .map(|(i, j)| [i, j])
                .collect(),
            residuals: ResidualsDoc {
                omega: fit.residuals.omega,
                gamma: fit.residuals.gamma,
                late_dual_mean: fit.late_dual_mean,
                refit: refit.map(|r| r.residuals.max()),
            },
            selection,
            provenance,
        })
    }

    pub fn k(&self) -> usize {
        self.aggregated.c.len()
    }

    pub fn partition(&self) -> Partition {
        Partition::from_labels(&self.partition)
    }

    pub fn support(&self) -> EdgeSupport {
        let pairs: Vec<(usize, usize)> = self.edges.iter().map(|e| (e[0], e[1])).collect();
        EdgeSupport::from_pairs(self.variables.len(), &pairs)
    }

    pub fn to_json(&self) -> Result<String> {
        let mut s = serde_json::to_string_pretty(self)?;
        s.push('\n');
        Ok(s)
    }

    /// Parses a document, refusing any schema version other than the current
    /// one.
    pub fn from_json(text: &str) -> Result<Self> {
        let value: serde_json::Value = serde_json::from_str(text)?;
        let found = value
            .get("schema_version")
            .and_then(serde_json::Value::as_u64)
            .ok_or_else(|| Error::InvalidInput("fit document has no schema_version".into()))?;
        if found != u64::from(SCHEMA_VERSION) {
            return Err(Error::Schema {
                expected: SCHEMA_VERSION,
                found: u32::try_from(found).unwrap_or(u32::MAX),
            });
        }
        Ok(serde_json::from_value(value)?)
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_json()?)?;
        Ok(())
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }
}

pub fn sha256_file(path: impl AsRef<Path>) -> Result<String> {
    Ok(hex::encode(Sha256::digest(std::fs::read(path)?)))
}

/// Current UTC time, or `SOURCE_DATE_EPOCH` when that is set to an integer.
pub fn timestamp() -> String {
    timestamp_from(std::env::var("SOURCE_DATE_EPOCH").ok().as_deref())
}

fn timestamp_from(source_date_epoch: Option<&str>) -> String {
    let time = source_date_epoch
        .and_then(|s| s.trim().parse::<u64>().ok())
        .map_or_else(SystemTime::now, |secs| {
            UNIX_EPOCH + Duration::from_secs(secs)
        });
    humantime::format_rfc3339_seconds(time).to_string()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{SampleCovariance, SymmetricMatrix};
    use crate::solver::{default_names, la_admm};

    fn document() -> FitDocument {
        let names = default_names(4);
        let mut spec = crate::tree::TreeSpec::default();
        spec.push("root", None, "root");
        spec.push("g", Some("root"), "g");
        for (j, n) in names.iter().enumerate() {
            let parent = if j < 2 { "g" } else { "root" };
            spec.push(format!("leaf:{n}"), Some(parent), n.clone());
        }
        let tree = AggregationTree::from_spec(&spec, &names).unwrap();
        let s = SymmetricMatrix::new(DMatrix::from_fn(4, 4, |i, j| {
            if i == j {
                1.0
            } else {
                0.3 / (1.0 + (i + j) as f64)
            }
        }))
        .unwrap();
        let s = SampleCovariance::from_matrix(s, 50).unwrap();
        let fit = la_admm(
            &s,
            &tree,
            Penalties::new(0.05, 0.02).unwrap(),
            &SolverConfig::default(),
        )
        .unwrap();
        let mut hashes = BTreeMap::new();
        hashes.insert("data".to_string(), "00".repeat(32));
        let prov = Provenance {
            input_sha256: hashes,
            seed: Some(3),
            timestamp: "2020-01-01T00:00:00Z".into(),
            version: "0".into(),
        };
        FitDocument::build(&fit, None, &tree, None, prov).unwrap()
    }

    #[test]
    fn round_trip_is_byte_identical() {
        let doc = document();
        let text = doc.to_json().unwrap();
        let back = FitDocument::from_json(&text).unwrap();
        assert_eq!(back, doc);
        assert_eq!(back.to_json().unwrap(), text);
        assert_eq!(doc.gamma[0].node, "root");
        assert_eq!(doc.partition.len(), 4);
        assert_eq!(doc.aggregated.c.len(), doc.partition().k());
    }

    #[test]
    fn schema_mismatch_is_an_error() {
        let mut value: serde_json::Value =
            serde_json::from_str(&document().to_json().unwrap()).unwrap();
        value["schema_version"] = serde_json::json!(SCHEMA_VERSION + 1);
        let err = FitDocument::from_json(&value.to_string()).unwrap_err();
        assert!(matches!(
            err,
            Error::Schema {
                expected: SCHEMA_VERSION,
                ..
            }
        ));
        value.as_object_mut().unwrap().remove("schema_version");
        assert!(FitDocument::from_json(&value.to_string()).is_err());
    }

    #[test]
    fn hashes_and_timestamps() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x");
        std::fs::write(&path, b"abc").unwrap();
        assert_eq!(
            sha256_file(&path).unwrap(),
            "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad"
        );
        assert_eq!(timestamp_from(Some("0")), "1970-01-01T00:00:00Z");
        assert_eq!(timestamp_from(Some("1700000000")), "2023-11-14T22:13:20Z");
        let stamp = timestamp_from(Some("garbage"));
        assert_eq!(stamp.len(), 20);
        assert!(stamp.ends_with('Z'));
    }
}
