//! Estimation, aggregation and sparsity metrics.

use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::model::{log_det_pd, trace_product, SymmetricMatrix};
use crate::support::EdgeSupport;
use crate::tree::Partition;

/// `KL = −logdet(ΣΩ̂) + tr(ΣΩ̂) − p`.
pub fn kl_distance(sigma_true: &SymmetricMatrix, omega_hat: &SymmetricMatrix) -> Result<f64> {
    if sigma_true.dim() != omega_hat.dim() {
        return Err(Error::Dimension(format!(
            "Σ is {0}x{0} but Ω̂ is {1}x{1}",
            sigma_true.dim(),
            omega_hat.dim()
        )));
    }
    let ld = |m: &SymmetricMatrix| {
        log_det_pd(m.as_matrix()).ok_or_else(|| Error::NotPositiveDefinite {
            min_eigenvalue: m.eigenvalues()[0],
        })
    };
    let logdet = ld(sigma_true)? + ld(omega_hat)?;
    Ok(
        -logdet + trace_product(sigma_true.as_matrix(), omega_hat.as_matrix())
            - sigma_true.dim() as f64,
    )
}

fn choose2(n: usize) -> f64 {
    (n * n.saturating_sub(1) / 2) as f64
}

/// Rand index and adjusted Rand index of `estimate` against `truth`. The ARI
/// is `None` when `truth` consists of singletons only.
pub fn partition_similarity(truth: &Partition, estimate: &Partition) -> Result<(f64, Option<f64>)> {
    let p = truth.p();
    if estimate.p() != p {
        return Err(Error::Dimension(format!(
            "partitions cover {p} and {} variables",
            estimate.p()
        )));
    }
    if p < 2 {
        return Ok((1.0, None));
    }
    let mut table: HashMap<(usize, usize), usize> = HashMap::new();
    for j in 0..p {
        *table
            .entry((truth.block_of(j), estimate.block_of(j)))
            .or_default() += 1;
    }
    let sum_ij: f64 = table.values().map(|&c| choose2(c)).sum();
    let sum_a: f64 = truth.block_sizes().into_iter().map(choose2).sum();
    let sum_b: f64 = estimate.block_sizes().into_iter().map(choose2).sum();
    let total = choose2(p);

    // Agreements: pairs together in both plus pairs apart in both.
    let ri = (total + 2.0 * sum_ij - sum_a - sum_b) / total;

    let ari = if truth.is_singletons() {
        None
    } else {
        let expected = sum_a * sum_b / total;
        let max = 0.5 * (sum_a + sum_b);
        Some(if max == expected {
            if truth == estimate {
                1.0
            } else {
                0.0
            }
        } else {
            (sum_ij - expected) / (max - expected)
        })
    };
    Ok((ri, ari))
}

/// False-positive and false-negative rates of an estimated edge set over the
/// off-diagonal pairs `i < j`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EdgeRates {
    pub fpr: f64,
    pub fnr: f64,
    /// False when the truth has no zero pairs (FPR reported as 0).
    pub fpr_defined: bool,
    /// False when the truth has no edges (FNR reported as 0).
    pub fnr_defined: bool,
}

pub fn fpr_fnr(truth: &EdgeSupport, estimate: &EdgeSupport) -> Result<EdgeRates> {
    let p = truth.dim();
    if estimate.dim() != p {
        return Err(Error::Dimension(format!(
            "edge sets over {p} and {} variables",
            estimate.dim()
        )));
    }
    let (mut zeros, mut false_pos, mut edges, mut missed) = (0usize, 0usize, 0usize, 0usize);
    for i in 0..p {
        for j in (i + 1)..p {
            let (t, e) = (truth.contains(i, j), estimate.contains(i, j));
            if t {
                edges += 1;
                missed += usize::from(!e);
            } else {
                zeros += 1;
                false_pos += usize::from(e);
            }
        }
    }
    let rate = |num: usize, den: usize| {
        if den == 0 {
            0.0
        } else {
            num as f64 / den as f64
        }
    };
    Ok(EdgeRates {
        fpr: rate(false_pos, zeros),
        fnr: rate(missed, edges),
        fpr_defined: zeros > 0,
        fnr_defined: edges > 0,
    })
}

/// Metrics of one estimator on one replication.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StudyMetrics {
    pub kl: f64,
    pub ri: f64,
    pub ari: Option<f64>,
    pub fpr: f64,
    pub fnr: f64,
}

pub fn evaluate(
    sigma_true: &SymmetricMatrix,
    truth_partition: &Partition,
    truth_support: &EdgeSupport,
    omega_hat: &SymmetricMatrix,
    partition: &Partition,
    support: &EdgeSupport,
) -> Result<StudyMetrics> {
    let kl = kl_distance(sigma_true, omega_hat)?;
    let (ri, ari) = partition_similarity(truth_partition, partition)?;
    let rates = fpr_fnr(truth_support, support)?;
    Ok(StudyMetrics {
        kl,
        ri,
        ari,
        fpr: rates.fpr,
        fnr: rates.fnr,
    })
}
