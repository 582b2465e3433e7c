//! Block-structured precision designs, their trees, and Gaussian sampling.

use std::fmt;
use std::str::FromStr;

use kodama::{linkage, Method};
use nalgebra::DMatrix;
use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};

use crate::error::{Error, Result};
use crate::model::{is_positive_definite, SymmetricMatrix, PD_TOL};
use crate::support::EdgeSupport;
use crate::tree::{AggregationTree, Partition, TreeSpec};

/// Connectivity pattern between the blocks of a design.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum DesignKind {
    /// Consecutive blocks connected.
    Chain,
    /// One randomly chosen pair of blocks connected.
    Random,
    /// Chain connectivity with unequal block sizes.
    Unbalanced,
    /// Singleton blocks with random sparse edges.
    Unstructured,
}

impl DesignKind {
    pub const ALL: [DesignKind; 4] = [
        Self::Chain,
        Self::Random,
        Self::Unbalanced,
        Self::Unstructured,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Self::Chain => "chain",
            Self::Random => "random",
            Self::Unbalanced => "unbalanced",
            Self::Unstructured => "unstructured",
        }
    }
}

impl fmt::Display for DesignKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for DesignKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| {
                Error::InvalidInput(format!(
                    "unknown design '{s}' (expected chain, random, unbalanced or unstructured)"
                ))
            })
    }
}

/// Parameters of a simulation design.
#[derive(Debug, Clone, PartialEq)]
pub struct DesignSpec {
    pub kind: DesignKind,
    pub p: usize,
    pub block_sizes: Vec<usize>,
    pub diag_value: f64,
    pub within_block: f64,
    pub cross_block: f64,
    /// Edge count of the unstructured design.
    pub n_edges: usize,
    /// Seed for the random parts of the design (block pair, edge set).
    pub seed: u64,
}

/// Sizes of `k` near-equal contiguous blocks of `p` variables.
pub fn equal_sizes(p: usize, k: usize) -> Vec<usize> {
    (0..k).map(|b| (b + 1) * p / k - b * p / k).collect()
}

/// Default unbalanced sizes: proportions 8:4:3 (exactly (8, 4, 3) for p = 15).
pub fn unbalanced_sizes(p: usize) -> Vec<usize> {
    let small = (p * 3 / 15).max(1);
    let mid = (p * 4 / 15).max(1);
    vec![p.saturating_sub(small + mid), mid, small]
}

impl DesignSpec {
    /// Design of the given kind with default block structure: three blocks
    /// (equal for chain/random, 8:4:3 for unbalanced), singletons with
    /// `⌊2p/3⌋` edges for unstructured.
    pub fn new(kind: DesignKind, p: usize, seed: u64) -> Self {
        let block_sizes = match kind {
            DesignKind::Chain | DesignKind::Random => equal_sizes(p, 3.min(p.max(1))),
            DesignKind::Unbalanced => unbalanced_sizes(p),
            DesignKind::Unstructured => vec![1; p],
        };
        Self {
            kind,
            p,
            block_sizes,
            diag_value: 1.0,
            within_block: 0.5,
            cross_block: 0.25,
            n_edges: 2 * p / 3,
            seed,
        }
    }

    pub fn with_sizes(mut self, sizes: Vec<usize>) -> Self {
        self.p = sizes.iter().sum();
        self.block_sizes = sizes;
        self
    }

    pub fn k(&self) -> usize {
        self.block_sizes.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.p < 2 {
            return Err(Error::InvalidInput(format!(
                "design needs p ≥ 2, got {}",
                self.p
            )));
        }
        if self.block_sizes.iter().any(|&s| s == 0) {
            return Err(Error::InvalidInput("block sizes must be positive".into()));
        }
        if self.block_sizes.iter().sum::<usize>() != self.p {
            return Err(Error::InvalidInput(format!(
                "block sizes {:?} do not sum to p = {}",
                self.block_sizes, self.p
            )));
        }
        match self.kind {
            DesignKind::Unstructured => {
                if self.block_sizes.iter().any(|&s| s != 1) {
                    return Err(Error::InvalidInput(
                        "the unstructured design has singleton blocks".into(),
                    ));
                }
                if self.n_edges > self.p * (self.p - 1) / 2 {
                    return Err(Error::InvalidInput(format!(
                        "{} edges requested but p = {} has only {} pairs",
                        self.n_edges,
                        self.p,
                        self.p * (self.p - 1) / 2
                    )));
                }
            }
            DesignKind::Random if self.k() < 2 => {
                return Err(Error::InvalidInput(
                    "the random design needs at least two blocks".into(),
                ));
            }
            _ => {}
        }
        Ok(())
    }
}

/// True precision matrix of a design with its partition and edge set.
#[derive(Debug, Clone, PartialEq)]
pub struct Design {
    pub omega: SymmetricMatrix,
    pub sigma: SymmetricMatrix,
    pub partition: Partition,
    pub support: EdgeSupport,
}

const EDGE_RETRIES: usize = 100;

pub fn design_precision(spec: &DesignSpec) -> Result<Design> {
    spec.validate()?;
    let partition = Partition::from_sizes(&spec.block_sizes);
    let k = spec.k();
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);

    let block_omega = |connected: &dyn Fn(usize, usize) -> bool| {
        DMatrix::from_fn(spec.p, spec.p, |i, j| {
            let (a, b) = (partition.block_of(i), partition.block_of(j));
            if i == j {
                spec.diag_value
            } else if a == b {
                spec.within_block
            } else if connected(a.min(b), a.max(b)) {
                spec.cross_block
            } else {
                0.0
            }
        })
    };

    let omega = match spec.kind {
        DesignKind::Chain | DesignKind::Unbalanced => block_omega(&|a, b| b == a + 1),
        DesignKind::Random => {
            let pairs: Vec<(usize, usize)> = (0..k)
                .flat_map(|a| ((a + 1)..k).map(move |b| (a, b)))
                .collect();
            let chosen = pairs[rng.gen_range(0..pairs.len())];
            block_omega(&|a, b| (a, b) == chosen)
        }
        DesignKind::Unstructured => {
            let pairs: Vec<(usize, usize)> = (0..spec.p)
                .flat_map(|i| ((i + 1)..spec.p).map(move |j| (i, j)))
                .collect();
            let mut found = None;
            for _ in 0..EDGE_RETRIES {
                let mut m = DMatrix::from_diagonal_element(spec.p, spec.p, spec.diag_value);
                for idx in sample(&mut rng, pairs.len(), spec.n_edges).into_iter() {
                    let (i, j) = pairs[idx];
                    m[(i, j)] = spec.cross_block;
                    m[(j, i)] = spec.cross_block;
                }
                if is_positive_definite(&SymmetricMatrix::from_upper(m.clone()), PD_TOL)? {
                    found = Some(m);
                    break;
                }
            }
            match found {
                Some(m) => m,
                None => {
                    return Err(Error::Design {
                        min_eigenvalue: f64::NAN,
                    })
                }
            }
        }
    };
    let omega = SymmetricMatrix::from_upper(omega);
    let ev = omega.eigenvalues();
    if !is_positive_definite(&omega, PD_TOL)? {
        return Err(Error::Design {
            min_eigenvalue: ev[0],
        });
    }
    let sigma = SymmetricMatrix::symmetrize(
        &omega
            .as_matrix()
            .clone()
            .cholesky()
            .expect("positive definite")
            .inverse(),
    );
    let support = EdgeSupport::from_nonzeros(omega.as_matrix());
    Ok(Design {
        omega,
        sigma,
        partition,
        support,
    })
}

/// Tree with the partition as its only aggregation level: root → one node
/// per block → leaves.
pub fn ideal_tree(partition: &Partition, var_names: &[String]) -> Result<AggregationTree> {
    if var_names.len() != partition.p() {
        return Err(Error::Dimension(format!(
            "{} names for {} variables",
            var_names.len(),
            partition.p()
        )));
    }
    let mut spec = TreeSpec::default();
    spec.push("root", None, "root");
    for (b, members) in partition.blocks().iter().enumerate() {
        let gid = format!("group{}", b + 1);
        spec.push(gid.clone(), Some("root"), gid.clone());
        for &j in members {
            spec.push(
                format!("leaf:{}", var_names[j]),
                Some(&gid),
                var_names[j].clone(),
            );
        }
    }
    AggregationTree::from_spec(&spec, var_names)
}

/// Dendrogram of average-linkage clustering on one latent scalar per
/// variable. Variables of block `i` (1-based) have latent points drawn from
/// `N(1/i, (0.05·min_{j≠i}|1/i − 1/j|)²)`.
pub fn realistic_tree(
    block_sizes: &[usize],
    var_names: &[String],
    seed: u64,
) -> Result<AggregationTree> {
    realistic_tree_with(block_sizes, var_names, seed, Method::Average)
}

pub fn realistic_tree_with(
    block_sizes: &[usize],
    var_names: &[String],
    seed: u64,
    linkage: Method,
) -> Result<AggregationTree> {
    let k = block_sizes.len();
    let p: usize = block_sizes.iter().sum();
    if k < 2 {
        return Err(Error::InvalidInput(
            "a realistic tree needs at least two blocks".into(),
        ));
    }
    if var_names.len() != p {
        return Err(Error::Dimension(format!(
            "{} names for {p} variables",
            var_names.len()
        )));
    }
    let mu: Vec<f64> = (1..=k).map(|i| 1.0 / i as f64).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut latent = Vec::with_capacity(p);
    for (b, &size) in block_sizes.iter().enumerate() {
        let gap = (0..k)
            .filter(|&c| c != b)
            .map(|c| (mu[b] - mu[c]).abs())
            .fold(f64::INFINITY, f64::min);
        let dist = Normal::new(mu[b], 0.05 * gap).expect("positive spread");
        latent.extend((0..size).map(|_| dist.sample(&mut rng)));
    }
    Ok(dendrogram_tree(&latent, var_names, linkage))
}

/// Dendrogram of scalar points as a tree; internal node `n + s` is created
/// by merge step `s`.
pub fn dendrogram_tree(points: &[f64], var_names: &[String], method: Method) -> AggregationTree {
    let n = points.len();
    let mut spec = TreeSpec::default();
    if n == 1 {
        spec.push("root", None, "root");
        spec.push(
            format!("leaf:{}", var_names[0]),
            Some("root"),
            var_names[0].clone(),
        );
        return AggregationTree::from_spec(&spec, var_names).expect("valid tree");
    }
    let mut condensed = Vec::with_capacity(n * (n - 1) / 2);
    for i in 0..n {
        for j in (i + 1)..n {
            condensed.push((points[i] - points[j]).abs());
        }
    }
    let dend = linkage(&mut condensed, n, method);
    let steps = dend.steps();
    let mut parent = vec![String::new(); 2 * n - 1];
    let node_id = |c: usize| {
        if c < n {
            format!("leaf:{}", var_names[c])
        } else if c == 2 * n - 2 {
            "root".to_string()
        } else {
            format!("merge{}", c - n + 1)
        }
    };
    for (s, step) in steps.iter().enumerate() {
        parent[step.cluster1] = node_id(n + s);
        parent[step.cluster2] = node_id(n + s);
    }
    spec.push("root", None, "root");
    for c in (n..2 * n - 2).rev() {
        let id = node_id(c);
        spec.push(id.clone(), Some(&parent[c]), id);
    }
    for (j, name) in var_names.iter().enumerate() {
        spec.push(node_id(j), Some(&parent[j]), name.clone());
    }
    AggregationTree::from_spec(&spec, var_names).expect("dendrogram is a valid tree")
}

/// `n` draws from `N(0, Ω⁻¹)`, one per row.
pub fn sample_gaussian(omega: &SymmetricMatrix, n: usize, seed: u64) -> Result<DMatrix<f64>> {
    if !is_positive_definite(omega, PD_TOL)? {
        return Err(Error::NotPositiveDefinite {
            min_eigenvalue: omega.eigenvalues()[0],
        });
    }
    let p = omega.dim();
    let sigma = omega
        .as_matrix()
        .clone()
        .cholesky()
        .ok_or(Error::NotPositiveDefinite {
            min_eigenvalue: f64::NAN,
        })?
        .inverse();
    let l = sigma
        .cholesky()
        .ok_or(Error::NotPositiveDefinite {
            min_eigenvalue: f64::NAN,
        })?
        .unpack();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let z: DMatrix<f64> = DMatrix::from_fn(n, p, |_, _| {
        <StandardNormal as Distribution<f64>>::sample(&StandardNormal, &mut rng)
    });
    Ok(z * l.transpose())
}
