//! Aggregation trees, the leaf-ancestor matrix, partition decoding and
//! aggregated precision matrices.

use std::collections::{HashMap, HashSet};
use std::fmt;

use nalgebra::DMatrix;

use crate::error::{Error, Result};
use crate::model::SymmetricMatrix;

/// Floor applied to diagonal entries of `D` before forming `D_agg`.
pub const D_FLOOR: f64 = 1e-8;
/// Absolute tolerance for block constancy in [`aggregate_precision`].
pub const BLOCK_TOL: f64 = 1e-6;
/// Row-norm threshold used when decoding a partition from a consensus copy of
/// Γ. Prox copies carry exact zeros and are decoded with 0.0.
pub const GAMMA_ZERO_TOL: f64 = 1e-8;

/// One row of a tree description: `node_id,parent_id,label`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NodeRecord {
    pub id: String,
    pub parent: Option<String>,
    pub label: String,
}

/// An unvalidated tree as read from a file or assembled in code.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct TreeSpec {
    pub nodes: Vec<NodeRecord>,
}

impl TreeSpec {
    pub fn push(&mut self, id: impl Into<String>, parent: Option<&str>, label: impl Into<String>) {
        self.nodes.push(NodeRecord {
            id: id.into(),
            parent: parent.map(str::to_owned),
            label: label.into(),
        });
    }

    /// Root with every variable attached directly beneath it.
    pub fn star(var_names: &[String]) -> Self {
        let mut spec = TreeSpec::default();
        spec.push("root", None, "root");
        for name in var_names {
            spec.push(format!("leaf:{name}"), Some("root"), name.clone());
        }
        spec
    }
}

/// A structural problem found by [`validate_tree`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum TreeViolation {
    NoRoot,
    MultipleRoots(Vec<String>),
    DuplicateId(String),
    UnknownParent { node: String, parent: String },
    Cycle(String),
    Unreachable(String),
    DuplicateLeafLabel(String),
    LeafNotInData(String),
    VariableWithoutLeaf(String),
}

impl fmt::Display for TreeViolation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            TreeViolation::NoRoot => write!(f, "no root node (a node with empty parent)"),
            TreeViolation::MultipleRoots(ids) => write!(f, "multiple roots: {}", ids.join(", ")),
            TreeViolation::DuplicateId(id) => write!(f, "duplicate node id '{id}'"),
            TreeViolation::UnknownParent { node, parent } => {
                write!(f, "node '{node}' references unknown parent '{parent}'")
            }
            TreeViolation::Cycle(id) => write!(f, "node '{id}' lies on a cycle"),
            TreeViolation::Unreachable(id) => {
                write!(f, "node '{id}' is not reachable from the root")
            }
            TreeViolation::DuplicateLeafLabel(l) => {
                write!(f, "leaf label '{l}' appears more than once")
            }
            TreeViolation::LeafNotInData(l) => {
                write!(f, "leaf label '{l}' does not match any data column")
            }
            TreeViolation::VariableWithoutLeaf(v) => {
                write!(f, "variable '{v}' has no matching leaf in the tree")
            }
        }
    }
}

/// Checks single root, acyclicity, reachability and the leaf/variable
/// bijection. An empty report means the tree is valid.
pub fn validate_tree(spec: &TreeSpec, var_names: &[String]) -> Vec<TreeViolation> {
    let mut report = Vec::new();
    let mut index: HashMap<&str, usize> = HashMap::new();
    for (k, node) in spec.nodes.iter().enumerate() {
        if index.insert(node.id.as_str(), k).is_some() {
            report.push(TreeViolation::DuplicateId(node.id.clone()));
        }
    }

    let roots: Vec<String> = spec
        .nodes
        .iter()
        .filter(|n| n.parent.is_none())
        .map(|n| n.id.clone())
        .collect();
    match roots.len() {
        0 => report.push(TreeViolation::NoRoot),
        1 => {}
        _ => report.push(TreeViolation::MultipleRoots(roots)),
    }

    let mut parent_idx: Vec<Option<usize>> = Vec::with_capacity(spec.nodes.len());
    for node in &spec.nodes {
        match &node.parent {
            None => parent_idx.push(None),
            Some(pid) => match index.get(pid.as_str()) {
                Some(&k) => parent_idx.push(Some(k)),
                None => {
                    report.push(TreeViolation::UnknownParent {
                        node: node.id.clone(),
                        parent: pid.clone(),
                    });
                    parent_idx.push(None);
                }
            },
        }
    }

    // Walk each node's parent chain; revisiting a node means a cycle.
    let n = spec.nodes.len();
    let mut on_cycle = vec![false; n];
    for start in 0..n {
        let mut seen = HashSet::new();
        let mut cur = Some(start);
        while let Some(k) = cur {
            if !seen.insert(k) {
                on_cycle[k] = true;
                break;
            }
            cur = parent_idx[k];
        }
    }
    for (k, flag) in on_cycle.iter().enumerate() {
        if *flag {
            report.push(TreeViolation::Cycle(spec.nodes[k].id.clone()));
        }
    }

    if roots_ok(&report) {
        let mut children: Vec<Vec<usize>> = vec![Vec::new(); n];
        let mut root = None;
        for (k, p) in parent_idx.iter().enumerate() {
            match p {
                Some(p) => children[*p].push(k),
                None if spec.nodes[k].parent.is_none() => root = Some(k),
                None => {}
            }
        }
        let mut reached = vec![false; n];
        if let Some(r) = root {
            let mut stack = vec![r];
            while let Some(k) = stack.pop() {
                if reached[k] {
                    continue;
                }
                reached[k] = true;
                stack.extend(children[k].iter().copied());
            }
        }
        for k in 0..n {
            if !reached[k] && !on_cycle[k] {
                report.push(TreeViolation::Unreachable(spec.nodes[k].id.clone()));
            }
        }
    }

    let has_child: HashSet<usize> = parent_idx.iter().flatten().copied().collect();
    let vars: HashSet<&str> = var_names.iter().map(String::as_str).collect();
    let mut leaf_labels: HashSet<&str> = HashSet::new();
    for (k, node) in spec.nodes.iter().enumerate() {
        if has_child.contains(&k) {
            continue;
        }
        if !leaf_labels.insert(node.label.as_str()) {
            report.push(TreeViolation::DuplicateLeafLabel(node.label.clone()));
        }
        if !vars.contains(node.label.as_str()) {
            report.push(TreeViolation::LeafNotInData(node.label.clone()));
        }
    }
    for v in var_names {
        if !leaf_labels.contains(v.as_str()) {
            report.push(TreeViolation::VariableWithoutLeaf(v.clone()));
        }
    }
    report
}

fn roots_ok(report: &[TreeViolation]) -> bool {
    !report.iter().any(|v| {
        matches!(
            v,
            TreeViolation::NoRoot | TreeViolation::MultipleRoots(_) | TreeViolation::Cycle(_)
        )
    })
}

/// A validated similarity tree whose leaves correspond one-to-one with the
/// variables `0..p`.
#[derive(Debug, Clone, PartialEq)]
pub struct AggregationTree {
    ids: Vec<String>,
    labels: Vec<String>,
    parents: Vec<Option<usize>>,
    root: usize,
    /// Node index of the leaf for each variable.
    var_leaf: Vec<usize>,
}

impl AggregationTree {
    /// Validates `spec` against the variable names; fails with every
    /// violation listed.
    pub fn from_spec(spec: &TreeSpec, var_names: &[String]) -> Result<Self> {
        let report = validate_tree(spec, var_names);
        if !report.is_empty() {
            let msg: Vec<String> = report.iter().map(ToString::to_string).collect();
            return Err(Error::Tree(msg.join("; ")));
        }
        let index: HashMap<&str, usize> = spec
            .nodes
            .iter()
            .enumerate()
            .map(|(k, n)| (n.id.as_str(), k))
            .collect();
        let parents: Vec<Option<usize>> = spec
            .nodes
            .iter()
            .map(|n| n.parent.as_ref().map(|p| index[p.as_str()]))
            .collect();
        let root = parents.iter().position(Option::is_none).expect("validated");
        let has_child: HashSet<usize> = parents.iter().flatten().copied().collect();
        let leaf_by_label: HashMap<&str, usize> = spec
            .nodes
            .iter()
            .enumerate()
            .filter(|(k, _)| !has_child.contains(k))
            .map(|(k, n)| (n.label.as_str(), k))
            .collect();
        let var_leaf = var_names
            .iter()
            .map(|v| leaf_by_label[v.as_str()])
            .collect();
        Ok(Self {
            ids: spec.nodes.iter().map(|n| n.id.clone()).collect(),
            labels: spec.nodes.iter().map(|n| n.label.clone()).collect(),
            parents,
            root,
            var_leaf,
        })
    }

    /// Star tree (root plus one leaf per variable).
    pub fn star(var_names: &[String]) -> Self {
        Self::from_spec(&TreeSpec::star(var_names), var_names).expect("star tree is valid")
    }

    pub fn to_spec(&self) -> TreeSpec {
        TreeSpec {
            nodes: (0..self.len())
                .map(|k| NodeRecord {
                    id: self.ids[k].clone(),
                    parent: self.parents[k].map(|p| self.ids[p].clone()),
                    label: self.labels[k].clone(),
                })
                .collect(),
        }
    }

    /// Number of tree nodes |T|.
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    /// Number of leaves p.
    pub fn n_leaves(&self) -> usize {
        self.var_leaf.len()
    }

    pub fn root(&self) -> usize {
        self.root
    }

    pub fn id(&self, node: usize) -> &str {
        &self.ids[node]
    }

    pub fn label(&self, node: usize) -> &str {
        &self.labels[node]
    }

    pub fn parent(&self, node: usize) -> Option<usize> {
        self.parents[node]
    }

    pub fn leaf_of(&self, var: usize) -> usize {
        self.var_leaf[var]
    }

    pub fn node_index(&self, id: &str) -> Option<usize> {
        self.ids.iter().position(|x| x == id)
    }

    /// Nodes on the path from the leaf of `var` up to the root, inclusive.
    pub fn path_to_root(&self, var: usize) -> Vec<usize> {
        let mut path = vec![self.var_leaf[var]];
        while let Some(p) = self.parents[*path.last().unwrap()] {
            path.push(p);
        }
        path
    }

    /// Variables below `node` (the node itself if it is a leaf).
    pub fn descendant_leaves(&self, node: usize) -> Vec<usize> {
        (0..self.n_leaves())
            .filter(|&v| self.path_to_root(v).contains(&node))
            .collect()
    }
}

/// Binary `p×|T|` matrix with `A[j][k] = 1` iff node `k` lies on the path
/// from the root to leaf `j`.
#[derive(Debug, Clone, PartialEq)]
pub struct AncestorMatrix {
    pub a: DMatrix<f64>,
    pub root_column: usize,
}

impl AncestorMatrix {
    pub fn n_vars(&self) -> usize {
        self.a.nrows()
    }

    pub fn n_nodes(&self) -> usize {
        self.a.ncols()
    }
}

/// Builds the ancestor matrix; column `k` corresponds to tree node `k`.
pub fn ancestor_matrix(tree: &AggregationTree) -> AncestorMatrix {
    let p = tree.n_leaves();
    let mut a = DMatrix::zeros(p, tree.len());
    for j in 0..p {
        for k in tree.path_to_root(j) {
            a[(j, k)] = 1.0;
        }
    }
    AncestorMatrix {
        a,
        root_column: tree.root(),
    }
}

/// `|T|×p` parameter matrix with one row per tree node.
#[derive(Debug, Clone, PartialEq)]
pub struct GammaMatrix {
    pub gamma: DMatrix<f64>,
    pub root_row: usize,
}

impl GammaMatrix {
    /// Rows whose Euclidean norm exceeds `zero_tol`, plus the root.
    pub fn support(&self, zero_tol: f64) -> Vec<usize> {
        (0..self.gamma.nrows())
            .filter(|&u| u == self.root_row || self.gamma.row(u).norm() > zero_tol)
            .collect()
    }
}

/// A partition of the variables `0..p` into `K` blocks. Block ids are
/// 0-based and numbered in order of first appearance.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Partition {
    assignment: Vec<usize>,
    k: usize,
}

impl Partition {
    /// Builds a partition from arbitrary block labels, relabelling them in
    /// order of first appearance.
    pub fn from_labels<T: Eq + std::hash::Hash + Clone>(labels: &[T]) -> Self {
        let mut map: HashMap<T, usize> = HashMap::new();
        let assignment = labels
            .iter()
            .map(|l| {
                let next = map.len();
                *map.entry(l.clone()).or_insert(next)
            })
            .collect();
        Self {
            assignment,
            k: map.len(),
        }
    }

    /// Contiguous blocks of the given sizes.
    pub fn from_sizes(sizes: &[usize]) -> Self {
        let labels: Vec<usize> = sizes
            .iter()
            .enumerate()
            .flat_map(|(b, &s)| std::iter::repeat(b).take(s))
            .collect();
        Self::from_labels(&labels)
    }

    pub fn singletons(p: usize) -> Self {
        Self {
            assignment: (0..p).collect(),
            k: p,
        }
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn p(&self) -> usize {
        self.assignment.len()
    }

    pub fn assignment(&self) -> &[usize] {
        &self.assignment
    }

    pub fn block_of(&self, var: usize) -> usize {
        self.assignment[var]
    }

    pub fn blocks(&self) -> Vec<Vec<usize>> {
        let mut out = vec![Vec::new(); self.k];
        for (j, &b) in self.assignment.iter().enumerate() {
            out[b].push(j);
        }
        out
    }

    pub fn block_sizes(&self) -> Vec<usize> {
        self.blocks().iter().map(Vec::len).collect()
    }

    pub fn is_singletons(&self) -> bool {
        self.k == self.p()
    }

    /// `p×K` membership matrix `M`.
    pub fn membership(&self) -> DMatrix<f64> {
        let mut m = DMatrix::zeros(self.p(), self.k);
        for (j, &b) in self.assignment.iter().enumerate() {
            m[(j, b)] = 1.0;
        }
        m
    }
}

/// Decodes the partition implied by the nonzero rows of Γ: variables whose
/// rows of `A_Z` coincide share a block.
pub fn decode_partition(gamma: &GammaMatrix, a: &AncestorMatrix, zero_tol: f64) -> Partition {
    assert_eq!(
        gamma.gamma.nrows(),
        a.n_nodes(),
        "Γ rows must match tree nodes"
    );
    let z = gamma.support(zero_tol);
    decode_from_nodes(&z, a)
}

/// Partition induced by keeping the columns `z` of `A` (root always kept).
pub fn decode_from_nodes(z: &[usize], a: &AncestorMatrix) -> Partition {
    let mut cols: Vec<usize> = z.to_vec();
    if !cols.contains(&a.root_column) {
        cols.push(a.root_column);
    }
    cols.sort_unstable();
    let keys: Vec<Vec<bool>> = (0..a.n_vars())
        .map(|j| cols.iter().map(|&k| a.a[(j, k)] != 0.0).collect())
        .collect();
    Partition::from_labels(&keys)
}

/// Aggregated precision of the block sums `MᵀX` for a G-block structured
/// precision matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct AggregatedPrecision {
    /// Block core `C` (`K×K`).
    pub c: SymmetricMatrix,
    /// `C + (MᵀD⁻¹M)⁻¹`.
    pub omega_agg: SymmetricMatrix,
    /// Variables whose `d_j` was raised to the floor.
    pub floored: Vec<usize>,
    /// Largest deviation from block constancy observed.
    pub max_deviation: f64,
}

/// Extracts `C` from `Ω − diag(d)` and returns `C + D_agg` with
/// `D_agg = (MᵀD⁻¹M)⁻¹`.
pub fn aggregate_precision(
    omega: &SymmetricMatrix,
    d: &[f64],
    partition: &Partition,
    d_floor: f64,
    block_tol: f64,
) -> Result<AggregatedPrecision> {
    let p = omega.dim();
    if d.len() != p || partition.p() != p {
        return Err(Error::Dimension(format!(
            "omega is {p}x{p}, d has {} entries, partition covers {} variables",
            d.len(),
            partition.p()
        )));
    }
    let blocks = partition.blocks();
    let k = blocks.len();
    let m = omega.as_matrix();
    let resid = |i: usize, j: usize| if i == j { m[(i, j)] - d[i] } else { m[(i, j)] };

    let mut c = DMatrix::zeros(k, k);
    let mut max_dev = 0.0f64;
    for a in 0..k {
        for b in a..k {
            let mut sum = 0.0;
            let mut count = 0usize;
            for &i in &blocks[a] {
                for &j in &blocks[b] {
                    sum += resid(i, j);
                    count += 1;
                }
            }
            let mean = sum / count as f64;
            for &i in &blocks[a] {
                for &j in &blocks[b] {
                    max_dev = max_dev.max((resid(i, j) - mean).abs());
                }
            }
            // Single-entry blocks reproduce the stored value exactly.
            let value = if count == 1 {
                resid(blocks[a][0], blocks[b][0])
            } else {
                mean
            };
            c[(a, b)] = value;
            c[(b, a)] = value;
        }
    }
    if max_dev > block_tol {
        return Err(Error::BlockStructure {
            max_deviation: max_dev,
        });
    }

    let mut floored = Vec::new();
    let mut omega_agg = c.clone();
    for (b, members) in blocks.iter().enumerate() {
        let mut inv_sum = 0.0;
        for &j in members {
            let dj = if d[j] < d_floor {
                floored.push(j);
                d_floor
            } else {
                d[j]
            };
            inv_sum += 1.0 / dj;
        }
        omega_agg[(b, b)] += 1.0 / inv_sum;
    }
    floored.sort_unstable();
    Ok(AggregatedPrecision {
        c: SymmetricMatrix::from_upper(c),
        omega_agg: SymmetricMatrix::from_upper(omega_agg),
        floored,
        max_deviation: max_dev,
    })
}

/// Builds `Ω = M C Mᵀ + diag(d)`.
pub fn block_precision(c: &DMatrix<f64>, d: &[f64], partition: &Partition) -> SymmetricMatrix {
    let m = partition.membership();
    let mut omega = &m * c * m.transpose();
    for (j, dj) in d.iter().enumerate() {
        omega[(j, j)] += dj;
    }
    SymmetricMatrix::from_upper(omega)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    pub(crate) fn names(p: usize) -> Vec<String> {
        (1..=p).map(|j| format!("X{j}")).collect()
    }

    /// Five leaves; u13 joins leaves 1..3 and u45 joins leaves 4..5.
    fn figure_tree() -> (TreeSpec, Vec<String>) {
        let mut s = TreeSpec::default();
        s.push("root", None, "root");
        s.push("u13", Some("root"), "u13");
        s.push("u45", Some("root"), "u45");
        for j in 1..=3 {
            s.push(format!("l{j}"), Some("u13"), format!("X{j}"));
        }
        for j in 4..=5 {
            s.push(format!("l{j}"), Some("u45"), format!("X{j}"));
        }
        (s, names(5))
    }

    fn random_binary_tree(p: usize, seed: u64) -> (TreeSpec, Vec<String>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let vars = names(p);
        let mut spec = TreeSpec::default();
        let mut pending: Vec<String> = Vec::new();
        let mut parents: HashMap<String, String> = HashMap::new();
        for v in &vars {
            pending.push(format!("leaf:{v}"));
        }
        let mut next = 0;
        while pending.len() > 1 {
            let a = pending.remove(rng.gen_range(0..pending.len()));
            let b = pending.remove(rng.gen_range(0..pending.len()));
            let id = format!("n{next}");
            next += 1;
            parents.insert(a, id.clone());
            parents.insert(b, id.clone());
            pending.push(id);
        }
        let root = pending.pop().unwrap();
        spec.push(root.clone(), None, "root");
        let mut internal: Vec<&String> = parents.values().collect();
        internal.sort();
        internal.dedup();
        for id in internal {
            if *id != root {
                spec.push(id.clone(), Some(&parents[id]), id.clone());
            }
        }
        for v in &vars {
            let id = format!("leaf:{v}");
            spec.push(id.clone(), Some(&parents[&id]), v.clone());
        }
        (spec, vars)
    }

    #[test]
    fn figure_tree_ancestor_rows() {
        let (spec, vars) = figure_tree();
        assert!(validate_tree(&spec, &vars).is_empty());
        let tree = AggregationTree::from_spec(&spec, &vars).unwrap();
        let a = ancestor_matrix(&tree);
        let ones: Vec<usize> = (0..tree.len()).filter(|&k| a.a[(0, k)] == 1.0).collect();
        let ids: Vec<&str> = ones.iter().map(|&k| tree.id(k)).collect();
        assert_eq!(ids, vec!["root", "u13", "l1"]);
        assert_eq!(a.root_column, 0);
    }

    #[test]
    fn star_tree_ancestor_matrix() {
        let vars = names(4);
        let tree = AggregationTree::star(&vars);
        let a = ancestor_matrix(&tree);
        assert_eq!(a.a.column(a.root_column).sum(), 4.0);
        for j in 0..4 {
            let leaf = tree.leaf_of(j);
            for i in 0..4 {
                assert_eq!(a.a[(i, leaf)], if i == j { 1.0 } else { 0.0 });
            }
        }
        assert_eq!(a.a.ncols(), 5);
    }

    #[test]
    fn row_sums_equal_path_length() {
        for seed in 0..5 {
            let (spec, vars) = random_binary_tree(8, seed);
            let tree = AggregationTree::from_spec(&spec, &vars).unwrap();
            let a = ancestor_matrix(&tree);
            for j in 0..8 {
                // Explicit walk up the parent pointers.
                let mut depth = 0;
                let mut cur = tree.leaf_of(j);
                while let Some(p) = tree.parent(cur) {
                    depth += 1;
                    cur = p;
                }
                assert_eq!(a.a.row(j).sum() as usize, depth + 1);
            }
            assert!(a.a.column(a.root_column).iter().all(|v| *v == 1.0));
        }
    }

    #[test]
    fn a_gamma_sums_along_paths() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for seed in 0..5 {
            let (spec, vars) = random_binary_tree(7, seed);
            let tree = AggregationTree::from_spec(&spec, &vars).unwrap();
            let a = ancestor_matrix(&tree);
            let gamma = DMatrix::from_fn(tree.len(), 7, |_, _| rng.gen_range(-4i32..4) as f64);
            let ag = &a.a * &gamma;
            for j in 0..7 {
                let mut expected = vec![0.0; 7];
                for u in tree.path_to_root(j) {
                    for (e, g) in expected.iter_mut().zip(gamma.row(u).iter()) {
                        *e += g;
                    }
                }
                let got: Vec<f64> = ag.row(j).iter().copied().collect();
                assert_eq!(got, expected);
            }
        }
    }

    #[test]
    fn decode_figure_partitions() {
        let (spec, vars) = figure_tree();
        let tree = AggregationTree::from_spec(&spec, &vars).unwrap();
        let a = ancestor_matrix(&tree);
        let mut g = DMatrix::zeros(tree.len(), 5);
        g[(1, 0)] = 0.3; // u13
        g[(0, 2)] = 1.0; // root
        let gm = GammaMatrix {
            gamma: g,
            root_row: 0,
        };
        let part = decode_partition(&gm, &a, 0.0);
        assert_eq!(part.k(), 2);
        assert_eq!(part.blocks(), vec![vec![0, 1, 2], vec![3, 4]]);

        let all = GammaMatrix {
            gamma: DMatrix::from_element(tree.len(), 5, 1.0),
            root_row: 0,
        };
        assert!(decode_partition(&all, &a, 0.0).is_singletons());

        let none = GammaMatrix {
            gamma: DMatrix::zeros(tree.len(), 5),
            root_row: 0,
        };
        assert_eq!(decode_partition(&none, &a, 0.0).k(), 1);
    }

    #[test]
    fn decode_ignores_row_scaling() {
        let (spec, vars) = random_binary_tree(9, 4);
        let tree = AggregationTree::from_spec(&spec, &vars).unwrap();
        let a = ancestor_matrix(&tree);
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for _ in 0..20 {
            let g = DMatrix::from_fn(tree.len(), 9, |_, _| {
                if rng.gen_bool(0.6) {
                    0.0
                } else {
                    rng.gen_range(-1.0..1.0)
                }
            });
            let mut scaled = g.clone();
            for mut row in scaled.row_iter_mut() {
                row *= rng.gen_range(0.1..10.0);
            }
            let p1 = decode_partition(
                &GammaMatrix {
                    gamma: g,
                    root_row: a.root_column,
                },
                &a,
                0.0,
            );
            let p2 = decode_partition(
                &GammaMatrix {
                    gamma: scaled,
                    root_row: a.root_column,
                },
                &a,
                0.0,
            );
            assert_eq!(p1, p2);
        }
    }

    #[test]
    fn toy_aggregation() {
        let p = 50;
        let part = Partition::from_labels(&(0..p).map(|j| j.min(2)).collect::<Vec<_>>());
        let c = DMatrix::from_row_slice(3, 3, &[0.0, 0.0, -1.0, 0.0, 0.0, -1.0, -1.0, -1.0, 2.0]);
        let d = vec![1.0; p];
        let omega = block_precision(&c, &d, &part);
        let agg = aggregate_precision(&omega, &d, &part, D_FLOOR, BLOCK_TOL).unwrap();
        let expected = [1.0, 0.0, -1.0, 0.0, 1.0, -1.0, -1.0, -1.0, 2.0 + 1.0 / 48.0];
        assert_eq!(agg.omega_agg.as_matrix().as_slice(), &expected);
        assert!(agg.floored.is_empty());
    }

    #[test]
    fn singleton_aggregation_is_identity_map() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let p = 6;
        let b = DMatrix::from_fn(p, p, |_, _| rng.gen_range(-1.0..1.0));
        let omega = SymmetricMatrix::from_upper(&b * b.transpose() + DMatrix::identity(p, p));
        let d: Vec<f64> = (0..p).map(|_| rng.gen_range(0.1..1.0)).collect();
        let agg =
            aggregate_precision(&omega, &d, &Partition::singletons(p), D_FLOOR, BLOCK_TOL).unwrap();
        assert!((agg.omega_agg.as_matrix() - omega.as_matrix()).amax() < 1e-14);
    }

    #[test]
    fn aggregation_matches_direct_inversion() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let part = Partition::from_sizes(&[3, 4, 2]);
        let b = DMatrix::from_fn(3, 3, |_, _| rng.gen_range(-1.0..1.0));
        let c = &b * b.transpose();
        let d: Vec<f64> = (0..9).map(|_| rng.gen_range(0.5..2.0)).collect();
        let omega = block_precision(&c, &d, &part);
        let agg = aggregate_precision(&omega, &d, &part, D_FLOOR, BLOCK_TOL).unwrap();
        let m = part.membership();
        let sigma = omega.as_matrix().clone().try_inverse().unwrap();
        let direct = (m.transpose() * sigma * &m).try_inverse().unwrap();
        assert!((agg.omega_agg.as_matrix() - direct).amax() < 1e-8);
        assert!((agg.c.as_matrix() - c).amax() < 1e-10);
    }

    #[test]
    fn aggregation_reports_structure_violations() {
        let part = Partition::from_sizes(&[2, 1]);
        let mut m = DMatrix::identity(3, 3);
        m[(0, 2)] = 0.5;
        m[(2, 0)] = 0.5;
        let omega = SymmetricMatrix::from_upper(m);
        let err = aggregate_precision(&omega, &[1.0, 1.0, 1.0], &part, D_FLOOR, BLOCK_TOL);
        match err {
            Err(Error::BlockStructure { max_deviation }) => {
                assert!((max_deviation - 0.25).abs() < 1e-12)
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn aggregation_floors_zero_diagonal() {
        let part = Partition::from_sizes(&[2]);
        let omega = SymmetricMatrix::from_upper(DMatrix::from_element(2, 2, 1.0));
        let agg = aggregate_precision(&omega, &[0.0, 0.0], &part, D_FLOOR, BLOCK_TOL).unwrap();
        assert_eq!(agg.floored, vec![0, 1]);
        assert!((agg.omega_agg.get(0, 0) - (1.0 + D_FLOOR / 2.0)).abs() < 1e-15);
    }

    #[test]
    fn validation_reports() {
        let (spec, vars) = figure_tree();
        assert!(validate_tree(&spec, &vars).is_empty());

        let mut selfloop = spec.clone();
        selfloop.nodes[1].parent = Some("u13".into());
        let rep = validate_tree(&selfloop, &vars);
        assert!(rep.contains(&TreeViolation::Cycle("u13".into())), "{rep:?}");

        let rep = validate_tree(&spec, &names(4));
        assert!(
            rep.contains(&TreeViolation::LeafNotInData("X5".into())),
            "{rep:?}"
        );

        let mut two_roots = spec.clone();
        two_roots.nodes[2].parent = None;
        assert!(matches!(
            validate_tree(&two_roots, &vars)[0],
            TreeViolation::MultipleRoots(_)
        ));
        assert!(AggregationTree::from_spec(&two_roots, &vars).is_err());
    }

    #[test]
    fn unary_chains_are_permitted() {
        let mut s = TreeSpec::default();
        s.push("r", None, "root");
        s.push("g1", Some("r"), "g1");
        s.push("g1b", Some("g1"), "g1b");
        s.push("a", Some("g1b"), "X1");
        s.push("b", Some("r"), "X2");
        let tree = AggregationTree::from_spec(&s, &names(2)).unwrap();
        let a = ancestor_matrix(&tree);
        assert_eq!(a.a.row(0).sum(), 4.0);
        assert_eq!(a.a.row(1).sum(), 2.0);
    }
}
