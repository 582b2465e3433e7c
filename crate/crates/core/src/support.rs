//! Symmetric edge sets of a precision matrix.

use nalgebra::DMatrix;

/// Set of index pairs `(i, j)` permitted (or estimated) to be nonzero.
/// Always symmetric and always containing the diagonal.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EdgeSupport {
    mask: DMatrix<bool>,
}

impl EdgeSupport {
    /// Diagonal only.
    pub fn diagonal(p: usize) -> Self {
        Self {
            mask: DMatrix::from_fn(p, p, |i, j| i == j),
        }
    }

    pub fn full(p: usize) -> Self {
        Self {
            mask: DMatrix::from_element(p, p, true),
        }
    }

    /// Pairs `(i, j)` with either orientation nonzero in `m`, plus the
    /// diagonal.
    pub fn from_nonzeros(m: &DMatrix<f64>) -> Self {
        let p = m.nrows();
        Self {
            mask: DMatrix::from_fn(p, p, |i, j| i == j || m[(i, j)] != 0.0 || m[(j, i)] != 0.0),
        }
    }

    /// Pairs with `|m_ij| > tol` in either orientation, plus the diagonal.
    pub fn from_threshold(m: &DMatrix<f64>, tol: f64) -> Self {
        let p = m.nrows();
        Self {
            mask: DMatrix::from_fn(p, p, |i, j| {
                i == j || m[(i, j)].abs() > tol || m[(j, i)].abs() > tol
            }),
        }
    }

    /// Diagonal plus the listed off-diagonal pairs (either orientation).
    pub fn from_pairs(p: usize, pairs: &[(usize, usize)]) -> Self {
        let mut s = Self::diagonal(p);
        for &(i, j) in pairs {
            s.insert(i, j);
        }
        s
    }

    pub fn insert(&mut self, i: usize, j: usize) {
        self.mask[(i, j)] = true;
        self.mask[(j, i)] = true;
    }

    pub fn dim(&self) -> usize {
        self.mask.nrows()
    }

    pub fn contains(&self, i: usize, j: usize) -> bool {
        self.mask[(i, j)]
    }

    pub fn mask(&self) -> &DMatrix<bool> {
        &self.mask
    }

    /// Off-diagonal pairs `(i, j)` with `i < j`.
    pub fn edges(&self) -> Vec<(usize, usize)> {
        let p = self.dim();
        let mut out = Vec::new();
        for i in 0..p {
            for j in (i + 1)..p {
                if self.mask[(i, j)] {
                    out.push((i, j));
                }
            }
        }
        out
    }

    pub fn n_edges(&self) -> usize {
        self.edges().len()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn nonzero_pattern_is_symmetrized() {
        let mut m = DMatrix::zeros(3, 3);
        m[(0, 2)] = 1e-300;
        let s = EdgeSupport::from_nonzeros(&m);
        assert!(s.contains(2, 0) && s.contains(0, 2));
        assert!(s.contains(1, 1));
        assert_eq!(s.edges(), vec![(0, 2)]);
    }

    #[test]
    fn constructors() {
        assert_eq!(EdgeSupport::full(4).n_edges(), 6);
        assert_eq!(EdgeSupport::diagonal(4).n_edges(), 0);
        let s = EdgeSupport::from_pairs(4, &[(3, 1), (0, 1)]);
        assert_eq!(s.edges(), vec![(0, 1), (1, 3)]);
    }
}
