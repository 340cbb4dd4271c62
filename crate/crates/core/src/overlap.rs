//! Replicas, overlap matrices, constraint matrices and the elementary
//! predicates used by every test in the crate.

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::linalg;

/// Slack allowed on the unit-ball constraint and on diagonal checks.
pub const NORM_TOLERANCE: f64 = 1e-9;

/// A point of the ball, embedded in finite dimension.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplicaVector {
    coords: Vec<f64>,
}

impl ReplicaVector {
    pub fn new(coords: Vec<f64>) -> Result<Self> {
        if coords.is_empty() {
            return invalid("replica must have positive dimension");
        }
        if coords.iter().any(|c| !c.is_finite()) {
            return invalid("replica coordinates must be finite");
        }
        let v = ReplicaVector { coords };
        if v.norm_sq() > 1.0 + NORM_TOLERANCE {
            return invalid(format!("replica lies outside the unit ball (|x|^2 = {})", v.norm_sq()));
        }
        Ok(v)
    }

    pub fn dimension(&self) -> usize {
        self.coords.len()
    }

    pub fn coords(&self) -> &[f64] {
        &self.coords
    }

    pub fn norm_sq(&self) -> f64 {
        linalg::dot(&self.coords, &self.coords)
    }

    pub fn dot(&self, other: &ReplicaVector) -> Result<f64> {
        if self.dimension() != other.dimension() {
            return Err(Error::DimensionMismatch { expected: self.dimension(), found: other.dimension() });
        }
        Ok(linalg::dot(&self.coords, &other.coords))
    }

    /// Euclidean distance, used by the norm form of the ultrametric inequality.
    pub fn distance(&self, other: &ReplicaVector) -> Result<f64> {
        if self.dimension() != other.dimension() {
            return Err(Error::DimensionMismatch { expected: self.dimension(), found: other.dimension() });
        }
        Ok(self.coords.iter().zip(&other.coords).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt())
    }

    /// Zero-pads to `dimension`; never truncates.
    pub fn padded(mut self, dimension: usize) -> Self {
        if self.coords.len() < dimension {
            self.coords.resize(dimension, 0.0);
        }
        self
    }
}

/// Symmetric matrix of replica overlaps `R[l][l'] = sigma^l . sigma^l'`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OverlapMatrix {
    pub n: usize,
    pub q_star: f64,
    /// Row-major, `n * n` entries.
    pub entries: Vec<f64>,
}

impl OverlapMatrix {
    /// Builds from a symmetric overlap function; the diagonal is set to `q_star`.
    pub fn from_fn(n: usize, q_star: f64, mut overlap: impl FnMut(usize, usize) -> f64) -> Self {
        let mut entries = vec![0.0; n * n];
        for i in 0..n {
            entries[i * n + i] = q_star;
            for j in (i + 1)..n {
                let r = overlap(i, j);
                entries[i * n + j] = r;
                entries[j * n + i] = r;
            }
        }
        OverlapMatrix { n, q_star, entries }
    }

    /// Validates shape and exact symmetry of deserialized data.
    pub fn from_entries(n: usize, q_star: f64, entries: Vec<f64>) -> Result<Self> {
        if entries.len() != n * n {
            return Err(Error::SizeMismatch(format!("expected {} entries, found {}", n * n, entries.len())));
        }
        for i in 0..n {
            for j in (i + 1)..n {
                if entries[i * n + j] != entries[j * n + i] {
                    return invalid(format!("overlap matrix not symmetric at ({i}, {j})"));
                }
            }
        }
        Ok(OverlapMatrix { n, q_star, entries })
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.entries[i * self.n + j]
    }

    pub fn is_symmetric(&self) -> bool {
        (0..self.n).all(|i| (0..self.n).all(|j| self.get(i, j) == self.get(j, i)))
    }

    pub fn is_psd(&self) -> bool {
        linalg::is_psd(&self.entries, self.n)
    }

    pub fn diagonal_matches(&self, tol: f64) -> bool {
        (0..self.n).all(|i| (self.get(i, i) - self.q_star).abs() <= tol)
    }

    /// Leading `k x k` block.
    pub fn leading(&self, k: usize) -> OverlapMatrix {
        assert!(k <= self.n);
        OverlapMatrix::from_fn(k, self.q_star, |i, j| self.get(i, j))
    }
}

/// Target overlaps with tolerance for the `R^n ~ A` event.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConstraintMatrix {
    pub n: usize,
    pub q_star: f64,
    pub epsilon: f64,
    pub entries: Vec<f64>,
}

impl ConstraintMatrix {
    /// Full validation: symmetric, diagonal `q_star`, PSD, `epsilon > 0`.
    pub fn new(n: usize, q_star: f64, epsilon: f64, entries: Vec<f64>) -> Result<Self> {
        let a = Self::new_relaxed(n, q_star, epsilon, entries)?;
        if !linalg::is_psd(&a.entries, n) {
            return invalid("constraint matrix is not positive semi-definite");
        }
        Ok(a)
    }

    /// Skips the PSD requirement. Used to probe targets that no configuration
    /// can realize (the probability of `R^n ~ A` must then be zero).
    pub fn new_relaxed(n: usize, q_star: f64, epsilon: f64, entries: Vec<f64>) -> Result<Self> {
        if n == 0 {
            return invalid("constraint matrix must be non-empty");
        }
        if !(epsilon > 0.0) {
            return invalid("epsilon must be positive");
        }
        if entries.len() != n * n {
            return Err(Error::SizeMismatch(format!("expected {} entries, found {}", n * n, entries.len())));
        }
        for i in 0..n {
            if entries[i * n + i] != q_star {
                return invalid(format!("diagonal entry {i} differs from q*"));
            }
            for j in (i + 1)..n {
                if entries[i * n + j] != entries[j * n + i] {
                    return invalid(format!("constraint matrix not symmetric at ({i}, {j})"));
                }
            }
        }
        Ok(ConstraintMatrix { n, q_star, epsilon, entries })
    }

    /// Constant off-diagonal target.
    pub fn uniform(n: usize, q_star: f64, epsilon: f64, off_diagonal: f64) -> Result<Self> {
        let mut entries = vec![off_diagonal; n * n];
        for i in 0..n {
            entries[i * n + i] = q_star;
        }
        Self::new(n, q_star, epsilon, entries)
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.entries[i * self.n + j]
    }
}

/// `true` iff every off-diagonal entry lies in the open window `(a - eps, a + eps)`.
pub fn matrix_approx(r: &OverlapMatrix, a: &ConstraintMatrix) -> Result<bool> {
    if r.n != a.n {
        return Err(Error::SizeMismatch(format!("R is {}x{}, A is {}x{}", r.n, r.n, a.n, a.n)));
    }
    Ok(approx_leading(r, a))
}

/// Same as [`matrix_approx`] on the leading `a.n` block of a larger matrix.
pub(crate) fn approx_leading(r: &OverlapMatrix, a: &ConstraintMatrix) -> bool {
    let n = a.n;
    for i in 0..n {
        for j in (i + 1)..n {
            if (r.get(i, j) - a.get(i, j)).abs() >= a.epsilon {
                return false;
            }
        }
    }
    true
}

/// Largest constraint in the last column: `max(a_{1,n}, ..., a_{n-1,n})`.
pub fn a_star(a: &ConstraintMatrix) -> Result<f64> {
    if a.n < 2 {
        return invalid("a* needs n >= 2");
    }
    let last = a.n - 1;
    Ok((0..last).map(|l| a.get(l, last)).fold(f64::NEG_INFINITY, f64::max))
}

/// `I(r12 >= min(r13, r23))`.
#[inline]
pub fn ultrametric_indicator(r12: f64, r13: f64, r23: f64) -> bool {
    r12 >= r13.min(r23)
}

/// Overlap matrix of explicit replicas. `q_star` is taken as the largest
/// squared norm.
pub fn overlap_matrix(replicas: &[ReplicaVector]) -> Result<OverlapMatrix> {
    let Some(first) = replicas.first() else {
        return invalid("need at least one replica");
    };
    let dim = first.dimension();
    if let Some(bad) = replicas.iter().find(|r| r.dimension() != dim) {
        return Err(Error::DimensionMismatch { expected: dim, found: bad.dimension() });
    }
    let n = replicas.len();
    let mut entries = vec![0.0; n * n];
    for i in 0..n {
        for j in i..n {
            let r = linalg::dot(replicas[i].coords(), replicas[j].coords());
            entries[i * n + j] = r;
            entries[j * n + i] = r;
        }
    }
    let q_star = (0..n).map(|i| entries[i * n + i]).fold(f64::NEG_INFINITY, f64::max);
    Ok(OverlapMatrix { n, q_star, entries })
}
