//! Positive semi-definiteness checks and Gram realizations.
//!
//! Works on dense row-major `n x n` slices. The factorization is a
//! diagonal-pivoted Cholesky that stops once every remaining pivot falls below
//! the tolerance, which makes it usable on rank-deficient Gram matrices.

/// Relative tolerance applied to the largest diagonal entry.
pub const PSD_TOLERANCE: f64 = 1e-9;

/// Outcome of a pivoted factorization `A = L L^T` with `L` of size `n x rank`.
#[derive(Debug, Clone, PartialEq)]
pub struct GramFactor {
    pub n: usize,
    pub rank: usize,
    /// Row `i` holds the coordinates of point `i`; every row has `rank` entries.
    pub rows: Vec<Vec<f64>>,
}

/// Reason a matrix was found not to be PSD.
#[derive(Debug, Clone, PartialEq)]
pub struct NotPsd {
    /// Number of pivots accepted before failure.
    pub step: usize,
    /// Most negative residual diagonal, or largest residual off-diagonal magnitude.
    pub residual: f64,
}

fn scale_of(a: &[f64], n: usize) -> f64 {
    (0..n).map(|i| a[i * n + i].abs()).fold(0.0, f64::max).max(f64::MIN_POSITIVE)
}

/// Pivoted Cholesky with absolute cut-off `PSD_TOLERANCE * max |a_ii|`.
pub fn pivoted_cholesky(a: &[f64], n: usize) -> Result<GramFactor, NotPsd> {
    assert_eq!(a.len(), n * n, "matrix must be n x n");
    let tol = PSD_TOLERANCE * scale_of(a, n);
    let mut resid = a.to_vec();
    let mut cols: Vec<Vec<f64>> = Vec::new();
    let mut used = vec![false; n];

    loop {
        let mut best = None;
        let mut best_val = f64::NEG_INFINITY;
        for i in (0..n).filter(|&i| !used[i]) {
            let d = resid[i * n + i];
            if d < -tol {
                return Err(NotPsd { step: cols.len(), residual: d });
            }
            if d > best_val {
                best_val = d;
                best = Some(i);
            }
        }
        let Some(p) = best else { break };
        if best_val <= tol {
            break;
        }
        let root = best_val.sqrt();
        let col: Vec<f64> = (0..n)
            .map(|i| if used[i] { 0.0 } else { resid[i * n + p] / root })
            .collect();
        for i in 0..n {
            if used[i] {
                continue;
            }
            for j in 0..n {
                if !used[j] {
                    resid[i * n + j] -= col[i] * col[j];
                }
            }
        }
        used[p] = true;
        cols.push(col);
    }

    // Residual of a PSD matrix is PSD, so small diagonals bound the off-diagonals.
    for i in 0..n {
        for j in 0..n {
            if !used[i] && !used[j] && resid[i * n + j].abs() > tol {
                return Err(NotPsd { step: cols.len(), residual: resid[i * n + j].abs() });
            }
        }
    }

    let rank = cols.len();
    let rows = (0..n).map(|i| cols.iter().map(|c| c[i]).collect()).collect();
    Ok(GramFactor { n, rank, rows })
}

pub fn is_psd(a: &[f64], n: usize) -> bool {
    pivoted_cholesky(a, n).is_ok()
}

pub fn dot(x: &[f64], y: &[f64]) -> f64 {
    x.iter().zip(y).map(|(a, b)| a * b).sum()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn reconstruct(f: &GramFactor) -> Vec<f64> {
        let n = f.n;
        let mut out = vec![0.0; n * n];
        for i in 0..n {
            for j in 0..n {
                out[i * n + j] = dot(&f.rows[i], &f.rows[j]);
            }
        }
        out
    }

    #[test]
    fn identity_has_full_rank() {
        let a = [1.0, 0.0, 0.0, 1.0];
        let f = pivoted_cholesky(&a, 2).unwrap();
        assert_eq!(f.rank, 2);
        assert_eq!(reconstruct(&f), a.to_vec());
    }

    #[test]
    fn rank_one_matrix_factors() {
        let a = [1.0, 1.0, 1.0, 1.0];
        let f = pivoted_cholesky(&a, 2).unwrap();
        assert_eq!(f.rank, 1);
        for (x, y) in reconstruct(&f).iter().zip(a.iter()) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_diagonal_with_coupling_is_rejected() {
        assert!(!is_psd(&[0.0, 1.0, 1.0, 0.0], 2));
        assert!(!is_psd(&[1.0, 2.0, 2.0, 1.0], 2));
    }

    #[test]
    fn non_ultrametric_gram_fails() {
        // three unit-diagonal points with overlaps a=-0.9, b=0.9, c=0.9 is infeasible
        let a = [1.0, -0.9, 0.9, -0.9, 1.0, 0.9, 0.9, 0.9, 1.0];
        assert!(!is_psd(&a, 3));
    }
}
