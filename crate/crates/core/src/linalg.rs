//! Small dense linear algebra on `ndarray` for the symmetric systems that
//! show up in least squares, Newton steps and GMM weighting.

use ndarray::{Array1, Array2, ArrayView2, Axis};

use crate::error::{Error, Result};

/// Relative pivot threshold used for rank decisions on cross-product matrices.
pub const RANK_TOL: f64 = 1e-10;

/// Cholesky factorisation `P' A P = L L'` with diagonal pivoting.
///
/// A column is treated as dependent once its Schur complement diagonal falls
/// below `tol` times its original diagonal, i.e. once `1 - R^2` of that column
/// on the already accepted columns drops under `tol`. This keeps the rank
/// decision invariant to column scaling.
#[derive(Debug, Clone)]
pub struct PivotedCholesky {
    /// Lower-triangular factor in pivoted order, `rank x rank` block is valid.
    pub factor: Array2<f64>,
    /// `perm[k]` is the original index of the k-th pivot.
    pub perm: Vec<usize>,
    pub rank: usize,
}

impl PivotedCholesky {
    pub fn new(a: ArrayView2<f64>, tol: f64) -> Self {
        let n = a.nrows();
        assert_eq!(n, a.ncols(), "pivoted Cholesky needs a square matrix");
        let mut work = a.to_owned();
        let orig: Vec<f64> = (0..n).map(|i| a[[i, i]]).collect();
        let mut perm: Vec<usize> = (0..n).collect();
        let mut factor = Array2::<f64>::zeros((n, n));
        let mut rank = n;

        for k in 0..n {
            // pick the remaining column with the largest relative residual variance
            let mut best = k;
            let mut best_ratio = f64::NEG_INFINITY;
            for j in k..n {
                let o = orig[perm[j]];
                let ratio = if o > 0.0 { work[[j, j]] / o } else { 0.0 };
                if ratio > best_ratio {
                    best_ratio = ratio;
                    best = j;
                }
            }
            if !(best_ratio > tol) {
                rank = k;
                break;
            }
            if best != k {
                perm.swap(k, best);
                swap_sym(&mut work, k, best);
                for c in 0..k {
                    factor.swap([k, c], [best, c]);
                }
            }
            let pivot = work[[k, k]].sqrt();
            factor[[k, k]] = pivot;
            for i in (k + 1)..n {
                factor[[i, k]] = work[[i, k]] / pivot;
            }
            for i in (k + 1)..n {
                let lik = factor[[i, k]];
                for j in (k + 1)..=i {
                    let v = work[[i, j]] - lik * factor[[j, k]];
                    work[[i, j]] = v;
                    work[[j, i]] = v;
                }
            }
        }
        PivotedCholesky { factor, perm, rank }
    }

    pub fn is_full_rank(&self) -> bool {
        self.rank == self.perm.len()
    }

    /// Original indices of the columns judged linearly dependent.
    pub fn dependent(&self) -> &[usize] {
        &self.perm[self.rank..]
    }

    /// Original indices of the accepted pivots.
    pub fn independent(&self) -> &[usize] {
        &self.perm[..self.rank]
    }

    /// Inverse of the original matrix. Only valid at full rank.
    pub fn inverse(&self) -> Array2<f64> {
        assert!(self.is_full_rank());
        let n = self.perm.len();
        let l_inv = lower_triangular_inverse(&self.factor);
        // (L L')^{-1} = L^{-T} L^{-1}, then undo the permutation
        let pinv = l_inv.t().dot(&l_inv);
        let mut out = Array2::<f64>::zeros((n, n));
        for i in 0..n {
            for j in 0..n {
                out[[self.perm[i], self.perm[j]]] = pinv[[i, j]];
            }
        }
        out
    }

    /// Solve `A x = b`. Only valid at full rank.
    pub fn solve(&self, b: &Array1<f64>) -> Array1<f64> {
        assert!(self.is_full_rank());
        let n = self.perm.len();
        let pb: Array1<f64> = self.perm.iter().map(|&p| b[p]).collect();
        // forward substitution L y = Pb
        let mut y = Array1::<f64>::zeros(n);
        for i in 0..n {
            let mut s = pb[i];
            for k in 0..i {
                s -= self.factor[[i, k]] * y[k];
            }
            y[i] = s / self.factor[[i, i]];
        }
        // back substitution L' z = y
        let mut z = Array1::<f64>::zeros(n);
        for i in (0..n).rev() {
            let mut s = y[i];
            for k in (i + 1)..n {
                s -= self.factor[[k, i]] * z[k];
            }
            z[i] = s / self.factor[[i, i]];
        }
        let mut x = Array1::<f64>::zeros(n);
        for (k, &p) in self.perm.iter().enumerate() {
            x[p] = z[k];
        }
        x
    }
}

fn swap_sym(a: &mut Array2<f64>, i: usize, j: usize) {
    let n = a.nrows();
    for c in 0..n {
        a.swap([i, c], [j, c]);
    }
    for r in 0..n {
        a.swap([r, i], [r, j]);
    }
}

fn lower_triangular_inverse(l: &Array2<f64>) -> Array2<f64> {
    let n = l.nrows();
    let mut inv = Array2::<f64>::zeros((n, n));
    for j in 0..n {
        inv[[j, j]] = 1.0 / l[[j, j]];
        for i in (j + 1)..n {
            let mut s = 0.0;
            for k in j..i {
                s += l[[i, k]] * inv[[k, j]];
            }
            inv[[i, j]] = -s / l[[i, i]];
        }
    }
    inv
}

/// Inverse of a symmetric positive definite matrix; `what` names the matrix
/// in the error message.
pub fn inv_spd(a: &Array2<f64>, what: &str) -> Result<Array2<f64>> {
    let chol = PivotedCholesky::new(a.view(), 1e-13);
    if !chol.is_full_rank() {
        return Err(Error::Singular(format!(
            "{what} has rank {} < {}",
            chol.rank,
            a.nrows()
        )));
    }
    Ok(chol.inverse())
}

/// Solve `A x = b` for symmetric positive definite `A`.
pub fn solve_spd(a: &Array2<f64>, b: &Array1<f64>, what: &str) -> Result<Array1<f64>> {
    let chol = PivotedCholesky::new(a.view(), 1e-13);
    if !chol.is_full_rank() {
        return Err(Error::Singular(format!(
            "{what} has rank {} < {}",
            chol.rank,
            a.nrows()
        )));
    }
    Ok(chol.solve(b))
}

/// `X' X`.
pub fn crossprod(x: &Array2<f64>) -> Array2<f64> {
    x.t().dot(x)
}

/// Average `a` with its transpose to remove rounding asymmetry.
pub fn symmetrize(a: &mut Array2<f64>) {
    let n = a.nrows();
    for i in 0..n {
        for j in (i + 1)..n {
            let v = 0.5 * (a[[i, j]] + a[[j, i]]);
            a[[i, j]] = v;
            a[[j, i]] = v;
        }
    }
}

/// Sandwich `bread * meat * bread` for symmetric `bread`.
pub fn sandwich(bread: &Array2<f64>, meat: &Array2<f64>) -> Array2<f64> {
    let mut v = bread.dot(meat).dot(bread);
    symmetrize(&mut v);
    v
}

/// Sum of outer products of the rows of `scores` grouped by `group`.
pub fn grouped_outer(scores: &Array2<f64>, group: &[usize], n_groups: usize) -> Array2<f64> {
    let k = scores.ncols();
    let mut sums = Array2::<f64>::zeros((n_groups, k));
    for (row, &g) in scores.axis_iter(Axis(0)).zip(group) {
        let mut s = sums.row_mut(g);
        s += &row;
    }
    crossprod(&sums)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn inverse_of_spd_matrix() {
        let a = array![[4.0, 2.0, 0.6], [2.0, 5.0, 1.0], [0.6, 1.0, 3.0]];
        let inv = inv_spd(&a, "a").unwrap();
        let id = a.dot(&inv);
        for i in 0..3 {
            for j in 0..3 {
                let e = if i == j { 1.0 } else { 0.0 };
                assert!((id[[i, j]] - e).abs() < 1e-12);
            }
        }
        let b = array![1.0, -2.0, 0.5];
        let x = solve_spd(&a, &b, "a").unwrap();
        let r = a.dot(&x) - &b;
        assert!(r.iter().all(|v| v.abs() < 1e-12));
    }

    #[test]
    fn detects_dependent_column() {
        // third column = first + second
        let x = array![[1.0, 0.0, 1.0], [0.0, 1.0, 1.0], [1.0, 1.0, 2.0], [2.0, -1.0, 1.0]];
        let xtx = crossprod(&x);
        let chol = PivotedCholesky::new(xtx.view(), RANK_TOL);
        assert_eq!(chol.rank, 2);
        assert_eq!(chol.dependent().len(), 1);
        assert!(inv_spd(&xtx, "xtx").is_err());
    }

    #[test]
    fn zero_column_is_dependent_regardless_of_scale() {
        let x = array![[1e-8, 0.0], [2e-8, 0.0], [-1e-8, 0.0]];
        let chol = PivotedCholesky::new(crossprod(&x).view(), RANK_TOL);
        assert_eq!(chol.rank, 1);
        assert_eq!(chol.dependent(), &[1]);
    }

    #[test]
    fn grouped_outer_sums_within_groups() {
        let s = array![[1.0, 0.0], [2.0, 1.0], [-1.0, 1.0]];
        let m = grouped_outer(&s, &[0, 0, 1], 2);
        // group sums: (3,1) and (-1,1)
        assert_eq!(m, array![[10.0, 2.0], [2.0, 2.0]]);
    }
}
