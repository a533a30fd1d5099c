//! Small dense solvers over [`Scalar`], sized for GREG normal equations and calibration
//! Newton steps (a few hundred unknowns at most).

use ndarray::{Array1, Array2};

use crate::scalar::Scalar;

/// Solves `a x = b` by Gaussian elimination with partial pivoting.
///
/// Returns `None` when a pivot falls below `rel_tol` times the largest absolute entry of `a`.
pub fn solve<T: Scalar>(a: &Array2<T>, b: &Array1<T>, rel_tol: T) -> Option<Array1<T>> {
    let n = a.nrows();
    assert_eq!(a.ncols(), n, "square system");
    assert_eq!(b.len(), n, "right-hand side length");
    let scale = a.iter().fold(T::zero(), |m, v| m.max(v.abs()));
    if n == 0 {
        return Some(Array1::zeros(0));
    }
    if scale == T::zero() {
        return None;
    }
    let mut m = a.clone();
    let mut rhs = b.clone();
    for col in 0..n {
        let (piv, piv_abs) = (col..n)
            .map(|r| (r, m[[r, col]].abs()))
            .fold((col, T::zero()), |best, cur| if cur.1 > best.1 { cur } else { best });
        if piv_abs <= rel_tol * scale {
            return None;
        }
        if piv != col {
            for c in 0..n {
                m.swap([col, c], [piv, c]);
            }
            rhs.swap(col, piv);
        }
        let d = m[[col, col]];
        for r in col + 1..n {
            let f = m[[r, col]] / d;
            if f == T::zero() {
                continue;
            }
            for c in col..n {
                let v = m[[col, c]];
                m[[r, c]] -= f * v;
            }
            let v = rhs[col];
            rhs[r] -= f * v;
        }
    }
    let mut x = Array1::zeros(n);
    for r in (0..n).rev() {
        let mut s = rhs[r];
        for c in r + 1..n {
            s -= m[[r, c]] * x[c];
        }
        x[r] = s / m[[r, r]];
    }
    Some(x)
}

/// Columns of a symmetric positive semi-definite matrix kept by a diagonally pivoted
/// Cholesky factorization: a column is dropped once its remaining pivot falls below
/// `rel_tol` times its original diagonal (or is non-positive). Returned indices are sorted.
pub fn independent_columns<T: Scalar>(gram: &Array2<T>, rel_tol: T) -> Vec<usize> {
    let n = gram.nrows();
    let mut l: Array2<T> = Array2::zeros((n, n));
    let mut remaining: Vec<T> = (0..n).map(|i| gram[[i, i]]).collect();
    let original = remaining.clone();
    let mut active: Vec<usize> = (0..n).collect();
    let mut kept = Vec::new();
    while !active.is_empty() {
        // Largest remaining pivot relative to its original diagonal.
        let (pos, &j) = active
            .iter()
            .enumerate()
            .max_by(|(_, &a), (_, &b)| {
                let ra = rel(remaining[a], original[a]);
                let rb = rel(remaining[b], original[b]);
                ra.partial_cmp(&rb).unwrap_or(std::cmp::Ordering::Equal).then(b.cmp(&a))
            })
            .expect("nonempty");
        if !(remaining[j] > rel_tol * original[j]) || original[j] <= T::zero() {
            break;
        }
        active.swap_remove(pos);
        let pivot = remaining[j].sqrt();
        let col = kept.len();
        l[[j, col]] = pivot;
        for &i in &active {
            let mut s = gram[[i, j]];
            for c in 0..col {
                s -= l[[i, c]] * l[[j, c]];
            }
            l[[i, col]] = s / pivot;
            remaining[i] -= l[[i, col]] * l[[i, col]];
        }
        kept.push(j);
    }
    kept.sort_unstable();
    kept
}

fn rel<T: Scalar>(rem: T, orig: T) -> T {
    if orig > T::zero() {
        rem / orig
    } else {
        T::zero()
    }
}
