//! Minimal dense linear solve used by the edge-balance Newton iterations.
//!
//! Problem sizes are the number of graph nodes (tens, at most a few hundred),
//! so an LU factorization with partial pivoting is plenty.

use alloc::vec;
use alloc::vec::Vec;

use crate::error::Error;
use crate::Result;

/// Solves `a x = b` in place for a row-major `n x n` matrix. `a` and `b` are
/// destroyed; the solution is returned.
pub(crate) fn solve_dense(a: &mut [f64], b: &mut [f64], n: usize) -> Result<Vec<f64>> {
    debug_assert_eq!(a.len(), n * n);
    debug_assert_eq!(b.len(), n);
    let mut perm: Vec<usize> = (0..n).collect();

    for col in 0..n {
        // Partial pivot.
        let mut pivot_row = col;
        let mut pivot_mag = a[perm[col] * n + col].abs();
        for row in (col + 1)..n {
            let mag = a[perm[row] * n + col].abs();
            if mag > pivot_mag {
                pivot_mag = mag;
                pivot_row = row;
            }
        }
        if pivot_mag < 1e-300 {
            return Err(Error::SolverDiverged(alloc::format!(
                "singular matrix at column {col}"
            )));
        }
        perm.swap(col, pivot_row);

        let pivot = a[perm[col] * n + col];
        for row in (col + 1)..n {
            let factor = a[perm[row] * n + col] / pivot;
            a[perm[row] * n + col] = 0.0;
            if factor != 0.0 {
                for k in (col + 1)..n {
                    a[perm[row] * n + k] -= factor * a[perm[col] * n + k];
                }
                b[perm[row]] -= factor * b[perm[col]];
            }
        }
    }

    // Back substitution.
    let mut x = vec![0.0; n];
    for col in (0..n).rev() {
        let mut acc = b[perm[col]];
        for k in (col + 1)..n {
            acc -= a[perm[col] * n + k] * x[k];
        }
        x[col] = acc / a[perm[col] * n + col];
    }
    Ok(x)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn solves_small_system() {
        // [2 1; 1 3] x = [5; 10] -> x = [1; 3]
        let mut a = vec![2.0, 1.0, 1.0, 3.0];
        let mut b = vec![5.0, 10.0];
        let x = solve_dense(&mut a, &mut b, 2).unwrap();
        assert!((x[0] - 1.0).abs() < 1e-12);
        assert!((x[1] - 3.0).abs() < 1e-12);
    }

    #[test]
    fn rejects_singular() {
        let mut a = vec![1.0, 2.0, 2.0, 4.0];
        let mut b = vec![1.0, 2.0];
        assert!(solve_dense(&mut a, &mut b, 2).is_err());
    }
}
