//! Dense SVD of small square matrices via one-sided Jacobi rotations.
//!
//! The update step of the incremental factorization reduces everything to the
//! SVD of a small (q+b)-sized matrix K, which is computed on the master
//! partition only and broadcast. One-sided Jacobi orthogonalizes the columns
//! of K by plane rotations accumulated into V; at convergence the column
//! norms are the singular values and the normalized columns form U.
//!
//! Output is fully deterministic: singular values sorted non-increasingly
//! (stable in the original column index) and a fixed sign convention — the
//! entry of largest magnitude in each U column is made positive, ties broken
//! by lowest row index, flipping the paired V column alongside.

use crate::error::{Error, Result};
use ndarray::{Array1, Array2};

const MAX_SWEEPS: usize = 64;
/// Off-diagonal Gram entries below `JACOBI_TOL * |col_i| * |col_j|` are
/// treated as converged.
const JACOBI_TOL: f64 = 1e-15;

/// Full SVD `A = U · diag(s) · Vᵀ` of a square matrix.
///
/// `U` and `V` are square and orthogonal even when `A` is rank deficient:
/// columns paired with zero singular values are completed to an orthonormal
/// basis deterministically.
pub fn small_svd(a: &Array2<f64>) -> Result<(Array2<f64>, Array1<f64>, Array2<f64>)> {
    let (m, n) = a.dim();
    if m != n {
        return Err(Error::Argument(format!(
            "small_svd expects a square matrix, got {m}x{n}"
        )));
    }
    if a.iter().any(|x| !x.is_finite()) {
        return Err(Error::Numeric("small_svd input has non-finite entries".into()));
    }

    let mut u = a.clone();
    let mut v = Array2::<f64>::eye(n);

    for _sweep in 0..MAX_SWEEPS {
        let mut rotated = false;
        // Refresh cached column norms once per sweep; rotations update them
        // incrementally in between.
        let mut norms_sq: Vec<f64> = (0..n)
            .map(|j| u.column(j).iter().map(|x| x * x).sum())
            .collect();
        let max_sq = norms_sq.iter().cloned().fold(0.0, f64::max);
        if max_sq == 0.0 {
            break;
        }
        // Columns whose norm has collapsed to rounding level are converged;
        // rotating them further only churns noise.
        let tiny_sq = max_sq * (n as f64 * f64::EPSILON).powi(2);
        for i in 0..n {
            for j in (i + 1)..n {
                let aii = norms_sq[i];
                let ajj = norms_sq[j];
                if aii <= tiny_sq || ajj <= tiny_sq {
                    continue;
                }
                let mut aij = 0.0;
                for r in 0..m {
                    aij += u[[r, i]] * u[[r, j]];
                }
                if aij.abs() <= JACOBI_TOL * (aii * ajj).sqrt() {
                    continue;
                }
                rotated = true;
                let tau = (ajj - aii) / (2.0 * aij);
                let t = tau.signum() / (tau.abs() + (1.0 + tau * tau).sqrt());
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                for r in 0..m {
                    let x = u[[r, i]];
                    let y = u[[r, j]];
                    u[[r, i]] = c * x - s * y;
                    u[[r, j]] = s * x + c * y;
                }
                for r in 0..n {
                    let x = v[[r, i]];
                    let y = v[[r, j]];
                    v[[r, i]] = c * x - s * y;
                    v[[r, j]] = s * x + c * y;
                }
                norms_sq[i] = aii - t * aij;
                norms_sq[j] = ajj + t * aij;
            }
        }
        if !rotated {
            break;
        }
    }

    // Column norms are the singular values.
    let mut order: Vec<usize> = (0..n).collect();
    let norms: Vec<f64> = (0..n)
        .map(|j| u.column(j).iter().map(|x| x * x).sum::<f64>().sqrt())
        .collect();
    order.sort_by(|&x, &y| norms[y].partial_cmp(&norms[x]).unwrap().then(x.cmp(&y)));

    let mut s = Array1::<f64>::zeros(n);
    let mut u_out = Array2::<f64>::zeros((m, n));
    let mut v_out = Array2::<f64>::zeros((n, n));
    let max_norm = order.first().map(|&j| norms[j]).unwrap_or(0.0);
    let zero_tol = max_norm * (n as f64) * f64::EPSILON;
    let mut zero_cols = Vec::new();
    for (k, &j) in order.iter().enumerate() {
        s[k] = norms[j];
        v_out.column_mut(k).assign(&v.column(j));
        if norms[j] > zero_tol && norms[j] > 0.0 {
            let inv = 1.0 / norms[j];
            for r in 0..m {
                u_out[[r, k]] = u[[r, j]] * inv;
            }
        } else {
            zero_cols.push(k);
        }
    }
    complete_basis(&mut u_out, &zero_cols);
    fix_signs(&mut u_out, &mut v_out);
    Ok((u_out, s, v_out))
}

/// Fills the listed columns with unit vectors orthonormal to every other
/// column, chosen deterministically from the canonical basis.
fn complete_basis(u: &mut Array2<f64>, zero_cols: &[usize]) {
    let (m, n) = u.dim();
    for &col in zero_cols {
        let mut filled = false;
        for cand in 0..m {
            let mut v: Vec<f64> = (0..m).map(|r| if r == cand { 1.0 } else { 0.0 }).collect();
            // Two orthogonalization passes keep the completion orthonormal to
            // working precision.
            for _ in 0..2 {
                for k in 0..n {
                    if k == col {
                        continue;
                    }
                    let dot: f64 = (0..m).map(|r| u[[r, k]] * v[r]).sum();
                    for r in 0..m {
                        v[r] -= dot * u[[r, k]];
                    }
                }
            }
            let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            if norm > 0.5 {
                for r in 0..m {
                    u[[r, col]] = v[r] / norm;
                }
                filled = true;
                break;
            }
        }
        debug_assert!(filled, "orthonormal completion must exist");
    }
}

/// Makes the largest-magnitude entry of each U column positive, flipping the
/// paired V column so the product is unchanged.
fn fix_signs(u: &mut Array2<f64>, v: &mut Array2<f64>) {
    let (m, n) = u.dim();
    for j in 0..n {
        let mut best = 0usize;
        let mut best_abs = -1.0;
        for r in 0..m {
            let a = u[[r, j]].abs();
            if a > best_abs {
                best_abs = a;
                best = r;
            }
        }
        if u[[best, j]] < 0.0 {
            for r in 0..m {
                u[[r, j]] = -u[[r, j]];
            }
            for r in 0..v.nrows() {
                v[[r, j]] = -v[[r, j]];
            }
        }
    }
}
