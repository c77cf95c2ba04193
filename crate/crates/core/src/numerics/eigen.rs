//! Symmetric eigendecomposition by cyclic Jacobi rotations.

use crate::error::{Error, Result};
use crate::numerics::Matrix;

const MAX_SWEEPS: usize = 100;

/// Eigenpairs of a symmetric matrix, eigenvalues in descending order.
///
/// `vectors` holds one unit eigenvector per column. Each column is signed so
/// that its largest-magnitude entry is positive (first such entry on ties),
/// which makes the output reproducible across runs.
#[derive(Debug, Clone)]
pub struct SymmetricEigen {
    pub values: Vec<f64>,
    pub vectors: Matrix,
}

/// Decomposes `(A + Aᵀ)/2`.
pub fn eigh_descending(a: &Matrix) -> Result<SymmetricEigen> {
    if !a.is_square() {
        return Err(Error::dims("eigh_descending", a.rows(), a.cols()));
    }
    if !a.is_finite() {
        return Err(Error::invalid("eigh_descending: non-finite entries"));
    }
    let n = a.rows();
    let mut m = a.symmetrize()?;
    let mut v = Matrix::identity(n);
    let scale = m.frobenius_norm();

    if n > 1 && scale > 0.0 {
        let tol = scale * 1e-15;
        let mut converged = false;
        for _ in 0..MAX_SWEEPS {
            if off_diagonal_norm(&m) <= tol {
                converged = true;
                break;
            }
            for p in 0..n - 1 {
                for q in p + 1..n {
                    rotate(&mut m, &mut v, p, q);
                }
            }
        }
        if !converged {
            let off_norm = off_diagonal_norm(&m);
            if off_norm > tol {
                return Err(Error::NoConvergence {
                    sweeps: MAX_SWEEPS,
                    off_norm,
                });
            }
        }
    }

    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| m[(j, j)].total_cmp(&m[(i, i)]).then(i.cmp(&j)));

    let values = order.iter().map(|&i| m[(i, i)]).collect();
    let mut vectors = Matrix::from_fn(n, n, |r, c| v[(r, order[c])]);
    canonicalize_signs(&mut vectors);
    Ok(SymmetricEigen { values, vectors })
}

/// Flips each column so its largest-magnitude entry is positive.
pub fn canonicalize_signs(vectors: &mut Matrix) {
    for c in 0..vectors.cols() {
        let mut best = 0usize;
        let mut best_abs = -1.0;
        for r in 0..vectors.rows() {
            let a = vectors[(r, c)].abs();
            if a > best_abs {
                best_abs = a;
                best = r;
            }
        }
        if vectors.rows() > 0 && vectors[(best, c)] < 0.0 {
            for r in 0..vectors.rows() {
                vectors[(r, c)] = -vectors[(r, c)];
            }
        }
    }
}

fn off_diagonal_norm(m: &Matrix) -> f64 {
    let n = m.rows();
    let mut s = 0.0;
    for r in 0..n {
        for c in 0..n {
            if r != c {
                s += m[(r, c)] * m[(r, c)];
            }
        }
    }
    s.sqrt()
}

fn rotate(m: &mut Matrix, v: &mut Matrix, p: usize, q: usize) {
    let apq = m[(p, q)];
    if apq.abs() < f64::MIN_POSITIVE {
        return;
    }
    let theta = (m[(q, q)] - m[(p, p)]) / (2.0 * apq);
    let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
    let t = if theta == 0.0 { 1.0 } else { t };
    let c = 1.0 / (t * t + 1.0).sqrt();
    let s = t * c;
    let n = m.rows();

    // A <- A J
    for k in 0..n {
        let akp = m[(k, p)];
        let akq = m[(k, q)];
        m[(k, p)] = c * akp - s * akq;
        m[(k, q)] = s * akp + c * akq;
    }
    // A <- Jᵀ A
    for k in 0..n {
        let apk = m[(p, k)];
        let aqk = m[(q, k)];
        m[(p, k)] = c * apk - s * aqk;
        m[(q, k)] = s * apk + c * aqk;
    }
    m[(p, q)] = 0.0;
    m[(q, p)] = 0.0;

    for k in 0..n {
        let vkp = v[(k, p)];
        let vkq = v[(k, q)];
        v[(k, p)] = c * vkp - s * vkq;
        v[(k, q)] = s * vkp + c * vkq;
    }
}
