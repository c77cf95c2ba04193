//! Dense linear algebra, eigendecomposition, softmax helpers, Adam and seeded RNG.

mod adam;
mod eigen;
mod matrix;
mod rng;
mod special;

pub use adam::{adam_step, AdamState};
pub use eigen::{canonicalize_signs, eigh_descending, SymmetricEigen};
pub use matrix::{dot, Matrix};
pub use rng::Rng;
pub use special::{argmax, logsumexp, softmax, softmax_rows};

/// Orthonormal basis of the column space of `a` (columns in order) by
/// modified Gram-Schmidt with one re-orthogonalisation pass. Columns that are
/// numerically dependent are an error.
pub fn orthonormalize_columns(a: &Matrix) -> crate::Result<Matrix> {
    let (n, k) = a.shape();
    let mut q = a.clone();
    for j in 0..k {
        for _ in 0..2 {
            for i in 0..j {
                let mut proj = 0.0;
                for r in 0..n {
                    proj += q[(r, i)] * q[(r, j)];
                }
                for r in 0..n {
                    q[(r, j)] -= proj * q[(r, i)];
                }
            }
        }
        let norm = (0..n).map(|r| q[(r, j)] * q[(r, j)]).sum::<f64>().sqrt();
        if norm < 1e-12 {
            return Err(crate::Error::invalid("orthonormalize_columns: rank deficient input"));
        }
        for r in 0..n {
            q[(r, j)] /= norm;
        }
    }
    Ok(q)
}

/// Haar-distributed random orthogonal matrix from the QR factorisation of a
/// Gaussian matrix, with the usual sign fix on R's diagonal.
pub fn random_orthogonal(n: usize, rng: &mut Rng) -> Matrix {
    loop {
        let g = rng.normal_matrix(n, n);
        if let Ok(q) = orthonormalize_columns(&g) {
            // Gram-Schmidt already yields positive R diagonal
            return q;
        }
    }
}
