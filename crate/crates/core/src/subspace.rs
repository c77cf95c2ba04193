//! PCA subspaces, the eigengap dimension rule, and closed-form / learned
//! subspace alignment.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{eigh_descending, Matrix};

/// Orthonormal `D×d` basis of a feature subspace plus the statistics it was
/// fitted from.
#[derive(Debug, Clone, PartialEq)]
pub struct SubspaceBasis {
    basis: Matrix,
    eigenvalues: Vec<f64>,
    mean: Vec<f64>,
    sample_count: usize,
}

impl SubspaceBasis {
    pub fn new(basis: Matrix, eigenvalues: Vec<f64>, mean: Vec<f64>, sample_count: usize) -> Result<Self> {
        if eigenvalues.len() != basis.cols() {
            return Err(Error::dims("SubspaceBasis::new", basis.cols(), eigenvalues.len()));
        }
        if mean.len() != basis.rows() {
            return Err(Error::dims("SubspaceBasis::new", basis.rows(), mean.len()));
        }
        Ok(Self {
            basis,
            eigenvalues,
            mean,
            sample_count,
        })
    }

    pub fn basis(&self) -> &Matrix {
        &self.basis
    }

    pub fn eigenvalues(&self) -> &[f64] {
        &self.eigenvalues
    }

    /// Column means of the data the basis was fitted on. Diagnostic only:
    /// projections act on uncentered features.
    pub fn mean(&self) -> &[f64] {
        &self.mean
    }

    pub fn sample_count(&self) -> usize {
        self.sample_count
    }

    pub fn ambient_dim(&self) -> usize {
        self.basis.rows()
    }

    pub fn sub_dim(&self) -> usize {
        self.basis.cols()
    }

    /// Leading `d` directions.
    pub fn truncate(&self, d: usize) -> Result<SubspaceBasis> {
        if d == 0 || d > self.sub_dim() {
            return Err(Error::invalid(format!(
                "cannot truncate a {}-dimensional basis to {d}",
                self.sub_dim()
            )));
        }
        Ok(SubspaceBasis {
            basis: self.basis.leading_cols(d),
            eigenvalues: self.eigenvalues[..d].to_vec(),
            mean: self.mean.clone(),
            sample_count: self.sample_count,
        })
    }

    /// `max |WᵀW − I|`.
    pub fn orthonormality_error(&self) -> f64 {
        self.basis
            .t_matmul(&self.basis)
            .expect("square by construction")
            .max_abs_diff(&Matrix::identity(self.sub_dim()))
    }
}

/// The `d×d` weights of the linear alignment layer.
#[derive(Debug, Clone, PartialEq)]
pub struct AlignmentTransform {
    pub phi: Matrix,
}

impl AlignmentTransform {
    pub fn new(phi: Matrix) -> Result<Self> {
        if !phi.is_square() {
            return Err(Error::dims("AlignmentTransform", phi.rows(), phi.cols()));
        }
        Ok(Self { phi })
    }

    pub fn identity(d: usize) -> Self {
        Self {
            phi: Matrix::identity(d),
        }
    }

    pub fn dim(&self) -> usize {
        self.phi.rows()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DimSelectConfig {
    pub delta: f64,
    pub epsilon: f64,
    pub d_max: usize,
}

impl Default for DimSelectConfig {
    fn default() -> Self {
        Self {
            delta: 0.1,
            epsilon: 1e6,
            d_max: usize::MAX,
        }
    }
}

impl DimSelectConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.delta > 0.0 && self.delta < 1.0) {
            return Err(Error::invalid(format!("delta must lie in (0, 1), got {}", self.delta)));
        }
        if !(self.epsilon > 0.0 && self.epsilon.is_finite()) {
            return Err(Error::invalid(format!("epsilon must be positive, got {}", self.epsilon)));
        }
        if self.d_max == 0 {
            return Err(Error::invalid("d_max must be at least 1"));
        }
        Ok(())
    }
}

/// One point of the eigengap curve: the smaller of the two spectra's gaps at
/// `d` and the stability threshold it must clear.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoundPoint {
    pub d: usize,
    pub gap: f64,
    pub bound: f64,
}

impl BoundPoint {
    pub fn stable(&self) -> bool {
        self.gap >= self.bound
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DimSelection {
    pub d: usize,
    pub curve: Vec<BoundPoint>,
}

fn centered(features: &Matrix) -> (Matrix, Vec<f64>) {
    let mean = features.column_means();
    let mut c = features.clone();
    for r in 0..c.rows() {
        for (v, m) in c.row_mut(r).iter_mut().zip(&mean) {
            *v -= m;
        }
    }
    (c, mean)
}

fn covariance(features: &Matrix) -> Result<(Matrix, Vec<f64>)> {
    let n = features.rows();
    if n < 2 {
        return Err(Error::invalid(format!("PCA needs at least 2 samples, got {n}")));
    }
    let (c, mean) = centered(features);
    let cov = c.t_matmul(&c)?.scale(1.0 / (n as f64 - 1.0));
    Ok((cov, mean))
}

/// Top-`d` principal subspace of the rows of `features` (sample covariance,
/// divisor `n − 1`).
pub fn fit_pca(features: &Matrix, d: usize) -> Result<SubspaceBasis> {
    let (n, dim) = features.shape();
    if d == 0 || d > dim.min(n) {
        return Err(Error::invalid(format!(
            "subspace dimension {d} must lie in 1..={} for {n} samples of dimension {dim}",
            dim.min(n)
        )));
    }
    let (cov, mean) = covariance(features)?;
    let eig = eigh_descending(&cov)?;
    let eigenvalues = eig.values[..d].iter().map(|v| v.max(0.0)).collect();
    SubspaceBasis::new(eig.vectors.leading_cols(d), eigenvalues, mean, n)
}

/// All `D` covariance eigenvalues, descending, clamped at zero.
pub fn covariance_spectrum(features: &Matrix) -> Result<Vec<f64>> {
    let (cov, _) = covariance(features)?;
    Ok(eigh_descending(&cov)?.values.into_iter().map(|v| v.max(0.0)).collect())
}

/// Right-hand side of the eigengap stability rule at dimension `d`.
pub fn stability_bound(d: usize, n_target: usize, delta: f64, epsilon: f64) -> f64 {
    let confidence = 1.0 + ((2.0 / delta).ln() / 2.0).sqrt();
    confidence * 16.0 * (d as f64).powf(1.5) / (epsilon * (n_target as f64).sqrt())
}

/// Largest `d` whose elementwise-minimum eigengap clears the stability bound.
pub fn select_dim(
    source_eigs: &[f64],
    target_eigs: &[f64],
    n_target: usize,
    cfg: &DimSelectConfig,
) -> Result<DimSelection> {
    cfg.validate()?;
    if source_eigs.len() < 2 || target_eigs.len() < 2 {
        return Err(Error::invalid("select_dim needs at least two eigenvalues per spectrum"));
    }
    if n_target == 0 {
        return Err(Error::invalid("select_dim needs a positive target sample count"));
    }
    let len = source_eigs.len().min(target_eigs.len());
    let e_min: Vec<f64> = (0..len).map(|i| source_eigs[i].min(target_eigs[i])).collect();
    let top = (len - 1).min(cfg.d_max);
    let curve: Vec<BoundPoint> = (1..=top)
        .map(|d| BoundPoint {
            d,
            gap: e_min[d - 1] - e_min[d],
            bound: stability_bound(d, n_target, cfg.delta, cfg.epsilon),
        })
        .collect();
    match curve.iter().rev().find(|p| p.stable() && p.gap > 0.0) {
        Some(p) => Ok(DimSelection { d: p.d, curve }),
        None => Err(Error::NoStableDimension { curve }),
    }
}

fn check_pair(op: &'static str, w_t: &SubspaceBasis, w_s: &SubspaceBasis) -> Result<()> {
    if w_t.basis.shape() != w_s.basis.shape() {
        return Err(Error::dims(
            op,
            format!("target basis {:?}", w_t.basis.shape()),
            format!("source basis {:?}", w_s.basis.shape()),
        ));
    }
    Ok(())
}

/// `Φ* = W_tᵀ W_s`, the global minimiser of `‖W_t Φ − W_s‖_F²`.
pub fn closed_form_phi(w_t: &SubspaceBasis, w_s: &SubspaceBasis) -> Result<AlignmentTransform> {
    check_pair("closed_form_phi", w_t, w_s)?;
    AlignmentTransform::new(w_t.basis.t_matmul(&w_s.basis)?)
}

/// `‖W_t Φ − W_s‖_F²` and its gradient `2 W_tᵀ (W_t Φ − W_s)`.
///
/// With orthonormal `W_t` the gradient equals `2 (Φ − W_tᵀ W_s)`. It is
/// evaluated in that form so it is exactly zero at the closed form.
pub fn alignment_loss(
    phi: &AlignmentTransform,
    w_t: &SubspaceBasis,
    w_s: &SubspaceBasis,
) -> Result<(f64, Matrix)> {
    check_pair("alignment_loss", w_t, w_s)?;
    if phi.dim() != w_t.sub_dim() {
        return Err(Error::dims("alignment_loss", phi.dim(), w_t.sub_dim()));
    }
    let resid = w_t.basis.matmul(&phi.phi)?.sub(&w_s.basis)?;
    let loss = resid.as_slice().iter().map(|v| v * v).sum();
    let grad = phi.phi.sub(&w_t.basis.t_matmul(&w_s.basis)?)?.scale(2.0);
    Ok((loss, grad))
}

/// Project, align and re-project: `Z_t W_t Φ W_sᵀ`.
pub fn align_project(
    z_t: &Matrix,
    w_t: &SubspaceBasis,
    phi: &AlignmentTransform,
    w_s: &SubspaceBasis,
) -> Result<Matrix> {
    check_pair("align_project", w_t, w_s)?;
    if z_t.cols() != w_t.ambient_dim() {
        return Err(Error::dims("align_project", z_t.cols(), w_t.ambient_dim()));
    }
    if phi.dim() != w_t.sub_dim() {
        return Err(Error::dims("align_project", phi.dim(), w_t.sub_dim()));
    }
    z_t.matmul(&w_t.basis)?.matmul(&phi.phi)?.matmul_t(&w_s.basis)
}
