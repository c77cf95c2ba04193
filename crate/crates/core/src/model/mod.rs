//! Source model: a feature head (affine, batch normalization with a
//! trainable per-channel affine, ReLU) followed by a frozen linear classifier.

mod checkpoint;
mod train;

pub use checkpoint::{decode_checkpoint, encode_checkpoint, load_checkpoint, save_checkpoint, CHECKPOINT_VERSION};
pub use train::{train_source, TrainConfig};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{Matrix, Rng};

pub const DEFAULT_BN_EPS: f64 = 1e-5;

/// Which normalization statistics a forward pass applies.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum StatsMode {
    /// Mean and biased variance of the current batch.
    Batch,
    /// The stored running statistics.
    Running,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SourceModel {
    pub head_weight: Matrix,
    pub head_bias: Vec<f64>,
    pub bn_gamma: Vec<f64>,
    pub bn_beta: Vec<f64>,
    pub bn_running_mean: Vec<f64>,
    pub bn_running_var: Vec<f64>,
    pub bn_eps: f64,
    pub classifier_weight: Matrix,
    pub classifier_bias: Vec<f64>,
}

/// Intermediate values of a forward pass, kept for the analytic backward.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    pub mode: StatsMode,
    pub input: Matrix,
    pub pre_norm: Matrix,
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
    pub normalized: Matrix,
    pub active: Vec<bool>,
    pub latent: Matrix,
    pub logits: Matrix,
}

impl ForwardCache {
    fn inv_std(&self, eps: f64) -> Vec<f64> {
        self.var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect()
    }
}

/// Gradients reaching the normalization affine and the latent features.
#[derive(Debug, Clone, PartialEq)]
pub struct AdaptGrads {
    pub gamma: Vec<f64>,
    pub beta: Vec<f64>,
    pub latent: Matrix,
}

/// Gradients for every parameter, used by source training.
#[derive(Debug, Clone)]
pub(crate) struct FullGrads {
    pub head_weight: Matrix,
    pub head_bias: Vec<f64>,
    pub gamma: Vec<f64>,
    pub beta: Vec<f64>,
    pub classifier_weight: Matrix,
    pub classifier_bias: Vec<f64>,
}

impl SourceModel {
    /// He-initialised head, unit affine, identity running statistics.
    pub fn init(in_dim: usize, latent_dim: usize, classes: usize, rng: &mut Rng) -> Self {
        let head_std = (2.0 / in_dim as f64).sqrt();
        let cls_std = (1.0 / latent_dim as f64).sqrt();
        Self {
            head_weight: rng.normal_matrix(in_dim, latent_dim).scale(head_std),
            head_bias: vec![0.0; latent_dim],
            bn_gamma: vec![1.0; latent_dim],
            bn_beta: vec![0.0; latent_dim],
            bn_running_mean: vec![0.0; latent_dim],
            bn_running_var: vec![1.0; latent_dim],
            bn_eps: DEFAULT_BN_EPS,
            classifier_weight: rng.normal_matrix(latent_dim, classes).scale(cls_std),
            classifier_bias: vec![0.0; classes],
        }
    }

    pub fn in_dim(&self) -> usize {
        self.head_weight.rows()
    }

    pub fn latent_dim(&self) -> usize {
        self.head_weight.cols()
    }

    pub fn classes(&self) -> usize {
        self.classifier_weight.cols()
    }

    pub fn validate(&self) -> Result<()> {
        let d = self.latent_dim();
        let c = self.classes();
        let lens = [
            ("head_bias", self.head_bias.len(), d),
            ("bn_gamma", self.bn_gamma.len(), d),
            ("bn_beta", self.bn_beta.len(), d),
            ("bn_running_mean", self.bn_running_mean.len(), d),
            ("bn_running_var", self.bn_running_var.len(), d),
            ("classifier_weight rows", self.classifier_weight.rows(), d),
            ("classifier_bias", self.classifier_bias.len(), c),
        ];
        for (name, got, want) in lens {
            if got != want {
                return Err(Error::dims("SourceModel", format!("{name} = {got}"), format!("expected {want}")));
            }
        }
        if self.bn_running_var.iter().any(|&v| v < 0.0) {
            return Err(Error::invalid("running variance must be non-negative"));
        }
        if self.bn_eps.is_nan() || self.bn_eps <= 0.0 {
            return Err(Error::invalid("bn_eps must be positive"));
        }
        Ok(())
    }

    pub fn forward(&self, x: &Matrix, mode: StatsMode) -> Result<ForwardCache> {
        if x.cols() != self.in_dim() {
            return Err(Error::dims("forward", x.cols(), self.in_dim()));
        }
        let n = x.rows();
        if mode == StatsMode::Batch && n < 2 {
            return Err(Error::invalid(format!("batch statistics need at least 2 samples, got {n}")));
        }
        let mut pre_norm = x.matmul(&self.head_weight)?;
        pre_norm.add_row_vector(&self.head_bias)?;

        let (mean, var) = match mode {
            StatsMode::Batch => batch_stats(&pre_norm),
            StatsMode::Running => (self.bn_running_mean.clone(), self.bn_running_var.clone()),
        };
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + self.bn_eps).sqrt()).collect();

        let d = self.latent_dim();
        let mut normalized = Matrix::zeros(n, d);
        let mut latent = Matrix::zeros(n, d);
        let mut active = vec![false; n * d];
        for r in 0..n {
            for j in 0..d {
                let xh = (pre_norm[(r, j)] - mean[j]) * inv_std[j];
                normalized[(r, j)] = xh;
                let y = self.bn_gamma[j] * xh + self.bn_beta[j];
                if y > 0.0 {
                    latent[(r, j)] = y;
                    active[r * d + j] = true;
                }
            }
        }
        let logits = self.classify_aligned(&latent)?;
        Ok(ForwardCache {
            mode,
            input: x.clone(),
            pre_norm,
            mean,
            var,
            normalized,
            active,
            latent,
            logits,
        })
    }

    /// Classifier stage only: `Ẑ W₂ + b₂`.
    pub fn classify_aligned(&self, z_hat: &Matrix) -> Result<Matrix> {
        if z_hat.cols() != self.latent_dim() {
            return Err(Error::dims("classify_aligned", z_hat.cols(), self.latent_dim()));
        }
        let mut logits = z_hat.matmul(&self.classifier_weight)?;
        logits.add_row_vector(&self.classifier_bias)?;
        Ok(logits)
    }

    fn check_cache(&self, cache: &ForwardCache, upstream: &Matrix, cols: usize) -> Result<()> {
        let n = cache.latent.rows();
        if cache.latent.cols() != self.latent_dim() || cache.logits.cols() != self.classes() {
            return Err(Error::invalid("forward cache does not belong to this model"));
        }
        if upstream.shape() != (n, cols) {
            return Err(Error::dims(
                "backward",
                format!("cache batch {n}x{cols}"),
                format!("upstream {}x{}", upstream.rows(), upstream.cols()),
            ));
        }
        Ok(())
    }

    /// Gradients for `γ`, `β` given the gradient at the latent output `Z`.
    ///
    /// Batch statistics depend on the affine input only, not on `γ, β`, so the
    /// same expressions hold in both statistics modes.
    pub fn backward_latent(&self, cache: &ForwardCache, grad_latent: &Matrix) -> Result<(Vec<f64>, Vec<f64>)> {
        self.check_cache(cache, grad_latent, self.latent_dim())?;
        let d = self.latent_dim();
        let mut g_gamma = vec![0.0; d];
        let mut g_beta = vec![0.0; d];
        for r in 0..grad_latent.rows() {
            for j in 0..d {
                if cache.active[r * d + j] {
                    let g = grad_latent[(r, j)];
                    g_gamma[j] += g * cache.normalized[(r, j)];
                    g_beta[j] += g;
                }
            }
        }
        Ok((g_gamma, g_beta))
    }

    /// Reverse pass from logit gradients to the trainable normalization
    /// affine. Head and classifier weights receive nothing.
    pub fn backward_adapt(&self, cache: &ForwardCache, grad_logits: &Matrix) -> Result<AdaptGrads> {
        if cache.mode != StatsMode::Batch {
            return Err(Error::invalid("backward_adapt expects a batch-statistics forward cache"));
        }
        self.check_cache(cache, grad_logits, self.classes())?;
        let latent = grad_logits.matmul_t(&self.classifier_weight)?;
        let (gamma, beta) = self.backward_latent(cache, &latent)?;
        Ok(AdaptGrads { gamma, beta, latent })
    }

    /// Full reverse pass through normalization (including the batch
    /// statistics) into the head weights.
    pub(crate) fn backward_full(&self, cache: &ForwardCache, grad_logits: &Matrix) -> Result<FullGrads> {
        self.check_cache(cache, grad_logits, self.classes())?;
        let n = grad_logits.rows();
        let d = self.latent_dim();
        let classifier_weight = cache.latent.t_matmul(grad_logits)?;
        let classifier_bias = grad_logits.column_sums();
        let g_latent = grad_logits.matmul_t(&self.classifier_weight)?;
        let (gamma, beta) = self.backward_latent(cache, &g_latent)?;

        let inv_std = cache.inv_std(self.bn_eps);
        // gradient at the normalized activations
        let mut g_norm = Matrix::zeros(n, d);
        for r in 0..n {
            for j in 0..d {
                if cache.active[r * d + j] {
                    g_norm[(r, j)] = g_latent[(r, j)] * self.bn_gamma[j];
                }
            }
        }
        let mut g_pre = Matrix::zeros(n, d);
        match cache.mode {
            StatsMode::Running => {
                for r in 0..n {
                    for j in 0..d {
                        g_pre[(r, j)] = g_norm[(r, j)] * inv_std[j];
                    }
                }
            }
            StatsMode::Batch => {
                let nf = n as f64;
                for j in 0..d {
                    let mut sum_g = 0.0;
                    let mut sum_gx = 0.0;
                    for r in 0..n {
                        sum_g += g_norm[(r, j)];
                        sum_gx += g_norm[(r, j)] * cache.normalized[(r, j)];
                    }
                    for r in 0..n {
                        g_pre[(r, j)] = inv_std[j] / nf
                            * (nf * g_norm[(r, j)] - sum_g - cache.normalized[(r, j)] * sum_gx);
                    }
                }
            }
        }
        Ok(FullGrads {
            head_weight: cache.input.t_matmul(&g_pre)?,
            head_bias: g_pre.column_sums(),
            gamma,
            beta,
            classifier_weight,
            classifier_bias,
        })
    }

    /// Copy whose running statistics are the full-pass statistics of `x`.
    pub fn with_stats_from(&self, x: &Matrix) -> Result<SourceModel> {
        if x.cols() != self.in_dim() {
            return Err(Error::dims("with_stats_from", x.cols(), self.in_dim()));
        }
        if x.rows() < 2 {
            return Err(Error::invalid("need at least 2 samples to estimate statistics"));
        }
        let mut pre = x.matmul(&self.head_weight)?;
        pre.add_row_vector(&self.head_bias)?;
        let (mean, var) = batch_stats(&pre);
        let mut m = self.clone();
        m.bn_running_mean = mean;
        m.bn_running_var = var;
        Ok(m)
    }

    /// Latent features under full-pass statistics of `x`.
    pub fn latent_full_pass(&self, x: &Matrix) -> Result<Matrix> {
        Ok(self.with_stats_from(x)?.forward(x, StatsMode::Running)?.latent)
    }

    /// Rounds every parameter to `f32` precision (what a checkpoint stores).
    pub fn to_f32_precision(&self) -> SourceModel {
        let r = |v: &[f64]| v.iter().map(|&x| x as f32 as f64).collect::<Vec<_>>();
        let rm = |m: &Matrix| m.map(|x| x as f32 as f64);
        SourceModel {
            head_weight: rm(&self.head_weight),
            head_bias: r(&self.head_bias),
            bn_gamma: r(&self.bn_gamma),
            bn_beta: r(&self.bn_beta),
            bn_running_mean: r(&self.bn_running_mean),
            bn_running_var: r(&self.bn_running_var),
            bn_eps: self.bn_eps as f32 as f64,
            classifier_weight: rm(&self.classifier_weight),
            classifier_bias: r(&self.classifier_bias),
        }
    }

    /// Bit patterns of the parameters that adaptation must never touch.
    pub fn frozen_fingerprint(&self) -> Vec<u64> {
        self.head_weight
            .as_slice()
            .iter()
            .chain(&self.head_bias)
            .chain(self.classifier_weight.as_slice())
            .chain(&self.classifier_bias)
            .map(|v| v.to_bits())
            .collect()
    }
}

/// Per-column mean and biased (divisor `n`) variance.
pub(crate) fn batch_stats(a: &Matrix) -> (Vec<f64>, Vec<f64>) {
    let mean = a.column_means();
    let mut var = vec![0.0; a.cols()];
    for row in a.row_iter() {
        for ((v, x), m) in var.iter_mut().zip(row).zip(&mean) {
            *v += (x - m) * (x - m);
        }
    }
    let n = a.rows().max(1) as f64;
    var.iter_mut().for_each(|v| *v /= n);
    (mean, var)
}
