//! Prediction-calibration objectives and the composite adaptation objective,
//! each with analytic gradients.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::SourceModel;
use crate::numerics::{argmax, logsumexp, softmax, softmax_rows, Matrix};
use crate::subspace::{alignment_loss, AlignmentTransform, SubspaceBasis};

/// Lower clamp for probabilities inside logarithms.
pub const PROB_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub lambda_lr: f64,
    pub lambda_cb: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda_lr: 0.025,
            lambda_cb: 1.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda_lr >= 0.0 && self.lambda_lr.is_finite() && self.lambda_cb >= 0.0 && self.lambda_cb.is_finite()) {
            return Err(Error::invalid("loss weights must be finite and non-negative"));
        }
        Ok(())
    }
}

/// Terms of one objective evaluation. `entropy_term` is only used by the
/// entropy-minimisation baselines and enters with unit weight.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub total: f64,
    pub lr_term: f64,
    pub alignment_term: f64,
    pub cb_term: f64,
    pub entropy_term: f64,
}

/// Shannon entropy in nats with `0 ln 0 = 0`.
pub fn entropy(probs: &[f64]) -> Result<f64> {
    if probs.iter().any(|&p| p < 0.0 || !p.is_finite()) {
        return Err(Error::invalid("entropy of a vector with negative or non-finite entries"));
    }
    let sum: f64 = probs.iter().sum();
    if (sum - 1.0).abs() > 1e-9 {
        return Err(Error::invalid(format!("probabilities sum to {sum}")));
    }
    Ok(-probs.iter().filter(|&&p| p > 0.0).map(|&p| p * p.ln()).sum::<f64>())
}

/// Mean softmax entropy over rows and its gradient w.r.t. the logits.
pub fn entropy_loss(logits: &Matrix) -> Result<(f64, Matrix)> {
    let n = logits.rows();
    if n == 0 {
        return Err(Error::invalid("entropy_loss of an empty batch"));
    }
    let mut grad = Matrix::zeros(n, logits.cols());
    let mut total = 0.0;
    for r in 0..n {
        let p = softmax(logits.row(r));
        let h = entropy(&p)?;
        total += h;
        for (c, &pc) in p.iter().enumerate() {
            let log_p = if pc > 0.0 { pc.ln() } else { 0.0 };
            grad[(r, c)] = -pc * (log_p + h) / n as f64;
        }
    }
    Ok((total / n as f64, grad))
}

/// Likelihood-ratio loss `−z_{c*} + ln Σ_{i≠c*} e^{z_i}` for one logit
/// vector, with `c*` the argmax (lowest index on ties) held constant.
pub fn lr_loss(logits: &[f64]) -> Result<(f64, Vec<f64>)> {
    if logits.len() < 2 {
        return Err(Error::invalid("likelihood-ratio loss needs at least two classes"));
    }
    let top = argmax(logits);
    let others: Vec<f64> = logits
        .iter()
        .enumerate()
        .filter(|&(i, _)| i != top)
        .map(|(_, &z)| z)
        .collect();
    let loss = -logits[top] + logsumexp(&others)?;
    let weights = softmax(&others);
    let mut grad = Vec::with_capacity(logits.len());
    let mut k = 0;
    for i in 0..logits.len() {
        if i == top {
            grad.push(-1.0);
        } else {
            grad.push(weights[k]);
            k += 1;
        }
    }
    Ok((loss, grad))
}

/// Batch mean of [`lr_loss`].
pub fn lr_loss_batch(logits: &Matrix) -> Result<(f64, Matrix)> {
    let n = logits.rows();
    if n == 0 {
        return Err(Error::invalid("lr_loss_batch of an empty batch"));
    }
    let mut grad = Matrix::zeros(n, logits.cols());
    let mut total = 0.0;
    for r in 0..n {
        let (l, g) = lr_loss(logits.row(r))?;
        total += l;
        for (dst, v) in grad.row_mut(r).iter_mut().zip(g) {
            *dst = v / n as f64;
        }
    }
    Ok((total / n as f64, grad))
}

/// Binary cross-entropy between the batch-mean prediction and a uniform
/// prior, summed over classes. Gradient is w.r.t. the probability batch.
pub fn class_balance_loss(probs: &Matrix) -> Result<(f64, Matrix)> {
    let (n, c) = probs.shape();
    if n == 0 || c == 0 {
        return Err(Error::invalid("class_balance_loss of an empty batch"));
    }
    let prior = 1.0 / c as f64;
    let mean = probs.column_means();
    let mut loss = 0.0;
    let mut d_mean = vec![0.0; c];
    for (k, &m) in mean.iter().enumerate() {
        let clamped = m.clamp(PROB_FLOOR, 1.0 - PROB_FLOOR);
        loss -= prior * clamped.ln() + (1.0 - prior) * (1.0 - clamped).ln();
        if clamped == m {
            d_mean[k] = -prior / m + (1.0 - prior) / (1.0 - m);
        }
    }
    let grad = Matrix::from_fn(n, c, |_, k| d_mean[k] / n as f64);
    Ok((loss, grad))
}

/// Pulls a gradient w.r.t. softmax probabilities back to the logits.
pub fn softmax_backward(probs: &Matrix, grad_probs: &Matrix) -> Result<Matrix> {
    if probs.shape() != grad_probs.shape() {
        return Err(Error::dims("softmax_backward", format!("{:?}", probs.shape()), format!("{:?}", grad_probs.shape())));
    }
    let mut out = Matrix::zeros(probs.rows(), probs.cols());
    for r in 0..probs.rows() {
        let p = probs.row(r);
        let g = grad_probs.row(r);
        let inner: f64 = p.iter().zip(g).map(|(a, b)| a * b).sum();
        for (k, dst) in out.row_mut(r).iter_mut().enumerate() {
            *dst = p[k] * (g[k] - inner);
        }
    }
    Ok(out)
}

/// Class-balance loss evaluated on logits, gradient w.r.t. logits.
pub fn class_balance_from_logits(logits: &Matrix) -> Result<(f64, Matrix)> {
    let probs = softmax_rows(logits);
    let (loss, grad_probs) = class_balance_loss(&probs)?;
    Ok((loss, softmax_backward(&probs, &grad_probs)?))
}

/// Mean cross-entropy against integer labels.
pub fn cross_entropy(logits: &Matrix, labels: &[usize]) -> Result<(f64, Matrix)> {
    let (n, c) = logits.shape();
    if labels.len() != n || n == 0 {
        return Err(Error::dims("cross_entropy", n, labels.len()));
    }
    let mut grad = softmax_rows(logits);
    let mut total = 0.0;
    for (r, &y) in labels.iter().enumerate() {
        if y >= c {
            return Err(Error::invalid(format!("label {y} out of range for {c} classes")));
        }
        total -= grad[(r, y)].max(PROB_FLOOR).ln();
        grad[(r, y)] -= 1.0;
    }
    let grad = grad.scale(1.0 / n as f64);
    Ok((total / n as f64, grad))
}

/// Which confidence objective drives the prediction term.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Calibration {
    LikelihoodRatio,
    Entropy,
}

/// Prediction-side terms (no alignment) and their logit gradient.
pub fn prediction_loss(
    logits: &Matrix,
    calibration: Calibration,
    weights: &LossWeights,
) -> Result<(LossReport, Matrix)> {
    let mut report = LossReport::default();
    let mut grad = match calibration {
        Calibration::LikelihoodRatio => {
            let (l, g) = lr_loss_batch(logits)?;
            report.lr_term = l;
            g.scale(weights.lambda_lr)
        }
        Calibration::Entropy => {
            let (l, g) = entropy_loss(logits)?;
            report.entropy_term = l;
            g
        }
    };
    if weights.lambda_cb != 0.0 {
        let (l, g) = class_balance_from_logits(logits)?;
        report.cb_term = l;
        grad.add_assign(&g.scale(weights.lambda_cb))?;
    } else {
        report.cb_term = class_balance_from_logits(logits)?.0;
    }
    report.total = weights.lambda_lr * report.lr_term + report.entropy_term + weights.lambda_cb * report.cb_term;
    Ok((report, grad))
}

/// Gradients of the composite objective.
#[derive(Debug, Clone)]
pub struct CompositeGrads {
    pub logits: Matrix,
    pub phi: Matrix,
    /// Gradient at the latent features `Z` feeding the alignment path.
    pub latent: Matrix,
}

/// Composite objective on latent features routed through
/// `Ẑ = Z W_t Φ W_sᵀ` and the frozen classifier:
/// `λ_lr · L_lr + ‖W_t Φ − W_s‖² + λ_cb · L_CB`.
pub fn total_loss(
    model: &SourceModel,
    latent: &Matrix,
    phi: &AlignmentTransform,
    w_t: &SubspaceBasis,
    w_s: &SubspaceBasis,
    weights: &LossWeights,
) -> Result<(LossReport, CompositeGrads)> {
    weights.validate()?;
    if latent.cols() != w_t.ambient_dim() {
        return Err(Error::dims("total_loss", latent.cols(), w_t.ambient_dim()));
    }
    let (align, align_grad) = alignment_loss(phi, w_t, w_s)?;
    let coords = latent.matmul(w_t.basis())?;
    let aligned = coords.matmul(&phi.phi)?;
    let z_hat = aligned.matmul_t(w_s.basis())?;
    let logits = model.classify_aligned(&z_hat)?;

    let (mut report, grad_logits) = prediction_loss(&logits, Calibration::LikelihoodRatio, weights)?;
    report.alignment_term = align;
    report.total += align;

    let grad_z_hat = grad_logits.matmul_t(&model.classifier_weight)?;
    let grad_aligned = grad_z_hat.matmul(w_s.basis())?;
    let mut grad_phi = coords.t_matmul(&grad_aligned)?;
    grad_phi.add_assign(&align_grad)?;
    let grad_latent = grad_aligned.matmul_t(&phi.phi)?.matmul_t(w_t.basis())?;

    Ok((
        report,
        CompositeGrads {
            logits: grad_logits,
            phi: grad_phi,
            latent: grad_latent,
        },
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{random_orthogonal, Rng};

    fn fd_check(f: impl Fn(&[f64]) -> f64, x: &[f64], grad: &[f64], tol: f64) {
        let h = 1e-5;
        for i in 0..x.len() {
            let mut up = x.to_vec();
            up[i] += h;
            let mut down = x.to_vec();
            down[i] -= h;
            let fd = (f(&up) - f(&down)) / (2.0 * h);
            let rel = (fd - grad[i]).abs() / fd.abs().max(grad[i].abs()).max(1e-6);
            assert!(rel <= tol, "coord {i}: fd {fd} analytic {}", grad[i]);
        }
    }

    #[test]
    fn entropy_cases() {
        assert!((entropy(&[0.25; 4]).unwrap() - 4f64.ln()).abs() < 1e-15);
        assert_eq!(entropy(&[0.0, 1.0, 0.0]).unwrap(), 0.0);
        assert!((entropy(&[0.5, 0.5]).unwrap() - 2f64.ln()).abs() < 1e-15);
        assert!(entropy(&[1.2, -0.2]).is_err());
    }

    #[test]
    fn entropy_bounds_on_random_inputs() {
        let mut rng = Rng::new(1);
        for c in 2..8 {
            for _ in 0..20 {
                let z: Vec<f64> = (0..c).map(|_| 4.0 * rng.normal()).collect();
                let h = entropy(&softmax(&z)).unwrap();
                assert!(h >= 0.0 && h <= (c as f64).ln() + 1e-12);
            }
        }
    }

    #[test]
    fn lr_loss_worked_example() {
        let (l, g) = lr_loss(&[2.0, 0.0, 0.0]).unwrap();
        assert!((l - (-2.0 + 2f64.ln())).abs() < 1e-15);
        assert!((l + 1.306853).abs() < 1e-6);
        assert_eq!(g, vec![-1.0, 0.5, 0.5]);
    }

    #[test]
    fn lr_loss_ties_and_singleton() {
        let (l, g) = lr_loss(&[3.0, 3.0, 3.0]).unwrap();
        assert!((l - 2f64.ln()).abs() < 1e-14);
        assert_eq!(g[0], -1.0);
        assert!(lr_loss(&[1.0]).is_err());
    }

    #[test]
    fn lr_gradient_structure() {
        let mut rng = Rng::new(2);
        for _ in 0..50 {
            let z: Vec<f64> = (0..5).map(|_| 10.0 * rng.normal()).collect();
            let (_, g) = lr_loss(&z).unwrap();
            let top = argmax(&z);
            assert_eq!(g[top], -1.0);
            let rest: f64 = g.iter().enumerate().filter(|&(i, _)| i != top).map(|(_, v)| *v).sum();
            assert!((rest - 1.0).abs() < 1e-12);
            assert!(g.iter().enumerate().all(|(i, &v)| i == top || v > 0.0));
        }
    }

    #[test]
    fn lr_gradient_matches_finite_differences() {
        let mut rng = Rng::new(3);
        for _ in 0..20 {
            let z: Vec<f64> = (0..4).map(|_| 2.0 * rng.normal()).collect();
            let (_, g) = lr_loss(&z).unwrap();
            fd_check(|v| lr_loss(v).unwrap().0, &z, &g, 1e-5);
        }
    }

    #[test]
    fn class_balance_minimum_at_uniform() {
        let probs = Matrix::from_rows(&[vec![0.7, 0.3], vec![0.3, 0.7]]).unwrap();
        let (l, _) = class_balance_loss(&probs).unwrap();
        assert!((l - 2.0 * 2f64.ln()).abs() < 1e-12);
        for eps in [0.01, 0.1, 0.3] {
            let p = Matrix::from_rows(&[vec![0.5 + eps, 0.5 - eps]]).unwrap();
            assert!(class_balance_loss(&p).unwrap().0 > l);
        }
    }

    #[test]
    fn class_balance_gradient_matches_finite_differences() {
        let mut rng = Rng::new(4);
        for _ in 0..20 {
            let logits = rng.normal_matrix(6, 4);
            let probs = softmax_rows(&logits);
            let (_, g) = class_balance_loss(&probs).unwrap();
            fd_check(
                |v| class_balance_loss(&Matrix::from_vec(6, 4, v.to_vec()).unwrap()).unwrap().0,
                probs.as_slice(),
                g.as_slice(),
                1e-6,
            );
            let (_, gl) = class_balance_from_logits(&logits).unwrap();
            fd_check(
                |v| class_balance_from_logits(&Matrix::from_vec(6, 4, v.to_vec()).unwrap()).unwrap().0,
                logits.as_slice(),
                gl.as_slice(),
                1e-5,
            );
        }
    }

    #[test]
    fn class_balance_permutation_invariant() {
        let mut rng = Rng::new(5);
        let probs = softmax_rows(&rng.normal_matrix(8, 3));
        let perm = rng.permutation(8);
        let a = class_balance_loss(&probs).unwrap().0;
        let b = class_balance_loss(&probs.select_rows(&perm)).unwrap().0;
        assert!((a - b).abs() < 1e-14);
    }

    #[test]
    fn class_balance_clamps_saturated_means() {
        let probs = Matrix::from_rows(&[vec![1.0, 0.0], vec![1.0, 0.0]]).unwrap();
        let (l, g) = class_balance_loss(&probs).unwrap();
        assert!(l.is_finite());
        assert!(g.is_finite());
    }

    #[test]
    fn entropy_and_cross_entropy_gradients() {
        let mut rng = Rng::new(6);
        for _ in 0..20 {
            let logits = rng.normal_matrix(5, 3);
            let (_, g) = entropy_loss(&logits).unwrap();
            fd_check(
                |v| entropy_loss(&Matrix::from_vec(5, 3, v.to_vec()).unwrap()).unwrap().0,
                logits.as_slice(),
                g.as_slice(),
                1e-5,
            );
            let labels = [0, 2, 1, 1, 0];
            let (_, g) = cross_entropy(&logits, &labels).unwrap();
            fd_check(
                |v| cross_entropy(&Matrix::from_vec(5, 3, v.to_vec()).unwrap(), &labels).unwrap().0,
                logits.as_slice(),
                g.as_slice(),
                1e-5,
            );
        }
    }

    fn setup(rng: &mut Rng, dim: usize, d: usize) -> (SourceModel, Matrix, AlignmentTransform, SubspaceBasis, SubspaceBasis) {
        let mut model = SourceModel::init(3, dim, 4, rng);
        model.classifier_bias = (0..4).map(|_| rng.normal()).collect();
        let latent = rng.normal_matrix(7, dim).map(f64::abs);
        let mk = |m: Matrix| SubspaceBasis::new(m, vec![1.0; d], vec![0.0; dim], 7).unwrap();
        let w_s = mk(random_orthogonal(dim, rng).leading_cols(d));
        let w_t = mk(random_orthogonal(dim, rng).leading_cols(d));
        let phi = AlignmentTransform::new(rng.normal_matrix(d, d)).unwrap();
        (model, latent, phi, w_t, w_s)
    }

    #[test]
    fn report_recomposes() {
        let mut rng = Rng::new(7);
        for _ in 0..20 {
            let (model, latent, phi, w_t, w_s) = setup(&mut rng, 6, 3);
            let weights = LossWeights {
                lambda_lr: rng.uniform(),
                lambda_cb: rng.uniform() * 2.0,
            };
            let (r, _) = total_loss(&model, &latent, &phi, &w_t, &w_s, &weights).unwrap();
            let recomposed = weights.lambda_lr * r.lr_term + r.alignment_term + weights.lambda_cb * r.cb_term;
            assert!((r.total - recomposed).abs() <= 1e-12);
        }
    }

    #[test]
    fn zero_weights_leave_alignment_only() {
        let mut rng = Rng::new(8);
        let (model, latent, phi, w_t, w_s) = setup(&mut rng, 5, 2);
        let weights = LossWeights {
            lambda_lr: 0.0,
            lambda_cb: 0.0,
        };
        let (r, g) = total_loss(&model, &latent, &phi, &w_t, &w_s, &weights).unwrap();
        let (align, align_grad) = alignment_loss(&phi, &w_t, &w_s).unwrap();
        assert_eq!(r.total, align);
        assert!(g.phi.max_abs_diff(&align_grad) == 0.0);
    }

    #[test]
    fn matched_bases_have_no_alignment_term() {
        let mut rng = Rng::new(9);
        let (model, latent, _, _, w_s) = setup(&mut rng, 5, 5);
        let weights = LossWeights::default();
        let (r, _) = total_loss(&model, &latent, &AlignmentTransform::identity(5), &w_s, &w_s, &weights).unwrap();
        assert!(r.alignment_term < 1e-24);
        let plain = model.classify_aligned(&latent).unwrap();
        let (pred, _) = prediction_loss(&plain, Calibration::LikelihoodRatio, &weights).unwrap();
        assert!((r.total - pred.total).abs() < 1e-10);
    }

    #[test]
    fn composite_gradients_match_finite_differences() {
        let mut rng = Rng::new(10);
        let weights = LossWeights {
            lambda_lr: 0.7,
            lambda_cb: 1.3,
        };
        for _ in 0..20 {
            let (model, latent, phi, w_t, w_s) = setup(&mut rng, 6, 3);
            let (_, g) = total_loss(&model, &latent, &phi, &w_t, &w_s, &weights).unwrap();
            fd_check(
                |v| {
                    let p = AlignmentTransform::new(Matrix::from_vec(3, 3, v.to_vec()).unwrap()).unwrap();
                    total_loss(&model, &latent, &p, &w_t, &w_s, &weights).unwrap().0.total
                },
                phi.phi.as_slice(),
                g.phi.as_slice(),
                1e-5,
            );
            fd_check(
                |v| {
                    let z = Matrix::from_vec(7, 6, v.to_vec()).unwrap();
                    total_loss(&model, &z, &phi, &w_t, &w_s, &weights).unwrap().0.total
                },
                latent.as_slice(),
                g.latent.as_slice(),
                1e-5,
            );
        }
    }
}
