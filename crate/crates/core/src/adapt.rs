//! Test-time adaptation: closed-form initialisation of the alignment layer,
//! the joint `{γ, β, Φ}` optimisation loop, the entropy baselines and
//! evaluation.

use serde::{Deserialize, Serialize};

use crate::dataio::{accuracy, ece, per_class_report, validate_labels, ClassReport, DEFAULT_ECE_BINS};
use crate::error::{Error, Result};
use crate::losses::{prediction_loss, total_loss, Calibration, LossReport, LossWeights};
use crate::model::{SourceModel, StatsMode};
use crate::numerics::{adam_step, argmax, softmax_rows, AdamState, Matrix, Rng};
use crate::subspace::{
    align_project, closed_form_phi, covariance_spectrum, fit_pca, select_dim, AlignmentTransform, DimSelectConfig,
    SubspaceBasis,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    Cattan,
    Tent,
    #[serde(alias = "tent_plus")]
    TentPlus,
    #[serde(alias = "lr_cb")]
    LrCb,
}

impl Method {
    pub fn uses_alignment(self) -> bool {
        matches!(self, Method::Cattan)
    }
}

impl std::str::FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "cattan" => Ok(Method::Cattan),
            "tent" => Ok(Method::Tent),
            "tent-plus" | "tent_plus" => Ok(Method::TentPlus),
            "lr-cb" | "lr_cb" => Ok(Method::LrCb),
            other => Err(Error::invalid(format!("unknown method {other:?}"))),
        }
    }
}

/// Subspace dimension: fixed, or chosen by the eigengap rule.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum SubDim {
    Fixed(usize),
    Auto(AutoTag),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AutoTag {
    Auto,
}

impl SubDim {
    pub const AUTO: SubDim = SubDim::Auto(AutoTag::Auto);
}

impl std::str::FromStr for SubDim {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        if s == "auto" {
            return Ok(SubDim::AUTO);
        }
        s.parse::<usize>()
            .map(SubDim::Fixed)
            .map_err(|_| Error::invalid(format!("sub-dim must be a count or \"auto\", got {s:?}")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdaptConfig {
    pub method: Method,
    pub lambda_lr: f64,
    pub lambda_cb: f64,
    pub lr: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub sub_dim: SubDim,
    pub delta: f64,
    pub epsilon: f64,
    pub seed: u64,
    /// Keep `γ, β` fixed and optimise only the alignment layer.
    pub freeze_norm: bool,
}

impl Default for AdaptConfig {
    fn default() -> Self {
        Self {
            method: Method::Cattan,
            lambda_lr: 0.025,
            lambda_cb: 1.0,
            lr: 1e-4,
            batch_size: 64,
            epochs: 5,
            sub_dim: SubDim::AUTO,
            delta: 0.1,
            epsilon: 1e6,
            seed: 0,
            freeze_norm: false,
        }
    }
}

impl AdaptConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(Error::invalid("lr must be finite and non-negative"));
        }
        if self.batch_size < 2 {
            return Err(Error::invalid("batch_size must be at least 2"));
        }
        if self.epochs == 0 {
            return Err(Error::invalid("epochs must be positive"));
        }
        if let SubDim::Fixed(0) = self.sub_dim {
            return Err(Error::invalid("sub_dim must be positive"));
        }
        self.weights().validate()?;
        self.dim_select(usize::MAX).validate()
    }

    pub fn weights(&self) -> LossWeights {
        LossWeights {
            lambda_lr: self.lambda_lr,
            lambda_cb: self.lambda_cb,
        }
    }

    pub fn dim_select(&self, d_max: usize) -> DimSelectConfig {
        DimSelectConfig {
            delta: self.delta,
            epsilon: self.epsilon,
            d_max,
        }
    }
}

/// Parameters adaptation is allowed to change.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainableParams {
    pub gamma: Vec<f64>,
    pub beta: Vec<f64>,
    pub phi: Option<AlignmentTransform>,
}

impl TrainableParams {
    pub fn names(&self) -> Vec<&'static str> {
        let mut names = vec!["bn_gamma", "bn_beta"];
        if self.phi.is_some() {
            names.push("phi");
        }
        names
    }
}

#[derive(Debug, Clone)]
pub struct AdaptInit {
    /// Source basis truncated to the chosen dimension.
    pub w_s: SubspaceBasis,
    pub w_t: SubspaceBasis,
    pub phi0: AlignmentTransform,
    pub params: TrainableParams,
}

/// Latent-space alignment applied in front of the classifier.
#[derive(Debug, Clone, Copy)]
pub struct Alignment<'a> {
    pub phi: &'a AlignmentTransform,
    pub w_t: &'a SubspaceBasis,
    pub w_s: &'a SubspaceBasis,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub accuracy: f64,
    pub ece: f64,
    pub samples: usize,
    pub per_class: Vec<ClassReport>,
}

#[derive(Debug, Clone)]
pub struct AdaptResult {
    pub model: SourceModel,
    pub alignment: Option<AlignmentTransform>,
    pub w_t: Option<SubspaceBasis>,
    pub w_s: Option<SubspaceBasis>,
    /// Objective over the whole target set before the first update.
    pub initial: LossReport,
    /// Objective over the whole target set after each epoch.
    pub trace: Vec<LossReport>,
    /// Objective of every mini-batch, in update order.
    pub batch_losses: Vec<f64>,
}

impl AdaptResult {
    pub fn alignment(&self) -> Option<Alignment<'_>> {
        match (&self.alignment, &self.w_t, &self.w_s) {
            (Some(phi), Some(w_t), Some(w_s)) => Some(Alignment { phi, w_t, w_s }),
            _ => None,
        }
    }
}

/// What the optimisation loop minimises.
#[derive(Debug, Clone)]
pub struct Objective {
    pub calibration: Calibration,
    pub weights: LossWeights,
    /// `(W_t, W_s)` when predictions pass through the alignment layer.
    pub alignment: Option<(SubspaceBasis, SubspaceBasis)>,
    pub freeze_norm: bool,
}

impl Objective {
    pub fn for_method(cfg: &AdaptConfig, bases: Option<(SubspaceBasis, SubspaceBasis)>) -> Result<Self> {
        let (calibration, weights) = match cfg.method {
            Method::Cattan | Method::LrCb => (Calibration::LikelihoodRatio, cfg.weights()),
            Method::Tent => (
                Calibration::Entropy,
                LossWeights {
                    lambda_lr: 0.0,
                    lambda_cb: 0.0,
                },
            ),
            Method::TentPlus => (
                Calibration::Entropy,
                LossWeights {
                    lambda_lr: 0.0,
                    lambda_cb: cfg.lambda_cb,
                },
            ),
        };
        if cfg.method.uses_alignment() != bases.is_some() {
            return Err(Error::invalid(format!("{:?} alignment bases mismatch", cfg.method)));
        }
        Ok(Self {
            calibration,
            weights,
            alignment: bases,
            freeze_norm: cfg.freeze_norm,
        })
    }

    fn evaluate(&self, model: &SourceModel, cache_latent: &Matrix, cache_logits: &Matrix, phi: Option<&AlignmentTransform>) -> Result<(LossReport, Matrix, Option<Matrix>)> {
        match (&self.alignment, phi) {
            (Some((w_t, w_s)), Some(phi)) => {
                debug_assert_eq!(self.calibration, Calibration::LikelihoodRatio);
                let (report, grads) = total_loss(model, cache_latent, phi, w_t, w_s, &self.weights)?;
                Ok((report, grads.latent, Some(grads.phi)))
            }
            (None, None) => {
                let (report, g_logits) = prediction_loss(cache_logits, self.calibration, &self.weights)?;
                Ok((report, g_logits.matmul_t(&model.classifier_weight)?, None))
            }
            _ => Err(Error::invalid("alignment layer and objective disagree")),
        }
    }
}

fn resolve_dim(w_s: &SubspaceBasis, latent: &Matrix, cfg: &AdaptConfig) -> Result<usize> {
    match cfg.sub_dim {
        SubDim::Fixed(d) => {
            if d > w_s.sub_dim() {
                return Err(Error::invalid(format!(
                    "requested subspace dimension {d} exceeds the stored source basis ({})",
                    w_s.sub_dim()
                )));
            }
            Ok(d)
        }
        SubDim::Auto(_) => {
            let target = covariance_spectrum(latent)?;
            let sel = select_dim(w_s.eigenvalues(), &target, latent.rows(), &cfg.dim_select(w_s.sub_dim()))?;
            Ok(sel.d)
        }
    }
}

/// Initialisation with the target basis fitted on `subset` rows of the target
/// latents (all rows when `None`).
pub fn init_adaptation_on(
    model: &SourceModel,
    w_s: &SubspaceBasis,
    target: &Matrix,
    cfg: &AdaptConfig,
    subset: Option<&[usize]>,
) -> Result<AdaptInit> {
    if w_s.ambient_dim() != model.latent_dim() {
        return Err(Error::dims("init_adaptation", w_s.ambient_dim(), model.latent_dim()));
    }
    let latent = model.latent_full_pass(target)?;
    let d = resolve_dim(w_s, &latent, cfg)?;
    let fit_rows = match subset {
        Some(idx) => latent.select_rows(idx),
        None => latent,
    };
    if fit_rows.rows() < d {
        return Err(Error::invalid(format!(
            "{} target samples cannot support a {d}-dimensional subspace",
            fit_rows.rows()
        )));
    }
    let w_s = w_s.truncate(d)?;
    let w_t = fit_pca(&fit_rows, d)?;
    let phi0 = closed_form_phi(&w_t, &w_s)?;
    Ok(AdaptInit {
        params: TrainableParams {
            gamma: model.bn_gamma.clone(),
            beta: model.bn_beta.clone(),
            phi: Some(phi0.clone()),
        },
        w_s,
        w_t,
        phi0,
    })
}

pub fn init_adaptation(model: &SourceModel, w_s: &SubspaceBasis, target: &Matrix, cfg: &AdaptConfig) -> Result<AdaptInit> {
    init_adaptation_on(model, w_s, target, cfg, None)
}

/// Adapted model, final Φ, initial loss, per-epoch trace, per-batch losses.
pub type EngineOutput = (SourceModel, Option<AlignmentTransform>, LossReport, Vec<LossReport>, Vec<f64>);

/// Shared optimisation loop for every method.
pub fn run_engine(
    model: &SourceModel,
    target: &Matrix,
    objective: &Objective,
    phi0: Option<AlignmentTransform>,
    cfg: &AdaptConfig,
    rng: &mut Rng,
) -> Result<EngineOutput> {
    cfg.validate()?;
    let n = target.rows();
    if n < 2 {
        return Err(Error::invalid("adaptation needs at least 2 target samples"));
    }
    let mut model = model.clone();
    let mut phi = phi0;
    let d_latent = model.latent_dim();
    let mut norm_opt = AdamState::new(2 * d_latent, cfg.lr);
    let mut phi_opt = phi.as_ref().map(|p| AdamState::new(p.dim() * p.dim(), cfg.lr));

    let full_objective = |model: &SourceModel, phi: Option<&AlignmentTransform>| -> Result<LossReport> {
        let cache = model.forward(target, StatsMode::Batch)?;
        Ok(objective.evaluate(model, &cache.latent, &cache.logits, phi)?.0)
    };

    let initial = full_objective(&model, phi.as_ref())?;
    let mut trace = Vec::with_capacity(cfg.epochs);
    let mut batch_losses = Vec::new();

    for epoch in 0..cfg.epochs {
        let order = rng.permutation(n);
        for (batch, chunk) in order.chunks(cfg.batch_size).enumerate() {
            if chunk.len() < 2 {
                continue;
            }
            let x = target.select_rows(chunk);
            let cache = model.forward(&x, StatsMode::Batch)?;
            let (report, grad_latent, grad_phi) = objective.evaluate(&model, &cache.latent, &cache.logits, phi.as_ref())?;
            if !report.total.is_finite() {
                return Err(Error::NonFiniteLoss {
                    epoch,
                    batch,
                    value: report.total,
                });
            }
            batch_losses.push(report.total);

            if !objective.freeze_norm {
                let (g_gamma, g_beta) = model.backward_latent(&cache, &grad_latent)?;
                let mut params: Vec<f64> = model.bn_gamma.iter().chain(&model.bn_beta).copied().collect();
                let grads: Vec<f64> = g_gamma.into_iter().chain(g_beta).collect();
                adam_step(&mut params, &grads, &mut norm_opt)?;
                model.bn_gamma.copy_from_slice(&params[..d_latent]);
                model.bn_beta.copy_from_slice(&params[d_latent..]);
            }
            if let (Some(p), Some(g), Some(opt)) = (phi.as_mut(), grad_phi, phi_opt.as_mut()) {
                adam_step(p.phi.as_mut_slice(), g.as_slice(), opt)?;
            }
        }
        let report = full_objective(&model, phi.as_ref())?;
        if !report.total.is_finite() {
            return Err(Error::NonFiniteLoss {
                epoch,
                batch: usize::MAX,
                value: report.total,
            });
        }
        trace.push(report);
    }
    Ok((model, phi, initial, trace, batch_losses))
}

/// Adaptation from a prepared initialisation (alignment methods only).
pub fn run_adaptation_from(
    model: &SourceModel,
    init: &AdaptInit,
    target: &Matrix,
    cfg: &AdaptConfig,
    rng: &mut Rng,
) -> Result<AdaptResult> {
    let objective = Objective::for_method(cfg, Some((init.w_t.clone(), init.w_s.clone())))?;
    let (model, phi, initial, trace, batch_losses) =
        run_engine(model, target, &objective, Some(init.phi0.clone()), cfg, rng)?;
    Ok(AdaptResult {
        model,
        alignment: phi,
        w_t: Some(init.w_t.clone()),
        w_s: Some(init.w_s.clone()),
        initial,
        trace,
        batch_losses,
    })
}

/// Full alignment-based adaptation: initialise from the closed form, then
/// jointly optimise `{γ, β, Φ}`. `W_t` stays fixed throughout.
pub fn run_adaptation(
    model: &SourceModel,
    w_s: &SubspaceBasis,
    target: &Matrix,
    cfg: &AdaptConfig,
    rng: &mut Rng,
) -> Result<AdaptResult> {
    if cfg.method != Method::Cattan {
        return Err(Error::invalid(format!("run_adaptation expects method cattan, got {:?}", cfg.method)));
    }
    cfg.validate()?;
    let init = init_adaptation(model, w_s, target, cfg)?;
    run_adaptation_from(model, &init, target, cfg, rng)
}

/// Normalization-only baselines without an alignment layer.
pub fn run_baseline(model: &SourceModel, target: &Matrix, cfg: &AdaptConfig, rng: &mut Rng) -> Result<AdaptResult> {
    if cfg.method.uses_alignment() {
        return Err(Error::invalid("run_baseline expects tent, tent-plus or lr-cb"));
    }
    let objective = Objective::for_method(cfg, None)?;
    let (model, _, initial, trace, batch_losses) = run_engine(model, target, &objective, None, cfg, rng)?;
    Ok(AdaptResult {
        model,
        alignment: None,
        w_t: None,
        w_s: None,
        initial,
        trace,
        batch_losses,
    })
}

/// Dispatches on `cfg.method`. `w_s` is required for alignment methods.
pub fn adapt(
    model: &SourceModel,
    w_s: Option<&SubspaceBasis>,
    target: &Matrix,
    cfg: &AdaptConfig,
    rng: &mut Rng,
) -> Result<AdaptResult> {
    if cfg.method.uses_alignment() {
        let w_s = w_s.ok_or_else(|| Error::invalid("alignment needs a source subspace"))?;
        run_adaptation(model, w_s, target, cfg, rng)
    } else {
        run_baseline(model, target, cfg, rng)
    }
}

/// Logits under full-pass statistics of `x`, routed through the alignment
/// when one is given.
pub fn predict_logits(model: &SourceModel, alignment: Option<Alignment<'_>>, x: &Matrix) -> Result<Matrix> {
    let out = model.with_stats_from(x)?.forward(x, StatsMode::Running)?;
    match alignment {
        None => Ok(out.logits),
        Some(a) => model.classify_aligned(&align_project(&out.latent, a.w_t, a.phi, a.w_s)?),
    }
}

/// Accuracy, ECE and per-class accuracy from a probability matrix.
pub fn score_probabilities(probs: &Matrix, labels: &[usize]) -> Result<EvalReport> {
    if probs.rows() != labels.len() {
        return Err(Error::dims("score_probabilities", probs.rows(), labels.len()));
    }
    if labels.is_empty() {
        return Err(Error::invalid("cannot evaluate an empty dataset"));
    }
    validate_labels(labels, probs.cols())?;
    let preds: Vec<usize> = probs.row_iter().map(argmax).collect();
    let conf: Vec<f64> = probs.row_iter().map(|r| r[argmax(r)]).collect();
    let correct: Vec<bool> = preds.iter().zip(labels).map(|(p, l)| p == l).collect();
    Ok(EvalReport {
        accuracy: accuracy(&preds, labels)?,
        ece: ece(&conf, &correct, DEFAULT_ECE_BINS)?,
        samples: labels.len(),
        per_class: per_class_report(&preds, labels, probs.cols()),
    })
}

pub fn evaluate(model: &SourceModel, alignment: Option<Alignment<'_>>, features: &Matrix, labels: &[usize]) -> Result<EvalReport> {
    if features.rows() == 0 {
        return Err(Error::invalid("cannot evaluate an empty dataset"));
    }
    let logits = predict_logits(model, alignment, features)?;
    score_probabilities(&softmax_rows(&logits), labels)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataio::{gen_synthetic, SynthConfig};
    use crate::model::{train_source, TrainConfig};
    use crate::subspace::alignment_loss;

    struct Fixture {
        model: SourceModel,
        w_s: SubspaceBasis,
        source: Matrix,
        target: Matrix,
        target_labels: Vec<usize>,
    }

    fn fixture() -> Fixture {
        let data = gen_synthetic(&SynthConfig {
            samples_per_class: 60,
            ..Default::default()
        })
        .unwrap();
        let cfg = TrainConfig {
            latent_dim: 12,
            epochs: 8,
            ..Default::default()
        };
        let model = train_source(&data.source.features, &data.source.labels, &cfg, &mut Rng::new(1)).unwrap();
        let z_s = model.latent_full_pass(&data.source.features).unwrap();
        let w_s = fit_pca(&z_s, 12).unwrap();
        Fixture {
            model,
            w_s,
            source: data.source.features,
            target: data.target.features,
            target_labels: data.target.labels,
        }
    }

    fn cfg(method: Method) -> AdaptConfig {
        AdaptConfig {
            method,
            sub_dim: SubDim::Fixed(6),
            epochs: 2,
            batch_size: 32,
            lr: 1e-3,
            ..Default::default()
        }
    }

    #[test]
    fn config_parsing() {
        let c: AdaptConfig = serde_json::from_str(r#"{"method":"tent-plus","sub_dim":"auto"}"#).unwrap();
        assert_eq!(c.method, Method::TentPlus);
        assert_eq!(c.sub_dim, SubDim::AUTO);
        let c: AdaptConfig = serde_json::from_str(r#"{"method":"lr_cb","sub_dim":7}"#).unwrap();
        assert_eq!(c.method, Method::LrCb);
        assert_eq!(c.sub_dim, SubDim::Fixed(7));
        assert!(serde_json::from_str::<AdaptConfig>(r#"{"bogus":1}"#).is_err());
        assert_eq!("auto".parse::<SubDim>().unwrap(), SubDim::AUTO);
        assert!("x".parse::<Method>().is_err());
    }

    #[test]
    fn self_alignment_is_near_identity() {
        let f = fixture();
        let c = AdaptConfig {
            sub_dim: SubDim::Fixed(3),
            ..cfg(Method::Cattan)
        };
        let init = init_adaptation(&f.model, &f.w_s, &f.source, &c).unwrap();
        let abs = init.phi0.phi.map(f64::abs);
        assert!(abs.max_abs_diff(&Matrix::identity(3)) <= 0.1, "{:?}", init.phi0.phi);
        assert_eq!(init.params.names(), vec!["bn_gamma", "bn_beta", "phi"]);
    }

    #[test]
    fn one_dimensional_phi_is_a_cosine() {
        let f = fixture();
        let c = AdaptConfig {
            sub_dim: SubDim::Fixed(1),
            ..cfg(Method::Cattan)
        };
        let init = init_adaptation(&f.model, &f.w_s, &f.target, &c).unwrap();
        let cos: f64 = init.w_t.basis().col(0).iter().zip(init.w_s.basis().col(0)).map(|(a, b)| a * b).sum();
        assert_eq!(init.phi0.phi.shape(), (1, 1));
        assert!((init.phi0.phi[(0, 0)] - cos).abs() < 1e-12);
        assert!(cos.abs() <= 1.0 + 1e-12);
    }

    #[test]
    fn init_errors() {
        let f = fixture();
        let c = AdaptConfig {
            sub_dim: SubDim::Fixed(13),
            ..cfg(Method::Cattan)
        };
        assert!(init_adaptation(&f.model, &f.w_s, &f.target, &c).is_err());
        let small = f.target.select_rows(&[0, 1, 2, 3]);
        assert!(init_adaptation(&f.model, &f.w_s, &small, &cfg(Method::Cattan)).is_err());
    }

    #[test]
    fn zero_lr_is_identity_for_every_method() {
        let f = fixture();
        for method in [Method::Cattan, Method::Tent, Method::TentPlus, Method::LrCb] {
            let c = AdaptConfig { lr: 0.0, ..cfg(method) };
            let r = adapt(&f.model, Some(&f.w_s), &f.target, &c, &mut Rng::new(3)).unwrap();
            assert_eq!(r.model, f.model, "{method:?}");
            assert_eq!(r.trace.len(), 2);
            assert_eq!(r.trace[0], r.trace[1]);
            assert_eq!(r.trace[0], r.initial);
            if method == Method::Cattan {
                let init = init_adaptation(&f.model, &f.w_s, &f.target, &c).unwrap();
                assert_eq!(r.alignment.unwrap(), init.phi0);
            }
        }
    }

    #[test]
    fn frozen_parameters_never_move() {
        let f = fixture();
        let before = f.model.frozen_fingerprint();
        for method in [Method::Cattan, Method::Tent, Method::TentPlus, Method::LrCb] {
            let r = adapt(&f.model, Some(&f.w_s), &f.target, &cfg(method), &mut Rng::new(4)).unwrap();
            assert_eq!(r.model.frozen_fingerprint(), before, "{method:?}");
            assert_eq!(r.model.bn_running_mean, f.model.bn_running_mean);
            assert_ne!(r.model.bn_gamma, f.model.bn_gamma);
        }
    }

    #[test]
    fn adaptation_is_deterministic() {
        let f = fixture();
        let a = run_adaptation(&f.model, &f.w_s, &f.target, &cfg(Method::Cattan), &mut Rng::new(5)).unwrap();
        let b = run_adaptation(&f.model, &f.w_s, &f.target, &cfg(Method::Cattan), &mut Rng::new(5)).unwrap();
        assert_eq!(a.model, b.model);
        assert_eq!(a.alignment, b.alignment);
        assert_eq!(a.trace, b.trace);
        assert_eq!(a.batch_losses, b.batch_losses);
    }

    #[test]
    fn pure_alignment_descent_stays_at_the_closed_form() {
        let f = fixture();
        let c = AdaptConfig {
            lambda_lr: 0.0,
            lambda_cb: 0.0,
            freeze_norm: true,
            lr: 1e-2,
            ..cfg(Method::Cattan)
        };
        let r = run_adaptation(&f.model, &f.w_s, &f.target, &c, &mut Rng::new(6)).unwrap();
        let init = init_adaptation(&f.model, &f.w_s, &f.target, &c).unwrap();
        let (start, _) = alignment_loss(&init.phi0, &init.w_t, &init.w_s).unwrap();
        let (end, _) = alignment_loss(r.alignment.as_ref().unwrap(), &init.w_t, &init.w_s).unwrap();
        assert!(end <= start, "{end} > {start}");
    }

    #[test]
    fn pure_alignment_descent_approaches_the_closed_form() {
        let f = fixture();
        let c = AdaptConfig {
            lambda_lr: 0.0,
            lambda_cb: 0.0,
            freeze_norm: true,
            lr: 1e-2,
            epochs: 20,
            ..cfg(Method::Cattan)
        };
        let init = init_adaptation(&f.model, &f.w_s, &f.target, &c).unwrap();
        let objective = Objective::for_method(&c, Some((init.w_t.clone(), init.w_s.clone()))).unwrap();
        let zero = AlignmentTransform::new(Matrix::zeros(6, 6)).unwrap();
        let (model, phi, initial, trace, _) =
            run_engine(&f.model, &f.target, &objective, Some(zero), &c, &mut Rng::new(6)).unwrap();
        let (best, _) = alignment_loss(&init.phi0, &init.w_t, &init.w_s).unwrap();
        let (end, _) = alignment_loss(phi.as_ref().unwrap(), &init.w_t, &init.w_s).unwrap();
        assert!((initial.total - 6.0).abs() < 1e-9);
        assert_eq!(trace.last().unwrap().total, end);
        assert!(end - best < 0.05 * (initial.total - best), "{end} vs {best}");
        assert_eq!(model.bn_gamma, f.model.bn_gamma);
    }

    #[test]
    fn engine_without_alignment_reproduces_tent_plus() {
        let f = fixture();
        let c = cfg(Method::TentPlus);
        let baseline = run_baseline(&f.model, &f.target, &c, &mut Rng::new(7)).unwrap();
        let objective = Objective {
            calibration: Calibration::Entropy,
            weights: LossWeights {
                lambda_lr: 0.0,
                lambda_cb: c.lambda_cb,
            },
            alignment: None,
            freeze_norm: false,
        };
        let engine = AdaptConfig { method: Method::Cattan, ..c };
        let (model, phi, _, trace, _) = run_engine(&f.model, &f.target, &objective, None, &engine, &mut Rng::new(7)).unwrap();
        assert!(phi.is_none());
        assert_eq!(model, baseline.model);
        assert_eq!(trace, baseline.trace);
    }

    #[test]
    fn gamma_beta_gradients_through_alignment_match_finite_differences() {
        let f = fixture();
        let c = cfg(Method::Cattan);
        let init = init_adaptation(&f.model, &f.w_s, &f.target, &c).unwrap();
        let objective = Objective::for_method(&c, Some((init.w_t.clone(), init.w_s.clone()))).unwrap();
        let x = f.target.select_rows(&(0..24).collect::<Vec<_>>());
        let loss = |m: &SourceModel| {
            let cache = m.forward(&x, StatsMode::Batch).unwrap();
            objective.evaluate(m, &cache.latent, &cache.logits, Some(&init.phi0)).unwrap().0.total
        };
        let cache = f.model.forward(&x, StatsMode::Batch).unwrap();
        let (_, g_latent, _) = objective.evaluate(&f.model, &cache.latent, &cache.logits, Some(&init.phi0)).unwrap();
        let (g_gamma, g_beta) = f.model.backward_latent(&cache, &g_latent).unwrap();
        let h = 1e-5;
        for j in 0..f.model.latent_dim() {
            for (which, analytic) in [(0, g_gamma[j]), (1, g_beta[j])] {
                let mut up = f.model.clone();
                let mut down = f.model.clone();
                if which == 0 {
                    up.bn_gamma[j] += h;
                    down.bn_gamma[j] -= h;
                } else {
                    up.bn_beta[j] += h;
                    down.bn_beta[j] -= h;
                }
                let fd = (loss(&up) - loss(&down)) / (2.0 * h);
                let rel = (fd - analytic).abs() / fd.abs().max(analytic.abs()).max(1e-7);
                assert!(rel <= 1e-5, "{which}/{j}: {fd} vs {analytic}");
            }
        }
    }

    #[test]
    fn evaluation_cases() {
        let f = fixture();
        let plain = evaluate(&f.model, None, &f.target, &f.target_labels).unwrap();
        let full = f.w_s.clone();
        let id = AlignmentTransform::identity(full.sub_dim());
        let aligned = evaluate(
            &f.model,
            Some(Alignment {
                phi: &id,
                w_t: &full,
                w_s: &full,
            }),
            &f.target,
            &f.target_labels,
        )
        .unwrap();
        assert!((plain.accuracy - aligned.accuracy).abs() < 1e-12);

        let logits = predict_logits(&f.model, None, &f.target).unwrap();
        let hits = logits
            .row_iter()
            .zip(&f.target_labels)
            .filter(|(row, &l)| argmax(row) == l)
            .count();
        assert_eq!(plain.accuracy, hits as f64 / f.target_labels.len() as f64);
        assert_eq!(plain.per_class.iter().map(|c| c.support).sum::<usize>(), f.target_labels.len());
        assert!(evaluate(&f.model, None, &Matrix::zeros(0, 16), &[]).is_err());
    }

    #[test]
    fn perfect_predictions_score_one() {
        let probs = Matrix::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap();
        let r = score_probabilities(&probs, &[0, 1]).unwrap();
        assert_eq!(r.accuracy, 1.0);
        assert_eq!(r.ece, 0.0);
    }
}
