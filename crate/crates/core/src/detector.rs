//! Distribution-shift gate built on the agreement between several adapted
//! hypotheses. Samples on which the hypotheses disagree are routed through the
//! identity alignment.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::adapt::{
    init_adaptation_on, predict_logits, run_adaptation_from, score_probabilities, AdaptConfig, Alignment, EvalReport,
    Method,
};
use crate::error::{Error, Result};
use crate::model::SourceModel;
use crate::numerics::{argmax, softmax_rows, Matrix, Rng};
use crate::subspace::{AlignmentTransform, SubspaceBasis};

pub const DEFAULT_TAU: f64 = 0.75;

/// Which target rows the target basis of a hypothesis is fitted on.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SubsetStrategy {
    All,
    LowestConfidence,
    HighestConfidence,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EnsembleConfig {
    pub tau: f64,
    pub strategies: Vec<SubsetStrategy>,
}

impl Default for EnsembleConfig {
    fn default() -> Self {
        Self {
            tau: DEFAULT_TAU,
            strategies: vec![
                SubsetStrategy::All,
                SubsetStrategy::LowestConfidence,
                SubsetStrategy::HighestConfidence,
            ],
        }
    }
}

impl EnsembleConfig {
    pub fn validate(&self) -> Result<()> {
        validate_tau(self.tau)?;
        if self.strategies.len() < 2 {
            return Err(Error::invalid("an ensemble needs at least 2 hypotheses"));
        }
        Ok(())
    }
}

fn validate_tau(tau: f64) -> Result<()> {
    if !(tau.is_finite() && tau >= 0.0) {
        return Err(Error::invalid(format!("tau must be finite and non-negative, got {tau}")));
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
pub struct Hypothesis {
    pub model: SourceModel,
    pub w_t: SubspaceBasis,
    pub phi: AlignmentTransform,
}

#[derive(Debug, Clone)]
pub struct HypothesisEnsemble {
    hypotheses: Vec<Hypothesis>,
    w_s: SubspaceBasis,
    tau: f64,
}

impl HypothesisEnsemble {
    pub fn new(hypotheses: Vec<Hypothesis>, w_s: SubspaceBasis, tau: f64) -> Result<Self> {
        validate_tau(tau)?;
        if hypotheses.len() < 2 {
            return Err(Error::invalid("an ensemble needs at least 2 hypotheses"));
        }
        let first = &hypotheses[0];
        let shape = (first.model.latent_dim(), first.w_t.sub_dim(), first.model.classes());
        for h in &hypotheses {
            let s = (h.model.latent_dim(), h.w_t.sub_dim(), h.model.classes());
            if s != shape || h.phi.dim() != shape.1 || h.w_t.ambient_dim() != shape.0 {
                return Err(Error::invalid(format!("hypothesis shapes disagree: {s:?} vs {shape:?}")));
            }
        }
        if w_s.ambient_dim() != shape.0 || w_s.sub_dim() != shape.1 {
            return Err(Error::dims("HypothesisEnsemble::new", w_s.sub_dim(), shape.1));
        }
        Ok(Self { hypotheses, w_s, tau })
    }

    pub fn hypotheses(&self) -> &[Hypothesis] {
        &self.hypotheses
    }

    pub fn source_basis(&self) -> &SubspaceBasis {
        &self.w_s
    }

    pub fn k(&self) -> usize {
        self.hypotheses.len()
    }

    pub fn tau(&self) -> f64 {
        self.tau
    }

    pub fn with_tau(mut self, tau: f64) -> Result<Self> {
        validate_tau(tau)?;
        self.tau = tau;
        Ok(self)
    }

    /// The aligned pipeline of hypothesis `k`.
    pub fn alignment(&self, k: usize) -> Alignment<'_> {
        let h = &self.hypotheses[k];
        Alignment {
            phi: &h.phi,
            w_t: &h.w_t,
            w_s: &self.w_s,
        }
    }

    /// Softmax outputs of every hypothesis on `x`.
    pub fn probabilities(&self, x: &Matrix) -> Result<Vec<Matrix>> {
        (0..self.k())
            .into_par_iter()
            .map(|k| Ok(softmax_rows(&predict_logits(&self.hypotheses[k].model, Some(self.alignment(k)), x)?)))
            .collect()
    }

    /// Per-sample gate decisions for `x`, predicting with the first hypothesis.
    pub fn decide(&self, x: &Matrix) -> Result<GatedOutput> {
        let probs = self.probabilities(x)?;
        let primary = &self.hypotheses[0];
        let identity = AlignmentTransform::identity(primary.phi.dim());
        let fallback = softmax_rows(&predict_logits(
            &primary.model,
            Some(Alignment {
                phi: &identity,
                w_t: &primary.w_t,
                w_s: &self.w_s,
            }),
            x,
        )?);
        let mut decisions = Vec::with_capacity(x.rows());
        let mut chosen = Matrix::zeros(x.rows(), fallback.cols());
        for i in 0..x.rows() {
            let rows: Vec<&[f64]> = probs.iter().map(|p| p.row(i)).collect();
            let decision = gated_predict(&rows, fallback.row(i), self.tau);
            let src = if decision.used_alignment { rows[0] } else { fallback.row(i) };
            chosen.row_mut(i).copy_from_slice(src);
            decisions.push(decision);
        }
        Ok(GatedOutput {
            decisions,
            probabilities: chosen,
        })
    }

    pub fn evaluate(&self, x: &Matrix, labels: &[usize]) -> Result<GatedEvaluation> {
        let out = self.decide(x)?;
        let report = score_probabilities(&out.probabilities, labels)?;
        let n = out.decisions.len() as f64;
        Ok(GatedEvaluation {
            report,
            mean_q_bar: out.decisions.iter().map(|d| d.q_bar).sum::<f64>() / n,
            gated_fraction: out.decisions.iter().filter(|d| !d.used_alignment).count() as f64 / n,
            tau: self.tau,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GateDecision {
    pub q_bar: f64,
    pub used_alignment: bool,
    pub prediction: usize,
    pub hypothesis_argmaxes: Vec<usize>,
}

#[derive(Debug, Clone)]
pub struct GatedOutput {
    pub decisions: Vec<GateDecision>,
    /// Probabilities of the path each sample was routed through.
    pub probabilities: Matrix,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GatedEvaluation {
    pub report: EvalReport,
    pub mean_q_bar: f64,
    pub gated_fraction: f64,
    pub tau: f64,
}

/// Fraction of hypotheses whose argmax agrees with the argmax of the mean
/// probabilities of the others. Ties go to the lowest class index.
pub fn q_score(probs: &[&[f64]]) -> f64 {
    let k = probs.len();
    if k < 2 {
        return 1.0;
    }
    let c = probs[0].len();
    let matches = (0..k)
        .filter(|&me| {
            let others: Vec<f64> = (0..c)
                .map(|j| (0..k).filter(|&o| o != me).map(|o| probs[o][j]).sum::<f64>())
                .collect();
            argmax(&others) == argmax(probs[me])
        })
        .count();
    matches as f64 / k as f64
}

/// `hypotheses[0]` is the primary aligned prediction, `identity` the same
/// pipeline with the alignment replaced by the identity.
pub fn gated_predict(hypotheses: &[&[f64]], identity: &[f64], tau: f64) -> GateDecision {
    let q_bar = q_score(hypotheses);
    let used_alignment = q_bar >= tau;
    GateDecision {
        q_bar,
        used_alignment,
        prediction: if used_alignment { argmax(hypotheses[0]) } else { argmax(identity) },
        hypothesis_argmaxes: hypotheses.iter().map(|p| argmax(p)).collect(),
    }
}

/// Row indices of `x` for a subset strategy. Confidence is the max softmax
/// probability of the unadapted model, ties broken by row index.
pub fn subset_rows(model: &SourceModel, x: &Matrix, strategy: SubsetStrategy) -> Result<Vec<usize>> {
    let n = x.rows();
    if strategy == SubsetStrategy::All {
        return Ok((0..n).collect());
    }
    let probs = softmax_rows(&predict_logits(model, None, x)?);
    let conf: Vec<f64> = probs.row_iter().map(|r| r[argmax(r)]).collect();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| conf[a].total_cmp(&conf[b]).then(a.cmp(&b)));
    let keep = 2 * n / 3;
    let mut rows = match strategy {
        SubsetStrategy::LowestConfidence => order[..keep].to_vec(),
        SubsetStrategy::HighestConfidence => order[n - keep..].to_vec(),
        SubsetStrategy::All => unreachable!(),
    };
    rows.sort_unstable();
    Ok(rows)
}

/// Adapts one hypothesis per strategy. Every hypothesis is adapted on all of
/// the target data; only the fit of its target basis differs.
pub fn build_hypotheses(
    model: &SourceModel,
    w_s: &SubspaceBasis,
    target: &Matrix,
    adapt_cfg: &AdaptConfig,
    cfg: &EnsembleConfig,
    rng: &mut Rng,
) -> Result<HypothesisEnsemble> {
    cfg.validate()?;
    adapt_cfg.validate()?;
    if adapt_cfg.method != Method::Cattan {
        return Err(Error::invalid("hypotheses require the alignment method"));
    }
    let mut hypotheses = Vec::with_capacity(cfg.strategies.len());
    let mut truncated = None;
    for &strategy in &cfg.strategies {
        let mut child = rng.split();
        let rows = subset_rows(model, target, strategy)?;
        let init = init_adaptation_on(model, w_s, target, adapt_cfg, Some(&rows))?;
        let result = run_adaptation_from(model, &init, target, adapt_cfg, &mut child)?;
        hypotheses.push(Hypothesis {
            model: result.model,
            w_t: init.w_t,
            phi: result.alignment.expect("alignment method yields a transform"),
        });
        truncated.get_or_insert(init.w_s);
    }
    HypothesisEnsemble::new(hypotheses, truncated.expect("at least two strategies"), cfg.tau)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::adapt::{evaluate, SubDim};
    use crate::dataio::{gen_synthetic, SynthConfig};
    use crate::model::{train_source, TrainConfig};
    use crate::subspace::fit_pca;

    #[test]
    fn worked_example_gives_two_thirds_and_gates() {
        let h: [&[f64]; 3] = [&[0.9, 0.1], &[0.8, 0.2], &[0.2, 0.8]];
        let q = q_score(&h);
        assert!((q - 2.0 / 3.0).abs() < 1e-15);
        let d = gated_predict(&h, &[0.3, 0.7], DEFAULT_TAU);
        assert!(!d.used_alignment);
        assert_eq!(d.prediction, 1);
        assert_eq!(d.hypothesis_argmaxes, vec![0, 0, 1]);
    }

    #[test]
    fn identical_hypotheses_score_one() {
        let p: &[f64] = &[0.2, 0.5, 0.3];
        assert_eq!(q_score(&[p, p, p]), 1.0);
        let d = gated_predict(&[p, p, p], &[1.0, 0.0, 0.0], DEFAULT_TAU);
        assert!(d.used_alignment);
        assert_eq!(d.prediction, 1);
    }

    #[test]
    fn q_score_is_a_multiple_of_one_over_k_and_order_free() {
        let mut rng = Rng::new(11);
        for _ in 0..200 {
            let k = 2 + (rng.next_u64() % 4) as usize;
            let probs: Vec<Vec<f64>> = (0..k)
                .map(|_| {
                    let raw: Vec<f64> = (0..3).map(|_| rng.uniform()).collect();
                    let s: f64 = raw.iter().sum();
                    raw.iter().map(|v| v / s).collect()
                })
                .collect();
            let refs: Vec<&[f64]> = probs.iter().map(Vec::as_slice).collect();
            let q = q_score(&refs);
            let m = q * k as f64;
            assert!((m - m.round()).abs() < 1e-12 && (0.0..=1.0).contains(&q));
            let mut rev = refs.clone();
            rev.reverse();
            assert_eq!(q_score(&rev), q);
        }
    }

    #[test]
    fn tau_edges() {
        let h: [&[f64]; 3] = [&[0.9, 0.1], &[0.1, 0.9], &[0.2, 0.8]];
        assert!(gated_predict(&h, &[0.0, 1.0], 0.0).used_alignment);
        let p: &[f64] = &[0.6, 0.4];
        assert!(!gated_predict(&[p, p], p, 1.5).used_alignment);
        assert!(EnsembleConfig { tau: -0.1, ..Default::default() }.validate().is_err());
        assert!(EnsembleConfig {
            strategies: vec![SubsetStrategy::All],
            ..Default::default()
        }
        .validate()
        .is_err());
    }

    fn small_ensemble() -> (HypothesisEnsemble, SourceModel, Matrix, Vec<usize>) {
        let data = gen_synthetic(&SynthConfig {
            samples_per_class: 60,
            ..Default::default()
        })
        .unwrap();
        let model = train_source(
            &data.source.features,
            &data.source.labels,
            &TrainConfig {
                latent_dim: 12,
                epochs: 8,
                ..Default::default()
            },
            &mut Rng::new(2),
        )
        .unwrap();
        let w_s = fit_pca(&model.latent_full_pass(&data.source.features).unwrap(), 12).unwrap();
        let cfg = AdaptConfig {
            sub_dim: SubDim::Fixed(6),
            epochs: 2,
            batch_size: 32,
            lr: 1e-3,
            ..Default::default()
        };
        let ens = build_hypotheses(
            &model,
            &w_s,
            &data.target.features,
            &cfg,
            &EnsembleConfig::default(),
            &mut Rng::new(3),
        )
        .unwrap();
        (ens, model, data.target.features, data.target.labels)
    }

    #[test]
    fn gate_thresholds_reduce_to_single_pipelines() {
        let (ens, _, x, y) = small_ensemble();
        assert_eq!(ens.k(), 3);
        let open = ens.clone().with_tau(0.0).unwrap().evaluate(&x, &y).unwrap();
        let plain = evaluate(&ens.hypotheses()[0].model, Some(ens.alignment(0)), &x, &y).unwrap();
        assert_eq!(open.report, plain);
        assert_eq!(open.gated_fraction, 0.0);

        let closed = ens.clone().with_tau(1.5).unwrap().evaluate(&x, &y).unwrap();
        let h = &ens.hypotheses()[0];
        let id = AlignmentTransform::identity(h.phi.dim());
        let fallback = evaluate(
            &h.model,
            Some(Alignment {
                phi: &id,
                w_t: &h.w_t,
                w_s: ens.source_basis(),
            }),
            &x,
            &y,
        )
        .unwrap();
        assert_eq!(closed.report, fallback);
        assert_eq!(closed.gated_fraction, 1.0);
    }

    #[test]
    fn subsets_are_reproducible_and_sized() {
        let (_, model, x, _) = small_ensemble();
        let low = subset_rows(&model, &x, SubsetStrategy::LowestConfidence).unwrap();
        let high = subset_rows(&model, &x, SubsetStrategy::HighestConfidence).unwrap();
        assert_eq!(low, subset_rows(&model, &x, SubsetStrategy::LowestConfidence).unwrap());
        assert_eq!(low.len(), 2 * x.rows() / 3);
        assert_eq!(high.len(), low.len());
        assert_ne!(low, high);
        assert_eq!(subset_rows(&model, &x, SubsetStrategy::All).unwrap().len(), x.rows());
    }

    #[test]
    fn ensemble_shape_checks() {
        let (ens, ..) = small_ensemble();
        let one = vec![ens.hypotheses()[0].clone()];
        assert!(HypothesisEnsemble::new(one, ens.source_basis().clone(), 0.75).is_err());
        let mut bad = ens.hypotheses().to_vec();
        bad[1].phi = AlignmentTransform::identity(2);
        assert!(HypothesisEnsemble::new(bad, ens.source_basis().clone(), 0.75).is_err());
    }
}
