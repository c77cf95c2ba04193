use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::losses::cross_entropy;
use crate::model::{SourceModel, StatsMode};
use crate::numerics::{adam_step, AdamState, Matrix, Rng};

const RUNNING_MOMENTUM: f64 = 0.1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub latent_dim: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            latent_dim: 32,
            epochs: 20,
            batch_size: 64,
            lr: 1e-2,
        }
    }
}

/// Trains every parameter of a fresh model with mini-batch cross-entropy and
/// Adam. Running statistics follow an exponential average with momentum 0.1.
pub fn train_source(features: &Matrix, labels: &[usize], cfg: &TrainConfig, rng: &mut Rng) -> Result<SourceModel> {
    let n = features.rows();
    if labels.len() != n {
        return Err(Error::dims("train_source", n, labels.len()));
    }
    if cfg.latent_dim == 0 || cfg.batch_size < 2 || cfg.lr.is_nan() || cfg.lr < 0.0 {
        return Err(Error::invalid("train_source: latent_dim > 0, batch_size >= 2 and lr >= 0 required"));
    }
    let classes = labels.iter().max().map_or(0, |&m| m + 1);
    let mut seen = vec![false; classes];
    labels.iter().for_each(|&l| seen[l] = true);
    if classes < 2 || seen.iter().filter(|&&s| s).count() < 2 {
        return Err(Error::invalid("train_source needs at least two distinct classes"));
    }
    if n < classes {
        return Err(Error::invalid(format!("{n} samples for {classes} classes")));
    }

    let mut model = SourceModel::init(features.cols(), cfg.latent_dim, classes, rng);
    let d = cfg.latent_dim;
    let mut opt_w1 = AdamState::new(model.head_weight.as_slice().len(), cfg.lr);
    let mut opt_b1 = AdamState::new(d, cfg.lr);
    let mut opt_gamma = AdamState::new(d, cfg.lr);
    let mut opt_beta = AdamState::new(d, cfg.lr);
    let mut opt_w2 = AdamState::new(model.classifier_weight.as_slice().len(), cfg.lr);
    let mut opt_b2 = AdamState::new(classes, cfg.lr);

    for _ in 0..cfg.epochs {
        let order = rng.permutation(n);
        for chunk in order.chunks(cfg.batch_size) {
            if chunk.len() < 2 {
                continue;
            }
            let x = features.select_rows(chunk);
            let y: Vec<usize> = chunk.iter().map(|&i| labels[i]).collect();
            let cache = model.forward(&x, StatsMode::Batch)?;
            let (_, grad_logits) = cross_entropy(&cache.logits, &y)?;
            let g = model.backward_full(&cache, &grad_logits)?;

            adam_step(model.head_weight.as_mut_slice(), g.head_weight.as_slice(), &mut opt_w1)?;
            adam_step(&mut model.head_bias, &g.head_bias, &mut opt_b1)?;
            adam_step(&mut model.bn_gamma, &g.gamma, &mut opt_gamma)?;
            adam_step(&mut model.bn_beta, &g.beta, &mut opt_beta)?;
            adam_step(model.classifier_weight.as_mut_slice(), g.classifier_weight.as_slice(), &mut opt_w2)?;
            adam_step(&mut model.classifier_bias, &g.classifier_bias, &mut opt_b2)?;

            for j in 0..d {
                model.bn_running_mean[j] =
                    (1.0 - RUNNING_MOMENTUM) * model.bn_running_mean[j] + RUNNING_MOMENTUM * cache.mean[j];
                model.bn_running_var[j] =
                    (1.0 - RUNNING_MOMENTUM) * model.bn_running_var[j] + RUNNING_MOMENTUM * cache.var[j];
            }
        }
    }
    Ok(model)
}
