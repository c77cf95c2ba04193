//! Test-time adaptation of a frozen classifier by aligning the principal
//! subspaces of source and target features.
//!
//! The pipeline: train a [`SourceModel`] on labelled source features, keep
//! only its latent [`SubspaceBasis`], then at deployment jointly optimise a
//! linear alignment layer and the normalization affine on unlabelled target
//! data ([`run_adaptation`]). A [`HypothesisEnsemble`] can gate samples that
//! look like they came from the source domain back to the identity alignment.

pub mod adapt;
pub mod dataio;
pub mod detector;
mod error;
pub mod losses;
pub mod model;
pub mod numerics;
pub mod subspace;

pub use adapt::{
    adapt, evaluate, init_adaptation, run_adaptation, run_baseline, AdaptConfig, AdaptResult, EvalReport, Method,
    SubDim,
};
pub use detector::{build_hypotheses, q_score, EnsembleConfig, GateDecision, HypothesisEnsemble};
pub use error::{Error, Result};
pub use losses::{LossReport, LossWeights};
pub use model::{SourceModel, StatsMode, TrainConfig};
pub use numerics::{Matrix, Rng};
pub use subspace::{AlignmentTransform, BoundPoint, DimSelectConfig, SubspaceBasis};
