//! On-disk formats, synthetic shifted domains and evaluation metrics.

pub(crate) mod binary;
mod formats;
mod metrics;
mod synth;

pub use formats::{
    decode_embeddings, decode_labels, decode_subspace, encode_embeddings, encode_labels, encode_subspace,
    read_embeddings, read_labels, read_subspace, validate_labels, write_embeddings, write_labels, write_subspace,
    SUB_ORTHONORMALITY_TOL,
};
pub use metrics::{accuracy, ece, per_class_report, ClassReport, DEFAULT_ECE_BINS};
pub use synth::{gen_synthetic, Dataset, RotationSpec, Shift, ShiftKind, SynthConfig, SyntheticData};
