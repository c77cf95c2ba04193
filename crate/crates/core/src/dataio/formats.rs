//! `EMB1` embeddings, `LBL1` labels and `SUB1` subspace bases.
//!
//! All three are little-endian with u32 headers and f32 / u32 payloads:
//!
//! ```text
//! EMB1  rows cols  f32[rows*cols]                  (row-major)
//! LBL1  count      u32[count]
//! SUB1  D d n      f32[D*d] f32[d] f32[D]          (basis, eigenvalues, mean)
//! ```

use std::path::Path;

use crate::dataio::binary::{dim_u32, read_file, write_file, Reader, Writer};
use crate::error::{Error, Result};
use crate::numerics::Matrix;
use crate::subspace::SubspaceBasis;

const EMB_MAGIC: &[u8; 4] = b"EMB1";
const LBL_MAGIC: &[u8; 4] = b"LBL1";
const SUB_MAGIC: &[u8; 4] = b"SUB1";

/// Orthonormality tolerance for bases read back from f32 storage.
pub const SUB_ORTHONORMALITY_TOL: f64 = 1e-6;

pub fn encode_embeddings(m: &Matrix) -> Result<Vec<u8>> {
    if !m.is_finite() {
        return Err(Error::invalid("refusing to write non-finite embeddings"));
    }
    let mut w = Writer::with_magic(EMB_MAGIC);
    w.u32(dim_u32("rows", m.rows())?);
    w.u32(dim_u32("cols", m.cols())?);
    w.f32_slice(m.as_slice());
    Ok(w.into_bytes())
}

pub fn decode_embeddings(bytes: &[u8]) -> Result<Matrix> {
    let mut r = Reader::new(bytes, "EMB1");
    r.magic(EMB_MAGIC)?;
    let rows = r.u32()? as usize;
    let cols = r.u32()? as usize;
    r.expect_remaining(rows as u64 * cols as u64 * 4)?;
    let data = r.f32_array(rows * cols)?;
    r.finish()?;
    Matrix::from_vec(rows, cols, data)
}

pub fn write_embeddings(path: &Path, m: &Matrix) -> Result<()> {
    write_file(path, &encode_embeddings(m)?)
}

pub fn read_embeddings(path: &Path) -> Result<Matrix> {
    decode_embeddings(&read_file(path)?)
}

pub fn encode_labels(labels: &[usize]) -> Result<Vec<u8>> {
    let mut w = Writer::with_magic(LBL_MAGIC);
    w.u32(dim_u32("count", labels.len())?);
    for &l in labels {
        w.u32(dim_u32("label", l)?);
    }
    Ok(w.into_bytes())
}

pub fn decode_labels(bytes: &[u8]) -> Result<Vec<usize>> {
    let mut r = Reader::new(bytes, "LBL1");
    r.magic(LBL_MAGIC)?;
    let count = r.u32()? as usize;
    r.expect_remaining(count as u64 * 4)?;
    let labels = r.u32_array(count)?.into_iter().map(|v| v as usize).collect();
    r.finish()?;
    Ok(labels)
}

pub fn write_labels(path: &Path, labels: &[usize]) -> Result<()> {
    write_file(path, &encode_labels(labels)?)
}

pub fn read_labels(path: &Path) -> Result<Vec<usize>> {
    decode_labels(&read_file(path)?)
}

/// Checks labels against a class count declared by the caller.
pub fn validate_labels(labels: &[usize], classes: usize) -> Result<()> {
    match labels.iter().position(|&l| l >= classes) {
        Some(i) => Err(Error::Format {
            offset: 8 + 4 * i as u64,
            reason: format!("label {} out of range for {classes} classes", labels[i]),
        }),
        None => Ok(()),
    }
}

pub fn encode_subspace(b: &SubspaceBasis) -> Result<Vec<u8>> {
    let mut w = Writer::with_magic(SUB_MAGIC);
    w.u32(dim_u32("D", b.ambient_dim())?);
    w.u32(dim_u32("d", b.sub_dim())?);
    w.u32(dim_u32("n", b.sample_count())?);
    w.f32_slice(b.basis().as_slice());
    w.f32_slice(b.eigenvalues());
    w.f32_slice(b.mean());
    Ok(w.into_bytes())
}

pub fn decode_subspace(bytes: &[u8]) -> Result<SubspaceBasis> {
    let mut r = Reader::new(bytes, "SUB1");
    r.magic(SUB_MAGIC)?;
    let dim = r.u32()? as usize;
    let d = r.u32()? as usize;
    let n = r.u32()? as usize;
    if d > dim {
        return Err(Error::Format {
            offset: 8,
            reason: format!("subspace dimension {d} exceeds ambient dimension {dim}"),
        });
    }
    r.expect_remaining((dim as u64 * d as u64 + d as u64 + dim as u64) * 4)?;
    let basis = Matrix::from_vec(dim, d, r.f32_array(dim * d)?)?;
    let eigenvalues = r.f32_array(d)?;
    let mean = r.f32_array(dim)?;
    r.finish()?;
    let b = SubspaceBasis::new(basis, eigenvalues, mean, n)?;
    let err = b.orthonormality_error();
    if err > SUB_ORTHONORMALITY_TOL {
        return Err(Error::Format {
            offset: 16,
            reason: format!("basis is not orthonormal (max |WᵀW − I| = {err:e})"),
        });
    }
    Ok(b)
}

pub fn write_subspace(path: &Path, b: &SubspaceBasis) -> Result<()> {
    write_file(path, &encode_subspace(b)?)
}

pub fn read_subspace(path: &Path) -> Result<SubspaceBasis> {
    decode_subspace(&read_file(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::Rng;
    use crate::subspace::fit_pca;

    #[test]
    fn embeddings_round_trip_at_f32() {
        let mut rng = Rng::new(1);
        let m = rng.normal_matrix(10, 4).map(|v| v as f32 as f64);
        let bytes = encode_embeddings(&m).unwrap();
        assert_eq!(bytes.len(), 12 + 160);
        let back = decode_embeddings(&bytes).unwrap();
        for (a, b) in back.as_slice().iter().zip(m.as_slice()) {
            assert_eq!((*a as f32).to_bits(), (*b as f32).to_bits());
        }
    }

    #[test]
    fn header_layout_is_exact() {
        let m = Matrix::from_rows(&[vec![1.0, -2.0]]).unwrap();
        let bytes = encode_embeddings(&m).unwrap();
        let mut want = b"EMB1".to_vec();
        want.extend_from_slice(&1u32.to_le_bytes());
        want.extend_from_slice(&2u32.to_le_bytes());
        want.extend_from_slice(&1.0f32.to_le_bytes());
        want.extend_from_slice(&(-2.0f32).to_le_bytes());
        assert_eq!(bytes, want);
    }

    #[test]
    fn bad_magic_names_offset_zero() {
        let mut bytes = encode_embeddings(&Matrix::zeros(2, 2)).unwrap();
        bytes[3] = b'X';
        assert!(matches!(decode_embeddings(&bytes), Err(Error::Format { offset: 0, .. })));
        assert!(matches!(decode_labels(b"LB"), Err(Error::Format { offset: 0, .. })));
    }

    #[test]
    fn header_claiming_more_rows_is_truncation() {
        let mut bytes = encode_embeddings(&Matrix::zeros(2, 2)).unwrap();
        bytes[4..8].copy_from_slice(&3u32.to_le_bytes());
        assert!(matches!(decode_embeddings(&bytes), Err(Error::Truncated { .. })));
        bytes[4..8].copy_from_slice(&1u32.to_le_bytes());
        assert!(matches!(decode_embeddings(&bytes), Err(Error::Format { .. })));
        assert!(matches!(decode_embeddings(&bytes[..6]), Err(Error::Truncated { .. })));
    }

    #[test]
    fn non_finite_values_rejected() {
        let mut bytes = encode_embeddings(&Matrix::zeros(1, 2)).unwrap();
        bytes[16..20].copy_from_slice(&f32::INFINITY.to_le_bytes());
        assert!(matches!(decode_embeddings(&bytes), Err(Error::NonFinite { offset: 16 })));
    }

    #[test]
    fn labels_round_trip_and_validate() {
        let labels = vec![0, 3, 1, 1, 2];
        let back = decode_labels(&encode_labels(&labels).unwrap()).unwrap();
        assert_eq!(back, labels);
        assert!(validate_labels(&labels, 4).is_ok());
        assert!(matches!(validate_labels(&labels, 3), Err(Error::Format { offset: 12, .. })));
    }

    #[test]
    fn subspace_round_trip() {
        let mut rng = Rng::new(3);
        let b = fit_pca(&rng.normal_matrix(40, 6), 3).unwrap();
        let bytes = encode_subspace(&b).unwrap();
        assert_eq!(bytes.len(), 16 + 4 * (18 + 3 + 6));
        let back = decode_subspace(&bytes).unwrap();
        assert_eq!(back.sample_count(), 40);
        assert!(back.orthonormality_error() <= SUB_ORTHONORMALITY_TOL);
        assert_eq!(encode_subspace(&back).unwrap(), bytes);
    }

    #[test]
    fn non_orthonormal_basis_rejected() {
        let b = SubspaceBasis::new(Matrix::from_rows(&[vec![2.0], vec![0.0]]).unwrap(), vec![1.0], vec![0.0, 0.0], 5).unwrap();
        let bytes = encode_subspace(&b).unwrap();
        assert!(matches!(decode_subspace(&bytes), Err(Error::Format { .. })));
    }
}
