//! `CKP1` checkpoint: magic, u32 version, u32 in_dim, u32 D, u32 C,
//! f32 bn_eps, then f32 arrays in field order. Little-endian, no padding.

use std::path::Path;

use crate::dataio::binary::{dim_u32, read_file, write_file, Reader, Writer};
use crate::error::{Error, Result};
use crate::model::SourceModel;
use crate::numerics::Matrix;

pub const CHECKPOINT_VERSION: u32 = 1;
const MAGIC: &[u8; 4] = b"CKP1";

pub fn encode_checkpoint(model: &SourceModel) -> Result<Vec<u8>> {
    model.validate()?;
    let mut w = Writer::with_magic(MAGIC);
    w.u32(CHECKPOINT_VERSION);
    w.u32(dim_u32("in_dim", model.in_dim())?);
    w.u32(dim_u32("latent_dim", model.latent_dim())?);
    w.u32(dim_u32("classes", model.classes())?);
    w.f32(model.bn_eps);
    w.f32_slice(model.head_weight.as_slice());
    w.f32_slice(&model.head_bias);
    w.f32_slice(&model.bn_gamma);
    w.f32_slice(&model.bn_beta);
    w.f32_slice(&model.bn_running_mean);
    w.f32_slice(&model.bn_running_var);
    w.f32_slice(model.classifier_weight.as_slice());
    w.f32_slice(&model.classifier_bias);
    Ok(w.into_bytes())
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<SourceModel> {
    let mut r = Reader::new(bytes, "CKP1");
    r.magic(MAGIC)?;
    let version = r.u32()?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::UnsupportedVersion {
            format: "CKP1",
            found: version,
            expected: CHECKPOINT_VERSION,
        });
    }
    let in_dim = r.u32()? as usize;
    let d = r.u32()? as usize;
    let c = r.u32()? as usize;
    let bn_eps = f64::from(r.f32()?);
    let floats = (in_dim as u64) * (d as u64) + 5 * d as u64 + (d as u64) * (c as u64) + c as u64;
    r.expect_remaining(floats * 4)?;

    let head_weight = Matrix::from_vec(in_dim, d, r.f32_array(in_dim * d)?)?;
    let head_bias = r.f32_array(d)?;
    let bn_gamma = r.f32_array(d)?;
    let bn_beta = r.f32_array(d)?;
    let bn_running_mean = r.f32_array(d)?;
    let bn_running_var = r.f32_array(d)?;
    let classifier_weight = Matrix::from_vec(d, c, r.f32_array(d * c)?)?;
    let classifier_bias = r.f32_array(c)?;
    r.finish()?;

    let model = SourceModel {
        head_weight,
        head_bias,
        bn_gamma,
        bn_beta,
        bn_running_mean,
        bn_running_var,
        bn_eps,
        classifier_weight,
        classifier_bias,
    };
    model.validate().map_err(|e| Error::Format {
        offset: 20,
        reason: e.to_string(),
    })?;
    Ok(model)
}

pub fn save_checkpoint(model: &SourceModel, path: &Path) -> Result<()> {
    write_file(path, &encode_checkpoint(model)?)
}

pub fn load_checkpoint(path: &Path) -> Result<SourceModel> {
    decode_checkpoint(&read_file(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::Rng;

    fn model() -> SourceModel {
        let mut rng = Rng::new(12);
        let mut m = SourceModel::init(3, 4, 2, &mut rng);
        m.bn_running_var = vec![0.5, 1.5, 2.0, 0.25];
        m.to_f32_precision()
    }

    #[test]
    fn round_trip_is_bitwise() {
        let m = model();
        let bytes = encode_checkpoint(&m).unwrap();
        assert_eq!(bytes.len(), 24 + 4 * (12 + 5 * 4 + 8 + 2));
        assert_eq!(decode_checkpoint(&bytes).unwrap(), m);

        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.ckp");
        save_checkpoint(&m, &p).unwrap();
        assert_eq!(load_checkpoint(&p).unwrap(), m);
    }

    #[test]
    fn corrupted_magic() {
        let mut bytes = encode_checkpoint(&model()).unwrap();
        bytes[3] = b'X';
        assert!(matches!(decode_checkpoint(&bytes), Err(Error::Format { offset: 0, .. })));
    }

    #[test]
    fn bumped_version() {
        let mut bytes = encode_checkpoint(&model()).unwrap();
        bytes[4] = 2;
        assert!(matches!(
            decode_checkpoint(&bytes),
            Err(Error::UnsupportedVersion { found: 2, .. })
        ));
    }

    #[test]
    fn truncated_and_padded() {
        let bytes = encode_checkpoint(&model()).unwrap();
        assert!(matches!(
            decode_checkpoint(&bytes[..bytes.len() - 3]),
            Err(Error::Truncated { .. })
        ));
        let mut longer = bytes.clone();
        longer.push(0);
        assert!(matches!(decode_checkpoint(&longer), Err(Error::Format { .. })));
    }

    #[test]
    fn non_finite_payload() {
        let mut bytes = encode_checkpoint(&model()).unwrap();
        bytes[24..28].copy_from_slice(&f32::NAN.to_le_bytes());
        assert!(matches!(decode_checkpoint(&bytes), Err(Error::NonFinite { offset: 24 })));
    }
}
