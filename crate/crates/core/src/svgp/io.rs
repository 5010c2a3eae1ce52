//! Versioned binary model checkpoints.
//!
//! Layout (little-endian): magic `SVGPMODL`, `u32` version, then `f64`
//! signal variance, lengthscale, noise variance, mean offset, density scale,
//! normalizer shift (3) and scale (3); a `u64` inducing count `M`; `M × 3`
//! normalized inducing coordinates; the `M` variational mean entries; and the
//! `M × M` row-major variational covariance factor.

use nalgebra::{DMatrix, DVector};

use super::{InputNormalizer, Kernel, SvgpModel};
use crate::format::{FormatError, LeReader};
use crate::geometry::Vec3;

const MAGIC: &[u8; 8] = b"SVGPMODL";
pub const MODEL_FORMAT_VERSION: u32 = 1;

pub fn encode_model(model: &SvgpModel) -> Vec<u8> {
    let m = model.inducing.len();
    let mut out = Vec::with_capacity(8 + 4 + 11 * 8 + 8 + (3 * m + m + m * m) * 8);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&MODEL_FORMAT_VERSION.to_le_bytes());
    let mut put = |v: f64| out.extend_from_slice(&v.to_le_bytes());
    put(model.kernel.signal_variance);
    put(model.kernel.lengthscale);
    put(model.noise_variance);
    put(model.mean_offset);
    put(model.density_scale);
    model.normalizer.shift.iter().for_each(|v| put(*v));
    model.normalizer.scale.iter().for_each(|v| put(*v));
    out.extend_from_slice(&(m as u64).to_le_bytes());
    let mut put = |v: f64| out.extend_from_slice(&v.to_le_bytes());
    for z in &model.inducing {
        z.iter().for_each(|v| put(*v));
    }
    model.variational_mean.iter().for_each(|v| put(*v));
    for i in 0..m {
        for j in 0..m {
            put(model.variational_cov_factor[(i, j)]);
        }
    }
    out
}

pub fn decode_model(bytes: &[u8]) -> Result<SvgpModel, FormatError> {
    let mut r = LeReader::new(bytes);
    if r.take(8)? != MAGIC {
        return Err(FormatError::invalid("not an SVGP model file"));
    }
    let version = r.u32()?;
    if version != MODEL_FORMAT_VERSION {
        return Err(FormatError::invalid(format!(
            "unsupported model version {version}"
        )));
    }
    let signal_variance = r.f64()?;
    let lengthscale = r.f64()?;
    let noise = r.f64()?;
    let mean_offset = r.f64()?;
    let density_scale = r.f64()?;
    let shift = Vec3::new(r.f64()?, r.f64()?, r.f64()?);
    let scale = Vec3::new(r.f64()?, r.f64()?, r.f64()?);
    let m = r.u64()?;
    let need = (m as u128)
        .checked_mul(m as u128 + 4)
        .and_then(|v| v.checked_mul(8));
    if need != Some(r.remaining() as u128) || m == 0 {
        return Err(FormatError::invalid(format!(
            "model declares {m} inducing points but payload has {} bytes",
            r.remaining()
        )));
    }
    let m = m as usize;
    let mut inducing = Vec::with_capacity(m);
    for _ in 0..m {
        inducing.push(Vec3::new(r.f64()?, r.f64()?, r.f64()?));
    }
    let mut mean = DVector::zeros(m);
    for v in mean.iter_mut() {
        *v = r.f64()?;
    }
    let mut factor = DMatrix::zeros(m, m);
    for i in 0..m {
        for j in 0..m {
            factor[(i, j)] = r.f64()?;
        }
    }
    SvgpModel::from_normalized(
        inducing,
        Kernel {
            signal_variance,
            lengthscale,
        },
        noise,
        mean,
        factor,
        InputNormalizer { shift, scale },
        mean_offset,
        density_scale,
    )
    .map_err(|e| FormatError::invalid(e.to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::svgp::{train, OccupancyRegressor, TrainConfig};

    #[test]
    fn model_round_trip_predicts_identically() {
        let xs: Vec<Vec3> = (0..25)
            .map(|i| Vec3::new(i as f64 * 0.01, (i % 5) as f64 * 0.02, 0.3))
            .collect();
        let ys: Vec<f64> = xs.iter().map(|p| p.x + p.y).collect();
        let (model, _) = train(
            &xs,
            &ys,
            &TrainConfig {
                inducing: 10,
                epochs: 3,
                ..Default::default()
            },
        )
        .unwrap();
        let back = decode_model(&encode_model(&model)).unwrap();
        assert_eq!(back, model);
        let q = Vec3::new(0.05, 0.03, 0.31);
        assert_eq!(back.predict_point(&q), model.predict_point(&q));
    }

    #[test]
    fn rejects_corrupt_files() {
        assert!(decode_model(b"").is_err());
        assert!(decode_model(b"SVGPMODL\x02\x00\x00\x00").is_err());
        let mut bytes = MAGIC.to_vec();
        bytes.extend_from_slice(&1u32.to_le_bytes());
        bytes.extend(std::iter::repeat(0u8).take(11 * 8));
        bytes.extend_from_slice(&u64::MAX.to_le_bytes());
        assert!(decode_model(&bytes).is_err());
    }
}
