//! Per-image intensity standardization and the volume shape contract.
//!
//! Registration, bias correction and skull stripping happen upstream; volumes
//! arrive already resampled to the canonical grid.

use crate::error::{Error, Result};
use crate::volume::Volume;

/// Canonical grid of 2 mm template-registered brain volumes.
pub const CANONICAL_SHAPE_2MM: [usize; 3] = [91, 109, 91];

/// Standardizes a volume to mean 0 and SD 1 over all voxels (background included).
///
/// Statistics accumulate in f64; the result is stored back as f32.
pub fn z_transform(v: &Volume) -> Result<Volume> {
    if !v.is_finite() {
        return Err(Error::NonFinite("volume passed to z_transform".into()));
    }
    let (mean, sd) = v.mean_sd();
    if sd == 0.0 || !sd.is_finite() {
        return Err(Error::ConstantVolume);
    }
    let mut out = v.clone();
    for x in out.data_mut() {
        *x = ((*x as f64 - mean) / sd) as f32;
    }
    // One correction pass absorbs the f32 rounding of the first.
    let (m2, s2) = out.mean_sd();
    if s2 > 0.0 {
        for x in out.data_mut() {
            *x = ((*x as f64 - m2) / s2) as f32;
        }
    }
    Ok(out)
}

pub fn check_shape(v: &Volume, canonical: [usize; 3]) -> Result<()> {
    if v.shape() == canonical {
        Ok(())
    } else {
        Err(Error::ShapeMismatch {
            got: v.shape(),
            expected: canonical,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_volume(shape: [usize; 3], seed: u64) -> Volume {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = shape.iter().product();
        Volume::new(shape, (0..n).map(|_| rng.random_range(-3.0..5.0)).collect()).unwrap()
    }

    #[test]
    fn random_volume_is_standardized() {
        let v = z_transform(&random_volume([8, 8, 8], 1)).unwrap();
        let (m, s) = v.mean_sd();
        assert!(m.abs() < 1e-6, "mean {m}");
        assert!((s - 1.0).abs() < 1e-6, "sd {s}");
        assert_eq!(v.shape(), [8, 8, 8]);
    }

    #[test]
    fn constant_plus_noise_is_standardized() {
        let mut v = random_volume([6, 7, 5], 2);
        for x in v.data_mut() {
            *x += 250.0;
        }
        let (m, s) = z_transform(&v).unwrap().mean_sd();
        assert!(m.abs() < 1e-6);
        assert!((s - 1.0).abs() < 1e-6);
    }

    #[test]
    fn fixed_point_is_unchanged() {
        let once = z_transform(&random_volume([8, 8, 8], 3)).unwrap();
        let twice = z_transform(&once).unwrap();
        for (a, b) in once.data().iter().zip(twice.data()) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn constant_volume_is_an_error() {
        assert!(matches!(
            z_transform(&Volume::filled([4, 4, 4], 3.0)),
            Err(Error::ConstantVolume)
        ));
    }

    #[test]
    fn non_finite_is_an_error() {
        let mut v = random_volume([4, 4, 4], 4);
        v.set(1, 1, 1, f32::NAN);
        assert!(z_transform(&v).is_err());
    }

    #[test]
    fn shape_contract() {
        check_shape(&Volume::filled([91, 109, 91], 0.0), CANONICAL_SHAPE_2MM).unwrap();
        check_shape(&Volume::filled([32, 38, 32], 0.0), [32, 38, 32]).unwrap();
        let err = check_shape(&Volume::filled([91, 109, 90], 0.0), CANONICAL_SHAPE_2MM).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[91, 109, 90]") && msg.contains("[91, 109, 91]"), "{msg}");
    }
}
