//! Random similarity transforms (translation, rotation, isotropic scaling)
//! applied to masks during training.

use nalgebra::{Rotation3, Vector3};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seed;
use crate::volume::MaskVolume;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AugmentRanges {
    /// Largest absolute shift per axis, in voxels.
    pub max_translation_voxels: [f64; 3],
    /// Largest absolute Euler angle about x, y and z, in degrees.
    pub max_rotation_deg: [f64; 3],
    /// Isotropic scale bounds `(lo, hi)` with `0 < lo <= 1 <= hi`.
    pub scale_range: (f64, f64),
}

impl Default for AugmentRanges {
    fn default() -> Self {
        Self {
            max_translation_voxels: [4.0, 4.0, 2.0],
            max_rotation_deg: [15.0; 3],
            scale_range: (0.9, 1.1),
        }
    }
}

impl AugmentRanges {
    pub fn none() -> Self {
        Self {
            max_translation_voxels: [0.0; 3],
            max_rotation_deg: [0.0; 3],
            scale_range: (1.0, 1.0),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = |v: f64| v >= 0.0 && v.is_finite();
        if !self.max_translation_voxels.iter().all(|&v| ok(v)) {
            return Err(Error::InvalidParameter(format!(
                "translation ranges must be non-negative, got {:?}",
                self.max_translation_voxels
            )));
        }
        if !self.max_rotation_deg.iter().all(|&v| ok(v)) {
            return Err(Error::InvalidParameter(format!(
                "rotation ranges must be non-negative, got {:?}",
                self.max_rotation_deg
            )));
        }
        let (lo, hi) = self.scale_range;
        if !(lo > 0.0 && lo <= 1.0 && hi >= 1.0 && hi.is_finite()) {
            return Err(Error::InvalidParameter(format!(
                "scale range must satisfy 0 < lo <= 1 <= hi, got ({lo}, {hi})"
            )));
        }
        Ok(())
    }
}

/// A concrete similarity transform about the grid center.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Similarity {
    pub translation_voxels: [f64; 3],
    pub rotation_deg: [f64; 3],
    pub scale: f64,
}

impl Similarity {
    pub fn identity() -> Self {
        Self {
            translation_voxels: [0.0; 3],
            rotation_deg: [0.0; 3],
            scale: 1.0,
        }
    }

    pub fn translation(t: [f64; 3]) -> Self {
        Self {
            translation_voxels: t,
            ..Self::identity()
        }
    }

    /// Draws every component uniformly within `ranges`. The draw count is
    /// fixed, so zero-width ranges do not shift the random stream.
    pub fn sample(ranges: &AugmentRanges, rng: &mut impl Rng) -> Self {
        let mut sym = |m: f64| m * (2.0 * rng.random::<f64>() - 1.0);
        let translation_voxels = ranges.max_translation_voxels.map(&mut sym);
        let rotation_deg = ranges.max_rotation_deg.map(&mut sym);
        let (lo, hi) = ranges.scale_range;
        let scale = lo + (hi - lo) * rng.random::<f64>();
        Self {
            translation_voxels,
            rotation_deg,
            scale,
        }
    }

    pub fn is_identity(&self) -> bool {
        *self == Self::identity()
    }

    /// Applies scale, then rotation, then translation about the grid center
    /// in physical coordinates, filling each output voxel from the nearest
    /// source voxel under the inverse map. Samples outside the grid are 0.
    pub fn apply(&self, mask: &MaskVolume) -> MaskVolume {
        if self.is_identity() {
            return mask.clone();
        }
        let dims = mask.dims();
        let sp = mask.spacing();
        let center = Vector3::new(
            dims[0] as f64 * sp[0] / 2.0,
            dims[1] as f64 * sp[1] / 2.0,
            dims[2] as f64 * sp[2] / 2.0,
        );
        let t = Vector3::new(
            self.translation_voxels[0] * sp[0],
            self.translation_voxels[1] * sp[1],
            self.translation_voxels[2] * sp[2],
        );
        let [rx, ry, rz] = self.rotation_deg.map(f64::to_radians);
        let rot_inv = Rotation3::from_euler_angles(rx, ry, rz).inverse();
        let inv_scale = 1.0 / self.scale;
        let lookup = |p: f64, axis: usize| -> Option<usize> {
            let v = (p / sp[axis] - 0.5).round();
            (v >= 0.0 && v < dims[axis] as f64).then_some(v as usize)
        };
        MaskVolume::from_fn(dims, sp, |x, y, z| {
            let q = Vector3::new(
                (x as f64 + 0.5) * sp[0],
                (y as f64 + 0.5) * sp[1],
                (z as f64 + 0.5) * sp[2],
            );
            let p = rot_inv * (q - center - t) * inv_scale + center;
            match (lookup(p.x, 0), lookup(p.y, 1), lookup(p.z, 2)) {
                (Some(i), Some(j), Some(k)) => mask.get(i, j, k),
                _ => false,
            }
        })
        .expect("dims and spacing come from a valid mask")
    }
}

/// Samples a similarity transform from `ranges` with a generator seeded by
/// `rng_seed` and applies it to `mask`.
pub fn random_similarity(mask: &MaskVolume, ranges: &AugmentRanges, rng_seed: u64) -> Result<MaskVolume> {
    ranges.validate()?;
    let mut rng = seed::rng(rng_seed);
    Ok(Similarity::sample(ranges, &mut rng).apply(mask))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::volume::{dice, MaskVolume};
    use proptest::prelude::*;

    fn sphere(dims: [usize; 3], spacing: [f64; 3], r: f64) -> MaskVolume {
        let c: Vec<f64> = (0..3).map(|a| dims[a] as f64 * spacing[a] / 2.0).collect();
        MaskVolume::from_fn(dims, spacing, |x, y, z| {
            let p = [
                (x as f64 + 0.5) * spacing[0] - c[0],
                (y as f64 + 0.5) * spacing[1] - c[1],
                (z as f64 + 0.5) * spacing[2] - c[2],
            ];
            p.iter().map(|v| v * v).sum::<f64>() <= r * r
        })
        .unwrap()
    }

    fn blob() -> MaskVolume {
        MaskVolume::from_fn([20, 16, 10], [1.0, 1.0, 2.0], |x, y, z| {
            (5..12).contains(&x) && (4..9).contains(&y) && (3..6).contains(&z) || (x == 12 && y == 5 && z == 4)
        })
        .unwrap()
    }

    #[test]
    fn identity_ranges_are_bitwise_identity() {
        let m = blob();
        for s in 0..5 {
            assert_eq!(random_similarity(&m, &AugmentRanges::none(), s).unwrap(), m);
        }
    }

    #[test]
    fn integer_translation_shifts_every_voxel() {
        let m = blob();
        let out = Similarity::translation([3.0, 0.0, 0.0]).apply(&m);
        let mut expected: Vec<[usize; 3]> = m.foreground().map(|[x, y, z]| [x + 3, y, z]).collect();
        let mut got: Vec<[usize; 3]> = out.foreground().collect();
        expected.sort();
        got.sort();
        assert_eq!(got, expected);
        let down = Similarity::translation([0.0, -2.0, 1.0]).apply(&m);
        assert_eq!(down.count(), m.count());
        assert!(m.foreground().all(|[x, y, z]| down.get(x, y - 2, z + 1)));
    }

    #[test]
    fn rotated_sphere_keeps_overlap() {
        let s = sphere([32, 32, 32], [1.0; 3], 8.0);
        let ranges = AugmentRanges {
            max_translation_voxels: [0.0; 3],
            max_rotation_deg: [180.0; 3],
            scale_range: (1.0, 1.0),
        };
        for seed in 0..10 {
            let r = random_similarity(&s, &ranges, seed).unwrap();
            assert!(dice(&s, &r).unwrap() >= 0.9);
        }
    }

    #[test]
    fn invalid_ranges_rejected() {
        let mut r = AugmentRanges::default();
        r.scale_range = (1.1, 1.2);
        assert!(random_similarity(&blob(), &r, 0).is_err());
        r = AugmentRanges::default();
        r.max_rotation_deg[1] = -1.0;
        assert!(r.validate().is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]
        #[test]
        fn deterministic_and_binary(seed in any::<u64>()) {
            let m = blob();
            let a = random_similarity(&m, &AugmentRanges::default(), seed).unwrap();
            let b = random_similarity(&m, &AugmentRanges::default(), seed).unwrap();
            prop_assert_eq!(&a, &b);
            prop_assert_eq!(a.dims(), m.dims());
            prop_assert_eq!(a.spacing(), m.spacing());
            prop_assert!(a.data().iter().all(|&v| v <= 1));
        }
    }
}
