use super::{check_spacing, voxel_count, Dims, MaskVolume, Spacing};
use crate::error::{Error, Result};

/// Nearest input index for output voxel `o` when the spacing ratio
/// (output / input) is `ratio`.
#[inline]
fn nearest_source(o: usize, ratio: f64, n_in: usize) -> usize {
    let pos = (o as f64 + 0.5) * ratio - 0.5;
    (pos.round().max(0.0) as usize).min(n_in - 1)
}

/// Nearest-neighbour resampling to a new voxel spacing.
///
/// Output extents are `round(n * s_in / s_out)` (at least 1); each output
/// voxel copies the input voxel whose center is nearest its own.
pub fn resample(mask: &MaskVolume, target_spacing: Spacing) -> Result<MaskVolume> {
    check_spacing(target_spacing)?;
    let dims = mask.dims();
    let spacing = mask.spacing();
    let mut out_dims = [0usize; 3];
    let mut lookup: [Vec<usize>; 3] = Default::default();
    for a in 0..3 {
        let extent = dims[a] as f64 * spacing[a] / target_spacing[a];
        out_dims[a] = (extent.round() as usize).max(1);
        let ratio = target_spacing[a] / spacing[a];
        lookup[a] = (0..out_dims[a]).map(|o| nearest_source(o, ratio, dims[a])).collect();
    }
    let mut data = Vec::with_capacity(voxel_count(out_dims));
    for &z in &lookup[2] {
        for &y in &lookup[1] {
            let row = (z * dims[1] + y) * dims[0];
            data.extend(lookup[0].iter().map(|&x| mask.data()[row + x]));
        }
    }
    Ok(MaskVolume::from_raw(out_dims, target_spacing, data))
}

/// Translates the foreground by an integer offset so its rounded centroid sits
/// at `floor(target_dims / 2)` of a new grid with the same spacing.
///
/// When the centered placement would push part of the bounding box off the
/// grid, the offset is clamped so the box stays inside; the voxel count is
/// always preserved.
pub fn center_in_grid(mask: &MaskVolume, target_dims: Dims) -> Result<MaskVolume> {
    super::check_dims(target_dims)?;
    let (lo, hi) = mask.bounding_box().ok_or(Error::EmptyMask)?;
    let extent = [hi[0] - lo[0] + 1, hi[1] - lo[1] + 1, hi[2] - lo[2] + 1];
    if (0..3).any(|a| extent[a] > target_dims[a]) {
        return Err(Error::DoesNotFit {
            bbox: extent,
            grid: target_dims,
        });
    }
    let mut sum = [0f64; 3];
    let mut n = 0usize;
    for p in mask.foreground() {
        for a in 0..3 {
            sum[a] += p[a] as f64;
        }
        n += 1;
    }
    let mut offset = [0i64; 3];
    for a in 0..3 {
        let centroid = (sum[a] / n as f64).round() as i64;
        let want = (target_dims[a] / 2) as i64 - centroid;
        let min = -(lo[a] as i64);
        let max = target_dims[a] as i64 - 1 - hi[a] as i64;
        offset[a] = want.clamp(min, max);
    }
    let mut out = MaskVolume::zeros(target_dims, mask.spacing())?;
    for p in mask.foreground() {
        let q = [0, 1, 2].map(|a| (p[a] as i64 + offset[a]) as usize);
        out.set(q[0], q[1], q[2], true);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::volume::volume_mm3;
    use proptest::prelude::*;

    fn sphere(dims: Dims, spacing: Spacing, center: [f64; 3], radius_mm: f64) -> MaskVolume {
        MaskVolume::from_fn(dims, spacing, |x, y, z| {
            let d = [x, y, z].map(|v| v as f64);
            let r2: f64 = (0..3).map(|a| ((d[a] - center[a]) * spacing[a]).powi(2)).sum();
            r2 <= radius_mm * radius_mm
        })
        .unwrap()
    }

    #[test]
    fn identity_resample() {
        let m = sphere([20, 18, 10], [1.0, 1.0, 2.0], [9.5, 8.0, 5.0], 5.0);
        assert_eq!(resample(&m, [1.0, 1.0, 2.0]).unwrap(), m);
    }

    #[test]
    fn single_voxel_upsamples_to_block() {
        let m = MaskVolume::new([1, 1, 1], [2.0; 3], vec![1]).unwrap();
        let r = resample(&m, [1.0; 3]).unwrap();
        assert_eq!(r.dims(), [2, 2, 2]);
        assert_eq!(r.spacing(), [1.0; 3]);
        assert!(r.data().iter().all(|&v| v == 1));
    }

    #[test]
    fn invalid_target_spacing() {
        let m = MaskVolume::zeros([2, 2, 2], [1.0; 3]).unwrap();
        assert!(matches!(resample(&m, [1.0, -1.0, 1.0]), Err(Error::InvalidSpacing(_))));
    }

    #[test]
    fn downsampling_spheres_keeps_volume_roughly() {
        for r in [5.0, 6.5, 8.0, 10.0] {
            let m = sphere([32, 32, 32], [1.0; 3], [15.5, 16.0, 15.0], r);
            let v0 = volume_mm3(&m);
            let v1 = volume_mm3(&resample(&m, [2.0; 3]).unwrap());
            assert!((v1 - v0).abs() / v0 < 0.30, "r={r}: {v0} vs {v1}");
        }
    }

    #[test]
    fn half_spacing_keeps_sphere_volume() {
        let m = sphere([24, 24, 24], [1.0; 3], [11.5, 12.0, 11.7], 8.0);
        let v0 = volume_mm3(&m);
        let v1 = volume_mm3(&resample(&m, [0.5; 3]).unwrap());
        assert!((v1 - v0).abs() / v0 < 0.05);
    }

    #[test]
    fn single_voxel_lands_at_grid_center() {
        let mut m = MaskVolume::zeros([7, 5, 3], [1.0; 3]).unwrap();
        m.set(6, 0, 2, true);
        let c = center_in_grid(&m, [9, 8, 5]).unwrap();
        assert_eq!(c.foreground().collect::<Vec<_>>(), vec![[4, 4, 2]]);
    }

    #[test]
    fn center_errors() {
        let m = MaskVolume::zeros([4, 4, 4], [1.0; 3]).unwrap();
        assert!(matches!(center_in_grid(&m, [4, 4, 4]), Err(Error::EmptyMask)));
        let big = MaskVolume::from_fn([60, 60, 60], [1.0; 3], |x, y, z| {
            (5..55).contains(&x) && (5..55).contains(&y) && (5..55).contains(&z)
        })
        .unwrap();
        assert!(matches!(
            center_in_grid(&big, [32, 32, 32]),
            Err(Error::DoesNotFit { .. })
        ));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(100))]
        #[test]
        fn centering_preserves_count(
            c in (2.0f64..14.0, 2.0f64..14.0, 2.0f64..6.0),
            r in 1.0f64..3.5,
        ) {
            let m = sphere([16, 16, 8], [1.0; 3], [c.0, c.1, c.2], r);
            prop_assume!(m.count() > 0);
            let out = center_in_grid(&m, [20, 18, 12]).unwrap();
            prop_assert_eq!(out.count(), m.count());
        }

        #[test]
        fn resample_is_idempotent(
            s in (0.5f64..3.0, 0.5f64..3.0, 0.5f64..3.0),
            r in 2.0f64..6.0,
        ) {
            let m = sphere([14, 12, 10], [1.0, 1.0, 2.0], [6.5, 6.0, 4.5], r);
            let once = resample(&m, [s.0, s.1, s.2]).unwrap();
            let twice = resample(&once, [s.0, s.1, s.2]).unwrap();
            prop_assert_eq!(once, twice);
        }
    }
}
