//! Seeded generation of pancreas-like tube shapes and their body-shrinkage
//! abnormal counterparts.
//!
//! A shape is a tube around a quadratic Bézier centerline (head, control,
//! tail): a voxel is inside when its distance to the nearest centerline point
//! is within the local radius, which is interpolated linearly from head to
//! body to tail. Geometry is evaluated in millimetres; control points are in
//! voxel coordinates and radii in in-plane (x) voxels.

use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seed;
use crate::volume::{connected_components, Dims, MaskVolume, Spacing};

pub const MIN_FOREGROUND: usize = 50;
const CENTERLINE_SAMPLES: usize = 200;
const VOLUME_TOLERANCE: f64 = 0.02;
const BISECTION_ITERS: usize = 40;
const MAX_RETRIES: usize = 10;

const DEFAULT_DIMS: Dims = [48, 32, 16];
const DEFAULT_SPACING: Spacing = [1.0, 1.0, 2.0];

/// Standard deviations of the per-shape Gaussian perturbations.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct JitterSd {
    /// Per-coordinate control point noise, in voxels.
    pub control_voxels: f64,
    /// Per-radius noise, in in-plane voxels.
    pub radius_voxels: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ShapeGenParams {
    pub grid_dims: Dims,
    pub spacing: Spacing,
    /// Head, control and tail points of the centerline, in voxel coordinates.
    pub control_points: [[f64; 3]; 3],
    /// Head, body and tail radii, in in-plane voxels.
    pub radius_profile: [f64; 3],
    pub jitter: JitterSd,
    pub seed: u64,
}

impl Default for ShapeGenParams {
    fn default() -> Self {
        Self {
            grid_dims: DEFAULT_DIMS,
            spacing: DEFAULT_SPACING,
            control_points: [[13.0, 17.0, 8.0], [24.0, 9.0, 8.5], [36.0, 19.0, 7.5]],
            radius_profile: [4.5, 4.0, 2.5],
            jitter: JitterSd {
                control_voxels: 1.5,
                radius_voxels: 0.35,
            },
            seed: 0,
        }
    }
}

impl ShapeGenParams {
    /// Default anatomy rescaled to another grid. The physical field of view
    /// stays that of the 48x32x16 grid at 1x1x2 mm, so the spacing grows as
    /// the grid shrinks.
    pub fn for_grid(dims: Dims) -> Result<Self> {
        crate::volume::check_dims(dims)?;
        let d = Self::default();
        let f: [f64; 3] = std::array::from_fn(|a| dims[a] as f64 / DEFAULT_DIMS[a] as f64);
        Ok(Self {
            grid_dims: dims,
            spacing: std::array::from_fn(|a| DEFAULT_SPACING[a] / f[a]),
            control_points: d
                .control_points
                .map(|p| std::array::from_fn(|a| (p[a] + 0.5) * f[a] - 0.5)),
            radius_profile: d.radius_profile.map(|r| r * f[0]),
            jitter: JitterSd {
                control_voxels: d.jitter.control_voxels * f[0],
                radius_voxels: d.jitter.radius_voxels * f[0],
            },
            seed: 0,
        })
    }

    pub fn with_seed(&self, seed: u64) -> Self {
        Self { seed, ..self.clone() }
    }

    pub fn validate(&self) -> Result<()> {
        crate::volume::check_dims(self.grid_dims)?;
        crate::volume::check_spacing(self.spacing)?;
        if !self.radius_profile.iter().all(|&r| r > 0.0 && r.is_finite()) {
            return Err(Error::InvalidParameter(format!(
                "radii must be positive, got {:?}",
                self.radius_profile
            )));
        }
        let j = self.jitter;
        if !(j.control_voxels >= 0.0 && j.radius_voxels >= 0.0) {
            return Err(Error::InvalidParameter("jitter sd must be non-negative".into()));
        }
        let r_mm = self.radius_profile.iter().cloned().fold(0.0, f64::max) * self.spacing[0];
        for p in &self.control_points {
            for a in 0..3 {
                let pos = (p[a] + 0.5) * self.spacing[a];
                let extent = self.grid_dims[a] as f64 * self.spacing[a];
                if !(pos >= r_mm && extent - pos >= r_mm) {
                    return Err(Error::InvalidParameter(format!(
                        "control point {p:?} is closer than the largest radius to the grid border"
                    )));
                }
            }
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AbnormalityParams {
    /// Centerline position of the narrowest point, in `[0, 1]`.
    pub shrink_center_t: f64,
    /// Support of the bump as a fraction of the centerline, in `(0, 1]`.
    pub shrink_width: f64,
    /// Radius multiplier at the center, in `(0, 1]`; 1 is a no-op.
    pub shrink_factor: f64,
    pub volume_preserving: bool,
}

impl Default for AbnormalityParams {
    fn default() -> Self {
        Self {
            shrink_center_t: 0.5,
            shrink_width: 0.5,
            shrink_factor: 0.3,
            volume_preserving: true,
        }
    }
}

impl AbnormalityParams {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.shrink_center_t) {
            return Err(Error::InvalidParameter(format!(
                "shrink_center_t must lie in [0, 1], got {}",
                self.shrink_center_t
            )));
        }
        if !(self.shrink_width > 0.0 && self.shrink_width <= 1.0) {
            return Err(Error::InvalidParameter(format!(
                "shrink_width must lie in (0, 1], got {}",
                self.shrink_width
            )));
        }
        if !(self.shrink_factor > 0.0 && self.shrink_factor <= 1.0) {
            return Err(Error::InvalidParameter(format!(
                "shrink_factor must lie in (0, 1], got {}",
                self.shrink_factor
            )));
        }
        Ok(())
    }

    /// Raised-cosine dip reaching `shrink_factor` at `shrink_center_t`.
    pub fn radius_factor(&self, t: f64) -> f64 {
        let d = t - self.shrink_center_t;
        if d.abs() >= self.shrink_width / 2.0 {
            return 1.0;
        }
        let bump = 0.5 * (1.0 + (2.0 * std::f64::consts::PI * d / self.shrink_width).cos());
        1.0 - (1.0 - self.shrink_factor) * bump
    }
}

/// Jittered centerline and radii in millimetres.
struct Tube {
    pts: [[f64; 3]; 3],
    radii: [f64; 3],
}

impl Tube {
    fn sample(params: &ShapeGenParams) -> Self {
        let mut rng = seed::rng(params.seed);
        let mut gauss = |sd: f64| sd * rng.sample::<f64, _>(StandardNormal);
        let j = params.jitter;
        let sp = params.spacing;
        let pts = params
            .control_points
            .map(|p| std::array::from_fn(|a| (p[a] + gauss(j.control_voxels) + 0.5) * sp[a]));
        let min_r = 0.5 * sp[0];
        let radii = params
            .radius_profile
            .map(|r| ((r + gauss(j.radius_voxels)) * sp[0]).max(min_r));
        Self { pts, radii }
    }

    fn point(&self, t: f64) -> [f64; 3] {
        let (a, b, c) = ((1.0 - t) * (1.0 - t), 2.0 * t * (1.0 - t), t * t);
        std::array::from_fn(|i| a * self.pts[0][i] + b * self.pts[1][i] + c * self.pts[2][i])
    }

    fn radius(&self, t: f64) -> f64 {
        if t <= 0.5 {
            self.radii[0] + (self.radii[1] - self.radii[0]) * 2.0 * t
        } else {
            self.radii[1] + (self.radii[2] - self.radii[1]) * (2.0 * t - 1.0)
        }
    }

    /// Centerline samples with their radii multiplied by `factor(t)`.
    fn spheres(&self, factor: impl Fn(f64) -> f64) -> Vec<([f64; 3], f64)> {
        (0..=CENTERLINE_SAMPLES)
            .map(|i| {
                let t = i as f64 / CENTERLINE_SAMPLES as f64;
                (self.point(t), self.radius(t) * factor(t))
            })
            .collect()
    }
}

/// Voxels whose nearest centerline sample lies within that sample's radius,
/// with all radii multiplied by `scale`.
fn rasterize(dims: Dims, sp: Spacing, samples: &[([f64; 3], f64)], scale: f64) -> MaskVolume {
    let mut data = vec![0u8; dims[0] * dims[1] * dims[2]];
    let r_max = samples.iter().map(|s| s.1).fold(0.0, f64::max) * scale;
    let range = |a: usize| {
        let lo = samples.iter().map(|s| s.0[a]).fold(f64::INFINITY, f64::min) - r_max;
        let hi = samples.iter().map(|s| s.0[a]).fold(f64::NEG_INFINITY, f64::max) + r_max;
        let lo = (lo / sp[a] - 0.5).ceil().max(0.0) as usize;
        let hi = ((hi / sp[a] - 0.5).floor().max(-1.0) + 1.0) as usize;
        lo..hi.min(dims[a])
    };
    let (rx, ry, rz) = (range(0), range(1), range(2));
    for z in rz {
        for y in ry.clone() {
            for x in rx.clone() {
                let q = [
                    (x as f64 + 0.5) * sp[0],
                    (y as f64 + 0.5) * sp[1],
                    (z as f64 + 0.5) * sp[2],
                ];
                let (d2, r) = samples
                    .iter()
                    .map(|(c, r)| ((0..3).map(|a| (q[a] - c[a]).powi(2)).sum::<f64>(), *r))
                    .fold(
                        (f64::INFINITY, 0.0),
                        |best, cur| if cur.0 < best.0 { cur } else { best },
                    );
                if d2 <= (r * scale).powi(2) {
                    data[x + dims[0] * (y + dims[1] * z)] = 1;
                }
            }
        }
    }
    MaskVolume::from_raw(dims, sp, data)
}

fn check_size(mask: MaskVolume) -> Result<MaskVolume> {
    let n = mask.count();
    if n < MIN_FOREGROUND {
        return Err(Error::DegenerateShape(n));
    }
    Ok(mask)
}

/// Healthy tube for `params.seed`.
pub fn gen_healthy(params: &ShapeGenParams) -> Result<MaskVolume> {
    params.validate()?;
    let tube = Tube::sample(params);
    check_size(rasterize(params.grid_dims, params.spacing, &tube.spheres(|_| 1.0), 1.0))
}

/// The healthy tube of the same seed with a body constriction. With
/// `volume_preserving`, all radii are then scaled up by a common factor in
/// `[1, 2]` found by bisection until the voxel count is within 2% of the
/// healthy count.
pub fn gen_abnormal(params: &ShapeGenParams, ab: &AbnormalityParams) -> Result<MaskVolume> {
    params.validate()?;
    ab.validate()?;
    let tube = Tube::sample(params);
    let (dims, sp) = (params.grid_dims, params.spacing);
    let spheres = tube.spheres(|t| ab.radius_factor(t));
    let shrunk = rasterize(dims, sp, &spheres, 1.0);
    if !ab.volume_preserving {
        return check_size(shrunk);
    }
    let target = rasterize(dims, sp, &tube.spheres(|_| 1.0), 1.0).count() as f64;
    let rel = |m: &MaskVolume| (m.count() as f64 - target) / target;
    if rel(&shrunk).abs() <= VOLUME_TOLERANCE {
        return check_size(shrunk);
    }
    let (mut lo, mut hi) = (1.0, 2.0);
    let mut best = (f64::INFINITY, shrunk);
    for _ in 0..BISECTION_ITERS {
        let mid = 0.5 * (lo + hi);
        let m = rasterize(dims, sp, &spheres, mid);
        let r = rel(&m);
        if r.abs() <= VOLUME_TOLERANCE {
            return check_size(m);
        }
        if r.abs() < best.0 {
            best = (r.abs(), m);
        }
        if r < 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Err(Error::VolumeMatchFailed(best.0))
}

/// `n` shapes for seeds `base_seed..base_seed + n`. Shapes that fail
/// generation or are not a single 6-connected component are redrawn with
/// derived seeds, at most ten times each.
pub fn gen_cohort(
    n: usize,
    params: &ShapeGenParams,
    ab: Option<&AbnormalityParams>,
    base_seed: u64,
) -> Result<Vec<MaskVolume>> {
    if n == 0 {
        return Err(Error::InvalidParameter("cohort size must be at least 1".into()));
    }
    params.validate()?;
    if let Some(ab) = ab {
        ab.validate()?;
    }
    Ok(gen_cohort_seeds(n, params, ab, base_seed)?
        .into_iter()
        .map(|(m, _)| m)
        .collect())
}

/// Like [`gen_cohort`], also returning the seed that produced each mask.
pub fn gen_cohort_seeds(
    n: usize,
    params: &ShapeGenParams,
    ab: Option<&AbnormalityParams>,
    base_seed: u64,
) -> Result<Vec<(MaskVolume, u64)>> {
    (0..n as u64)
        .into_par_iter()
        .map(|i| {
            let nominal = base_seed.wrapping_add(i);
            for attempt in 0..=MAX_RETRIES as u64 {
                let s = if attempt == 0 {
                    nominal
                } else {
                    seed::derive(nominal, attempt)
                };
                let p = params.with_seed(s);
                let m = match ab {
                    Some(ab) => gen_abnormal(&p, ab),
                    None => gen_healthy(&p),
                };
                match m {
                    Ok(m) if connected_components(&m) == 1 => return Ok((m, s)),
                    Ok(_) | Err(Error::DegenerateShape(_)) | Err(Error::VolumeMatchFailed(_)) => continue,
                    Err(e) => return Err(e),
                }
            }
            Err(Error::GenerationExhausted(i as usize))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::volume::dice;

    #[test]
    fn deterministic_in_seed() {
        let p = ShapeGenParams::default().with_seed(11);
        assert_eq!(gen_healthy(&p).unwrap(), gen_healthy(&p).unwrap());
        assert_ne!(gen_healthy(&p).unwrap(), gen_healthy(&p.with_seed(12)).unwrap());
    }

    #[test]
    fn zero_jitter_is_the_analytic_tube() {
        let mut p = ShapeGenParams::default();
        p.jitter = JitterSd {
            control_voxels: 0.0,
            radius_voxels: 0.0,
        };
        let m = gen_healthy(&p.with_seed(3)).unwrap();
        assert_eq!(m, gen_healthy(&p.with_seed(99)).unwrap());
        // Direct per-voxel oracle over a dense centerline.
        let sp = p.spacing;
        let cp: Vec<[f64; 3]> = p
            .control_points
            .iter()
            .map(|c| [(c[0] + 0.5) * sp[0], (c[1] + 0.5) * sp[1], (c[2] + 0.5) * sp[2]])
            .collect();
        let r = p.radius_profile.map(|r| r * sp[0]);
        let oracle = MaskVolume::from_fn(p.grid_dims, sp, |x, y, z| {
            let q = [
                (x as f64 + 0.5) * sp[0],
                (y as f64 + 0.5) * sp[1],
                (z as f64 + 0.5) * sp[2],
            ];
            let mut best = (f64::INFINITY, 0.0);
            for i in 0..=200 {
                let t = i as f64 / 200.0;
                let w = [(1.0 - t) * (1.0 - t), 2.0 * t * (1.0 - t), t * t];
                let c: Vec<f64> = (0..3)
                    .map(|a| w[0] * cp[0][a] + w[1] * cp[1][a] + w[2] * cp[2][a])
                    .collect();
                let rad = if t <= 0.5 {
                    r[0] + (r[1] - r[0]) * 2.0 * t
                } else {
                    r[1] + (r[2] - r[1]) * (2.0 * t - 1.0)
                };
                let d2: f64 = (0..3).map(|a| (q[a] - c[a]).powi(2)).sum();
                if d2 < best.0 {
                    best = (d2, rad);
                }
            }
            best.0 <= best.1 * best.1
        })
        .unwrap();
        assert_eq!(m, oracle);
    }

    #[test]
    fn unit_shrink_is_healthy() {
        let ab = AbnormalityParams {
            shrink_factor: 1.0,
            ..AbnormalityParams::default()
        };
        for s in 0..5 {
            let p = ShapeGenParams::default().with_seed(s);
            assert_eq!(gen_abnormal(&p, &ab).unwrap(), gen_healthy(&p).unwrap());
        }
    }

    #[test]
    fn abnormal_is_volume_matched_and_different() {
        let ab = AbnormalityParams::default();
        for s in 0..10 {
            let p = ShapeGenParams::default().with_seed(s);
            let h = gen_healthy(&p).unwrap();
            let a = gen_abnormal(&p, &ab).unwrap();
            let rel = (a.count() as f64 - h.count() as f64).abs() / h.count() as f64;
            assert!(rel <= 0.02, "seed {s}: {rel}");
            assert!(dice(&h, &a).unwrap() < 0.95);
        }
    }

    #[test]
    fn radius_factor_shape() {
        let ab = AbnormalityParams {
            shrink_width: 0.3,
            shrink_factor: 0.4,
            ..AbnormalityParams::default()
        };
        assert!((ab.radius_factor(0.5) - 0.4).abs() < 1e-12);
        assert_eq!(ab.radius_factor(0.2), 1.0);
        assert_eq!(ab.radius_factor(0.65), 1.0);
        assert!((ab.radius_factor(0.425) - ab.radius_factor(0.575)).abs() < 1e-12);
    }

    #[test]
    fn invalid_params_rejected() {
        let mut p = ShapeGenParams::default();
        p.radius_profile[1] = 0.0;
        assert!(gen_healthy(&p).is_err());
        let mut p = ShapeGenParams::default();
        p.control_points[0] = [1.0, 16.0, 8.0];
        assert!(gen_healthy(&p).is_err());
        let bad = AbnormalityParams {
            shrink_factor: 0.0,
            ..AbnormalityParams::default()
        };
        assert!(gen_abnormal(&ShapeGenParams::default(), &bad).is_err());
        assert!(gen_cohort(0, &ShapeGenParams::default(), None, 0).is_err());
    }

    #[test]
    fn scaled_grid_is_valid() {
        let p = ShapeGenParams::for_grid([24, 16, 8]).unwrap();
        assert_eq!(p.spacing, [2.0, 2.0, 4.0]);
        let m = gen_healthy(&p.with_seed(1)).unwrap();
        assert_eq!(connected_components(&m), 1);
    }
}
