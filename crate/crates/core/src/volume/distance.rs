//! Exact Euclidean distance transforms via the separable lower-envelope
//! (parabola) algorithm, one pass per axis.

use super::{MaskVolume, ScalarField};
use crate::error::{Error, Result};

/// Scratch buffers for one 1D pass.
struct Envelope {
    sites: Vec<usize>,
    bounds: Vec<f64>,
    line: Vec<f64>,
    out: Vec<f64>,
}

impl Envelope {
    fn new(n: usize) -> Self {
        Self {
            sites: vec![0; n],
            bounds: vec![0.0; n + 1],
            line: vec![0.0; n],
            out: vec![0.0; n],
        }
    }

    /// Lower envelope of parabolas `w2 (q - p)^2 + f[p]` sampled at every q.
    /// Infinite entries of `line` are not sites.
    fn transform(&mut self, n: usize, w2: f64) {
        let f = &self.line[..n];
        let v = &mut self.sites;
        let z = &mut self.bounds;
        let mut k: isize = -1;
        for q in 0..n {
            if f[q].is_infinite() {
                continue;
            }
            if k < 0 {
                k = 0;
                v[0] = q;
                z[0] = f64::NEG_INFINITY;
                z[1] = f64::INFINITY;
                continue;
            }
            let qf = q as f64;
            loop {
                let p = v[k as usize];
                let pf = p as f64;
                let s = ((f[q] + w2 * qf * qf) - (f[p] + w2 * pf * pf)) / (2.0 * w2 * (qf - pf));
                if s <= z[k as usize] {
                    k -= 1;
                    if k < 0 {
                        break;
                    }
                } else {
                    break;
                }
            }
            k += 1;
            let ku = k as usize;
            v[ku] = q;
            if ku == 0 {
                z[0] = f64::NEG_INFINITY;
            } else {
                let p = v[ku - 1];
                let pf = p as f64;
                z[ku] = ((f[q] + w2 * qf * qf) - (f[p] + w2 * pf * pf)) / (2.0 * w2 * (qf - pf));
            }
            z[ku + 1] = f64::INFINITY;
        }
        if k < 0 {
            self.out[..n].fill(f64::INFINITY);
            return;
        }
        let mut j = 0usize;
        for q in 0..n {
            let qf = q as f64;
            while z[j + 1] < qf {
                j += 1;
            }
            let d = qf - v[j] as f64;
            self.out[q] = w2 * d * d + f[v[j]];
        }
    }
}

/// Squared distance (mm²) from every voxel center to the nearest voxel whose
/// value equals `target`. Voxels of class `target` get 0; if no such voxel
/// exists every entry is infinite.
pub fn squared_distance_to(mask: &MaskVolume, target: bool) -> Vec<f64> {
    let dims = mask.dims();
    let spacing = mask.spacing();
    let mut field: Vec<f64> = mask
        .data()
        .iter()
        .map(|&v| if (v != 0) == target { 0.0 } else { f64::INFINITY })
        .collect();
    let strides = [1, dims[0], dims[0] * dims[1]];
    let mut env = Envelope::new(*dims.iter().max().unwrap());
    for axis in 0..3 {
        let n = dims[axis];
        let stride = strides[axis];
        let w2 = spacing[axis] * spacing[axis];
        let (o1, o2) = match axis {
            0 => (1, 2),
            1 => (0, 2),
            _ => (0, 1),
        };
        for b in 0..dims[o2] {
            for a in 0..dims[o1] {
                let base = a * strides[o1] + b * strides[o2];
                for i in 0..n {
                    env.line[i] = field[base + i * stride];
                }
                env.transform(n, w2);
                for i in 0..n {
                    field[base + i * stride] = env.out[i];
                }
            }
        }
    }
    field
}

/// Signed Euclidean distance map in millimetres: each voxel holds the distance
/// from its center to the nearest center of the opposite class, negative
/// inside the foreground and positive outside.
pub fn signed_distance(mask: &MaskVolume) -> Result<ScalarField> {
    let n_fg = mask.count();
    if n_fg == 0 || n_fg == mask.len() {
        return Err(Error::UniformMask);
    }
    let to_fg = squared_distance_to(mask, true);
    let to_bg = squared_distance_to(mask, false);
    let data = mask
        .data()
        .iter()
        .zip(to_fg.iter().zip(&to_bg))
        .map(|(&v, (&dfg, &dbg))| if v != 0 { -dbg.sqrt() } else { dfg.sqrt() })
        .collect();
    ScalarField::new(mask.dims(), mask.spacing(), data)
}
