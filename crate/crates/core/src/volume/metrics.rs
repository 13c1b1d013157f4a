use super::MaskVolume;
use crate::error::{Error, Result};

/// Dice overlap `2|A∩B| / (|A|+|B|)`; two empty masks score 1.
pub fn dice(a: &MaskVolume, b: &MaskVolume) -> Result<f64> {
    if a.dims() != b.dims() {
        return Err(Error::DimMismatch(a.dims(), b.dims()));
    }
    let (mut inter, mut na, mut nb) = (0usize, 0usize, 0usize);
    for (&x, &y) in a.data().iter().zip(b.data()) {
        inter += (x & y) as usize;
        na += x as usize;
        nb += y as usize;
    }
    if na + nb == 0 {
        return Ok(1.0);
    }
    Ok(2.0 * inter as f64 / (na + nb) as f64)
}

/// Foreground volume in cubic millimetres.
pub fn volume_mm3(mask: &MaskVolume) -> f64 {
    let [sx, sy, sz] = mask.spacing();
    mask.count() as f64 * sx * sy * sz
}

/// Number of 6-connected foreground components.
pub fn connected_components(mask: &MaskVolume) -> usize {
    let [nx, ny, nz] = mask.dims();
    let data = mask.data();
    let mut seen = vec![false; data.len()];
    let mut stack = Vec::new();
    let mut count = 0;
    for start in 0..data.len() {
        if data[start] == 0 || seen[start] {
            continue;
        }
        count += 1;
        seen[start] = true;
        stack.push(start);
        while let Some(i) = stack.pop() {
            let x = i % nx;
            let y = (i / nx) % ny;
            let z = i / (nx * ny);
            let mut visit = |j: usize| {
                if data[j] != 0 && !seen[j] {
                    seen[j] = true;
                    stack.push(j);
                }
            };
            if x > 0 {
                visit(i - 1);
            }
            if x + 1 < nx {
                visit(i + 1);
            }
            if y > 0 {
                visit(i - nx);
            }
            if y + 1 < ny {
                visit(i + nx);
            }
            if z > 0 {
                visit(i - nx * ny);
            }
            if z + 1 < nz {
                visit(i + nx * ny);
            }
        }
    }
    count
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn cube_at(dims: [usize; 3], origin: [usize; 3]) -> MaskVolume {
        MaskVolume::from_fn(dims, [1.0; 3], |x, y, z| {
            (origin[0]..origin[0] + 2).contains(&x)
                && (origin[1]..origin[1] + 2).contains(&y)
                && (origin[2]..origin[2] + 2).contains(&z)
        })
        .unwrap()
    }

    /// Brute-force Dice: count each set and the intersection with explicit loops.
    fn dice_oracle(a: &MaskVolume, b: &MaskVolume) -> f64 {
        let [nx, ny, nz] = a.dims();
        let (mut i, mut ca, mut cb) = (0u64, 0u64, 0u64);
        for z in 0..nz {
            for y in 0..ny {
                for x in 0..nx {
                    let (va, vb) = (a.get(x, y, z), b.get(x, y, z));
                    ca += va as u64;
                    cb += vb as u64;
                    i += (va && vb) as u64;
                }
            }
        }
        if ca + cb == 0 {
            1.0
        } else {
            2.0 * i as f64 / (ca + cb) as f64
        }
    }

    #[test]
    fn dice_cases() {
        let a = cube_at([6, 6, 6], [1, 1, 1]);
        assert_eq!(dice(&a, &a).unwrap(), 1.0);
        let far = cube_at([6, 6, 6], [4, 4, 4]);
        assert_eq!(dice(&a, &far).unwrap(), 0.0);
        // shifted by one voxel along x: 4 of 8 voxels overlap
        let shifted = cube_at([6, 6, 6], [2, 1, 1]);
        assert_eq!(dice(&a, &shifted).unwrap(), 0.5);
        assert_eq!(dice_oracle(&a, &shifted), 0.5);
        let empty = MaskVolume::zeros([6, 6, 6], [1.0; 3]).unwrap();
        assert_eq!(dice(&empty, &empty).unwrap(), 1.0);
        let other = MaskVolume::zeros([6, 6, 5], [1.0; 3]).unwrap();
        assert!(matches!(dice(&a, &other), Err(Error::DimMismatch(..))));
    }

    #[test]
    fn volumes() {
        let empty = MaskVolume::zeros([4, 4, 4], [1.0, 1.0, 2.0]).unwrap();
        assert_eq!(volume_mm3(&empty), 0.0);
        let ten = MaskVolume::from_fn([10, 2, 1], [1.0, 1.0, 2.0], |_, y, _| y == 0).unwrap();
        assert_eq!(volume_mm3(&ten), 20.0);
    }

    #[test]
    fn component_counts() {
        let mut m = MaskVolume::zeros([5, 5, 5], [1.0; 3]).unwrap();
        assert_eq!(connected_components(&m), 0);
        m.set(0, 0, 0, true);
        m.set(2, 2, 2, true);
        assert_eq!(connected_components(&m), 2);
        // diagonal neighbours are not 6-connected
        m.set(1, 1, 1, true);
        assert_eq!(connected_components(&m), 3);
        m.set(1, 0, 0, true);
        m.set(1, 1, 0, true);
        assert_eq!(connected_components(&m), 2);
    }

    proptest! {
        #[test]
        fn dice_is_symmetric_and_matches_oracle(
            bits_a in proptest::collection::vec(0u8..2, 60),
            bits_b in proptest::collection::vec(0u8..2, 60),
        ) {
            let a = MaskVolume::new([5, 4, 3], [1.0; 3], bits_a).unwrap();
            let b = MaskVolume::new([5, 4, 3], [1.0; 3], bits_b).unwrap();
            let d = dice(&a, &b).unwrap();
            prop_assert_eq!(d, dice(&b, &a).unwrap());
            prop_assert_eq!(d, dice_oracle(&a, &b));
        }
    }
}
