//! Binary mask volumes, scalar fields, and the geometric operations used to
//! preprocess and measure organ shapes.
//!
//! Voxels are stored flat with x varying fastest, then y, then z. Physical
//! coordinates place voxel `(i, j, k)` at its center
//! `((i + 0.5) sx, (j + 0.5) sy, (k + 0.5) sz)` millimetres from the grid corner.

mod distance;
mod geometry;
mod io;
mod metrics;

pub use distance::{signed_distance, squared_distance_to};
pub use geometry::{center_in_grid, resample};
pub use io::{load_field, load_mask, save_field, save_mask};
pub use metrics::{connected_components, dice, volume_mm3};

use crate::error::{Error, Result};

/// Grid extents `(nx, ny, nz)`.
pub type Dims = [usize; 3];
/// Millimetres per voxel along `(x, y, z)`.
pub type Spacing = [f64; 3];

pub(crate) fn check_dims(dims: Dims) -> Result<()> {
    if dims.contains(&0) {
        return Err(Error::InvalidDims(dims));
    }
    Ok(())
}

pub(crate) fn check_spacing(spacing: Spacing) -> Result<()> {
    if spacing.iter().any(|&s| !(s > 0.0 && s.is_finite())) {
        return Err(Error::InvalidSpacing(spacing));
    }
    Ok(())
}

#[inline]
pub(crate) fn voxel_count(dims: Dims) -> usize {
    dims[0] * dims[1] * dims[2]
}

/// A 3D binary segmentation mask.
#[derive(Clone, Debug, PartialEq)]
pub struct MaskVolume {
    dims: Dims,
    spacing: Spacing,
    data: Vec<u8>,
}

impl MaskVolume {
    pub fn new(dims: Dims, spacing: Spacing, data: Vec<u8>) -> Result<Self> {
        check_dims(dims)?;
        check_spacing(spacing)?;
        let expected = voxel_count(dims);
        if data.len() != expected {
            return Err(Error::SizeMismatch {
                expected,
                found: data.len(),
            });
        }
        if let Some((index, &value)) = data.iter().enumerate().find(|(_, &v)| v > 1) {
            return Err(Error::NonBinaryVoxel { index, value });
        }
        Ok(Self { dims, spacing, data })
    }

    pub fn zeros(dims: Dims, spacing: Spacing) -> Result<Self> {
        check_dims(dims)?;
        check_spacing(spacing)?;
        Ok(Self {
            dims,
            spacing,
            data: vec![0; voxel_count(dims)],
        })
    }

    /// Builds a mask by evaluating `f(x, y, z)` at every voxel.
    pub fn from_fn(dims: Dims, spacing: Spacing, mut f: impl FnMut(usize, usize, usize) -> bool) -> Result<Self> {
        let mut mask = Self::zeros(dims, spacing)?;
        let mut idx = 0;
        for z in 0..dims[2] {
            for y in 0..dims[1] {
                for x in 0..dims[0] {
                    mask.data[idx] = f(x, y, z) as u8;
                    idx += 1;
                }
            }
        }
        Ok(mask)
    }

    pub fn dims(&self) -> Dims {
        self.dims
    }

    pub fn spacing(&self) -> Spacing {
        self.spacing
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn index(&self, x: usize, y: usize, z: usize) -> usize {
        (z * self.dims[1] + y) * self.dims[0] + x
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize, z: usize) -> bool {
        self.data[self.index(x, y, z)] != 0
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, z: usize, value: bool) {
        let i = self.index(x, y, z);
        self.data[i] = value as u8;
    }

    /// Number of foreground voxels.
    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&v| v != 0).count()
    }

    /// Logical complement.
    pub fn inverted(&self) -> Self {
        Self {
            dims: self.dims,
            spacing: self.spacing,
            data: self.data.iter().map(|&v| 1 - v).collect(),
        }
    }

    /// Foreground voxel coordinates in storage order.
    pub fn foreground(&self) -> impl Iterator<Item = [usize; 3]> + '_ {
        let [nx, ny, _] = self.dims;
        self.data
            .iter()
            .enumerate()
            .filter(|(_, &v)| v != 0)
            .map(move |(i, _)| [i % nx, (i / nx) % ny, i / (nx * ny)])
    }

    /// Inclusive `(min, max)` corners of the foreground, or `None` when empty.
    pub fn bounding_box(&self) -> Option<([usize; 3], [usize; 3])> {
        let mut lo = [usize::MAX; 3];
        let mut hi = [0usize; 3];
        let mut any = false;
        for p in self.foreground() {
            any = true;
            for a in 0..3 {
                lo[a] = lo[a].min(p[a]);
                hi[a] = hi[a].max(p[a]);
            }
        }
        any.then_some((lo, hi))
    }

    /// Binarizes a probability field at `threshold` (strictly greater is foreground).
    pub fn from_field(field: &ScalarField, threshold: f64) -> Self {
        Self {
            dims: field.dims,
            spacing: field.spacing,
            data: field.data.iter().map(|&v| (v > threshold) as u8).collect(),
        }
    }

    pub(crate) fn from_raw(dims: Dims, spacing: Spacing, data: Vec<u8>) -> Self {
        debug_assert_eq!(data.len(), voxel_count(dims));
        Self { dims, spacing, data }
    }
}

/// A real-valued field on a voxel grid (decoder probabilities, signed distances).
#[derive(Clone, Debug, PartialEq)]
pub struct ScalarField {
    dims: Dims,
    spacing: Spacing,
    data: Vec<f64>,
}

impl ScalarField {
    pub fn new(dims: Dims, spacing: Spacing, data: Vec<f64>) -> Result<Self> {
        check_dims(dims)?;
        check_spacing(spacing)?;
        let expected = voxel_count(dims);
        if data.len() != expected {
            return Err(Error::SizeMismatch {
                expected,
                found: data.len(),
            });
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidParameter(
                "scalar field contains non-finite values".into(),
            ));
        }
        Ok(Self { dims, spacing, data })
    }

    pub fn dims(&self) -> Dims {
        self.dims
    }

    pub fn spacing(&self) -> Spacing {
        self.spacing
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize, z: usize) -> f64 {
        self.data[(z * self.dims[1] + y) * self.dims[0] + x]
    }
}
