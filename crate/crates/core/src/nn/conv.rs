//! 3D convolution kernels (single sample, channels-first `[C, D, H, W]`).
//!
//! Both directions are lowered to matrix products over an unfolded
//! ("im2col") patch matrix. A transposed convolution is the exact adjoint of
//! the convolution with the same kernel, stride and padding.

use super::tensor::{Real, Tensor};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvSpec {
    pub stride: usize,
    pub pad: usize,
}

impl ConvSpec {
    pub const fn new(stride: usize, pad: usize) -> Self {
        Self { stride, pad }
    }
}

/// Output extent of a convolution, if at least one output exists.
pub fn conv_out_len(n: usize, k: usize, spec: ConvSpec) -> Option<usize> {
    let padded = n + 2 * spec.pad;
    (spec.stride > 0 && padded >= k).then(|| (padded - k) / spec.stride + 1)
}

/// Output extent of a transposed convolution: `(n - 1) s - 2p + k + out_pad`.
pub fn conv_transpose_out_len(n: usize, k: usize, spec: ConvSpec, out_pad: usize) -> Option<usize> {
    let full = (n - 1) * spec.stride + k + out_pad;
    (n > 0 && full > 2 * spec.pad).then(|| full - 2 * spec.pad)
}

/// Geometry of a convolution from a "wide" grid to a "narrow" grid.
#[derive(Clone, Copy, Debug)]
struct Geometry {
    c_wide: usize,
    c_narrow: usize,
    k: usize,
    wide: [usize; 3],
    narrow: [usize; 3],
    spec: ConvSpec,
}

impl Geometry {
    fn patch_len(&self) -> usize {
        self.c_wide * self.k * self.k * self.k
    }

    fn narrow_len(&self) -> usize {
        self.narrow.iter().product()
    }

    fn wide_len(&self) -> usize {
        self.wide.iter().product()
    }
}

/// Output indices `o` in `[lo, hi)` whose tap `t` lands inside `[0, n_in)`.
#[inline]
fn valid_range(t: usize, spec: ConvSpec, n_in: usize, n_out: usize) -> (usize, usize) {
    let (s, p) = (spec.stride, spec.pad);
    let lo = if p > t { (p - t).div_ceil(s) } else { 0 };
    let hi = if n_in + p > t {
        ((n_in - 1 + p - t) / s + 1).min(n_out)
    } else {
        0
    };
    (lo.min(hi), hi)
}

/// Target number of elements in one unfolded tile, small enough to stay in
/// cache while the matrix product streams over it.
const TILE_ELEMS: usize = 1 << 16;

/// Ranges `[r0, r1)` of narrow rows (flattened `(z, y)`) processed per tile.
fn row_tiles(g: &Geometry) -> impl Iterator<Item = (usize, usize)> {
    let rows = g.narrow[0] * g.narrow[1];
    let per = (TILE_ELEMS / (g.patch_len() * g.narrow[2])).max(1);
    (0..rows).step_by(per).map(move |r0| (r0, (r0 + per).min(rows)))
}

/// Calls `f(row, dst_offset, src_offset, len)` for every contiguous run of
/// narrow positions in rows `[r0, r1)` and the wide sample each one reads;
/// `row` indexes the `c_wide k^3` patch rows.
#[inline]
fn for_each_run(g: &Geometry, r0: usize, r1: usize, mut f: impl FnMut(usize, usize, usize, usize)) {
    let [nd, nh, nw] = g.narrow;
    let [wd, wh, ww] = g.wide;
    let (s, pad) = (g.spec.stride, g.spec.pad);
    let mut row = 0;
    for c in 0..g.c_wide {
        let plane = c * g.wide_len();
        for kz in 0..g.k {
            let (z0, z1) = valid_range(kz, g.spec, wd, nd);
            for ky in 0..g.k {
                let (y0, y1) = valid_range(ky, g.spec, wh, nh);
                for kx in 0..g.k {
                    let (x0, x1) = valid_range(kx, g.spec, ww, nw);
                    if x0 < x1 {
                        for r in r0..r1 {
                            let (oz, oy) = (r / nh, r % nh);
                            if oz < z0 || oz >= z1 || oy < y0 || oy >= y1 {
                                continue;
                            }
                            let (iz, iy) = (oz * s + kz - pad, oy * s + ky - pad);
                            let src = plane + (iz * wh + iy) * ww + x0 * s + kx - pad;
                            f(row, (r - r0) * nw + x0, src, x1 - x0);
                        }
                    }
                    row += 1;
                }
            }
        }
    }
}

/// Unfolds rows `[r0, r1)` of the patches of `wide` (`[c_wide, D, H, W]`)
/// into `col` (`[c_wide k^3, (r1 - r0) W_narrow]`).
fn im2col<T: Real>(g: &Geometry, wide: &[T], r0: usize, r1: usize, col: &mut [T]) {
    let cols = (r1 - r0) * g.narrow[2];
    let s = g.spec.stride;
    col[..g.patch_len() * cols].fill(T::zero());
    for_each_run(g, r0, r1, |row, dst, src, len| {
        let d = &mut col[row * cols + dst..row * cols + dst + len];
        if s == 1 {
            d.copy_from_slice(&wide[src..src + len]);
        } else {
            for (j, v) in d.iter_mut().enumerate() {
                *v = wide[src + j * s];
            }
        }
    });
}

/// Adjoint of [`im2col`]: scatter-adds `col` back onto `wide`.
fn col2im<T: Real>(g: &Geometry, col: &[T], r0: usize, r1: usize, wide: &mut [T]) {
    let cols = (r1 - r0) * g.narrow[2];
    let s = g.spec.stride;
    for_each_run(g, r0, r1, |row, dst, src, len| {
        let c = &col[row * cols + dst..row * cols + dst + len];
        if s == 1 {
            for (w, &v) in wide[src..src + len].iter_mut().zip(c) {
                *w += v;
            }
        } else {
            for (j, &v) in c.iter().enumerate() {
                wide[src + j * s] += v;
            }
        }
    });
}

/// Column offset and count of a row tile within the narrow grid.
fn tile_cols(g: &Geometry, r0: usize, r1: usize) -> (usize, usize) {
    (r0 * g.narrow[2], (r1 - r0) * g.narrow[2])
}

/// `narrow[:, tile] = W[c_narrow, K] col[K, tile]`.
fn apply_kernel<T: Real>(g: &Geometry, weight: &[T], col: &[T], r0: usize, r1: usize, narrow: &mut [T]) {
    let (kk, p) = (g.patch_len(), g.narrow_len());
    let (off, n) = tile_cols(g, r0, r1);
    T::gemm(
        g.c_narrow,
        kk,
        n,
        T::one(),
        weight,
        kk as isize,
        1,
        col,
        n as isize,
        1,
        T::zero(),
        &mut narrow[off..],
        p as isize,
        1,
    );
}

/// `col[K, tile] = W^T[K, c_narrow] narrow[:, tile]`.
fn apply_kernel_t<T: Real>(g: &Geometry, weight: &[T], narrow: &[T], r0: usize, r1: usize, col: &mut [T]) {
    let (kk, p) = (g.patch_len(), g.narrow_len());
    let (off, n) = tile_cols(g, r0, r1);
    T::gemm(
        kk,
        g.c_narrow,
        n,
        T::one(),
        weight,
        1,
        kk as isize,
        &narrow[off..],
        p as isize,
        1,
        T::zero(),
        col,
        n as isize,
        1,
    );
}

/// `gw[c_narrow, K] += narrow[:, tile] col[K, tile]^T`.
fn kernel_grad<T: Real>(g: &Geometry, narrow: &[T], col: &[T], r0: usize, r1: usize, gw: &mut [T]) {
    let (kk, p) = (g.patch_len(), g.narrow_len());
    let (off, n) = tile_cols(g, r0, r1);
    T::gemm(
        g.c_narrow,
        n,
        kk,
        T::one(),
        &narrow[off..],
        p as isize,
        1,
        col,
        1,
        n as isize,
        T::one(),
        gw,
        kk as isize,
        1,
    );
}

/// Narrow channel counts below this use direct per-tap accumulation, since
/// unfolding would cost more than the product it feeds.
const DIRECT_MAX_CHANNELS: usize = 2;

/// `narrow[:, tile] += W wide` without unfolding.
fn direct_forward<T: Real>(g: &Geometry, weight: &[T], wide: &[T], r0: usize, r1: usize, narrow: &mut [T]) {
    let (kk, p) = (g.patch_len(), g.narrow_len());
    let (off, _) = tile_cols(g, r0, r1);
    let s = g.spec.stride;
    for_each_run(g, r0, r1, |row, dst, src, len| {
        for co in 0..g.c_narrow {
            let w = weight[co * kk + row];
            let out = &mut narrow[co * p + off + dst..co * p + off + dst + len];
            if s == 1 {
                for (o, &v) in out.iter_mut().zip(&wide[src..src + len]) {
                    *o += w * v;
                }
            } else {
                for (j, o) in out.iter_mut().enumerate() {
                    *o += w * wide[src + j * s];
                }
            }
        }
    });
}

/// Kernel gradient and (optionally) the wide-side gradient without unfolding.
fn direct_backward<T: Real>(
    g: &Geometry,
    weight: &[T],
    wide: &[T],
    narrow_grad: &[T],
    r0: usize,
    r1: usize,
    gw: &mut [T],
    mut gwide: Option<&mut [T]>,
) {
    let (kk, p) = (g.patch_len(), g.narrow_len());
    let (off, _) = tile_cols(g, r0, r1);
    let s = g.spec.stride;
    for_each_run(g, r0, r1, |row, dst, src, len| {
        for co in 0..g.c_narrow {
            let go = &narrow_grad[co * p + off + dst..co * p + off + dst + len];
            let w = weight[co * kk + row];
            if s == 1 {
                let wd = &wide[src..src + len];
                gw[co * kk + row] += go.iter().zip(wd).map(|(&a, &b)| a * b).sum::<T>();
                if let Some(gi) = gwide.as_deref_mut() {
                    for (o, &v) in gi[src..src + len].iter_mut().zip(go) {
                        *o += w * v;
                    }
                }
            } else {
                let mut acc = T::zero();
                for (j, &v) in go.iter().enumerate() {
                    acc += v * wide[src + j * s];
                }
                gw[co * kk + row] += acc;
                if let Some(gi) = gwide.as_deref_mut() {
                    for (j, &v) in go.iter().enumerate() {
                        gi[src + j * s] += w * v;
                    }
                }
            }
        }
    });
}

fn col_buffer<T: Real>(g: &Geometry) -> Vec<T> {
    let rows = row_tiles(g).map(|(a, b)| b - a).max().unwrap_or(0);
    vec![T::zero(); g.patch_len() * rows * g.narrow[2]]
}

fn dims3(shape: &[usize], what: &str) -> Result<(usize, [usize; 3])> {
    match shape {
        [c, d, h, w] => Ok((*c, [*d, *h, *w])),
        _ => Err(Error::ShapeMismatch(format!(
            "{what} must be [C, D, H, W], got {shape:?}"
        ))),
    }
}

fn kernel_dims(shape: &[usize]) -> Result<(usize, usize, usize)> {
    match shape {
        [a, b, k, k2, k3] if k == k2 && k == k3 && k % 2 == 1 => Ok((*a, *b, *k)),
        _ => Err(Error::ShapeMismatch(format!(
            "kernel must be [A, B, k, k, k] with odd k, got {shape:?}"
        ))),
    }
}

fn check_bias<T: Real>(bias: &Tensor<T>, n: usize) -> Result<()> {
    if bias.shape() != [n] {
        return Err(Error::ShapeMismatch(format!(
            "bias shape {:?}, expected [{n}]",
            bias.shape()
        )));
    }
    Ok(())
}

fn check_grad<T: Real>(grad_out: &Tensor<T>, c: usize, dims: [usize; 3]) -> Result<()> {
    let [d, h, w] = dims;
    if grad_out.shape() != [c, d, h, w] {
        return Err(Error::ShapeMismatch(format!(
            "output gradient shape {:?}, expected {:?}",
            grad_out.shape(),
            [c, d, h, w]
        )));
    }
    Ok(())
}

fn add_bias<T: Real>(out: &mut [T], bias: &[T]) {
    let per = out.len() / bias.len();
    for (chunk, &b) in out.chunks_mut(per).zip(bias) {
        for v in chunk {
            *v += b;
        }
    }
}

fn bias_grad<T: Real>(grad: &[T], channels: usize) -> Vec<T> {
    let per = grad.len() / channels;
    grad.chunks(per).map(|c| c.iter().copied().sum()).collect()
}

fn conv_geometry(input: &[usize], kernel: &[usize], spec: ConvSpec) -> Result<Geometry> {
    let (ci, wide) = dims3(input, "conv input")?;
    let (co, kci, k) = kernel_dims(kernel)?;
    if kci != ci {
        return Err(Error::ShapeMismatch(format!(
            "kernel expects {kci} input channels, input has {ci}"
        )));
    }
    let mut narrow = [0; 3];
    for a in 0..3 {
        narrow[a] = conv_out_len(wide[a], k, spec)
            .ok_or_else(|| Error::ShapeMismatch(format!("extent {} too small for kernel {k}", wide[a])))?;
    }
    Ok(Geometry {
        c_wide: ci,
        c_narrow: co,
        k,
        wide,
        narrow,
        spec,
    })
}

fn transpose_geometry(input: &[usize], kernel: &[usize], spec: ConvSpec, out_pad: usize) -> Result<Geometry> {
    let (ci, narrow) = dims3(input, "transposed conv input")?;
    let (kci, co, k) = kernel_dims(kernel)?;
    if kci != ci {
        return Err(Error::ShapeMismatch(format!(
            "kernel expects {kci} input channels, input has {ci}"
        )));
    }
    if out_pad >= spec.stride.max(1) {
        return Err(Error::ShapeMismatch(format!(
            "output padding {out_pad} must be below stride {}",
            spec.stride
        )));
    }
    let mut wide = [0; 3];
    for a in 0..3 {
        wide[a] = conv_transpose_out_len(narrow[a], k, spec, out_pad)
            .ok_or_else(|| Error::ShapeMismatch("transposed conv output is empty".into()))?;
    }
    Ok(Geometry {
        c_wide: co,
        c_narrow: ci,
        k,
        wide,
        narrow,
        spec,
    })
}

/// Cross-correlation with zero padding.
///
/// `input: [Ci, D, H, W]`, `kernel: [Co, Ci, k, k, k]`, `bias: [Co]`.
pub fn conv3d<T: Real>(input: &Tensor<T>, kernel: &Tensor<T>, bias: &Tensor<T>, spec: ConvSpec) -> Result<Tensor<T>> {
    let g = conv_geometry(input.shape(), kernel.shape(), spec)?;
    check_bias(bias, g.c_narrow)?;
    let mut out = vec![T::zero(); g.c_narrow * g.narrow_len()];
    if g.c_narrow <= DIRECT_MAX_CHANNELS {
        for (r0, r1) in row_tiles(&g) {
            direct_forward(&g, kernel.data(), input.data(), r0, r1, &mut out);
        }
    } else {
        let mut col = col_buffer(&g);
        for (r0, r1) in row_tiles(&g) {
            im2col(&g, input.data(), r0, r1, &mut col);
            apply_kernel(&g, kernel.data(), &col, r0, r1, &mut out);
        }
    }
    add_bias(&mut out, bias.data());
    let [d, h, w] = g.narrow;
    Tensor::new(vec![g.c_narrow, d, h, w], out)
}

/// Gradients of [`conv3d`] with respect to input, kernel and bias.
pub fn conv3d_backward<T: Real>(
    input: &Tensor<T>,
    kernel: &Tensor<T>,
    grad_out: &Tensor<T>,
    spec: ConvSpec,
) -> Result<(Tensor<T>, Tensor<T>, Tensor<T>)> {
    let (gin, gw, gb) = conv3d_backward_opt(input, kernel, grad_out, spec, true)?;
    Ok((gin.expect("input gradient requested"), gw, gb))
}

/// [`conv3d_backward`] that skips the input gradient when `need_input` is
/// false.
pub fn conv3d_backward_opt<T: Real>(
    input: &Tensor<T>,
    kernel: &Tensor<T>,
    grad_out: &Tensor<T>,
    spec: ConvSpec,
    need_input: bool,
) -> Result<(Option<Tensor<T>>, Tensor<T>, Tensor<T>)> {
    let g = conv_geometry(input.shape(), kernel.shape(), spec)?;
    check_grad(grad_out, g.c_narrow, g.narrow)?;
    let mut gw = vec![T::zero(); kernel.numel()];
    let mut gin = need_input.then(|| vec![T::zero(); input.numel()]);
    if g.c_narrow <= DIRECT_MAX_CHANNELS {
        for (r0, r1) in row_tiles(&g) {
            let gi = gin.as_deref_mut();
            direct_backward(&g, kernel.data(), input.data(), grad_out.data(), r0, r1, &mut gw, gi);
        }
        return Ok((
            gin.map(|v| Tensor::new(input.shape().to_vec(), v)).transpose()?,
            Tensor::new(kernel.shape().to_vec(), gw)?,
            Tensor::from_vec(bias_grad(grad_out.data(), g.c_narrow)),
        ));
    }
    let mut col = col_buffer(&g);
    for (r0, r1) in row_tiles(&g) {
        im2col(&g, input.data(), r0, r1, &mut col);
        kernel_grad(&g, grad_out.data(), &col, r0, r1, &mut gw);
        if let Some(gin) = gin.as_mut() {
            apply_kernel_t(&g, kernel.data(), grad_out.data(), r0, r1, &mut col);
            col2im(&g, &col, r0, r1, gin);
        }
    }
    Ok((
        gin.map(|v| Tensor::new(input.shape().to_vec(), v)).transpose()?,
        Tensor::new(kernel.shape().to_vec(), gw)?,
        Tensor::from_vec(bias_grad(grad_out.data(), g.c_narrow)),
    ))
}

/// Transposed convolution, the adjoint of [`conv3d`] with the same kernel.
///
/// `input: [Ci, d, h, w]`, `kernel: [Ci, Co, k, k, k]`, `bias: [Co]`; output
/// extents are `(n - 1) s - 2p + k + out_pad` with `out_pad < s`.
pub fn conv3d_transpose<T: Real>(
    input: &Tensor<T>,
    kernel: &Tensor<T>,
    bias: &Tensor<T>,
    spec: ConvSpec,
    out_pad: usize,
) -> Result<Tensor<T>> {
    let g = transpose_geometry(input.shape(), kernel.shape(), spec, out_pad)?;
    check_bias(bias, g.c_wide)?;
    let mut col = col_buffer(&g);
    let mut out = vec![T::zero(); g.c_wide * g.wide_len()];
    for (r0, r1) in row_tiles(&g) {
        apply_kernel_t(&g, kernel.data(), input.data(), r0, r1, &mut col);
        col2im(&g, &col, r0, r1, &mut out);
    }
    add_bias(&mut out, bias.data());
    let [d, h, w] = g.wide;
    Tensor::new(vec![g.c_wide, d, h, w], out)
}

/// Gradients of [`conv3d_transpose`] with respect to input, kernel and bias.
pub fn conv3d_transpose_backward<T: Real>(
    input: &Tensor<T>,
    kernel: &Tensor<T>,
    grad_out: &Tensor<T>,
    spec: ConvSpec,
    out_pad: usize,
) -> Result<(Tensor<T>, Tensor<T>, Tensor<T>)> {
    let g = transpose_geometry(input.shape(), kernel.shape(), spec, out_pad)?;
    check_grad(grad_out, g.c_wide, g.wide)?;
    let mut col = col_buffer(&g);
    let mut gin = vec![T::zero(); input.numel()];
    let mut gw = vec![T::zero(); kernel.numel()];
    for (r0, r1) in row_tiles(&g) {
        im2col(&g, grad_out.data(), r0, r1, &mut col);
        apply_kernel(&g, kernel.data(), &col, r0, r1, &mut gin);
        kernel_grad(&g, input.data(), &col, r0, r1, &mut gw);
    }
    Ok((
        Tensor::new(input.shape().to_vec(), gin)?,
        Tensor::new(kernel.shape().to_vec(), gw)?,
        Tensor::from_vec(bias_grad(grad_out.data(), g.c_wide)),
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
        let n = shape.iter().product();
        Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    }

    /// Direct summation over every output position and tap.
    fn conv_oracle(x: &Tensor<f64>, w: &Tensor<f64>, b: &Tensor<f64>, s: usize, p: usize) -> Tensor<f64> {
        let [ci, d, h, wd] = <[usize; 4]>::try_from(x.shape()).unwrap();
        let co = w.shape()[0];
        let k = w.shape()[2];
        let od = (d + 2 * p - k) / s + 1;
        let oh = (h + 2 * p - k) / s + 1;
        let ow = (wd + 2 * p - k) / s + 1;
        let mut out = vec![0.0; co * od * oh * ow];
        for o in 0..co {
            for z in 0..od {
                for y in 0..oh {
                    for xx in 0..ow {
                        let mut acc = b.data()[o];
                        for c in 0..ci {
                            for kz in 0..k {
                                for ky in 0..k {
                                    for kx in 0..k {
                                        let iz = (z * s + kz) as isize - p as isize;
                                        let iy = (y * s + ky) as isize - p as isize;
                                        let ix = (xx * s + kx) as isize - p as isize;
                                        if iz < 0
                                            || iy < 0
                                            || ix < 0
                                            || iz >= d as isize
                                            || iy >= h as isize
                                            || ix >= wd as isize
                                        {
                                            continue;
                                        }
                                        let xi = ((c * d + iz as usize) * h + iy as usize) * wd + ix as usize;
                                        let wi = (((o * ci + c) * k + kz) * k + ky) * k + kx;
                                        acc += x.data()[xi] * w.data()[wi];
                                    }
                                }
                            }
                        }
                        out[((o * od + z) * oh + y) * ow + xx] = acc;
                    }
                }
            }
        }
        Tensor::new(vec![co, od, oh, ow], out).unwrap()
    }

    #[test]
    fn identity_kernel() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = random(&[1, 4, 5, 6], &mut rng);
        let w = Tensor::new(vec![1, 1, 1, 1, 1], vec![1.0]).unwrap();
        let y = conv3d(&x, &w, &Tensor::zeros(&[1]), ConvSpec::new(1, 0)).unwrap();
        assert_eq!(y, x);
    }

    #[test]
    fn box_kernel_on_impulse() {
        let mut x = Tensor::<f64>::zeros(&[1, 7, 7, 7]);
        x.data_mut()[(3 * 7 + 3) * 7 + 3] = 1.0;
        let w = Tensor::filled(&[1, 1, 3, 3, 3], 1.0);
        let y = conv3d(&x, &w, &Tensor::zeros(&[1]), ConvSpec::new(1, 1)).unwrap();
        assert_eq!(y, conv_oracle(&x, &w, &Tensor::zeros(&[1]), 1, 1));
        for z in 0..7 {
            for yy in 0..7 {
                for xx in 0..7 {
                    let inside = [z, yy, xx].iter().all(|&v| (2..=4).contains(&v));
                    assert_eq!(y.data()[(z * 7 + yy) * 7 + xx], inside as u8 as f64);
                }
            }
        }
    }

    #[test]
    fn matches_direct_summation() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for &(s, p, dims) in &[
            (1, 1, [5, 6, 7]),
            (2, 1, [8, 6, 5]),
            (2, 0, [7, 7, 4]),
            (1, 0, [3, 4, 5]),
            (1, 1, [9, 20, 24]),
            (2, 1, [12, 40, 30]),
        ] {
            let x = random(&[3, dims[0], dims[1], dims[2]], &mut rng);
            let w = random(&[2, 3, 3, 3, 3], &mut rng);
            let b = random(&[2], &mut rng);
            let y = conv3d(&x, &w, &b, ConvSpec::new(s, p)).unwrap();
            let o = conv_oracle(&x, &w, &b, s, p);
            assert_eq!(y.shape(), o.shape());
            for (a, b) in y.data().iter().zip(o.data()) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn shape_formulas() {
        assert_eq!(conv_out_len(8, 3, ConvSpec::new(2, 1)), Some(4));
        assert_eq!(conv_transpose_out_len(4, 3, ConvSpec::new(2, 1), 0), Some(7));
        assert_eq!(conv_transpose_out_len(4, 3, ConvSpec::new(2, 1), 1), Some(8));
        let x = Tensor::<f64>::zeros(&[2, 4, 4, 4]);
        let w = Tensor::<f64>::zeros(&[2, 3, 3, 3, 3]);
        let y = conv3d_transpose(&x, &w, &Tensor::filled(&[3], 0.25), ConvSpec::new(2, 1), 0).unwrap();
        assert_eq!(y.shape(), &[3, 7, 7, 7]);
        assert!(y.data().iter().all(|&v| v == 0.25));
        assert!(conv3d(
            &x,
            &Tensor::zeros(&[2, 3, 3, 3, 3]),
            &Tensor::zeros(&[2]),
            ConvSpec::new(1, 1)
        )
        .is_err());
        assert!(conv3d(
            &x,
            &Tensor::zeros(&[2, 2, 2, 2, 2]),
            &Tensor::zeros(&[2]),
            ConvSpec::new(1, 1)
        )
        .is_err());
    }

    #[test]
    fn transpose_is_adjoint() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for &(s, p, op, dims) in &[
            (2, 1, 1, [8, 6, 4]),
            (1, 1, 0, [5, 4, 6]),
            (2, 1, 0, [7, 5, 9]),
            (2, 0, 1, [8, 8, 6]),
        ] {
            let x = random(&[3, dims[0], dims[1], dims[2]], &mut rng);
            let w = random(&[4, 3, 3, 3, 3], &mut rng);
            let spec = ConvSpec::new(s, p);
            let cx = conv3d(&x, &w, &Tensor::zeros(&[4]), spec).unwrap();
            let y = random(cx.shape(), &mut rng);
            let ty = conv3d_transpose(&y, &w, &Tensor::zeros(&[3]), spec, op).unwrap();
            assert_eq!(ty.shape(), x.shape());
            let lhs = cx.dot(&y);
            let rhs = x.dot(&ty);
            assert!((lhs - rhs).abs() / lhs.abs().max(1e-12) < 1e-6, "{lhs} vs {rhs}");
        }
    }

    /// Large enough grids to span several unfolding tiles.
    #[test]
    fn backward_over_multiple_tiles() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for &(s, dims) in &[(1, [9, 20, 24]), (2, [10, 36, 30])] {
            let spec = ConvSpec::new(s, 1);
            let x = random(&[3, dims[0], dims[1], dims[2]], &mut rng);
            let w = random(&[4, 3, 3, 3, 3], &mut rng);
            let y = conv3d(&x, &w, &Tensor::zeros(&[4]), spec).unwrap();
            let go = random(y.shape(), &mut rng);
            let (gin, gw, gb) = conv3d_backward(&x, &w, &go, spec).unwrap();
            let ty = conv3d_transpose(&go, &w, &Tensor::zeros(&[3]), spec, s - 1).unwrap();
            assert_eq!(ty.shape(), x.shape());
            for (a, b) in gin.data().iter().zip(ty.data()) {
                assert!((a - b).abs() < 1e-10);
            }
            // The output is linear in the kernel: <gw, dw> = <go, conv(x, dw)>.
            let dw = random(w.shape(), &mut rng);
            let lhs = gw.dot(&dw);
            let rhs = go.dot(&conv3d(&x, &dw, &Tensor::zeros(&[4]), spec).unwrap());
            assert!((lhs - rhs).abs() / rhs.abs().max(1e-12) < 1e-10);
            // <gin, dx> = <go, conv(dx, w)>.
            let dx = random(x.shape(), &mut rng);
            let lhs = gin.dot(&dx);
            let rhs = go.dot(&conv3d(&dx, &w, &Tensor::zeros(&[4]), spec).unwrap());
            assert!((lhs - rhs).abs() / rhs.abs().max(1e-12) < 1e-10);
            let sums: Vec<f64> = go.data().chunks(go.numel() / 4).map(|c| c.iter().sum()).collect();
            assert_eq!(gb.data(), sums.as_slice());

            let (tgin, tgw, _) = conv3d_transpose_backward(&go, &w, &x, spec, s - 1).unwrap();
            assert!(conv3d_transpose_backward(&go, &w, &y, spec, s - 1).is_err());
            // Transposed conv of go against x: its kernel gradient is the same
            // bilinear form, and its input gradient is conv3d(x).
            assert!((tgw.dot(&dw) - go.dot(&conv3d(&x, &dw, &Tensor::zeros(&[4]), spec).unwrap())).abs() < 1e-8);
            assert_eq!(tgin.shape(), go.shape());
            for (a, b) in tgin.data().iter().zip(y.data()) {
                assert!((a - b).abs() < 1e-10);
            }
        }
    }
}
