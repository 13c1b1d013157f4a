//! Dense layers, activations and the VAE loss terms as plain tensor functions.

use super::tensor::{Real, Tensor};
use crate::error::{Error, Result};

/// `weight · flatten(input) + bias` with `weight: [m, n]`, `bias: [m]`.
pub fn linear<T: Real>(input: &Tensor<T>, weight: &Tensor<T>, bias: &Tensor<T>) -> Result<Tensor<T>> {
    let (m, n) = match weight.shape() {
        [m, n] => (*m, *n),
        s => return Err(Error::ShapeMismatch(format!("linear weight must be 2D, got {s:?}"))),
    };
    if input.numel() != n || bias.shape() != [m] {
        return Err(Error::ShapeMismatch(format!(
            "linear: weight [{m}, {n}], input {:?}, bias {:?}",
            input.shape(),
            bias.shape()
        )));
    }
    let mut out = bias.data().to_vec();
    T::gemm(
        m,
        n,
        1,
        T::one(),
        weight.data(),
        n as isize,
        1,
        input.data(),
        1,
        1,
        T::one(),
        &mut out,
        1,
        1,
    );
    Ok(Tensor::from_vec(out))
}

/// Input and weight gradients of [`linear`]; the bias gradient is `grad_out`.
pub fn linear_backward<T: Real>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    grad_out: &Tensor<T>,
) -> Result<(Tensor<T>, Tensor<T>)> {
    let [m, n] =
        <[usize; 2]>::try_from(weight.shape()).map_err(|_| Error::ShapeMismatch("linear weight must be 2D".into()))?;
    let g = grad_out.data();
    let x = input.data();
    let mut gw = vec![T::zero(); m * n];
    for (row, &gi) in gw.chunks_mut(n).zip(g) {
        for (w, &xv) in row.iter_mut().zip(x) {
            *w = gi * xv;
        }
    }
    let mut gx = vec![T::zero(); n];
    T::gemm(
        n,
        m,
        1,
        T::one(),
        weight.data(),
        1,
        n as isize,
        g,
        1,
        1,
        T::zero(),
        &mut gx,
        1,
        1,
    );
    Ok((Tensor::new(input.shape().to_vec(), gx)?, Tensor::new(vec![m, n], gw)?))
}

pub fn leaky_relu<T: Real>(x: &Tensor<T>, slope: T) -> Tensor<T> {
    x.map(|v| if v > T::zero() { v } else { v * slope })
}

/// Logistic function; the branch keeps `exp` from overflowing.
#[inline]
pub fn sigmoid_scalar<T: Real>(v: T) -> T {
    if v >= T::zero() {
        T::one() / (T::one() + (-v).exp())
    } else {
        let e = v.exp();
        e / (T::one() + e)
    }
}

pub fn sigmoid<T: Real>(x: &Tensor<T>) -> Tensor<T> {
    x.map(sigmoid_scalar)
}

/// `-Σ x log f + (1 - x) log(1 - f)`, summed over all entries.
pub fn bernoulli_nll<T: Real>(probs: &[T], target: &[T]) -> T {
    probs.iter().zip(target).fold(T::zero(), |acc, (&f, &x)| {
        let mut term = T::zero();
        if x > T::zero() {
            term -= x * f.ln();
        }
        if x < T::one() {
            term -= (T::one() - x) * (T::one() - f).ln();
        }
        acc + term
    })
}

/// `0.5 Σ (mu² + exp(logvar) - 1 - logvar)`.
pub fn kl_gaussian<T: Real>(mu: &[T], logvar: &[T]) -> T {
    let half = T::lit(0.5);
    mu.iter()
        .zip(logvar)
        .fold(T::zero(), |acc, (&m, &l)| acc + half * (m * m + l.exp() - T::one() - l))
}
