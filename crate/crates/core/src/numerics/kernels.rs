// SPDX-License-Identifier: MIT OR Apache-2.0

//! Elementwise and per-vector kernels used by the model.

use std::f64::consts::{FRAC_1_SQRT_2, PI};

use super::{Scalar, Tensor};
use crate::error::{Error, Result};

/// Exact GELU, `x · Φ(x)` with `Φ` the standard normal CDF (erf form).
#[inline]
pub fn gelu<T: Scalar>(x: T) -> T {
    let x = x.as_f64();
    T::of(x * 0.5 * (1.0 + libm::erf(x * FRAC_1_SQRT_2)))
}

/// Derivative of [`gelu`]: `Φ(x) + x · φ(x)`.
#[inline]
pub fn gelu_grad<T: Scalar>(x: T) -> T {
    let x = x.as_f64();
    let cdf = 0.5 * (1.0 + libm::erf(x * FRAC_1_SQRT_2));
    let pdf = (-0.5 * x * x).exp() / (2.0 * PI).sqrt();
    T::of(cdf + x * pdf)
}

pub fn gelu_tensor<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    x.map(gelu)
}

/// Per-vector normalization statistics recorded by [`layernorm_rows`].
#[derive(Debug, Clone, PartialEq)]
pub struct LnStats<T> {
    pub mean: Vec<T>,
    /// `1 / sqrt(var + eps)` with the biased variance.
    pub rstd: Vec<T>,
}

/// Layer norm over consecutive rows of width `d`, writing into `out`.
pub fn layernorm_rows<T: Scalar>(
    x: &[T],
    d: usize,
    gamma: &[T],
    beta: &[T],
    eps: T,
    out: &mut [T],
) -> LnStats<T> {
    debug_assert!(d > 0 && x.len().is_multiple_of(d));
    let rows = x.len() / d;
    let inv_d = T::one() / T::from_usize(d);
    let mut stats = LnStats {
        mean: Vec::with_capacity(rows),
        rstd: Vec::with_capacity(rows),
    };
    for r in 0..rows {
        let xr = &x[r * d..(r + 1) * d];
        let mean = xr.iter().copied().sum::<T>() * inv_d;
        let var = xr.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() * inv_d;
        let rstd = T::one() / (var + eps).sqrt();
        let o = &mut out[r * d..(r + 1) * d];
        for i in 0..d {
            o[i] = (xr[i] - mean) * rstd * gamma[i] + beta[i];
        }
        stats.mean.push(mean);
        stats.rstd.push(rstd);
    }
    stats
}

/// Layer norm over the last axis of `x`.
pub fn layernorm<T: Scalar>(
    x: &Tensor<T>,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
    eps: T,
) -> Result<Tensor<T>> {
    let d = x.last_dim();
    if d == 0 || x.is_empty() {
        return Err(Error::InvalidArgument(
            "layernorm over a zero-length last dimension".into(),
        ));
    }
    if gamma.len() != d || beta.len() != d {
        return Err(Error::ShapeMismatch {
            op: "layernorm",
            expected: vec![d],
            actual: vec![gamma.len(), beta.len()],
        });
    }
    if eps.partial_cmp(&T::zero()) != Some(std::cmp::Ordering::Greater) {
        return Err(Error::InvalidArgument("layernorm eps must be > 0".into()));
    }
    let mut out = vec![T::zero(); x.len()];
    layernorm_rows(x.data(), d, gamma.data(), beta.data(), eps, &mut out);
    let t = Tensor::from_raw(x.shape().to_vec(), out);
    t.ensure_finite("layernorm")?;
    Ok(t)
}

/// In-place softmax of one vector, subtracting its max first.
pub fn softmax_in_place<T: Scalar>(v: &mut [T]) {
    let max = v.iter().copied().fold(T::neg_infinity(), T::max);
    let mut sum = T::zero();
    for x in v.iter_mut() {
        *x = (*x - max).exp();
        sum += *x;
    }
    let inv = T::one() / sum;
    for x in v.iter_mut() {
        *x *= inv;
    }
}

/// Softmax over the last axis.
pub fn softmax_naive<T: Scalar>(x: &Tensor<T>) -> Result<Tensor<T>> {
    x.ensure_finite("softmax_naive input")?;
    let mut out = x.clone();
    let d = x.last_dim();
    if d > 0 {
        for row in out.data_mut().chunks_mut(d) {
            softmax_in_place(row);
        }
    }
    Ok(out)
}

/// Running maximum and rescaled running sum of exponentials.
///
/// After pushing `x_1..x_n`, `denominator()` equals `Σ exp(x_i - max)`.
#[derive(Debug, Clone, Copy)]
pub struct OnlineSoftmax<T> {
    max: T,
    sum: T,
}

impl<T: Scalar> Default for OnlineSoftmax<T> {
    fn default() -> Self {
        Self {
            max: T::neg_infinity(),
            sum: T::zero(),
        }
    }
}

impl<T: Scalar> OnlineSoftmax<T> {
    /// Folds in one value. Returns the factor by which previously
    /// accumulated quantities must be rescaled.
    #[inline]
    pub fn push(&mut self, x: T) -> T {
        if x > self.max {
            let rescale = (self.max - x).exp();
            self.sum = self.sum * rescale + T::one();
            self.max = x;
            rescale
        } else {
            self.sum += (x - self.max).exp();
            T::one()
        }
    }

    pub fn max(&self) -> T {
        self.max
    }

    pub fn denominator(&self) -> T {
        self.sum
    }

    /// Normalized probability of a previously pushed value.
    #[inline]
    pub fn prob(&self, x: T) -> T {
        (x - self.max).exp() / self.sum
    }
}

/// Single-pass-normalizer softmax over a stream of scalars.
pub fn softmax_online<T: Scalar, I: IntoIterator<Item = T>>(xs: I) -> Result<Tensor<T>> {
    let mut acc = OnlineSoftmax::default();
    let values: Vec<T> = xs
        .into_iter()
        .map(|x| {
            acc.push(x);
            x
        })
        .collect();
    if values.is_empty() {
        return Err(Error::EmptySequence);
    }
    let n = values.len();
    let out = values.into_iter().map(|x| acc.prob(x)).collect();
    let t = Tensor::from_raw(vec![n], out);
    t.ensure_finite("softmax_online")?;
    Ok(t)
}
