//! Flat parameter vectors and magnitude-based selection.
//!
//! Every model, gradient and recovered model in the simulator is a
//! [`Params`]: one contiguous array holding all layers in declaration order.

use std::cmp::Ordering;
use std::ops::Deref;

use crate::error::{usage, Error, Result};
use crate::scalar::Scalar;

/// A finite, fixed-length parameter (or gradient) vector.
#[derive(Clone, Debug, PartialEq)]
pub struct Params<T>(Vec<T>);

impl<T: Scalar> Params<T> {
    /// Wraps `values`, rejecting NaN and infinities.
    pub fn new(values: Vec<T>) -> Result<Self> {
        if let Some(pos) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("element {pos} is {}", values[pos])));
        }
        Ok(Self(values))
    }

    pub fn zeros(n: usize) -> Self {
        Self(vec![T::zero(); n])
    }

    pub fn from_f64(values: &[f64]) -> Result<Self> {
        Self::new(values.iter().map(|&v| T::lit(v)).collect())
    }

    /// Caller guarantees finiteness.
    pub(crate) fn from_vec_unchecked(values: Vec<T>) -> Self {
        debug_assert!(values.iter().all(|v| v.is_finite()));
        Self(values)
    }

    pub fn as_slice(&self) -> &[T] {
        &self.0
    }

    pub fn into_vec(self) -> Vec<T> {
        self.0
    }

    /// Element-wise `self - other`.
    pub fn sub(&self, other: &Self) -> Result<Self> {
        check_len(self, other)?;
        Self::new(self.iter().zip(other.iter()).map(|(&a, &b)| a - b).collect())
    }

    /// True when both vectors have identical IEEE bit patterns.
    pub fn bit_eq(&self, other: &Self) -> bool {
        self.len() == other.len()
            && self
                .iter()
                .zip(other.iter())
                .all(|(a, b)| a.to_raw() == b.to_raw())
    }

    pub fn squared_norm(&self) -> f64 {
        self.iter().map(|v| v.as_f64() * v.as_f64()).sum()
    }
}

impl<T> Deref for Params<T> {
    type Target = [T];

    fn deref(&self) -> &[T] {
        &self.0
    }
}

fn check_len<T>(a: &[T], b: &[T]) -> Result<()> {
    if a.len() != b.len() {
        return Err(usage(format!("length mismatch: {} vs {}", a.len(), b.len())));
    }
    Ok(())
}

/// Mean squared difference `(1/n) Σ (a_k - b_k)²`, accumulated in f64.
///
/// Two empty vectors have an MSE of zero.
pub fn mse<T: Scalar>(a: &[T], b: &[T]) -> Result<f64> {
    check_len(a, b)?;
    if a.is_empty() {
        return Ok(0.0);
    }
    let sum: f64 = a
        .iter()
        .zip(b)
        .map(|(&x, &y)| {
            let d = x.as_f64() - y.as_f64();
            d * d
        })
        .sum();
    Ok(sum / a.len() as f64)
}

// Inputs are finite so partial_cmp never fails.
fn magnitude<T: Scalar>(v: &[T], a: usize, b: usize) -> Ordering {
    v[a].abs().partial_cmp(&v[b].abs()).unwrap_or(Ordering::Equal)
}

fn select<T: Scalar>(v: &[T], k: usize, cmp: impl Fn(usize, usize) -> Ordering) -> Result<Vec<usize>> {
    let n = v.len();
    if k > n {
        return Err(usage(format!("cannot select {k} of {n} elements")));
    }
    if k == 0 {
        return Ok(Vec::new());
    }
    let mut idx: Vec<usize> = (0..n).collect();
    if k < n {
        idx.select_nth_unstable_by(k - 1, |&a, &b| cmp(a, b));
        idx.truncate(k);
    }
    idx.sort_unstable();
    Ok(idx)
}

/// Indices of the `k` smallest-magnitude elements, ascending by index.
/// Equal magnitudes prefer the lower index.
pub fn k_smallest_abs_indices<T: Scalar>(v: &[T], k: usize) -> Result<Vec<usize>> {
    select(v, k, |a, b| magnitude(v, a, b).then(a.cmp(&b)))
}

/// Indices of the `k` largest-magnitude elements, ascending by index.
/// Equal magnitudes prefer the lower index.
pub fn k_largest_abs_indices<T: Scalar>(v: &[T], k: usize) -> Result<Vec<usize>> {
    select(v, k, |a, b| magnitude(v, b, a).then(a.cmp(&b)))
}
