//! Message codecs for the two directions of a round.
//!
//! Downlink models use a hybrid encoding: the `θ_d` fraction of elements with
//! the smallest magnitudes travel as a single sign bit each, everything else
//! travels at full precision, and the mean and max magnitude of the
//! sign-only elements ride along so the receiver can repair them against its
//! previous local model.
//!
//! Uplink gradients are Top-K sparsified: only the largest-magnitude entries
//! are sent as `(index, value)` pairs.

mod wire;

use crate::error::{usage, Error, Result};
use crate::params::{k_largest_abs_indices, k_smallest_abs_indices, Params};
use crate::scalar::Scalar;

pub use wire::{BitReader, BitWriter};

/// Header shared by both message kinds: a 32-bit length plus 32 bits of
/// ratio (model) or entry count (gradient).
pub const HEADER_BITS: u64 = 64;
/// Width of a sparse-gradient index.
pub const INDEX_BITS: u64 = 32;

// Slack for ratios such as 5/9 whose product with n lands a hair below an
// integer in binary floating point.
const ROUNDING_SLACK: f64 = 1e-9;

/// Number of elements sent as sign bits for ratio `theta` over `n` elements.
pub fn masked_count(n: usize, theta: f64) -> usize {
    ((theta * n as f64 + ROUNDING_SLACK).floor() as usize).min(n)
}

/// Number of entries a sparsified gradient keeps. Never below one for a
/// non-empty vector.
pub fn kept_count(n: usize, theta: f64) -> usize {
    if n == 0 {
        return 0;
    }
    let k = ((1.0 - theta) * n as f64 - ROUNDING_SLACK).ceil().max(0.0) as usize;
    k.clamp(1, n)
}

fn check_ratio(theta: f64, what: &str) -> Result<()> {
    if !(0.0..1.0).contains(&theta) {
        return Err(usage(format!("{what} ratio {theta} outside [0, 1)")));
    }
    Ok(())
}

/// Bits on the wire for a hybrid model of `n` elements with `masked` sign-only
/// elements and `value_bits`-wide full-precision values.
pub fn model_payload_bits_for(n: usize, masked: usize, value_bits: u32) -> u64 {
    let (n, q, vb) = (n as u64, masked as u64, u64::from(value_bits));
    HEADER_BITS + n + q + vb * (n - q) + 2 * vb
}

/// Bits on the wire for a sparse vector with `entries` pairs.
pub fn sparse_payload_bits_for(entries: usize, value_bits: u32) -> u64 {
    HEADER_BITS + entries as u64 * (INDEX_BITS + u64::from(value_bits))
}

/// Hybrid-compressed global model.
#[derive(Clone, Debug, PartialEq)]
pub struct CompressedModel<T> {
    mask: Vec<bool>,
    signs: Vec<bool>,
    full_values: Vec<T>,
    avg_abs: T,
    max_abs: T,
    ratio: f32,
}

impl<T: Scalar> CompressedModel<T> {
    pub fn len(&self) -> usize {
        self.mask.len()
    }

    pub fn is_empty(&self) -> bool {
        self.mask.is_empty()
    }

    /// `true` at positions sent as a sign bit only.
    pub fn mask(&self) -> &[bool] {
        &self.mask
    }

    /// One entry per masked position in ascending index order; `true` is `+`.
    pub fn signs(&self) -> &[bool] {
        &self.signs
    }

    pub fn full_values(&self) -> &[T] {
        &self.full_values
    }

    pub fn masked_count(&self) -> usize {
        self.signs.len()
    }

    pub fn avg_abs(&self) -> T {
        self.avg_abs
    }

    pub fn max_abs(&self) -> T {
        self.max_abs
    }

    pub fn ratio(&self) -> f32 {
        self.ratio
    }

    pub fn payload_bits(&self) -> u64 {
        model_payload_bits_for(self.len(), self.masked_count(), T::BITS)
    }

    /// Serializes to the wire layout: header, mask, signs, full values,
    /// then `(avg_abs, max_abs)`, little-endian, zero-padded to a byte.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = BitWriter::with_capacity_bits(self.payload_bits());
        w.push(self.len() as u64, 32);
        w.push(u64::from(self.ratio.to_bits()), 32);
        for &m in &self.mask {
            w.push_bit(m);
        }
        for &s in &self.signs {
            w.push_bit(s);
        }
        for &v in &self.full_values {
            w.push(v.to_raw(), T::BITS);
        }
        w.push(self.avg_abs.to_raw(), T::BITS);
        w.push(self.max_abs.to_raw(), T::BITS);
        debug_assert_eq!(w.bit_len(), self.payload_bits());
        w.into_bytes()
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = BitReader::new(bytes);
        let n = r.read(32)? as usize;
        let ratio = f32::from_bits(r.read(32)? as u32);
        if !(0.0..1.0).contains(&ratio) {
            return Err(Error::Wire(format!("ratio {ratio} outside [0, 1)")));
        }
        let mask: Vec<bool> = (0..n).map(|_| r.read_bit()).collect::<Result<_>>()?;
        let q = mask.iter().filter(|&&m| m).count();
        let signs: Vec<bool> = (0..q).map(|_| r.read_bit()).collect::<Result<_>>()?;
        let full_values: Vec<T> = (0..n - q)
            .map(|_| r.read(T::BITS).map(T::from_raw))
            .collect::<Result<_>>()?;
        let avg_abs = T::from_raw(r.read(T::BITS)?);
        let max_abs = T::from_raw(r.read(T::BITS)?);
        r.finish()?;
        if full_values.iter().any(|v| !v.is_finite()) {
            return Err(Error::Wire("non-finite full-precision value".into()));
        }
        if !(avg_abs >= T::zero() && avg_abs <= max_abs && max_abs.is_finite()) {
            return Err(Error::Wire(format!("bad summary avg={avg_abs} max={max_abs}")));
        }
        Ok(Self {
            mask,
            signs,
            full_values,
            avg_abs,
            max_abs,
            ratio,
        })
    }
}

/// Compresses `w`, sending the `⌊θ_d·n⌋` smallest-magnitude elements as
/// sign bits (zero counts as `+`).
pub fn encode_model<T: Scalar>(w: &[T], theta_d: f64) -> Result<CompressedModel<T>> {
    check_ratio(theta_d, "download")?;
    let n = w.len();
    let q = masked_count(n, theta_d);
    let masked = k_smallest_abs_indices(w, q)?;

    let mut mask = vec![false; n];
    for &i in &masked {
        mask[i] = true;
    }
    let signs: Vec<bool> = masked.iter().map(|&i| !(w[i] < T::zero())).collect();
    let full_values: Vec<T> = w
        .iter()
        .zip(&mask)
        .filter(|(_, &m)| !m)
        .map(|(&v, _)| v)
        .collect();

    let (avg_abs, max_abs) = if masked.is_empty() {
        (T::zero(), T::zero())
    } else {
        let sum: f64 = masked.iter().map(|&i| w[i].abs().as_f64()).sum();
        let max = masked.iter().map(|&i| w[i].abs()).fold(T::zero(), T::max);
        (T::lit(sum / q as f64).min(max), max)
    };

    Ok(CompressedModel {
        mask,
        signs,
        full_values,
        avg_abs,
        max_abs,
        ratio: theta_d as f32,
    })
}

/// Rebuilds a dense model from `cm`, repairing sign-only positions with the
/// receiver's previous local model.
///
/// A local value is kept when its sign matches the transmitted sign and its
/// magnitude does not exceed `max_abs`; otherwise the position becomes
/// `±avg_abs`. A local zero matches neither sign. A device without a local
/// model may only receive an uncompressed message.
pub fn recover_model<T: Scalar>(cm: &CompressedModel<T>, local: Option<&[T]>) -> Result<Params<T>> {
    let n = cm.len();
    match local {
        Some(l) if l.len() != n => {
            return Err(usage(format!("local model has {} elements, message has {n}", l.len())));
        }
        None if cm.ratio > 0.0 || cm.masked_count() > 0 => {
            return Err(Error::Protocol(
                "device without a local model must receive the full-precision model".into(),
            ));
        }
        _ => {}
    }

    let mut out = Vec::with_capacity(n);
    let mut full = cm.full_values.iter();
    let mut signs = cm.signs.iter();
    for (p, &masked) in cm.mask.iter().enumerate() {
        if !masked {
            out.push(*full.next().expect("full value per unmasked position"));
            continue;
        }
        let positive = *signs.next().expect("sign per masked position");
        // Unreachable without a local model: masked_count() > 0 was rejected above.
        let c = local.map(|l| l[p]).unwrap_or_else(T::zero);
        let sign_ok = if positive { c > T::zero() } else { c < T::zero() };
        if sign_ok && c.abs() <= cm.max_abs {
            out.push(c);
        } else if positive {
            out.push(cm.avg_abs);
        } else {
            out.push(-cm.avg_abs);
        }
    }
    Ok(Params::from_vec_unchecked(out))
}

/// Top-K sparsified vector of `(index, value)` pairs sorted by index.
#[derive(Clone, Debug, PartialEq)]
pub struct SparseGradient<T> {
    length: usize,
    entries: Vec<(u32, T)>,
    ratio: f32,
}

impl<T: Scalar> SparseGradient<T> {
    pub fn len(&self) -> usize {
        self.length
    }

    pub fn is_empty(&self) -> bool {
        self.length == 0
    }

    pub fn entries(&self) -> &[(u32, T)] {
        &self.entries
    }

    pub fn ratio(&self) -> f32 {
        self.ratio
    }

    pub fn payload_bits(&self) -> u64 {
        sparse_payload_bits_for(self.entries.len(), T::BITS)
    }

    /// Wire layout: length, entry count, then `(index, value)` pairs.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = BitWriter::with_capacity_bits(self.payload_bits());
        w.push(self.length as u64, 32);
        w.push(self.entries.len() as u64, 32);
        for &(i, v) in &self.entries {
            w.push(u64::from(i), INDEX_BITS as u32);
            w.push(v.to_raw(), T::BITS);
        }
        w.into_bytes()
    }

    /// The ratio is not carried on the wire; decoded messages report the
    /// fraction of dropped entries instead.
    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = BitReader::new(bytes);
        let length = r.read(32)? as usize;
        let count = r.read(32)? as usize;
        if count > length || (length > 0 && count == 0) {
            return Err(Error::Wire(format!("{count} entries for length {length}")));
        }
        let mut entries = Vec::with_capacity(count);
        for _ in 0..count {
            let i = r.read(INDEX_BITS as u32)? as u32;
            let v = T::from_raw(r.read(T::BITS)?);
            if (i as usize) >= length || entries.last().is_some_and(|&(j, _)| j >= i) {
                return Err(Error::Wire(format!("index {i} out of order or range")));
            }
            if !v.is_finite() {
                return Err(Error::Wire(format!("non-finite value at {i}")));
            }
            entries.push((i, v));
        }
        r.finish()?;
        let ratio = if length == 0 { 0.0 } else { 1.0 - count as f32 / length as f32 };
        Ok(Self { length, entries, ratio })
    }
}

/// Keeps the `max(1, ⌈(1-θ_u)·n⌉)` largest-magnitude entries of `g`.
pub fn encode_gradient<T: Scalar>(g: &[T], theta_u: f64) -> Result<SparseGradient<T>> {
    check_ratio(theta_u, "upload")?;
    if g.len() > u32::MAX as usize {
        return Err(usage("vector too long for 32-bit indices"));
    }
    let k = kept_count(g.len(), theta_u);
    let entries = k_largest_abs_indices(g, k)?
        .into_iter()
        .map(|i| (i as u32, g[i]))
        .collect();
    Ok(SparseGradient {
        length: g.len(),
        entries,
        ratio: theta_u as f32,
    })
}

/// Densifies `sg`, filling dropped coordinates with zero.
pub fn decode_gradient<T: Scalar>(sg: &SparseGradient<T>) -> Params<T> {
    let mut out = vec![T::zero(); sg.length];
    for &(i, v) in &sg.entries {
        out[i as usize] = v;
    }
    Params::from_vec_unchecked(out)
}

pub fn model_payload_bits<T: Scalar>(cm: &CompressedModel<T>) -> u64 {
    cm.payload_bits()
}

pub fn gradient_payload_bits<T: Scalar>(sg: &SparseGradient<T>) -> u64 {
    sg.payload_bits()
}
