//! Per-round control decisions: download ratios from model staleness,
//! upload ratios from data importance, and batch sizes from the latency
//! model.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::codec::{kept_count, masked_count, model_payload_bits_for, sparse_payload_bits_for};
use crate::error::{usage, Error, Result};

const FLOOR_SLACK: f64 = 1e-9;

/// Static capabilities and data properties of one device.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DeviceProfile {
    pub id: usize,
    /// Number of local training samples.
    pub sample_volume: usize,
    /// Fraction of local samples per label; sums to one.
    pub label_distribution: Vec<f64>,
    /// Bits per second.
    pub download_bw: f64,
    /// Bits per second.
    pub upload_bw: f64,
    /// Seconds to process one sample.
    pub per_sample_time: f64,
    pub importance: f64,
}

impl DeviceProfile {
    pub fn validate(&self) -> Result<()> {
        let sum: f64 = self.label_distribution.iter().sum();
        if (sum - 1.0).abs() > 1e-9 || self.label_distribution.iter().any(|&e| !(0.0..=1.0).contains(&e)) {
            return Err(usage(format!("device {}: label distribution sums to {sum}", self.id)));
        }
        for (name, v) in [
            ("download_bw", self.download_bw),
            ("upload_bw", self.upload_bw),
            ("per_sample_time", self.per_sample_time),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(usage(format!("device {}: {name} must be positive, got {v}", self.id)));
            }
        }
        if !(0.0..=1.0).contains(&self.importance) {
            return Err(usage(format!("device {}: importance {} outside [0, 1]", self.id, self.importance)));
        }
        Ok(())
    }
}

/// Round in which a device last trained; 0 means never.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct StalenessRecord {
    pub last_round: u32,
}

impl StalenessRecord {
    pub fn never_participated(&self) -> bool {
        self.last_round == 0
    }
}

/// Rounds elapsed since the device last trained.
pub fn staleness(t: u32, rec: StalenessRecord) -> Result<u32> {
    if t <= rec.last_round {
        return Err(usage(format!("round {t} is not after last participation {}", rec.last_round)));
    }
    Ok(t - rec.last_round)
}

/// `(1 - δ/t)·θ_d^max`: fresh models tolerate heavy compression, a device
/// that has never trained (δ = t) gets the model uncompressed.
pub fn download_ratio(delta: u32, t: u32, theta_d_max: f64) -> Result<f64> {
    if delta == 0 || delta > t {
        return Err(usage(format!("staleness {delta} outside [1, {t}]")));
    }
    if !(0.0..1.0).contains(&theta_d_max) {
        return Err(usage(format!("theta_d_max {theta_d_max} outside [0, 1)")));
    }
    Ok((1.0 - f64::from(delta) / f64::from(t)) * theta_d_max)
}

/// Groups participants into `k` staleness clusters and assigns each
/// cluster the download ratio of its (rounded half up) mean staleness.
///
/// Participants are ordered by `(δ, id)` and cut into contiguous groups
/// whose sizes differ by at most one, larger groups first. `k` is clamped
/// to the participant count.
pub fn cluster_download_ratios(
    participants: &[(usize, u32)],
    t: u32,
    k: usize,
    theta_d_max: f64,
) -> Result<BTreeMap<usize, f64>> {
    if participants.is_empty() {
        return Err(usage("no participants to cluster"));
    }
    if k == 0 {
        return Err(usage("cluster count must be at least 1"));
    }
    let mut sorted = participants.to_vec();
    sorted.sort_by_key(|&(id, delta)| (delta, id));
    let k = k.min(sorted.len());
    let base = sorted.len() / k;
    let extra = sorted.len() % k;

    let mut out = BTreeMap::new();
    let mut start = 0;
    for g in 0..k {
        let size = base + usize::from(g < extra);
        let group = &sorted[start..start + size];
        start += size;
        let sum: u64 = group.iter().map(|&(_, d)| u64::from(d)).sum();
        let size = size as u64;
        let mean = ((2 * sum + size) / (2 * size)) as u32;
        let ratio = download_ratio(mean, t, theta_d_max)?;
        for &(id, _) in group {
            out.insert(id, ratio);
        }
    }
    Ok(out)
}

/// `KL(Φ_i ‖ Φ_0)` in nats, with `0·ln(0/q) = 0`.
pub fn kl_divergence(p: &[f64], q: &[f64]) -> Result<f64> {
    if p.len() != q.len() {
        return Err(usage(format!("distributions of length {} and {}", p.len(), q.len())));
    }
    let mut d = 0.0;
    for (h, (&ph, &qh)) in p.iter().zip(q).enumerate() {
        if ph <= 0.0 {
            continue;
        }
        if qh <= 0.0 {
            return Err(Error::Domain(format!("reference has zero mass at label {h}")));
        }
        d += ph * (ph / qh).ln();
    }
    Ok(d.max(0.0))
}

pub fn uniform(h: usize) -> Vec<f64> {
    vec![1.0 / h as f64; h]
}

/// `λ·A_i/A_max + (1-λ)·e^{-D_i}`.
pub fn importance(volume: usize, max_volume: usize, divergence: f64, lambda: f64) -> Result<f64> {
    if max_volume == 0 || volume > max_volume {
        return Err(usage(format!("sample volume {volume} exceeds maximum {max_volume}")));
    }
    if !(0.0..=1.0).contains(&lambda) {
        return Err(usage(format!("lambda {lambda} outside [0, 1]")));
    }
    if divergence.is_nan() || divergence < 0.0 {
        return Err(usage(format!("divergence {divergence} must be non-negative")));
    }
    Ok(lambda * volume as f64 / max_volume as f64 + (1.0 - lambda) * (-divergence).exp())
}

/// Rank-based upload ratios over the whole device population: rank 0 (most
/// important, ties to the lower id) gets `θ_u^min`, each further rank adds
/// `(θ_u^max - θ_u^min)/|N|`.
pub fn upload_ratios(importances: &[(usize, f64)], theta_min: f64, theta_max: f64) -> Result<BTreeMap<usize, f64>> {
    if importances.is_empty() {
        return Err(usage("empty device set"));
    }
    if !(0.0 <= theta_min && theta_min <= theta_max && theta_max < 1.0) {
        return Err(usage(format!("upload bounds [{theta_min}, {theta_max}] not ordered within [0, 1)")));
    }
    let mut ranked = importances.to_vec();
    ranked.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    let step = (theta_max - theta_min) / ranked.len() as f64;
    Ok(ranked
        .iter()
        .enumerate()
        .map(|(rank, &(id, _))| (id, theta_min + step * rank as f64))
        .collect())
}

/// How the global model travels downstream.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Downlink {
    /// Sign bits for the smallest elements plus recovery summary.
    Hybrid,
    /// Top-K sparsified `(index, value)` pairs.
    TopK,
}

/// Per-round constants of the latency model.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RoundShape {
    pub params: usize,
    pub local_iters: usize,
    pub value_bits: u32,
    pub downlink: Downlink,
}

impl RoundShape {
    pub fn new(params: usize, local_iters: usize) -> Self {
        Self {
            params,
            local_iters,
            value_bits: 32,
            downlink: Downlink::Hybrid,
        }
    }

    pub fn download_bits(&self, theta_d: f64) -> u64 {
        match self.downlink {
            Downlink::Hybrid => model_payload_bits_for(self.params, masked_count(self.params, theta_d), self.value_bits),
            Downlink::TopK => sparse_payload_bits_for(kept_count(self.params, theta_d), self.value_bits),
        }
    }

    pub fn upload_bits(&self, theta_u: f64) -> u64 {
        sparse_payload_bits_for(kept_count(self.params, theta_u), self.value_bits)
    }
}

/// Predicted seconds spent downloading, uploading and computing.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Latency {
    pub download: f64,
    pub upload: f64,
    pub compute: f64,
}

impl Latency {
    pub fn transfer(&self) -> f64 {
        self.download + self.upload
    }

    pub fn total(&self) -> f64 {
        self.download + self.upload + self.compute
    }
}

/// Transfer times come from the encoded payload sizes; compute time is
/// `τ·b·μ`.
pub fn predict_times(profile: &DeviceProfile, theta_d: f64, theta_u: f64, batch: usize, shape: &RoundShape) -> Result<Latency> {
    if !(profile.download_bw > 0.0 && profile.upload_bw > 0.0) {
        return Err(usage(format!("device {} has zero bandwidth", profile.id)));
    }
    Ok(Latency {
        download: shape.download_bits(theta_d) as f64 / profile.download_bw,
        upload: shape.upload_bits(theta_u) as f64 / profile.upload_bw,
        compute: shape.local_iters as f64 * batch as f64 * profile.per_sample_time,
    })
}

/// A participant with its assigned compression ratios.
#[derive(Clone, Copy, Debug)]
pub struct Candidate<'a> {
    pub profile: &'a DeviceProfile,
    pub download_ratio: f64,
    pub upload_ratio: f64,
}

impl Candidate<'_> {
    fn latency(&self, batch: usize, shape: &RoundShape) -> Result<Latency> {
        predict_times(self.profile, self.download_ratio, self.upload_ratio, batch, shape)
    }
}

/// The participant that would finish first when training at `b_max`.
pub fn pick_fastest(candidates: &[Candidate<'_>], b_max: usize, shape: &RoundShape) -> Result<usize> {
    let mut best: Option<(f64, usize)> = None;
    for c in candidates {
        let m = c.latency(b_max, shape)?.total();
        let id = c.profile.id;
        if best.is_none_or(|(bm, bid)| m < bm || (m == bm && id < bid)) {
            best = Some((m, id));
        }
    }
    best.map(|(_, id)| id).ok_or_else(|| usage("no participants"))
}

/// `⌊(M_l - M_d - M_u)/(τ·μ)⌋` clamped to `[1, b_max]`.
pub fn batch_size_for(m_l: f64, transfer: f64, local_iters: usize, per_sample_time: f64, b_max: usize) -> usize {
    let raw = ((m_l - transfer) / (local_iters as f64 * per_sample_time) + FLOOR_SLACK).floor();
    if raw < 1.0 {
        1
    } else {
        (raw as usize).min(b_max)
    }
}

/// Batch sizes that let every participant finish no later than the fastest
/// one, which itself trains at `b_max`.
pub fn batch_sizes(
    candidates: &[Candidate<'_>],
    fastest: usize,
    b_max: usize,
    shape: &RoundShape,
) -> Result<BTreeMap<usize, usize>> {
    let lead = candidates
        .iter()
        .find(|c| c.profile.id == fastest)
        .ok_or_else(|| usage(format!("fastest device {fastest} is not a participant")))?;
    let m_l = lead.latency(b_max, shape)?.total();
    let mut out = BTreeMap::new();
    for c in candidates {
        let b = if c.profile.id == fastest {
            b_max
        } else {
            let transfer = c.latency(0, shape)?.transfer();
            batch_size_for(m_l, transfer, shape.local_iters, c.profile.per_sample_time, b_max)
        };
        out.insert(c.profile.id, b);
    }
    Ok(out)
}

/// Round configuration for one participant.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParticipantPlan {
    pub id: usize,
    pub download_ratio: f64,
    pub upload_ratio: f64,
    pub batch_size: usize,
    pub latency: Latency,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct CompressionPlan {
    pub participants: Vec<ParticipantPlan>,
}
