//! Round plans: who gets which ratios and batch size.

use std::collections::BTreeMap;

use crate::error::{usage, Result};
use crate::policy::{
    batch_sizes, cluster_download_ratios, pick_fastest, predict_times, Candidate, CompressionPlan, DeviceProfile,
    ParticipantPlan, RoundShape, StalenessRecord,
};

use super::config::{SimConfig, Strategy};

/// A participant as the planner sees it.
#[derive(Clone, Copy, Debug)]
pub struct PlanInput<'a> {
    pub profile: &'a DeviceProfile,
    pub staleness: StalenessRecord,
}

fn finish(
    inputs: &[PlanInput<'_>],
    ratios: impl Fn(usize) -> (f64, f64),
    batch: impl Fn(usize) -> usize,
    shape: &RoundShape,
) -> Result<CompressionPlan> {
    let participants = inputs
        .iter()
        .map(|p| {
            let id = p.profile.id;
            let (d, u) = ratios(id);
            let b = batch(id);
            Ok(ParticipantPlan {
                id,
                download_ratio: d,
                upload_ratio: u,
                batch_size: b,
                latency: predict_times(p.profile, d, u, b, shape)?,
            })
        })
        .collect::<Result<_>>()?;
    Ok(CompressionPlan { participants })
}

/// Staleness-clustered download ratios, precomputed rank-based upload
/// ratios, and batch sizes matched to the fastest participant.
///
/// Devices that have never trained hold no local model and are kept out of
/// the clusters: they always receive the uncompressed model.
pub fn caesar_plan(
    inputs: &[PlanInput<'_>],
    t: u32,
    upload: &BTreeMap<usize, f64>,
    config: &SimConfig,
    shape: &RoundShape,
) -> Result<CompressionPlan> {
    if inputs.is_empty() {
        return Err(usage("no participants"));
    }
    let returning: Vec<(usize, u32)> = inputs
        .iter()
        .filter(|p| !p.staleness.never_participated())
        .map(|p| Ok((p.profile.id, crate::policy::staleness(t, p.staleness)?)))
        .collect::<Result<_>>()?;
    let mut download = if returning.is_empty() {
        BTreeMap::new()
    } else {
        cluster_download_ratios(&returning, t, config.clusters, config.theta_d_max)?
    };
    for p in inputs.iter().filter(|p| p.staleness.never_participated()) {
        download.insert(p.profile.id, 0.0);
    }
    let upload_of = |id: usize| upload.get(&id).copied().ok_or_else(|| usage(format!("no upload ratio for {id}")));
    for p in inputs {
        upload_of(p.profile.id)?;
    }

    let batches: BTreeMap<usize, usize> = if config.adaptive_batch {
        let candidates: Vec<Candidate<'_>> = inputs
            .iter()
            .map(|p| {
                Ok(Candidate {
                    profile: p.profile,
                    download_ratio: download[&p.profile.id],
                    upload_ratio: upload_of(p.profile.id)?,
                })
            })
            .collect::<Result<_>>()?;
        let fastest = pick_fastest(&candidates, config.b_max, shape)?;
        batch_sizes(&candidates, fastest, config.b_max, shape)?
    } else {
        inputs.iter().map(|p| (p.profile.id, config.b_fixed)).collect()
    };

    finish(inputs, |id| (download[&id], upload[&id]), |id| batches[&id], shape)
}

/// CAC capability score: `1/μ` and mean bandwidth, each scaled by its
/// maximum over the participants, summed.
pub fn capability_scores(profiles: &[&DeviceProfile]) -> Vec<f64> {
    let speed: Vec<f64> = profiles.iter().map(|p| 1.0 / p.per_sample_time).collect();
    let bw: Vec<f64> = profiles.iter().map(|p| 0.5 * (p.download_bw + p.upload_bw)).collect();
    let max_speed = speed.iter().cloned().fold(f64::MIN_POSITIVE, f64::max);
    let max_bw = bw.iter().cloned().fold(f64::MIN_POSITIVE, f64::max);
    speed.iter().zip(&bw).map(|(s, b)| s / max_speed + b / max_bw).collect()
}

/// Fixed-batch plans for the comparison strategies.
pub fn baseline_plan(
    strategy: Strategy,
    inputs: &[PlanInput<'_>],
    config: &SimConfig,
    shape: &RoundShape,
) -> Result<CompressionPlan> {
    let ratios: BTreeMap<usize, f64> = match strategy {
        Strategy::Fedavg => inputs.iter().map(|p| (p.profile.id, 0.0)).collect(),
        Strategy::Fic => inputs.iter().map(|p| (p.profile.id, config.fic_ratio)).collect(),
        Strategy::Cac => {
            let profiles: Vec<&DeviceProfile> = inputs.iter().map(|p| p.profile).collect();
            let scores = capability_scores(&profiles);
            let mut order: Vec<usize> = (0..profiles.len()).collect();
            // Strongest first; equal scores favour the lower id.
            order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(profiles[a].id.cmp(&profiles[b].id)));
            let [lo, hi] = config.cac_range;
            let span = (profiles.len().max(2) - 1) as f64;
            order
                .iter()
                .enumerate()
                .map(|(rank, &k)| (profiles[k].id, lo + (hi - lo) * rank as f64 / span))
                .collect()
        }
        Strategy::Caesar => return Err(usage("caesar is not a baseline strategy")),
    };
    finish(inputs, |id| (ratios[&id], ratios[&id]), |_| config.b_fixed, shape)
}
