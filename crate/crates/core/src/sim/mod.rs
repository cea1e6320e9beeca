//! Synchronous round loop over simulated devices with simulated clocks.

mod config;
mod metrics;
mod plan;

use std::collections::BTreeMap;

use rand::seq::index;
use rand::Rng;
use rayon::prelude::*;

pub use config::{DataConfig, DeviceConfig, PartitionConfig, ProfileEntry, ProfileRanges, SimConfig, Strategy};
pub use metrics::{read_csv, write_csv, MetricsRow, ParticipantRecord, RoundMetrics, CSV_HEADER};
pub use plan::{baseline_plan, caesar_plan, capability_scores, PlanInput};

use crate::codec::{decode_gradient, encode_gradient, encode_model, recover_model};
use crate::datagen::{label_distribution, partition_indices, synth_dataset, PartitionSpec, SynthSpec};
use crate::error::{usage, Error, Result};
use crate::learner::{evaluate, init_model, local_train, DatasetShard};
use crate::policy::{
    importance, kl_divergence, uniform, upload_ratios, CompressionPlan, DeviceProfile, Downlink, RoundShape,
    StalenessRecord,
};
use crate::rng::{derive_seed, SeededRng};
use crate::ParamVector;

const DATA_STREAM: u64 = 1;
const PARTITION_STREAM: u64 = 2;
const PROFILE_STREAM: u64 = 3;
const INIT_STREAM: u64 = 4;
const SELECT_STREAM: u64 = 5;
const TRAIN_STREAM: u64 = 6;
const JITTER_STREAM: u64 = 7;

/// Rounds between profile re-draws when jitter is enabled.
pub const JITTER_PERIOD: u32 = 20;

/// One simulated device.
#[derive(Clone, Debug)]
pub struct DeviceState {
    pub profile: DeviceProfile,
    pub staleness: StalenessRecord,
    /// Weights after the device's last local training; `None` until it
    /// first participates.
    pub local_model: Option<ParamVector>,
}

/// Uniform sample without replacement of `max(1, round(α·n))` ids, returned
/// in ascending order.
pub fn select_participants<R: Rng + ?Sized>(ids: &[usize], alpha: f64, rng: &mut R) -> Result<Vec<usize>> {
    if !(alpha > 0.0 && alpha <= 1.0) {
        return Err(usage(format!("participation rate {alpha} outside (0, 1]")));
    }
    if ids.is_empty() {
        return Ok(Vec::new());
    }
    let k = ((alpha * ids.len() as f64).round() as usize).clamp(1, ids.len());
    let mut out: Vec<usize> = index::sample(rng, ids.len(), k).into_iter().map(|i| ids[i]).collect();
    out.sort_unstable();
    Ok(out)
}

/// Multiplies each device's bandwidths and per-sample time, taken from
/// `base`, by independent factors uniform in `[1 - jitter, 1 + jitter]`.
pub fn jitter_profiles<R: Rng + ?Sized>(
    devices: &mut [DeviceState],
    base: &[DeviceProfile],
    rng: &mut R,
    jitter: f64,
) -> Result<()> {
    if !(0.0..1.0).contains(&jitter) {
        return Err(usage(format!("jitter {jitter} outside [0, 1)")));
    }
    if devices.len() != base.len() {
        return Err(usage("one base profile per device required"));
    }
    for (d, b) in devices.iter_mut().zip(base) {
        let mut factor = || if jitter == 0.0 { 1.0 } else { rng.random_range(1.0 - jitter..=1.0 + jitter) };
        d.profile.download_bw = b.download_bw * factor();
        d.profile.upload_bw = b.upload_bw * factor();
        d.profile.per_sample_time = b.per_sample_time * factor();
    }
    Ok(())
}

fn log_uniform<R: Rng + ?Sized>(rng: &mut R, [lo, hi]: [f64; 2]) -> f64 {
    if lo == hi {
        lo
    } else {
        rng.random_range(lo.ln()..hi.ln()).exp()
    }
}

/// Work done by one participant in one round.
struct Outcome {
    weights: ParamVector,
    gradient: ParamVector,
    download_bits: u64,
    upload_bits: u64,
}

/// A running experiment: devices, data, the global model and the clock.
#[derive(Clone, Debug)]
pub struct Simulation {
    config: SimConfig,
    devices: Vec<DeviceState>,
    base_profiles: Vec<DeviceProfile>,
    shards: Vec<DatasetShard<f32>>,
    partition: Vec<Vec<usize>>,
    test: DatasetShard<f32>,
    global: ParamVector,
    upload: BTreeMap<usize, f64>,
    shape: RoundShape,
    next_round: u32,
    cum_time_s: f64,
    cum_download_bits: u64,
    cum_upload_bits: u64,
}

impl Simulation {
    /// Builds data, partition, device profiles, the importance ranking and
    /// the initial global model, all from the master seed.
    pub fn new(config: SimConfig) -> Result<Self> {
        config.validate()?;
        let seed = config.seed;
        let synth = SynthSpec {
            classes: config.data.classes,
            dim: config.data.dim,
            per_class: config.data.per_class,
            class_sep: config.data.class_sep,
            noise: config.data.noise,
            seed: derive_seed(seed, &[DATA_STREAM]),
        };
        let (train, test) = synth_dataset::<f32>(&synth)?;
        let n = config.devices.count;
        let partition = partition_indices(
            train.labels(),
            &PartitionSpec {
                n_devices: n,
                heterogeneity: config.partition.heterogeneity,
                min_per_device: config.min_per_device(),
                seed: derive_seed(seed, &[PARTITION_STREAM]),
            },
        )
        .map_err(|e| crate::error::config("partition", e.to_string()))?;
        let shards: Vec<DatasetShard<f32>> = partition.iter().map(|rows| train.gather(rows)).collect();

        let rates: Vec<(f64, f64, f64)> = match (&config.devices.profiles, &config.devices.generate) {
            (Some(table), _) => table.iter().map(|e| (e.download_bw, e.upload_bw, e.per_sample_time)).collect(),
            (None, Some(g)) => {
                let mut rng = SeededRng::derive(seed, &[PROFILE_STREAM]);
                (0..n)
                    .map(|_| {
                        let mu = log_uniform(&mut rng, g.per_sample_time);
                        let down = log_uniform(&mut rng, g.bandwidth);
                        let up = log_uniform(&mut rng, g.bandwidth);
                        (down, up, mu)
                    })
                    .collect()
            }
            (None, None) => unreachable!("validated"),
        };

        let max_volume = shards.iter().map(DatasetShard::len).max().unwrap_or(0);
        let target = uniform(config.data.classes);
        let mut base_profiles = Vec::with_capacity(n);
        for (id, (shard, &(download_bw, upload_bw, per_sample_time))) in shards.iter().zip(&rates).enumerate() {
            let label_dist = label_distribution(shard.labels(), config.data.classes)?;
            let div = kl_divergence(&label_dist, &target)?;
            let profile = DeviceProfile {
                id,
                sample_volume: shard.len(),
                label_distribution: label_dist,
                download_bw,
                upload_bw,
                per_sample_time,
                importance: importance(shard.len(), max_volume, div, config.lambda)?,
            };
            profile.validate()?;
            base_profiles.push(profile);
        }
        let ranked: Vec<(usize, f64)> = base_profiles.iter().map(|p| (p.id, p.importance)).collect();
        let upload = upload_ratios(&ranked, config.theta_u_min, config.theta_u_max)?;

        let devices = base_profiles
            .iter()
            .map(|p| DeviceState {
                profile: p.clone(),
                staleness: StalenessRecord::default(),
                local_model: None,
            })
            .collect();
        let global = init_model(&config.model, derive_seed(seed, &[INIT_STREAM]));
        let mut shape = RoundShape::new(global.len(), config.local_iters);
        shape.downlink = config.strategy.downlink();

        Ok(Self {
            config,
            devices,
            base_profiles,
            shards,
            partition,
            test,
            global,
            upload,
            shape,
            next_round: 1,
            cum_time_s: 0.0,
            cum_download_bits: 0,
            cum_upload_bits: 0,
        })
    }

    pub fn config(&self) -> &SimConfig {
        &self.config
    }

    pub fn devices(&self) -> &[DeviceState] {
        &self.devices
    }

    /// Training-sample indices held by each device.
    pub fn partition(&self) -> &[Vec<usize>] {
        &self.partition
    }

    pub fn global_model(&self) -> &ParamVector {
        &self.global
    }

    /// Upload ratio assigned to each device from the importance ranking.
    pub fn upload_ratios(&self) -> &BTreeMap<usize, f64> {
        &self.upload
    }

    /// Round that the next call to [`Simulation::run_round`] executes.
    pub fn next_round(&self) -> u32 {
        self.next_round
    }

    pub fn test_accuracy(&self) -> Result<f64> {
        evaluate(&self.global, &self.config.model, &self.test)
    }

    /// Ratios and batch sizes for `participants` in round `t`.
    pub fn plan(&self, participants: &[usize], t: u32) -> Result<CompressionPlan> {
        let inputs: Vec<PlanInput<'_>> = participants
            .iter()
            .map(|&id| {
                let d = &self.devices[id];
                PlanInput {
                    profile: &d.profile,
                    staleness: d.staleness,
                }
            })
            .collect();
        match self.config.strategy {
            Strategy::Caesar => caesar_plan(&inputs, t, &self.upload, &self.config, &self.shape),
            other => baseline_plan(other, &inputs, &self.config, &self.shape),
        }
    }

    fn maybe_jitter(&mut self, t: u32) -> Result<()> {
        if self.config.jitter > 0.0 && (t - 1).is_multiple_of(JITTER_PERIOD) {
            let window = u64::from((t - 1) / JITTER_PERIOD);
            let mut rng = SeededRng::derive(self.config.seed, &[JITTER_STREAM, window]);
            jitter_profiles(&mut self.devices, &self.base_profiles, &mut rng, self.config.jitter)?;
        }
        Ok(())
    }

    /// Selects participants and runs one synchronous round.
    pub fn run_round(&mut self) -> Result<RoundMetrics> {
        let t = self.next_round;
        let ids: Vec<usize> = (0..self.devices.len()).collect();
        let mut rng = SeededRng::derive(self.config.seed, &[SELECT_STREAM, u64::from(t)]);
        let participants = select_participants(&ids, self.config.alpha, &mut rng)?;
        self.run_round_with(&participants)
    }

    /// Runs the next round with a fixed participant set (ascending ids).
    pub fn run_round_with(&mut self, participants: &[usize]) -> Result<RoundMetrics> {
        let t = self.next_round;
        if participants.is_empty() || participants.windows(2).any(|w| w[0] >= w[1]) {
            return Err(usage("participants must be non-empty, ascending and distinct"));
        }
        if let Some(&bad) = participants.iter().find(|&&id| id >= self.devices.len()) {
            return Err(usage(format!("no device {bad}")));
        }
        self.maybe_jitter(t)?;
        let plan = self.plan(participants, t)?;
        let outcomes = self.train_participants(&plan, t)?;

        // Uniform average of the decoded gradients, accumulated in id order.
        let mut sum = vec![0.0f64; self.global.len()];
        for o in &outcomes {
            for (s, g) in sum.iter_mut().zip(o.gradient.iter()) {
                *s += f64::from(*g);
            }
        }
        let count = outcomes.len() as f64;
        let next: Vec<f32> = self.global.iter().zip(&sum).map(|(&w, &s)| w - (s / count) as f32).collect();
        self.global = ParamVector::new(next).map_err(|_| Error::NonFinite(format!("global model diverged in round {t}")))?;

        let mut round_download_bits = 0;
        let mut round_upload_bits = 0;
        for (p, o) in plan.participants.iter().zip(outcomes) {
            let d = &mut self.devices[p.id];
            d.staleness.last_round = t;
            d.local_model = Some(o.weights);
            round_download_bits += o.download_bits;
            round_upload_bits += o.upload_bits;
        }

        let times: Vec<f64> = plan.participants.iter().map(|p| p.latency.total()).collect();
        let round_time_s = times.iter().cloned().fold(0.0, f64::max);
        let avg_wait_s = times.iter().map(|m| round_time_s - m).sum::<f64>() / times.len() as f64;
        self.cum_time_s += round_time_s;
        self.cum_download_bits += round_download_bits;
        self.cum_upload_bits += round_upload_bits;
        self.next_round += 1;

        Ok(RoundMetrics {
            round: t,
            accuracy: self.test_accuracy()?,
            round_time_s,
            cum_time_s: self.cum_time_s,
            round_download_bits,
            round_upload_bits,
            cum_download_bits: self.cum_download_bits,
            cum_upload_bits: self.cum_upload_bits,
            avg_wait_s,
            participants: plan
                .participants
                .iter()
                .zip(&times)
                .map(|(p, &time_s)| ParticipantRecord {
                    id: p.id,
                    download_ratio: p.download_ratio,
                    upload_ratio: p.upload_ratio,
                    batch_size: p.batch_size,
                    time_s,
                })
                .collect(),
        })
    }

    /// Download, local training and upload for every participant, in
    /// parallel; results come back in plan order.
    fn train_participants(&self, plan: &CompressionPlan, t: u32) -> Result<Vec<Outcome>> {
        let lr = self.config.lr.lr_at(t - 1);
        let global = &self.global;
        match self.shape.downlink {
            Downlink::Hybrid => {
                // One encoding per distinct ratio.
                let mut encoded = BTreeMap::new();
                for p in &plan.participants {
                    if let std::collections::btree_map::Entry::Vacant(e) = encoded.entry(p.download_ratio.to_bits()) {
                        e.insert(encode_model(global, p.download_ratio)?);
                    }
                }
                plan.participants
                    .par_iter()
                    .map(|p| {
                        let cm = &encoded[&p.download_ratio.to_bits()];
                        let local = self.devices[p.id].local_model.as_ref().map(|m| m.as_slice());
                        let received = recover_model(cm, local)?;
                        self.train_one(p.id, received, cm.payload_bits(), p.upload_ratio, p.batch_size, lr, t)
                    })
                    .collect()
            }
            Downlink::TopK => {
                let mut encoded = BTreeMap::new();
                for p in &plan.participants {
                    if let std::collections::btree_map::Entry::Vacant(e) = encoded.entry(p.download_ratio.to_bits()) {
                        e.insert(encode_gradient(global, p.download_ratio)?);
                    }
                }
                plan.participants
                    .par_iter()
                    .map(|p| {
                        let sg = &encoded[&p.download_ratio.to_bits()];
                        let received = decode_gradient(sg);
                        self.train_one(p.id, received, sg.payload_bits(), p.upload_ratio, p.batch_size, lr, t)
                    })
                    .collect()
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn train_one(
        &self,
        id: usize,
        received: ParamVector,
        download_bits: u64,
        upload_ratio: f64,
        batch: usize,
        lr: f64,
        t: u32,
    ) -> Result<Outcome> {
        let seed = derive_seed(self.config.seed, &[TRAIN_STREAM, id as u64, u64::from(t)]);
        let update = local_train(&received, &self.config.model, &self.shards[id], batch, self.config.local_iters, lr, seed)?;
        let sg = encode_gradient(&update.delta, upload_ratio)?;
        Ok(Outcome {
            weights: update.weights,
            gradient: decode_gradient(&sg),
            download_bits,
            upload_bits: sg.payload_bits(),
        })
    }

    /// True once the configured stop rule is met by `last`.
    pub fn should_stop(&self, last: &RoundMetrics) -> bool {
        let reached = self.config.target_accuracy.is_some_and(|acc| last.accuracy >= acc);
        let exhausted = self.config.max_rounds.is_some_and(|t| self.next_round > t);
        reached || exhausted
    }
}

/// Runs rounds from `t = 1` until the target accuracy or the round limit is
/// reached.
pub fn run_experiment(config: &SimConfig) -> Result<Vec<RoundMetrics>> {
    let mut sim = Simulation::new(config.clone())?;
    let mut series = Vec::new();
    loop {
        let m = sim.run_round()?;
        let stop = sim.should_stop(&m);
        series.push(m);
        if stop {
            return Ok(series);
        }
    }
}
