//! Synthetic classification data and non-IID partitioning across devices.

use std::io::{BufRead, Write};

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Gamma, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{usage, Error, Result};
use crate::learner::DatasetShard;
use crate::rng::{derive_seed, SeededRng};
use crate::scalar::Scalar;

/// Isotropic Gaussian blobs, one per class.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthSpec {
    pub classes: usize,
    pub dim: usize,
    pub per_class: usize,
    /// Distance of every class mean from the origin.
    pub class_sep: f64,
    /// Per-coordinate standard deviation.
    pub noise: f64,
    #[serde(default)]
    pub seed: u64,
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        if self.classes == 0 || self.dim == 0 {
            return Err(usage("classes and dim must be positive"));
        }
        if self.per_class < 2 {
            return Err(usage("per_class must be at least 2 to leave a test sample"));
        }
        if !(self.noise > 0.0) || !(self.class_sep >= 0.0) {
            return Err(usage("noise must be positive and class_sep non-negative"));
        }
        Ok(())
    }

    /// Held-out samples per class: a tenth, at least one.
    pub fn test_per_class(&self) -> usize {
        (self.per_class / 10).max(1)
    }
}

/// Generates `(train, test)` shards. The split is stratified by class and
/// the training shard is shuffled.
pub fn synth_dataset<T: Scalar>(spec: &SynthSpec) -> Result<(DatasetShard<T>, DatasetShard<T>)> {
    spec.validate()?;
    let mut rng = SeededRng::derive(spec.seed, &[DATA_STREAM]);
    let centers: Vec<Vec<f64>> = (0..spec.classes)
        .map(|_| {
            let v: Vec<f64> = (0..spec.dim).map(|_| rng.sample(StandardNormal)).collect();
            let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(f64::MIN_POSITIVE);
            v.into_iter().map(|x| spec.class_sep * x / norm).collect()
        })
        .collect();

    let test_per_class = spec.test_per_class();
    let mut train: Vec<(Vec<T>, usize)> = Vec::new();
    let mut test: Vec<(Vec<T>, usize)> = Vec::new();
    for (h, center) in centers.iter().enumerate() {
        for s in 0..spec.per_class {
            let x: Vec<T> = center
                .iter()
                .map(|&c| {
                    let z: f64 = rng.sample(StandardNormal);
                    T::lit(c + spec.noise * z)
                })
                .collect();
            if s < spec.per_class - test_per_class {
                train.push((x, h));
            } else {
                test.push((x, h));
            }
        }
    }
    train.shuffle(&mut rng);
    Ok((to_shard(spec.dim, train)?, to_shard(spec.dim, test)?))
}

const DATA_STREAM: u64 = 0xda7a;
const PARTITION_STREAM: u64 = 0x9a27;

fn to_shard<T: Scalar>(dim: usize, rows: Vec<(Vec<T>, usize)>) -> Result<DatasetShard<T>> {
    let labels = rows.iter().map(|r| r.1).collect();
    let features = rows.into_iter().flat_map(|r| r.0).collect();
    DatasetShard::new(dim, features, labels)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PartitionSpec {
    pub n_devices: usize,
    /// `p = 1/δ_dir`; 0 means IID with equal volumes.
    pub heterogeneity: f64,
    pub min_per_device: usize,
    #[serde(default)]
    pub seed: u64,
}

/// Assigns every sample index in `labels` to exactly one device.
///
/// With `p > 0` each class is split over the devices by proportions drawn
/// from a symmetric Dirichlet with per-device concentration `1/p`, rounded by
/// largest remainder. Devices below `min_per_device` are then topped up one
/// sample at a time from the currently largest device.
pub fn partition_indices(labels: &[usize], spec: &PartitionSpec) -> Result<Vec<Vec<usize>>> {
    let n = spec.n_devices;
    if n == 0 || spec.min_per_device == 0 {
        return Err(usage("n_devices and min_per_device must be at least 1"));
    }
    if !(spec.heterogeneity >= 0.0 && spec.heterogeneity.is_finite()) {
        return Err(usage(format!("heterogeneity {} must be finite and >= 0", spec.heterogeneity)));
    }
    if labels.len() < n * spec.min_per_device {
        return Err(usage(format!(
            "{} samples cannot give {n} devices {} each",
            labels.len(),
            spec.min_per_device
        )));
    }
    let mut rng = SeededRng::new(derive_seed(spec.seed, &[PARTITION_STREAM]));

    let mut shards: Vec<Vec<usize>> = vec![Vec::new(); n];
    if spec.heterogeneity == 0.0 {
        let mut all: Vec<usize> = (0..labels.len()).collect();
        all.shuffle(&mut rng);
        let (base, extra) = (all.len() / n, all.len() % n);
        let mut it = all.into_iter();
        for (d, shard) in shards.iter_mut().enumerate() {
            shard.extend(it.by_ref().take(base + usize::from(d < extra)));
        }
    } else {
        let concentration = 1.0 / spec.heterogeneity;
        let gamma = Gamma::new(concentration, 1.0)
            .map_err(|e| usage(format!("bad Dirichlet concentration {concentration}: {e}")))?;
        let classes = labels.iter().max().map_or(0, |&m| m + 1);
        for h in 0..classes {
            let mut members: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == h).collect();
            members.shuffle(&mut rng);
            let draws: Vec<f64> = (0..n).map(|_| gamma.sample(&mut rng)).collect();
            let counts = largest_remainder(&draws, members.len(), &mut rng);
            let mut it = members.into_iter();
            for (shard, c) in shards.iter_mut().zip(counts) {
                shard.extend(it.by_ref().take(c));
            }
        }
        rebalance(&mut shards, spec.min_per_device);
    }
    for s in &mut shards {
        s.sort_unstable();
    }
    Ok(shards)
}

/// Integer counts summing to `total` in proportion to `weights`.
fn largest_remainder(weights: &[f64], total: usize, rng: &mut SeededRng) -> Vec<usize> {
    let sum: f64 = weights.iter().sum();
    if !(sum > 0.0 && sum.is_finite()) {
        // Every gamma draw underflowed: the class goes to one device.
        let mut counts = vec![0; weights.len()];
        counts[rng.random_range(0..weights.len())] = total;
        return counts;
    }
    let exact: Vec<f64> = weights.iter().map(|w| w / sum * total as f64).collect();
    let mut counts: Vec<usize> = exact.iter().map(|e| e.floor() as usize).collect();
    let assigned: usize = counts.iter().sum();
    let mut order: Vec<usize> = (0..weights.len()).collect();
    order.sort_by(|&a, &b| {
        let (fa, fb) = (exact[a] - exact[a].floor(), exact[b] - exact[b].floor());
        fb.total_cmp(&fa).then(a.cmp(&b))
    });
    for &d in order.iter().take(total.saturating_sub(assigned)) {
        counts[d] += 1;
    }
    counts
}

fn rebalance(shards: &mut [Vec<usize>], min: usize) {
    while let Some(short) = (0..shards.len()).find(|&d| shards[d].len() < min) {
        let donor = (0..shards.len())
            .max_by(|&a, &b| shards[a].len().cmp(&shards[b].len()).then(b.cmp(&a)))
            .expect("non-empty");
        let moved = shards[donor].pop().expect("donor holds more than the minimum");
        shards[short].push(moved);
    }
}

/// Splits `train` into per-device shards.
pub fn dirichlet_partition<T: Scalar>(train: &DatasetShard<T>, spec: &PartitionSpec) -> Result<Vec<DatasetShard<T>>> {
    let parts = partition_indices(train.labels(), spec)?;
    Ok(parts.iter().map(|rows| train.gather(rows)).collect())
}

/// Fraction of samples per label.
pub fn label_distribution(labels: &[usize], classes: usize) -> Result<Vec<f64>> {
    if labels.is_empty() {
        return Err(usage("label distribution of an empty shard"));
    }
    let mut counts = vec![0usize; classes];
    for &y in labels {
        *counts
            .get_mut(y)
            .ok_or_else(|| usage(format!("label {y} out of range for {classes} classes")))? += 1;
    }
    let m = labels.len() as f64;
    Ok(counts.into_iter().map(|c| c as f64 / m).collect())
}

/// Writes a partition as `device_id,sample_index` rows under a header.
pub fn write_partition<W: Write>(mut out: W, parts: &[Vec<usize>]) -> Result<()> {
    writeln!(out, "device_id,sample_index")?;
    for (d, rows) in parts.iter().enumerate() {
        for r in rows {
            writeln!(out, "{d},{r}")?;
        }
    }
    Ok(())
}

pub fn read_partition<R: BufRead>(input: R) -> Result<Vec<Vec<usize>>> {
    let mut parts: Vec<Vec<usize>> = Vec::new();
    for (lineno, line) in input.lines().enumerate() {
        let line = line?;
        if lineno == 0 {
            if line.trim() != "device_id,sample_index" {
                return Err(Error::Wire(format!("unexpected partition header {line:?}")));
            }
            continue;
        }
        if line.trim().is_empty() {
            continue;
        }
        let bad = || Error::Wire(format!("line {}: {line:?}", lineno + 1));
        let (d, r) = line.split_once(',').ok_or_else(bad)?;
        let d: usize = d.trim().parse().map_err(|_| bad())?;
        let r: usize = r.trim().parse().map_err(|_| bad())?;
        if parts.len() <= d {
            parts.resize(d + 1, Vec::new());
        }
        parts[d].push(r);
    }
    Ok(parts)
}
