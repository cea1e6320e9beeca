use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{config, Error, Result};
use crate::learner::{LrSchedule, ModelSpec};
use crate::policy::Downlink;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Strategy {
    /// Staleness-aware download ratios, importance-ranked upload ratios and
    /// latency-matched batch sizes.
    Caesar,
    /// No compression.
    Fedavg,
    /// One fixed ratio for every participant and both directions.
    Fic,
    /// Ratios spread over a range by participant capability.
    Cac,
}

impl Strategy {
    pub const ALL: [Strategy; 4] = [Strategy::Caesar, Strategy::Fedavg, Strategy::Fic, Strategy::Cac];

    pub fn name(self) -> &'static str {
        match self {
            Strategy::Caesar => "caesar",
            Strategy::Fedavg => "fedavg",
            Strategy::Fic => "fic",
            Strategy::Cac => "cac",
        }
    }

    pub fn downlink(self) -> Downlink {
        match self {
            Strategy::Caesar | Strategy::Fedavg => Downlink::Hybrid,
            Strategy::Fic | Strategy::Cac => Downlink::TopK,
        }
    }
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Strategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Strategy::ALL
            .into_iter()
            .find(|st| st.name() == s)
            .ok_or_else(|| config("strategy", format!("unknown strategy {s:?}")))
    }
}

/// Synthetic dataset parameters; the seed comes from the master seed.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    pub classes: usize,
    pub dim: usize,
    pub per_class: usize,
    pub class_sep: f64,
    pub noise: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PartitionConfig {
    pub heterogeneity: f64,
    /// Defaults to `2·b_max`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub min_per_device: Option<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProfileEntry {
    pub download_bw: f64,
    pub upload_bw: f64,
    pub per_sample_time: f64,
}

/// Log-uniform ranges for generated profiles.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProfileRanges {
    /// Seconds per sample, `[min, max]`.
    pub per_sample_time: [f64; 2],
    /// Bits per second, `[min, max]`, drawn separately for each direction.
    pub bandwidth: [f64; 2],
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DeviceConfig {
    pub count: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub profiles: Option<Vec<ProfileEntry>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub generate: Option<ProfileRanges>,
}

fn default_lambda() -> f64 {
    0.5
}

fn default_fic_ratio() -> f64 {
    0.35
}

fn default_cac_range() -> [f64; 2] {
    [0.1, 0.6]
}

fn default_true() -> bool {
    true
}

/// Everything that determines a run. Two runs with equal configs produce
/// byte-identical metrics.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimConfig {
    pub strategy: Strategy,
    pub model: ModelSpec,
    pub data: DataConfig,
    pub partition: PartitionConfig,
    pub devices: DeviceConfig,
    /// Participation rate.
    pub alpha: f64,
    pub local_iters: usize,
    pub theta_d_max: f64,
    pub theta_u_min: f64,
    pub theta_u_max: f64,
    #[serde(default = "default_lambda")]
    pub lambda: f64,
    /// Staleness clusters per round.
    pub clusters: usize,
    pub b_max: usize,
    /// Batch size used by the baselines (and by caesar with
    /// `adaptive_batch = false`).
    pub b_fixed: usize,
    #[serde(default = "default_true")]
    pub adaptive_batch: bool,
    #[serde(default = "default_fic_ratio")]
    pub fic_ratio: f64,
    #[serde(default = "default_cac_range")]
    pub cac_range: [f64; 2],
    pub lr: LrSchedule,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub target_accuracy: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub max_rounds: Option<u32>,
    /// Profile jitter fraction applied every 20 rounds.
    #[serde(default)]
    pub jitter: f64,
    pub seed: u64,
}

fn ratio_ok(v: f64) -> bool {
    (0.0..1.0).contains(&v)
}

impl SimConfig {
    pub fn min_per_device(&self) -> usize {
        self.partition.min_per_device.unwrap_or(2 * self.b_max)
    }

    /// Checks every field, naming the first offending key.
    pub fn validate(&self) -> Result<()> {
        self.model.validate().map_err(|e| config("model", e.to_string()))?;
        if self.model.input_dim != self.data.dim {
            return Err(config("model.input_dim", format!("{} != data.dim {}", self.model.input_dim, self.data.dim)));
        }
        if self.model.classes != self.data.classes {
            return Err(config("model.classes", format!("{} != data.classes {}", self.model.classes, self.data.classes)));
        }
        if self.data.classes == 0 || self.data.dim == 0 {
            return Err(config("data", "classes and dim must be positive"));
        }
        if self.data.per_class < 2 {
            return Err(config("data.per_class", "must be at least 2"));
        }
        if !(self.data.noise > 0.0) {
            return Err(config("data.noise", "must be positive"));
        }
        if !(self.data.class_sep >= 0.0) {
            return Err(config("data.class_sep", "must be non-negative"));
        }
        if !(self.partition.heterogeneity >= 0.0 && self.partition.heterogeneity.is_finite()) {
            return Err(config("partition.heterogeneity", "must be finite and >= 0"));
        }
        if self.partition.min_per_device == Some(0) {
            return Err(config("partition.min_per_device", "must be at least 1"));
        }
        self.validate_devices()?;
        if !(self.alpha > 0.0 && self.alpha <= 1.0) {
            return Err(config("alpha", format!("{} outside (0, 1]", self.alpha)));
        }
        if self.local_iters == 0 {
            return Err(config("local_iters", "must be at least 1"));
        }
        if !ratio_ok(self.theta_d_max) {
            return Err(config("theta_d_max", format!("{} outside [0, 1)", self.theta_d_max)));
        }
        if !ratio_ok(self.theta_u_min) {
            return Err(config("theta_u_min", format!("{} outside [0, 1)", self.theta_u_min)));
        }
        if !ratio_ok(self.theta_u_max) || self.theta_u_max < self.theta_u_min {
            return Err(config("theta_u_max", format!("{} outside [theta_u_min, 1)", self.theta_u_max)));
        }
        if !(0.0..=1.0).contains(&self.lambda) {
            return Err(config("lambda", format!("{} outside [0, 1]", self.lambda)));
        }
        if self.clusters == 0 {
            return Err(config("clusters", "must be at least 1"));
        }
        if self.b_max == 0 {
            return Err(config("b_max", "must be at least 1"));
        }
        if self.b_fixed == 0 {
            return Err(config("b_fixed", "must be at least 1"));
        }
        if !ratio_ok(self.fic_ratio) {
            return Err(config("fic_ratio", format!("{} outside [0, 1)", self.fic_ratio)));
        }
        let [lo, hi] = self.cac_range;
        if !(ratio_ok(lo) && ratio_ok(hi) && lo <= hi) {
            return Err(config("cac_range", format!("[{lo}, {hi}] not ordered within [0, 1)")));
        }
        self.lr.validate().map_err(|e| config("lr", e.to_string()))?;
        if let Some(acc) = self.target_accuracy {
            if !(0.0..=1.0).contains(&acc) {
                return Err(config("target_accuracy", format!("{acc} outside [0, 1]")));
            }
        }
        match (self.target_accuracy, self.max_rounds) {
            (None, None) => return Err(config("max_rounds", "set max_rounds and/or target_accuracy")),
            (_, Some(0)) => return Err(config("max_rounds", "must be at least 1")),
            _ => {}
        }
        if !ratio_ok(self.jitter) {
            return Err(config("jitter", format!("{} outside [0, 1)", self.jitter)));
        }
        Ok(())
    }

    fn validate_devices(&self) -> Result<()> {
        let d = &self.devices;
        if d.count == 0 {
            return Err(config("devices.count", "must be at least 1"));
        }
        match (&d.profiles, &d.generate) {
            (Some(_), Some(_)) | (None, None) => {
                Err(config("devices", "give exactly one of `profiles` or `generate`"))
            }
            (Some(table), None) => {
                if table.len() != d.count {
                    return Err(config("devices.profiles", format!("{} entries for {} devices", table.len(), d.count)));
                }
                for e in table {
                    if ![e.download_bw, e.upload_bw, e.per_sample_time].iter().all(|&v| v > 0.0 && v.is_finite()) {
                        return Err(config("devices.profiles", "rates and times must be positive"));
                    }
                }
                Ok(())
            }
            (None, Some(g)) => {
                for (key, [lo, hi]) in [
                    ("devices.generate.per_sample_time", g.per_sample_time),
                    ("devices.generate.bandwidth", g.bandwidth),
                ] {
                    if !(lo > 0.0 && lo <= hi && hi.is_finite()) {
                        return Err(config(key, format!("[{lo}, {hi}] must be positive and ordered")));
                    }
                }
                Ok(())
            }
        }
    }
}
