//! Experiment files: a JSON `SimConfig` plus output location and seeds.

use std::fs;
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use fedsim::sim::{run_experiment, write_csv, RoundMetrics, SimConfig, Simulation, Strategy};
use fedsim::datagen::write_partition;
use serde::Serialize;
use serde_json::{Map, Value};

use crate::Failure;

/// A parsed experiment: the resolved config for every seed and where to
/// write results.
#[derive(Debug)]
pub struct Experiment {
    pub base: SimConfig,
    pub seeds: Vec<u64>,
    pub output: Option<PathBuf>,
}

/// Command-line values that take precedence over the file.
#[derive(Debug, Default)]
pub struct Overrides {
    pub strategy: Option<String>,
    pub seed: Option<u64>,
}

fn invalid(msg: impl Into<String>) -> Failure {
    Failure::Config(msg.into())
}

/// Reads and validates an experiment file. Besides the `SimConfig` keys it
/// accepts `output` (a directory) and `seeds` (a list that replaces `seed`).
pub fn load(path: &Path, overrides: &Overrides) -> Result<Experiment, Failure> {
    let text = fs::read_to_string(path).map_err(|e| invalid(format!("{}: {e}", path.display())))?;
    let value: Value = serde_json::from_str(&text).map_err(|e| invalid(format!("{}: {e}", path.display())))?;
    parse(value, overrides)
}

pub fn parse(value: Value, overrides: &Overrides) -> Result<Experiment, Failure> {
    let Value::Object(mut doc) = value else {
        return Err(invalid("experiment file must be a JSON object"));
    };
    let output = match doc.remove("output") {
        None => None,
        Some(Value::String(s)) => Some(PathBuf::from(s)),
        Some(_) => return Err(invalid("invalid value for `output`: expected a path string")),
    };
    let mut seeds: Option<Vec<u64>> = match doc.remove("seeds") {
        None => None,
        Some(v) => Some(
            serde_json::from_value(v).map_err(|e| invalid(format!("invalid value for `seeds`: {e}")))?,
        ),
    };
    if let Some(s) = &overrides.strategy {
        let st: Strategy = s.parse().map_err(|e: fedsim::Error| invalid(e.to_string()))?;
        doc.insert("strategy".into(), Value::String(st.name().into()));
    }
    if let Some(seed) = overrides.seed {
        seeds = Some(vec![seed]);
    }
    if let Some(first) = seeds.as_ref().and_then(|s| s.first()) {
        doc.entry("seed").or_insert(Value::from(*first));
    }
    let base = config_from(doc)?;
    let seeds = match seeds {
        Some(s) if s.is_empty() => return Err(invalid("invalid value for `seeds`: list is empty")),
        Some(s) => s,
        None => vec![base.seed],
    };
    for &seed in &seeds {
        SimConfig { seed, ..base.clone() }.validate().map_err(|e| invalid(e.to_string()))?;
    }
    Ok(Experiment { base, seeds, output })
}

fn config_from(doc: Map<String, Value>) -> Result<SimConfig, Failure> {
    let config: SimConfig = serde_json::from_value(Value::Object(doc)).map_err(|e| invalid(e.to_string()))?;
    config.validate().map_err(|e| invalid(e.to_string()))?;
    Ok(config)
}

/// Contents of `summary.json`.
#[derive(Debug, Serialize)]
pub struct Summary<'a> {
    pub strategy: Strategy,
    pub seed: u64,
    pub rounds: usize,
    pub final_accuracy: f64,
    pub best_accuracy: f64,
    pub cum_traffic_bits: u64,
    pub cum_download_bits: u64,
    pub cum_upload_bits: u64,
    pub cum_time_s: f64,
    pub mean_wait_s: f64,
    pub config: &'a SimConfig,
}

impl<'a> Summary<'a> {
    pub fn new(config: &'a SimConfig, series: &[RoundMetrics]) -> Self {
        let last = series.last();
        Self {
            strategy: config.strategy,
            seed: config.seed,
            rounds: series.len(),
            final_accuracy: last.map_or(0.0, |m| m.accuracy),
            best_accuracy: series.iter().map(|m| m.accuracy).fold(0.0, f64::max),
            cum_traffic_bits: last.map_or(0, RoundMetrics::cum_traffic_bits),
            cum_download_bits: last.map_or(0, |m| m.cum_download_bits),
            cum_upload_bits: last.map_or(0, |m| m.cum_upload_bits),
            cum_time_s: last.map_or(0.0, |m| m.cum_time_s),
            mean_wait_s: series.iter().map(|m| m.avg_wait_s).sum::<f64>() / series.len().max(1) as f64,
            config,
        }
    }
}

pub fn run_dir_name(config: &SimConfig) -> String {
    format!("{}-seed{}", config.strategy, config.seed)
}

fn runtime(e: impl std::fmt::Display) -> Failure {
    Failure::Runtime(e.to_string())
}

/// Runs one seed and writes `metrics.csv`, `partition.csv` and
/// `summary.json` into `dir`.
pub fn run_one(config: &SimConfig, dir: &Path) -> Result<Vec<RoundMetrics>, Failure> {
    let series = run_experiment(config).map_err(runtime)?;
    fs::create_dir_all(dir).map_err(runtime)?;
    let csv = fs::File::create(dir.join("metrics.csv")).map_err(runtime)?;
    write_csv(BufWriter::new(csv), &series).map_err(runtime)?;

    let sim = Simulation::new(config.clone()).map_err(runtime)?;
    let part = fs::File::create(dir.join("partition.csv")).map_err(runtime)?;
    write_partition(BufWriter::new(part), sim.partition()).map_err(runtime)?;

    let summary = Summary::new(config, &series);
    let json = serde_json::to_string_pretty(&summary).map_err(runtime)?;
    fs::write(dir.join("summary.json"), json + "\n").map_err(runtime)?;
    Ok(series)
}
