//! Traffic- and time-to-accuracy across finished runs.

use std::fmt::Write as _;
use std::fs;
use std::io::BufReader;
use std::path::{Path, PathBuf};

use fedsim::sim::{read_csv, MetricsRow};
use serde::Serialize;
use serde_json::Value;

use crate::Failure;

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct RunReport {
    pub run: PathBuf,
    pub strategy: Option<String>,
    pub seed: Option<u64>,
    /// First round with accuracy at or above the target; `None` if never.
    pub round: Option<u32>,
    pub traffic_bits: Option<u64>,
    pub time_s: Option<f64>,
    /// Mean waiting time over the rounds up to the target, or over all
    /// rounds when it was not reached.
    pub mean_wait_s: f64,
    pub best_accuracy: f64,
}

pub fn load_metrics(dir: &Path) -> Result<Vec<MetricsRow>, Failure> {
    let path = dir.join("metrics.csv");
    let file = fs::File::open(&path).map_err(|e| Failure::Config(format!("{}: {e}", path.display())))?;
    let rows = read_csv(BufReader::new(file)).map_err(|e| Failure::Config(format!("{}: {e}", path.display())))?;
    if rows.is_empty() {
        return Err(Failure::Config(format!("{}: no rounds recorded", path.display())));
    }
    Ok(rows)
}

pub fn report(dir: &Path, target: f64) -> Result<RunReport, Failure> {
    let rows = load_metrics(dir)?;
    let summary: Option<Value> =
        fs::read_to_string(dir.join("summary.json")).ok().and_then(|s| serde_json::from_str(&s).ok());
    let field = |k: &str| summary.as_ref().and_then(|s| s.get(k).cloned());
    let hit = rows.iter().position(|r| r.accuracy >= target);
    let upto = &rows[..hit.map_or(rows.len(), |k| k + 1)];
    Ok(RunReport {
        run: dir.to_path_buf(),
        strategy: field("strategy").and_then(|v| v.as_str().map(str::to_owned)),
        seed: field("seed").and_then(|v| v.as_u64()),
        round: hit.map(|k| rows[k].round),
        traffic_bits: hit.map(|k| rows[k].cum_traffic_bits),
        time_s: hit.map(|k| rows[k].cum_time_s),
        mean_wait_s: upto.iter().map(|r| r.avg_wait_s).sum::<f64>() / upto.len() as f64,
        best_accuracy: rows.iter().map(|r| r.accuracy).fold(0.0, f64::max),
    })
}

pub fn table(reports: &[RunReport], target: f64) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "target accuracy {target}");
    let _ = writeln!(
        out,
        "{:<28} {:>8} {:>6} {:>6} {:>16} {:>10} {:>8} {:>12} {:>11} {:>8}",
        "run", "strategy", "seed", "round", "traffic_bits", "traffic_MB", "GB", "time_s", "mean_wait_s", "best_acc"
    );
    for r in reports {
        let name = r.run.file_name().map_or_else(|| r.run.display().to_string(), |n| n.to_string_lossy().into_owned());
        let strategy = r.strategy.as_deref().unwrap_or("-");
        let seed = r.seed.map_or_else(|| "-".into(), |s| s.to_string());
        match (r.round, r.traffic_bits, r.time_s) {
            (Some(round), Some(bits), Some(time)) => {
                let mb = bits as f64 / 8e6;
                let _ = writeln!(
                    out,
                    "{name:<28} {strategy:>8} {seed:>6} {round:>6} {bits:>16} {mb:>10.3} {:>8.5} {time:>12.2} {:>11.3} {:>8.4}",
                    mb / 1e3,
                    r.mean_wait_s,
                    r.best_accuracy
                );
            }
            _ => {
                let _ = writeln!(
                    out,
                    "{name:<28} {strategy:>8} {seed:>6} {:>6} {:>16} {:>10} {:>8} {:>12} {:>11.3} {:>8.4}",
                    "-", "unreached", "-", "-", "-", r.mean_wait_s, r.best_accuracy
                );
            }
        }
    }
    out
}
