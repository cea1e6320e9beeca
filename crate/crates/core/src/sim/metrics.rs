use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const CSV_HEADER: &str = "round,accuracy,round_time_s,cum_time_s,round_traffic_bits,cum_traffic_bits,avg_wait_s";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParticipantRecord {
    pub id: usize,
    pub download_ratio: f64,
    pub upload_ratio: f64,
    pub batch_size: usize,
    /// Simulated seconds for download, training and upload.
    pub time_s: f64,
}

/// What one round cost and achieved.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RoundMetrics {
    pub round: u32,
    /// Test accuracy of the aggregated model.
    pub accuracy: f64,
    /// Duration of the round: the slowest participant's time.
    pub round_time_s: f64,
    pub cum_time_s: f64,
    pub round_download_bits: u64,
    pub round_upload_bits: u64,
    pub cum_download_bits: u64,
    pub cum_upload_bits: u64,
    /// Mean idle time of participants waiting for the slowest one.
    pub avg_wait_s: f64,
    pub participants: Vec<ParticipantRecord>,
}

impl RoundMetrics {
    pub fn round_traffic_bits(&self) -> u64 {
        self.round_download_bits + self.round_upload_bits
    }

    pub fn cum_traffic_bits(&self) -> u64 {
        self.cum_download_bits + self.cum_upload_bits
    }
}

/// One CSV row; the subset of [`RoundMetrics`] the CSV carries.
#[derive(Clone, Debug, PartialEq)]
pub struct MetricsRow {
    pub round: u32,
    pub accuracy: f64,
    pub round_time_s: f64,
    pub cum_time_s: f64,
    pub round_traffic_bits: u64,
    pub cum_traffic_bits: u64,
    pub avg_wait_s: f64,
}

impl From<&RoundMetrics> for MetricsRow {
    fn from(m: &RoundMetrics) -> Self {
        Self {
            round: m.round,
            accuracy: m.accuracy,
            round_time_s: m.round_time_s,
            cum_time_s: m.cum_time_s,
            round_traffic_bits: m.round_traffic_bits(),
            cum_traffic_bits: m.cum_traffic_bits(),
            avg_wait_s: m.avg_wait_s,
        }
    }
}

/// Writes the fixed-schema CSV. Floats use Rust's shortest representation
/// that parses back to the same value.
pub fn write_csv<W: Write>(mut out: W, series: &[RoundMetrics]) -> Result<()> {
    writeln!(out, "{CSV_HEADER}")?;
    for m in series {
        let r = MetricsRow::from(m);
        writeln!(
            out,
            "{},{:?},{:?},{:?},{},{},{:?}",
            r.round, r.accuracy, r.round_time_s, r.cum_time_s, r.round_traffic_bits, r.cum_traffic_bits, r.avg_wait_s
        )?;
    }
    Ok(())
}

pub fn read_csv<R: BufRead>(input: R) -> Result<Vec<MetricsRow>> {
    let mut lines = input.lines();
    let header = lines.next().transpose()?;
    if header.as_deref().map(str::trim) != Some(CSV_HEADER) {
        return Err(Error::Wire("missing or unexpected metrics header".into()));
    }
    let mut rows = Vec::new();
    for (k, line) in lines.enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let bad = |what: &str| Error::Wire(format!("row {}: bad {what} in {line:?}", k + 1));
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 7 {
            return Err(bad("column count"));
        }
        rows.push(MetricsRow {
            round: f[0].parse().map_err(|_| bad("round"))?,
            accuracy: f[1].parse().map_err(|_| bad("accuracy"))?,
            round_time_s: f[2].parse().map_err(|_| bad("round_time_s"))?,
            cum_time_s: f[3].parse().map_err(|_| bad("cum_time_s"))?,
            round_traffic_bits: f[4].parse().map_err(|_| bad("round_traffic_bits"))?,
            cum_traffic_bits: f[5].parse().map_err(|_| bad("cum_traffic_bits"))?,
            avg_wait_s: f[6].parse().map_err(|_| bad("avg_wait_s"))?,
        });
    }
    Ok(rows)
}
