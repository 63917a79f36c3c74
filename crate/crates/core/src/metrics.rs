//! Metric records emitted by a simulation and their aggregation.
//!
//! A run's log is a sequence of [`MetricRecord`]s, one JSON object per line,
//! each tagged by a `type` field:
//!
//! | type        | emitted                                                   |
//! |-------------|-----------------------------------------------------------|
//! | `iteration` | per iteration, only when iteration logging is on          |
//! | `request`   | when a request finishes                                   |
//! | `interval`  | per fixed-width time bucket, in time order                |
//! | `failure`   | per GPU failure or rejoin event                           |
//! | `recovery`  | per world change, with its latency breakdown              |
//! | `rejected`  | when a request can never fit                              |
//! | `run`       | once, last, with run totals                               |

use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::recovery::{FailureKind, RecoveryMode};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationRecord {
    /// Completion time.
    pub time: f64,
    pub duration: f64,
    pub prefill_tokens: u32,
    pub decode_tokens: u32,
    pub batch_size: u32,
    /// Max over min per-GPU busy time within the iteration.
    pub busy_ratio: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RequestRecord {
    pub id: u64,
    pub arrival: f64,
    pub input_len: u32,
    pub output_len: u32,
    pub ttft: f64,
    pub finish: f64,
    pub tbt_max: f64,
    pub tbt_mean: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tbt: Option<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IntervalRecord {
    pub start: f64,
    pub end: f64,
    pub prefill_tokens: u64,
    pub decode_tokens: u64,
    /// Tokens per second over the bucket.
    pub throughput: f64,
    /// Busy fraction per GPU of the node, indexed by GPU id.
    pub busy: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FailureRecord {
    pub time: f64,
    pub gpu: u32,
    pub event: FailureKind,
    pub alive: u32,
    /// World size chosen by the policy; `None` when no feasible world remains.
    pub world: Option<u32>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecoveryRecord {
    pub time: f64,
    pub mode: RecoveryMode,
    pub from_world: u32,
    pub to_world: u32,
    /// Transfer plus recompute seconds.
    pub latency: f64,
    pub transfer_s: f64,
    pub recompute_s: f64,
    /// Time to bring lost state back: transfers, plus recompute when
    /// recomputation is the recovery mechanism itself.
    pub restore_s: f64,
    /// Re-prefill of KV the host backup had not caught up with yet.
    pub lag_recompute_s: f64,
    pub switch_s: f64,
    pub pcie_bytes: u64,
    pub nvlink_bytes: u64,
    pub recompute_tokens: u64,
    /// Requests reset because the new world lacked KV capacity.
    pub evicted: u32,
    /// Weights were loaded from host from scratch (no survivor state).
    pub cold_start: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RejectedRecord {
    pub time: f64,
    pub id: u64,
    pub reason: String,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub seed: u64,
    pub requests: u64,
    pub finished: u64,
    pub rejected: u64,
    pub end_time: f64,
    pub first_arrival: f64,
    /// When the waiting queue emptied after the last arrival.
    pub drain_time: f64,
    pub iterations: u64,
    /// Tokens processed by iterations (prefill and decode).
    pub processed_tokens: u64,
    /// Input plus generated tokens of finished requests that the stage computes.
    pub useful_tokens: u64,
    /// Work thrown away when requests were reset.
    pub discarded_tokens: u64,
    /// Tokens re-prefilled inside recovery pauses.
    pub recomputed_tokens: u64,
    /// `processed_tokens / (end_time - first_arrival)`.
    pub throughput: f64,
    /// Processed tokens per second over `[first_arrival, drain_time]`.
    pub sustained_throughput: f64,
    pub peak_throughput: f64,
    pub max_resident: u64,
    pub mean_busy_ratio: f64,
    pub tbt_p50: f64,
    pub tbt_p90: f64,
    pub tbt_p99: f64,
    pub tbt_mean: f64,
    /// Seconds with no feasible world.
    pub down_time: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum MetricRecord {
    Iteration(IterationRecord),
    Request(RequestRecord),
    Interval(IntervalRecord),
    Failure(FailureRecord),
    Recovery(RecoveryRecord),
    Rejected(RejectedRecord),
    Run(RunRecord),
}

impl MetricRecord {
    pub fn time(&self) -> f64 {
        match self {
            MetricRecord::Iteration(r) => r.time,
            MetricRecord::Request(r) => r.finish,
            MetricRecord::Interval(r) => r.end,
            MetricRecord::Failure(r) => r.time,
            MetricRecord::Recovery(r) => r.time,
            MetricRecord::Rejected(r) => r.time,
            MetricRecord::Run(r) => r.end_time,
        }
    }
}

pub fn write_jsonl<W: Write>(records: &[MetricRecord], mut out: W) -> Result<()> {
    for r in records {
        serde_json::to_writer(&mut out, r)?;
        out.write_all(b"\n")?;
    }
    Ok(())
}

pub fn read_jsonl<R: BufRead>(input: R) -> Result<Vec<MetricRecord>> {
    let mut out = Vec::new();
    for (i, line) in input.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let r = serde_json::from_str(&line).map_err(|e| Error::Trace { line: i + 1, message: e.to_string() })?;
        out.push(r);
    }
    Ok(out)
}

/// Nearest-rank percentile of `sorted` (ascending); 0 when empty.
pub fn percentile(sorted: &[f64], p: f64) -> f64 {
    if sorted.is_empty() {
        return 0.0;
    }
    let rank = ((p / 100.0) * sorted.len() as f64).ceil() as usize;
    sorted[rank.clamp(1, sorted.len()) - 1]
}

fn sorted(mut xs: Vec<f64>) -> Vec<f64> {
    xs.sort_by(f64::total_cmp);
    xs
}

fn mean(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        0.0
    } else {
        xs.iter().sum::<f64>() / xs.len() as f64
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LatencyStats {
    pub mean: f64,
    pub p50: f64,
    pub p90: f64,
    pub p99: f64,
    pub max: f64,
}

impl LatencyStats {
    pub fn from_samples(xs: Vec<f64>) -> Self {
        let s = sorted(xs);
        LatencyStats {
            mean: mean(&s),
            p50: percentile(&s, 50.0),
            p90: percentile(&s, 90.0),
            p99: percentile(&s, 99.0),
            max: s.last().copied().unwrap_or(0.0),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub requests: u64,
    pub finished: u64,
    pub rejected: u64,
    pub ttft: LatencyStats,
    pub tbt: LatencyStats,
    pub max_tbt: LatencyStats,
    pub throughput: f64,
    pub sustained_throughput: f64,
    pub peak_throughput: f64,
    pub recoveries: u64,
    pub mean_recovery_latency: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub warning: Option<String>,
}

/// Aggregate a metrics log. TBT percentiles come from per-request samples
/// when the log carries them and from the run record otherwise.
pub fn summarize(records: &[MetricRecord]) -> Summary {
    let mut ttft = Vec::new();
    let mut max_tbt = Vec::new();
    let mut tbt = Vec::new();
    let mut have_samples = false;
    let mut run: Option<&RunRecord> = None;
    let mut rejected = 0;
    let mut recoveries = Vec::new();
    for r in records {
        match r {
            MetricRecord::Request(q) => {
                ttft.push(q.ttft);
                max_tbt.push(q.tbt_max);
                if let Some(s) = &q.tbt {
                    have_samples = true;
                    tbt.extend_from_slice(s);
                }
            }
            MetricRecord::Rejected(_) => rejected += 1,
            MetricRecord::Recovery(c) => recoveries.push(c.latency + c.switch_s),
            MetricRecord::Run(x) => run = Some(x),
            _ => {}
        }
    }
    if records.is_empty() {
        return Summary { warning: Some("empty metrics log".into()), ..Default::default() };
    }
    let tbt = if have_samples {
        LatencyStats::from_samples(tbt)
    } else if let Some(x) = run {
        LatencyStats {
            mean: x.tbt_mean,
            p50: x.tbt_p50,
            p90: x.tbt_p90,
            p99: x.tbt_p99,
            max: max_tbt.iter().copied().fold(0.0, f64::max),
        }
    } else {
        LatencyStats::default()
    };
    let finished = ttft.len() as u64;
    Summary {
        requests: run.map_or(finished + rejected, |x| x.requests),
        finished,
        rejected,
        ttft: LatencyStats::from_samples(ttft),
        tbt,
        max_tbt: LatencyStats::from_samples(max_tbt),
        throughput: run.map_or(0.0, |x| x.throughput),
        sustained_throughput: run.map_or(0.0, |x| x.sustained_throughput),
        peak_throughput: run.map_or(0.0, |x| x.peak_throughput),
        recoveries: recoveries.len() as u64,
        mean_recovery_latency: mean(&recoveries),
        warning: if finished == 0 { Some("no finished requests".into()) } else { None },
    }
}

/// Empirical CDF points `(value, fraction <= value)` of per-request max TBT.
pub fn max_tbt_cdf(records: &[MetricRecord]) -> Vec<(f64, f64)> {
    let xs = sorted(
        records
            .iter()
            .filter_map(|r| match r {
                MetricRecord::Request(q) => Some(q.tbt_max),
                _ => None,
            })
            .collect(),
    );
    let n = xs.len() as f64;
    xs.iter().enumerate().map(|(i, x)| (*x, (i + 1) as f64 / n)).collect()
}

pub fn write_cdf_csv<W: Write>(points: &[(f64, f64)], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["max_tbt_s", "cdf"])?;
    for (x, f) in points {
        w.write_record([x.to_string(), f.to_string()])?;
    }
    w.flush()?;
    Ok(())
}
