//! Failure traces, reconfiguration policies and recovery planning.

pub mod backup;
pub mod latency;
pub mod plan;

use std::collections::BTreeSet;
use std::fmt;
use std::io::Write;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use backup::{advance_backup, BackupLink, BackupState};
pub use latency::{recovery_latency, transfer_time};
pub use plan::{
    lost_weight_bytes, plan_kv_recovery, plan_weight_recovery, KvMode, KvRequestState, Medium, RecoveryPlan, Residency,
    Transfer, TransferContent, WeightMode,
};

use crate::cost::CostParams;
use crate::error::{Error, Result};
use crate::placement::{PlacementPlan, PlanProfile};
use crate::spec::{ClusterSpec, GpuId, ModelSpec};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PolicyKind {
    /// Only world sizes 1, 2, 4 and 8.
    BaselinePow2,
    /// Any world size that fits.
    Flexible,
}

impl FromStr for PolicyKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "baseline_pow2" | "baseline" => Ok(PolicyKind::BaselinePow2),
            "flexible" => Ok(PolicyKind::Flexible),
            o => Err(Error::parse("policy", format!("unknown policy `{o}`"))),
        }
    }
}

impl fmt::Display for PolicyKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            PolicyKind::BaselinePow2 => "baseline_pow2",
            PolicyKind::Flexible => "flexible",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReconfigPolicy {
    pub kind: PolicyKind,
    pub min_gpus: u32,
}

impl ReconfigPolicy {
    pub fn new(kind: PolicyKind, min_gpus: u32) -> Self {
        ReconfigPolicy { kind, min_gpus }
    }

    /// World size used when `alive` GPUs are available, if any.
    pub fn world_size(&self, alive: u32) -> Option<u32> {
        let w = match self.kind {
            PolicyKind::Flexible => alive,
            PolicyKind::BaselinePow2 => [8, 4, 2, 1].into_iter().find(|p| *p <= alive)?,
        };
        (w >= self.min_gpus.max(1) && w <= alive).then_some(w)
    }

    /// The lowest-indexed alive GPUs forming the world, if feasible.
    pub fn select_world(&self, alive: &BTreeSet<GpuId>) -> Option<BTreeSet<GpuId>> {
        let w = self.world_size(alive.len() as u32)?;
        Some(alive.iter().copied().take(w as usize).collect())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FailureKind {
    Fail,
    Recover,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FailureEvent {
    pub time: f64,
    pub kind: FailureKind,
    pub gpu: GpuId,
}

#[derive(Debug, Deserialize, Serialize)]
struct FailureRow {
    ts_s: f64,
    event: String,
    gpu_id: u32,
}

/// Read a `ts_s,event,gpu_id` failure trace.
pub fn parse_failure_trace(text: &str) -> Result<Vec<FailureEvent>> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(text.as_bytes());
    let mut out = Vec::new();
    let mut last = f64::NEG_INFINITY;
    for (i, row) in rdr.deserialize::<FailureRow>().enumerate() {
        let line = i + 2;
        let row = row.map_err(|e| Error::Trace { line, message: e.to_string() })?;
        let kind = match row.event.as_str() {
            "fail" => FailureKind::Fail,
            "recover" => FailureKind::Recover,
            o => return Err(Error::Trace { line, message: format!("unknown event `{o}`") }),
        };
        if !row.ts_s.is_finite() || row.ts_s < last {
            return Err(Error::Trace { line, message: "timestamps must be finite and sorted".into() });
        }
        last = row.ts_s;
        out.push(FailureEvent { time: row.ts_s, kind, gpu: GpuId(row.gpu_id) });
    }
    Ok(out)
}

pub fn write_failure_trace<W: Write>(events: &[FailureEvent], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for e in events {
        w.serialize(FailureRow {
            ts_s: e.time,
            event: match e.kind {
                FailureKind::Fail => "fail".into(),
                FailureKind::Recover => "recover".into(),
            },
            gpu_id: e.gpu.0,
        })?;
    }
    w.flush()?;
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AvailabilityPoint {
    pub ts_s: f64,
    pub available_gpus: u32,
}

/// Read a `ts_s,available_gpus` series.
pub fn parse_availability_series(text: &str, full_capacity: u32) -> Result<Vec<AvailabilityPoint>> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(text.as_bytes());
    let mut out: Vec<AvailabilityPoint> = Vec::new();
    for (i, row) in rdr.deserialize::<AvailabilityPoint>().enumerate() {
        let line = i + 2;
        let p = row.map_err(|e| Error::Trace { line, message: e.to_string() })?;
        if p.available_gpus > full_capacity {
            return Err(Error::Trace {
                line,
                message: format!("{} exceeds capacity {full_capacity}", p.available_gpus),
            });
        }
        if !p.ts_s.is_finite() || out.last().is_some_and(|q| p.ts_s < q.ts_s) {
            return Err(Error::Trace { line, message: "timestamps must be finite and sorted".into() });
        }
        out.push(p);
    }
    Ok(out)
}

/// Turn an availability series into fail/recover events. The series starts
/// from full capacity; each change of `k` becomes `k` events at that
/// timestamp, each picking a GPU uniformly from the alive (or failed) set.
pub fn parse_availability_trace(text: &str, full_capacity: u32, seed: u64) -> Result<Vec<FailureEvent>> {
    let series = parse_availability_series(text, full_capacity)?;
    Ok(availability_events(&series, full_capacity, seed))
}

pub fn availability_events(series: &[AvailabilityPoint], full_capacity: u32, seed: u64) -> Vec<FailureEvent> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut alive: BTreeSet<GpuId> = (0..full_capacity).map(GpuId).collect();
    let mut failed: BTreeSet<GpuId> = BTreeSet::new();
    let mut out = Vec::new();
    for p in series {
        while (alive.len() as u32) > p.available_gpus {
            let g = *alive.iter().nth(rng.random_range(0..alive.len())).expect("nonempty");
            alive.remove(&g);
            failed.insert(g);
            out.push(FailureEvent { time: p.ts_s, kind: FailureKind::Fail, gpu: g });
        }
        while (alive.len() as u32) < p.available_gpus {
            let g = *failed.iter().nth(rng.random_range(0..failed.len())).expect("nonempty");
            failed.remove(&g);
            alive.insert(g);
            out.push(FailureEvent { time: p.ts_s, kind: FailureKind::Recover, gpu: g });
        }
    }
    out
}

/// The four end-to-end recovery strategies compared in the evaluation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RecoveryMode {
    /// Recompute lost KV, reshard weights from host.
    Recompute,
    /// Restore KV from host backup, reshard weights from host.
    Host,
    /// Restore KV from host backup, fetch only lost weights.
    Full,
    /// Metadata only; no data moves.
    Oracle,
}

impl RecoveryMode {
    pub const ALL: [RecoveryMode; 4] =
        [RecoveryMode::Recompute, RecoveryMode::Host, RecoveryMode::Full, RecoveryMode::Oracle];

    pub fn weight_mode(self) -> WeightMode {
        match self {
            RecoveryMode::Recompute | RecoveryMode::Host => WeightMode::NaiveReshard,
            RecoveryMode::Full | RecoveryMode::Oracle => WeightMode::OnDemand,
        }
    }

    pub fn kv_mode(self) -> KvMode {
        match self {
            RecoveryMode::Recompute => KvMode::Recompute,
            _ => KvMode::HostRestore,
        }
    }

    pub fn needs_backup(self) -> bool {
        matches!(self, RecoveryMode::Host | RecoveryMode::Full)
    }
}

impl FromStr for RecoveryMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "recompute" => Ok(RecoveryMode::Recompute),
            "host" => Ok(RecoveryMode::Host),
            "full" => Ok(RecoveryMode::Full),
            "oracle" => Ok(RecoveryMode::Oracle),
            o => Err(Error::parse("mode", format!("unknown recovery mode `{o}`"))),
        }
    }
}

impl fmt::Display for RecoveryMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            RecoveryMode::Recompute => "recompute",
            RecoveryMode::Host => "host",
            RecoveryMode::Full => "full",
            RecoveryMode::Oracle => "oracle",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RecoveryOutcome {
    pub mode: RecoveryMode,
    pub new_plan: PlacementPlan,
    pub plan: RecoveryPlan,
    pub transfer_seconds: f64,
    pub recompute_seconds: f64,
    pub latency: f64,
}

/// Everything needed to plan one world change.
pub struct RecoveryInputs<'a> {
    pub model: &'a ModelSpec,
    pub cluster: &'a ClusterSpec,
    pub params: &'a CostParams,
    pub old: &'a PlacementPlan,
    pub new_alive: &'a BTreeSet<GpuId>,
    pub requests: &'a [KvRequestState],
    pub backup: Option<&'a BackupState>,
    pub token_budget: u32,
}

/// Plan weights and KV for a world change and compute its latency. The
/// requests' `new_rank` must refer to the new world; use
/// [`reroute_for`] to fill it.
pub fn plan_recovery(inputs: &RecoveryInputs<'_>, mode: RecoveryMode) -> Result<RecoveryOutcome> {
    let (new_plan, weights) = plan_weight_recovery(inputs.model, inputs.old, inputs.new_alive, mode.weight_mode())?;
    if mode == RecoveryMode::Oracle {
        let plan = RecoveryPlan { completion_time: inputs.params.metadata_latency, ..Default::default() };
        return Ok(RecoveryOutcome {
            mode,
            new_plan,
            plan,
            transfer_seconds: 0.0,
            recompute_seconds: 0.0,
            latency: inputs.params.metadata_latency,
        });
    }
    let kv = plan_kv_recovery(inputs.model, inputs.old, &new_plan, inputs.requests, inputs.backup, mode.kv_mode())?;
    let mut plan = weights.merge(kv);
    let profile = PlanProfile::new(&new_plan);
    let transfer_seconds = transfer_time(&plan, inputs.cluster);
    let recompute_seconds =
        latency::recompute_time(&plan.recompute_tokens, &profile, inputs.params, inputs.token_budget);
    plan.completion_time = transfer_seconds + recompute_seconds;
    Ok(RecoveryOutcome { mode, latency: plan.completion_time, new_plan, plan, transfer_seconds, recompute_seconds })
}

/// Keep each request's replicated-head rank if it survives; otherwise move
/// it to the new rank with the fewest reassigned requests (lowest id ties).
pub fn reroute_for(requests: &mut [KvRequestState], new_world: &[GpuId]) {
    let mut counts: Vec<u64> = vec![0; new_world.len()];
    for r in requests.iter() {
        if let Some(i) = r.old_rank.and_then(|g| new_world.binary_search(&g).ok()) {
            counts[i] += 1;
        }
    }
    for r in requests.iter_mut() {
        r.new_rank = match r.old_rank.filter(|g| new_world.binary_search(g).is_ok()) {
            Some(g) => Some(g),
            None if new_world.is_empty() => None,
            None => {
                let i = (0..new_world.len()).min_by_key(|i| (counts[*i], *i)).expect("nonempty");
                counts[i] += 1;
                Some(new_world[i])
            }
        };
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn policy_tables() {
        let dense = |k| ReconfigPolicy::new(k, 3);
        let moe = |k| ReconfigPolicy::new(k, 5);
        let row = |p: ReconfigPolicy| (1..=8).map(|a| p.world_size(a)).collect::<Vec<_>>();
        assert_eq!(
            row(dense(PolicyKind::BaselinePow2)),
            vec![None, None, None, Some(4), Some(4), Some(4), Some(4), Some(8)]
        );
        assert_eq!(
            row(dense(PolicyKind::Flexible)),
            vec![None, None, Some(3), Some(4), Some(5), Some(6), Some(7), Some(8)]
        );
        assert_eq!(row(moe(PolicyKind::BaselinePow2)), vec![None, None, None, None, None, None, None, Some(8)]);
        assert_eq!(row(moe(PolicyKind::Flexible)), vec![None, None, None, None, Some(5), Some(6), Some(7), Some(8)]);
    }

    #[test]
    fn select_world_takes_lowest_alive() {
        let p = ReconfigPolicy::new(PolicyKind::BaselinePow2, 3);
        let alive: BTreeSet<GpuId> = [0, 2, 3, 5, 6, 7].into_iter().map(GpuId).collect();
        let w = p.select_world(&alive).unwrap();
        assert_eq!(w, [0, 2, 3, 5].into_iter().map(GpuId).collect());
    }

    #[test]
    fn availability_series_to_events() {
        let ev = parse_availability_trace("ts_s,available_gpus\n0,64\n10,63\n20,64\n", 64, 1).unwrap();
        assert_eq!(ev.len(), 2);
        assert_eq!(ev[0].kind, FailureKind::Fail);
        assert_eq!(ev[1].kind, FailureKind::Recover);
        assert_eq!(ev[0].gpu, ev[1].gpu);
        assert!(parse_availability_trace("ts_s,available_gpus\n0,64\n5,64\n", 64, 1).unwrap().is_empty());
        let text = "ts_s,available_gpus\n0,60\n3,61\n9,57\n";
        assert_eq!(parse_availability_trace(text, 64, 7).unwrap(), parse_availability_trace(text, 64, 7).unwrap());
        let jump = parse_availability_trace("ts_s,available_gpus\n4,61\n", 64, 0).unwrap();
        assert_eq!(jump.len(), 3);
        assert!(jump.iter().all(|e| e.time == 4.0));
        assert!(parse_availability_trace("ts_s,available_gpus\n0,65\n", 64, 0).is_err());
        assert!(parse_availability_trace("ts_s,available_gpus\n5,3\n1,3\n", 64, 0).is_err());
    }

    #[test]
    fn failure_trace_round_trip() {
        let text = "ts_s,event,gpu_id\n1.5,fail,3\n9,recover,3\n";
        let ev = parse_failure_trace(text).unwrap();
        let mut buf = Vec::new();
        write_failure_trace(&ev, &mut buf).unwrap();
        assert_eq!(parse_failure_trace(std::str::from_utf8(&buf).unwrap()).unwrap(), ev);
        let bad = parse_failure_trace("ts_s,event,gpu_id\n1,explode,0\n");
        assert!(matches!(bad, Err(Error::Trace { line: 2, .. })));
    }

    #[test]
    fn reroute_keeps_survivors() {
        let mut reqs: Vec<KvRequestState> = (0..4)
            .map(|i| KvRequestState { id: i, kv_tokens: 1, old_rank: Some(GpuId(i as u32)), new_rank: None })
            .collect();
        reroute_for(&mut reqs, &[GpuId(0), GpuId(1), GpuId(2)]);
        let got: Vec<u32> = reqs.iter().map(|r| r.new_rank.unwrap().0).collect();
        assert_eq!(got, vec![0, 1, 2, 0]);
    }
}
