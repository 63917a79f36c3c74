//! Discrete-event simulation of one serving node.
//!
//! The loop keeps a min-heap of events ordered by `(time, kind, insertion)`.
//! Iterations are timed with the per-layer roofline model in [`crate::cost`].
//! A GPU failure discards the in-flight iteration, picks a new world through
//! the reconfiguration policy, plans recovery and pauses serving for the
//! recovery latency plus the configured switch latency.

use std::cmp::{Ordering, Reverse};
use std::collections::{BTreeMap, BTreeSet, BinaryHeap, VecDeque};
use std::fmt;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::cost::{iteration_profile, CostParams, WorkItem};
use crate::error::{Error, Result};
use crate::metrics::{
    percentile, FailureRecord, IntervalRecord, IterationRecord, LatencyStats, MetricRecord, RecoveryRecord,
    RejectedRecord, RequestRecord, RunRecord,
};
use crate::placement::{default_num_shards, placement, PlacementMode, PlacementPlan, PlanProfile};
use crate::recovery::{
    plan_recovery, reroute_for, BackupLink, BackupState, FailureEvent, FailureKind, KvRequestState, Medium, PolicyKind,
    ReconfigPolicy, RecoveryInputs, RecoveryMode, WeightMode,
};
use crate::request::Request;
use crate::scheduler::{next_prefill_batch, token_cost, PrefillBatch, SchedulerMode, SchedulerState};
use crate::spec::{min_feasible_gpus, ClusterSpec, GpuId, HardwareSpec, ModelSpec};
use crate::trace::TraceRequest;

/// Which phases of inference the node runs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    /// Prefill and decode interleaved with continuous batching.
    Mixed,
    /// A prefill instance: requests leave once their prompt is processed.
    PrefillOnly,
    /// A decode instance: requests arrive with their KV already computed.
    DecodeOnly,
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Stage::Mixed => "mixed",
            Stage::PrefillOnly => "prefill_only",
            Stage::DecodeOnly => "decode_only",
        })
    }
}

impl FromStr for Stage {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.replace('-', "_").as_str() {
            "mixed" => Ok(Stage::Mixed),
            "prefill_only" | "prefill" => Ok(Stage::PrefillOnly),
            "decode_only" | "decode" => Ok(Stage::DecodeOnly),
            _ => Err(Error::parse("stage", format!("unknown stage `{s}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimConfig {
    pub model: ModelSpec,
    pub cluster: ClusterSpec,
    pub hardware: HardwareSpec,
    pub placement: PlacementMode,
    pub scheduler: SchedulerMode,
    pub policy: ReconfigPolicy,
    pub recovery: RecoveryMode,
    pub stage: Stage,
    /// Tokens per iteration, decode tokens included.
    pub token_budget: u32,
    pub max_resident: Option<u32>,
    /// GPUs alive at time zero (the lowest ids); all of the node by default.
    pub initial_alive: Option<u32>,
    pub num_shards: Option<u32>,
    /// Width of throughput buckets, seconds.
    pub interval: f64,
    /// Share of PCIe bandwidth used by background KV backup.
    pub backup_bw_fraction: f64,
    pub page_tokens: u64,
    /// Overrides the cluster's switch latency.
    pub switch_latency: Option<f64>,
    pub record_iterations: bool,
    /// Keep per-token TBT samples in request records.
    pub record_tbt: bool,
    /// Track all TBT samples for run-level percentiles.
    pub tbt_stats: bool,
    /// End the run once every arrival has been admitted.
    pub stop_at_drain: bool,
    pub seed: u64,
}

impl SimConfig {
    /// Hybrid placement, adaptive scheduling, flexible reconfiguration and
    /// full recovery on a mixed-stage node.
    pub fn new(model: ModelSpec, cluster: ClusterSpec) -> Self {
        let min = min_feasible_gpus(&model, &cluster, 0).unwrap_or(cluster.num_gpus);
        SimConfig {
            model,
            cluster,
            hardware: HardwareSpec::default(),
            placement: PlacementMode::Hybrid,
            scheduler: SchedulerMode::Adaptive,
            policy: ReconfigPolicy::new(PolicyKind::Flexible, min),
            recovery: RecoveryMode::Full,
            stage: Stage::Mixed,
            token_budget: 2048,
            max_resident: None,
            initial_alive: None,
            num_shards: None,
            interval: 1.0,
            backup_bw_fraction: 0.1,
            page_tokens: 16,
            switch_latency: None,
            record_iterations: false,
            record_tbt: false,
            tbt_stats: true,
            stop_at_drain: false,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.cluster.validate()?;
        if self.token_budget == 0 {
            return Err(Error::validation("token_budget", "must be at least 1"));
        }
        if !(self.interval > 0.0) {
            return Err(Error::validation("interval", "must be positive"));
        }
        if !(self.backup_bw_fraction > 0.0 && self.backup_bw_fraction <= 1.0) {
            return Err(Error::validation("backup_bw_fraction", "must be in (0, 1]"));
        }
        if self.initial_alive.is_some_and(|a| a > self.cluster.num_gpus) {
            return Err(Error::validation("initial_alive", "exceeds the node's GPU count"));
        }
        Ok(())
    }

    fn switch(&self) -> f64 {
        self.switch_latency.unwrap_or(self.cluster.switch_latency)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimOutput {
    /// Every record in emission order; the run record is last.
    pub records: Vec<MetricRecord>,
    pub run: RunRecord,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
enum Kind {
    Failure,
    Rejoin,
    ReconfigDone,
    IterationDone,
    Arrival,
}

#[derive(Debug, Clone, Copy)]
struct Event {
    time: f64,
    kind: Kind,
    seq: u64,
    /// GPU id, epoch or request index depending on `kind`.
    payload: u64,
}

impl PartialEq for Event {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other) == Ordering::Equal
    }
}
impl Eq for Event {}
impl PartialOrd for Event {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}
impl Ord for Event {
    fn cmp(&self, other: &Self) -> Ordering {
        self.time.total_cmp(&other.time).then(self.kind.cmp(&other.kind)).then(self.seq.cmp(&other.seq))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Phase {
    Running,
    Reconfiguring,
    Down,
}

struct InFlight {
    start: f64,
    batch: PrefillBatch,
    decode: Vec<u64>,
    busy_ratio: f64,
}

#[derive(Default)]
struct Bucket {
    prefill: u64,
    decode: u64,
    busy: Vec<f64>,
}

/// Per-request token stream statistics.
#[derive(Debug, Clone, Copy, Default)]
struct Stream {
    last: f64,
    max: f64,
    sum: f64,
    count: u64,
}

struct Sim<'a> {
    cfg: &'a SimConfig,
    params: CostParams,
    kappa: f64,
    num_shards: u32,
    now: f64,
    heap: BinaryHeap<Reverse<Event>>,
    seq: u64,
    requests: Vec<Request>,
    streams: Vec<Stream>,
    arrived: usize,
    waiting: VecDeque<u64>,
    /// Admitted requests in admission order.
    resident: Vec<u64>,
    alive: BTreeSet<GpuId>,
    phase: Phase,
    plan: Option<PlacementPlan>,
    profile: Option<PlanProfile>,
    /// World being switched to while reconfiguring.
    target: Option<PlacementPlan>,
    capacity: Vec<u64>,
    used: Vec<u64>,
    sched: SchedulerState,
    backup: BackupState,
    epoch: u64,
    in_flight: Option<InFlight>,
    records: Vec<MetricRecord>,
    buckets: BTreeMap<u64, Bucket>,
    next_bucket: u64,
    run: RunRecord,
    tbt_all: Vec<f64>,
    busy_ratio_sum: f64,
    busy_ratio_n: u64,
    processed_at_drain: Option<u64>,
    down_since: Option<f64>,
    done: usize,
}

impl<'a> Sim<'a> {
    fn new(cfg: &'a SimConfig, trace: &[TraceRequest]) -> Self {
        let num_shards = cfg.num_shards.unwrap_or_else(|| default_num_shards(&cfg.model));
        let params = CostParams::derive(&cfg.model, &cfg.cluster, &cfg.hardware, num_shards);
        let kappa = params.kappa();
        let requests = trace
            .iter()
            .enumerate()
            .map(|(i, r)| Request::new(i as u64, r.arrival, r.input_len, r.output_len))
            .collect();
        Sim {
            cfg,
            params,
            kappa,
            num_shards,
            now: 0.0,
            heap: BinaryHeap::new(),
            seq: 0,
            requests,
            streams: vec![Stream::default(); trace.len()],
            arrived: 0,
            waiting: VecDeque::new(),
            resident: Vec::new(),
            alive: BTreeSet::new(),
            phase: Phase::Down,
            plan: None,
            profile: None,
            target: None,
            capacity: Vec::new(),
            used: Vec::new(),
            sched: SchedulerState::new(cfg.token_budget, [], kappa),
            backup: BackupState::new(cfg.recovery.needs_backup(), cfg.page_tokens),
            epoch: 0,
            in_flight: None,
            records: Vec::new(),
            buckets: BTreeMap::new(),
            next_bucket: 0,
            run: RunRecord { seed: cfg.seed, requests: trace.len() as u64, ..Default::default() },
            tbt_all: Vec::new(),
            busy_ratio_sum: 0.0,
            busy_ratio_n: 0,
            processed_at_drain: None,
            down_since: None,
            done: 0,
        }
    }

    fn push(&mut self, time: f64, kind: Kind, payload: u64) {
        self.seq += 1;
        self.heap.push(Reverse(Event { time, kind, seq: self.seq, payload }));
    }

    fn rank(&self, gpu: GpuId) -> usize {
        self.profile.as_ref().and_then(|p| p.rank_of(gpu)).expect("routed rank in world")
    }

    fn reserve_tokens(&self, r: &Request) -> u64 {
        match self.cfg.stage {
            Stage::PrefillOnly => r.input_len as u64,
            _ => r.input_len as u64 + r.output_len as u64,
        }
    }

    /// KV bytes reserved on each rank of `profile` for a request routed to
    /// rank `routed`.
    fn need(&self, profile: &PlanProfile, tokens: u64, routed: usize) -> Vec<u64> {
        let per = self.cfg.model.kv_bytes_per_head_token() * tokens;
        (0..profile.world.len())
            .map(|r| {
                let hl = profile.tp_head_layers[r] + if r == routed { profile.dp_head_layers } else { 0 };
                hl * per
            })
            .collect()
    }

    fn capacities(&self, plan: &PlacementPlan) -> Vec<u64> {
        plan.world
            .iter()
            .map(|g| self.cfg.cluster.hbm_bytes_per_gpu.saturating_sub(plan.weight_bytes(&self.cfg.model, *g)))
            .collect()
    }

    /// Make `plan` current and rebuild everything derived from it.
    fn install(&mut self, plan: PlacementPlan) {
        let profile = PlanProfile::new(&plan);
        self.capacity = self.capacities(&plan);
        self.used = vec![0; plan.world.len()];
        let mut sched = SchedulerState::new(self.cfg.token_budget, plan.world.iter().copied(), self.kappa);
        for id in &self.resident {
            let r = &self.requests[*id as usize];
            let g = r.dp_rank.expect("resident request is routed");
            let rank = profile.rank_of(g).expect("routed rank in world");
            let need = self.need(&profile, self.reserve_tokens(r), rank);
            for (u, n) in self.used.iter_mut().zip(need) {
                *u += n;
            }
            sched.enqueue(g, r).expect("rank present");
        }
        self.sched = sched;
        self.plan = Some(plan);
        self.profile = Some(profile);
        self.refresh_decode_loads();
    }

    fn refresh_decode_loads(&mut self) {
        let mut loads: BTreeMap<GpuId, f64> = self.sched.rank_set.iter().map(|g| (*g, 0.0)).collect();
        for id in &self.resident {
            let r = &self.requests[*id as usize];
            if r.prefill_done() && !r.finished() {
                if let Some(l) = r.dp_rank.and_then(|g| loads.get_mut(&g)) {
                    *l += token_cost(0, r.kv_tokens() as u32, self.kappa);
                }
            }
        }
        for (g, l) in loads {
            self.sched.set_decode_load(g, l);
        }
    }

    // ---- interval accounting ----

    fn bucket(&mut self, k: u64) -> &mut Bucket {
        let n = self.cfg.cluster.num_gpus as usize;
        self.buckets.entry(k).or_insert_with(|| Bucket { busy: vec![0.0; n], ..Default::default() })
    }

    fn add_busy(&mut self, start: f64, end: f64, busy: &[f64], world: &[GpuId]) {
        let dt = self.cfg.interval;
        if end <= start {
            return;
        }
        let (k0, k1) = ((start / dt) as u64, (end / dt) as u64);
        for k in k0..=k1 {
            let lo = start.max(k as f64 * dt);
            let hi = end.min((k + 1) as f64 * dt);
            if hi <= lo {
                continue;
            }
            let share = (hi - lo) / (end - start);
            let b = self.bucket(k);
            for (g, t) in world.iter().zip(busy) {
                b.busy[g.0 as usize] += t * share;
            }
        }
    }

    fn flush_until(&mut self, t: f64, final_end: Option<f64>) {
        let dt = self.cfg.interval;
        loop {
            let k = self.next_bucket;
            let end = (k + 1) as f64 * dt;
            let last = match final_end {
                Some(e) => k as f64 * dt >= e,
                None => end > t,
            };
            if last {
                break;
            }
            let b = self.buckets.remove(&k).unwrap_or_else(|| Bucket {
                busy: vec![0.0; self.cfg.cluster.num_gpus as usize],
                ..Default::default()
            });
            let start = k as f64 * dt;
            let end = final_end.map_or(end, |e| end.min(e));
            let width = end - start;
            let tokens = b.prefill + b.decode;
            let throughput = if width > 0.0 { tokens as f64 / width } else { 0.0 };
            if final_end.is_none() || width >= dt {
                self.run.peak_throughput = self.run.peak_throughput.max(throughput);
            }
            self.records.push(MetricRecord::Interval(IntervalRecord {
                start,
                end,
                prefill_tokens: b.prefill,
                decode_tokens: b.decode,
                throughput,
                busy: b.busy.iter().map(|x| if width > 0.0 { x / width } else { 0.0 }).collect(),
            }));
            self.next_bucket += 1;
        }
    }

    // ---- admission and iterations ----

    fn all_arrived(&self) -> bool {
        self.arrived == self.requests.len()
    }

    fn finished_all(&self) -> bool {
        self.all_arrived() && self.done == self.requests.len()
    }

    fn note_drain(&mut self) {
        if self.waiting.is_empty() && self.all_arrived() && self.processed_at_drain.is_none() {
            self.run.drain_time = self.now;
            self.processed_at_drain = Some(self.run.processed_tokens);
        }
    }

    fn reject(&mut self, id: u64, reason: &str) {
        self.done += 1;
        self.run.rejected += 1;
        self.records.push(MetricRecord::Rejected(RejectedRecord { time: self.now, id, reason: reason.into() }));
    }

    fn try_admit(&mut self) {
        if self.phase != Phase::Running {
            return;
        }
        while let Some(&id) = self.waiting.front() {
            if self.cfg.max_resident.is_some_and(|m| self.resident.len() as u32 >= m) {
                break;
            }
            let g = match self.sched.candidate(self.cfg.scheduler) {
                Ok(g) => g,
                Err(_) => break,
            };
            let profile = self.profile.as_ref().expect("running with a plan");
            let rank = profile.rank_of(g).expect("candidate in world");
            let need = self.need(profile, self.reserve_tokens(&self.requests[id as usize]), rank);
            let fits = self.used.iter().zip(&need).zip(&self.capacity).all(|((u, n), c)| u + n <= *c);
            if !fits {
                if self.resident.is_empty() {
                    self.waiting.pop_front();
                    self.reject(id, "KV reservation exceeds capacity of an empty node");
                    continue;
                }
                break;
            }
            self.waiting.pop_front();
            for (u, n) in self.used.iter_mut().zip(need) {
                *u += n;
            }
            self.resident.push(id);
            self.run.max_resident = self.run.max_resident.max(self.resident.len() as u64);
            let now = self.now;
            let stage = self.cfg.stage;
            let r = &mut self.requests[id as usize];
            r.dp_rank = Some(g);
            if stage == Stage::DecodeOnly && !r.prefill_done() {
                r.tokens_prefilled = r.input_len;
                if r.ttft.is_none() {
                    r.ttft = Some(now - r.arrival_time);
                }
                self.streams[id as usize].last = now;
                // The prompt's KV lands on the node at admission and joins
                // the backup queue like any freshly computed KV.
                if self.backup.enabled {
                    let link = self.backup_link();
                    self.backup.advance(0.0, &[(id, self.requests[id as usize].input_len as u64)], &link);
                }
            }
            let r = self.requests[id as usize].clone();
            self.sched.assign(self.cfg.scheduler, g, &r).expect("candidate rank present");
        }
        self.refresh_decode_loads();
        self.note_drain();
    }

    fn start_iteration(&mut self) {
        if self.phase != Phase::Running || self.in_flight.is_some() {
            return;
        }
        let decode: Vec<u64> = if self.cfg.stage == Stage::PrefillOnly {
            Vec::new()
        } else {
            self.resident
                .iter()
                .copied()
                .filter(|id| {
                    let r = &self.requests[*id as usize];
                    r.prefill_done() && !r.finished()
                })
                .collect()
        };
        let room = self.cfg.token_budget.saturating_sub(decode.len() as u32);
        let batch = if room > 0 && self.cfg.stage != Stage::DecodeOnly && self.sched.has_pending() {
            self.sched.token_budget = room;
            next_prefill_batch(self.cfg.scheduler, &mut self.sched)
        } else {
            PrefillBatch::default()
        };
        if decode.is_empty() && batch.is_empty() {
            return;
        }
        let mut items = Vec::with_capacity(decode.len() + batch.entries.len());
        for e in &batch.entries {
            items.push(WorkItem { rank: self.rank(e.rank), tokens: e.len, context: e.start });
        }
        for id in &decode {
            let r = &self.requests[*id as usize];
            let g = r.dp_rank.expect("decoding request is routed");
            items.push(WorkItem { rank: self.rank(g), tokens: 1, context: r.kv_tokens() as u32 });
        }
        let profile = self.profile.as_ref().expect("running with a plan");
        let prof = iteration_profile(profile, &items, &self.params);
        let world = profile.world.clone();
        let (start, end) = (self.now, self.now + prof.total);
        self.add_busy(start, end, &prof.busy, &world);
        let ratio = prof.busy_ratio();
        self.in_flight = Some(InFlight { start, batch, decode, busy_ratio: ratio });
        self.push(end, Kind::IterationDone, self.epoch);
    }

    fn finish_request(&mut self, id: u64) {
        let i = id as usize;
        if let Some(pos) = self.resident.iter().position(|x| *x == id) {
            self.resident.remove(pos);
        }
        let r = &self.requests[i];
        let g = r.dp_rank.expect("resident request is routed");
        let profile = self.profile.as_ref().expect("running with a plan");
        let need = self.need(profile, self.reserve_tokens(r), profile.rank_of(g).expect("in world"));
        for (u, n) in self.used.iter_mut().zip(need) {
            *u -= n;
        }
        self.sched.remove(id);
        self.backup.mark_finished(id);
        let s = self.streams[i];
        self.run.finished += 1;
        self.run.useful_tokens += match self.cfg.stage {
            Stage::Mixed => r.input_len as u64 + r.output_len as u64,
            Stage::PrefillOnly => r.input_len as u64,
            Stage::DecodeOnly => r.output_len as u64,
        };
        self.done += 1;
        self.records.push(MetricRecord::Request(RequestRecord {
            id,
            arrival: r.arrival_time,
            input_len: r.input_len,
            output_len: r.output_len,
            ttft: r.ttft.unwrap_or(0.0),
            finish: self.now,
            tbt_max: s.max,
            tbt_mean: if s.count > 0 { s.sum / s.count as f64 } else { 0.0 },
            tbt: self.cfg.record_tbt.then(|| r.tbt_samples.clone()),
        }));
        if !self.cfg.record_tbt {
            self.requests[i].tbt_samples = Vec::new();
        }
    }

    fn complete_iteration(&mut self, epoch: u64) {
        if epoch != self.epoch {
            return;
        }
        let Some(it) = self.in_flight.take() else { return };
        let now = self.now;
        let mut new_tokens: Vec<(u64, u64)> = Vec::new();
        let mut finished = Vec::new();
        let (mut prefill, mut decode) = (0u32, 0u32);
        for e in &it.batch.entries {
            let r = &mut self.requests[e.request as usize];
            prefill += e.len;
            new_tokens.push((e.request, e.len as u64));
            if r.advance_prefill(e.len, now) {
                self.streams[e.request as usize].last = now;
                if self.cfg.stage == Stage::PrefillOnly {
                    finished.push(e.request);
                }
            }
        }
        for id in &it.decode {
            let i = *id as usize;
            let r = &mut self.requests[i];
            r.tokens_decoded += 1;
            decode += 1;
            new_tokens.push((*id, 1));
            let s = &mut self.streams[i];
            let gap = now - s.last;
            s.last = now;
            s.max = s.max.max(gap);
            s.sum += gap;
            s.count += 1;
            if self.cfg.record_tbt {
                r.tbt_samples.push(gap);
            }
            if self.cfg.tbt_stats {
                self.tbt_all.push(gap);
            }
            if r.finished() {
                finished.push(*id);
            }
        }
        for id in finished {
            self.finish_request(id);
        }
        let tokens = prefill as u64 + decode as u64;
        self.run.processed_tokens += tokens;
        self.run.iterations += 1;
        if it.busy_ratio.is_finite() {
            self.busy_ratio_sum += it.busy_ratio;
            self.busy_ratio_n += 1;
        }
        let k = (now / self.cfg.interval) as u64;
        let b = self.bucket(k);
        b.prefill += prefill as u64;
        b.decode += decode as u64;
        if self.cfg.record_iterations {
            self.records.push(MetricRecord::Iteration(IterationRecord {
                time: now,
                duration: now - it.start,
                prefill_tokens: prefill,
                decode_tokens: decode,
                batch_size: (it.batch.entries.len() + it.decode.len()) as u32,
                busy_ratio: if it.busy_ratio.is_finite() { it.busy_ratio } else { -1.0 },
            }));
        }
        if self.backup.enabled {
            let link = self.backup_link();
            self.backup.advance(now - it.start, &new_tokens, &link);
        }
        self.refresh_decode_loads();
    }

    fn backup_link(&self) -> BackupLink {
        let n = self.plan.as_ref().map_or(1, |p| p.world.len()) as f64;
        BackupLink {
            kv_bytes_per_token: self.cfg.model.kv_bytes_per_token(),
            bandwidth: self.cfg.backup_bw_fraction * self.cfg.cluster.pcie_bw_per_gpu * n,
            host_capacity: self.cfg.cluster.host_memory_bytes,
        }
    }

    // ---- failures and reconfiguration ----

    fn reset(&mut self, id: u64) {
        let r = &mut self.requests[id as usize];
        self.run.discarded_tokens += match self.cfg.stage {
            Stage::DecodeOnly => r.tokens_decoded as u64,
            _ => r.kv_tokens(),
        };
        r.reset_progress();
        r.dp_rank = None;
        self.streams[id as usize].last = self.now;
        self.backup.drop_request(id);
    }

    /// Reset the newest resident requests and put them back at the head of
    /// the queue, oldest first.
    fn evict(&mut self, ids: Vec<u64>) {
        for id in ids.iter().rev() {
            self.reset(*id);
            self.waiting.push_front(*id);
        }
    }

    fn current_world(&self) -> Option<BTreeSet<GpuId>> {
        match self.phase {
            Phase::Down => None,
            Phase::Reconfiguring => self.target.as_ref().map(|p| p.alive_set()),
            Phase::Running => self.plan.as_ref().map(|p| p.alive_set()),
        }
    }

    fn on_gpu_event(&mut self, gpu: GpuId, kind: FailureKind) -> Result<()> {
        let changed = match kind {
            FailureKind::Fail => self.alive.remove(&gpu),
            FailureKind::Recover => gpu.0 < self.cfg.cluster.num_gpus && self.alive.insert(gpu),
        };
        if !changed {
            return Ok(());
        }
        let new = self.cfg.policy.select_world(&self.alive);
        self.records.push(MetricRecord::Failure(FailureRecord {
            time: self.now,
            gpu: gpu.0,
            event: kind,
            alive: self.alive.len() as u32,
            world: new.as_ref().map(|w| w.len() as u32),
        }));
        if new == self.current_world() {
            return Ok(());
        }
        self.reconfigure(new)
    }

    fn reconfigure(&mut self, new: Option<BTreeSet<GpuId>>) -> Result<()> {
        self.epoch += 1;
        self.in_flight = None;
        let base = match self.phase {
            Phase::Reconfiguring => self.target.take(),
            Phase::Running => self.plan.clone(),
            Phase::Down => None,
        };
        let from_world = base.as_ref().map_or(0, |p| p.world.len() as u32);
        let Some(new) = new else {
            let all = std::mem::take(&mut self.resident);
            self.evict(all);
            self.phase = Phase::Down;
            self.plan = None;
            self.profile = None;
            self.down_since.get_or_insert(self.now);
            return Ok(());
        };
        if let Some(since) = self.down_since.take() {
            self.run.down_time += self.now - since;
        }
        let switch = self.cfg.switch();
        let Some(base) = base else {
            // Cold start: every weight comes from host.
            let plan = placement(self.cfg.placement, &self.cfg.model, &new, self.num_shards)?;
            let worst = plan.world.iter().map(|g| plan.weight_bytes(&self.cfg.model, *g)).max().unwrap_or(0);
            let latency = worst as f64 / self.cfg.cluster.pcie_bw_per_gpu;
            let total: u64 = plan.world.iter().map(|g| plan.weight_bytes(&self.cfg.model, *g)).sum();
            self.records.push(MetricRecord::Recovery(RecoveryRecord {
                time: self.now,
                mode: self.cfg.recovery,
                from_world,
                to_world: plan.world.len() as u32,
                latency,
                transfer_s: latency,
                recompute_s: 0.0,
                restore_s: latency,
                lag_recompute_s: 0.0,
                switch_s: switch,
                pcie_bytes: total,
                nvlink_bytes: 0,
                recompute_tokens: 0,
                evicted: 0,
                cold_start: true,
            }));
            self.begin_switch(plan, latency + switch);
            return Ok(());
        };

        let model = &self.cfg.model;
        let new_plan = match self.cfg.recovery.weight_mode() {
            WeightMode::OnDemand => base.replan(model, &new)?,
            WeightMode::NaiveReshard => base.replan_contiguous_ffn(model, &new)?,
        };
        let new_world: Vec<GpuId> = new_plan.world.clone();
        let mut kv: Vec<KvRequestState> = self
            .resident
            .iter()
            .map(|id| {
                let r = &self.requests[*id as usize];
                KvRequestState { id: *id, kv_tokens: r.kv_tokens(), old_rank: r.dp_rank, new_rank: None }
            })
            .collect();
        reroute_for(&mut kv, &new_world);

        // Keep the oldest requests that fit in the new world.
        let profile = PlanProfile::new(&new_plan);
        let capacity = self.capacities(&new_plan);
        let mut used = vec![0u64; new_world.len()];
        let mut keep = 0;
        for k in &kv {
            let r = &self.requests[k.id as usize];
            let rank = profile.rank_of(k.new_rank.expect("rerouted")).expect("in world");
            let need = self.need(&profile, self.reserve_tokens(r), rank);
            if used.iter().zip(&need).zip(&capacity).any(|((u, n), c)| u + n > *c) {
                break;
            }
            for (u, n) in used.iter_mut().zip(need) {
                *u += n;
            }
            keep += 1;
        }
        let evicted: Vec<u64> = self.resident.split_off(keep);
        let n_evicted = evicted.len() as u32;
        self.evict(evicted);
        kv.truncate(keep);

        let backup = self.backup.enabled.then_some(&self.backup);
        let outcome = plan_recovery(
            &RecoveryInputs {
                model,
                cluster: &self.cfg.cluster,
                params: &self.params,
                old: &base,
                new_alive: &new,
                requests: &kv,
                backup,
                token_budget: self.cfg.token_budget,
            },
            self.cfg.recovery,
        )?;
        for k in &kv {
            self.requests[k.id as usize].dp_rank = k.new_rank;
        }
        let recompute: u64 = outcome.plan.recompute_tokens.values().sum();
        let (restore_s, lag_recompute_s) = match self.cfg.recovery {
            RecoveryMode::Recompute => (outcome.latency, 0.0),
            RecoveryMode::Oracle => (outcome.latency, 0.0),
            _ => (outcome.transfer_seconds, outcome.recompute_seconds),
        };
        self.run.recomputed_tokens += recompute;
        self.records.push(MetricRecord::Recovery(RecoveryRecord {
            time: self.now,
            mode: self.cfg.recovery,
            from_world,
            to_world: new_world.len() as u32,
            latency: outcome.latency,
            transfer_s: outcome.transfer_seconds,
            recompute_s: outcome.recompute_seconds,
            restore_s,
            lag_recompute_s,
            switch_s: switch,
            pcie_bytes: outcome.plan.bytes_by(Medium::PcieHost),
            nvlink_bytes: outcome.plan.bytes_by(Medium::NvlinkPeer),
            recompute_tokens: recompute,
            evicted: n_evicted,
            cold_start: false,
        }));
        self.begin_switch(outcome.new_plan, outcome.latency + switch);
        Ok(())
    }

    fn begin_switch(&mut self, plan: PlacementPlan, pause: f64) {
        self.phase = Phase::Reconfiguring;
        self.target = Some(plan);
        self.push(self.now + pause, Kind::ReconfigDone, self.epoch);
    }

    fn complete_switch(&mut self, epoch: u64) {
        if epoch != self.epoch || self.phase != Phase::Reconfiguring {
            return;
        }
        let plan = self.target.take().expect("switch target");
        self.install(plan);
        self.phase = Phase::Running;
    }

    // ---- driver ----

    fn run(mut self, failures: &[FailureEvent]) -> Result<SimOutput> {
        let cap = self.cfg.initial_alive.unwrap_or(self.cfg.cluster.num_gpus);
        self.alive = (0..cap).map(GpuId).collect();
        if let Some(world) = self.cfg.policy.select_world(&self.alive) {
            let plan = placement(self.cfg.placement, &self.cfg.model, &world, self.num_shards)?;
            self.install(plan);
            self.phase = Phase::Running;
        } else {
            self.down_since = Some(0.0);
        }
        for (i, r) in self.requests.iter().enumerate() {
            let t = r.arrival_time;
            self.seq += 1;
            self.heap.push(Reverse(Event { time: t, kind: Kind::Arrival, seq: self.seq, payload: i as u64 }));
        }
        for f in failures {
            let kind = match f.kind {
                FailureKind::Fail => Kind::Failure,
                FailureKind::Recover => Kind::Rejoin,
            };
            self.push(f.time, kind, f.gpu.0 as u64);
        }
        self.run.first_arrival = self.requests.first().map_or(0.0, |r| r.arrival_time);
        if self.requests.is_empty() {
            self.run.drain_time = 0.0;
            let run = self.run.clone();
            return Ok(SimOutput { records: vec![MetricRecord::Run(run.clone())], run });
        }

        while let Some(Reverse(ev)) = self.heap.pop() {
            self.now = ev.time;
            self.flush_until(self.now, None);
            match ev.kind {
                Kind::Arrival => {
                    self.arrived += 1;
                    self.waiting.push_back(ev.payload);
                }
                Kind::IterationDone => self.complete_iteration(ev.payload),
                Kind::ReconfigDone => self.complete_switch(ev.payload),
                Kind::Failure => self.on_gpu_event(GpuId(ev.payload as u32), FailureKind::Fail)?,
                Kind::Rejoin => self.on_gpu_event(GpuId(ev.payload as u32), FailureKind::Recover)?,
            }
            self.try_admit();
            self.start_iteration();
            if self.finished_all() || (self.cfg.stop_at_drain && self.processed_at_drain.is_some()) {
                break;
            }
        }
        Ok(self.close())
    }

    fn close(mut self) -> SimOutput {
        let end = self.now;
        if let Some(since) = self.down_since.take() {
            self.run.down_time += end - since;
        }
        self.flush_until(end, Some(end));
        let first = self.run.first_arrival;
        if self.processed_at_drain.is_none() {
            self.run.drain_time = end;
            self.processed_at_drain = Some(self.run.processed_tokens);
        }
        self.run.end_time = end;
        let span = end - first;
        self.run.throughput = if span > 0.0 { self.run.processed_tokens as f64 / span } else { 0.0 };
        let dspan = self.run.drain_time - first;
        let at_drain = self.processed_at_drain.unwrap_or(0);
        self.run.sustained_throughput = if dspan > 0.0 { at_drain as f64 / dspan } else { self.run.throughput };
        self.run.mean_busy_ratio =
            if self.busy_ratio_n > 0 { self.busy_ratio_sum / self.busy_ratio_n as f64 } else { 1.0 };
        let mut tbt = std::mem::take(&mut self.tbt_all);
        tbt.sort_by(f64::total_cmp);
        self.run.tbt_p50 = percentile(&tbt, 50.0);
        self.run.tbt_p90 = percentile(&tbt, 90.0);
        self.run.tbt_p99 = percentile(&tbt, 99.0);
        self.run.tbt_mean = if tbt.is_empty() { 0.0 } else { tbt.iter().sum::<f64>() / tbt.len() as f64 };
        self.records.push(MetricRecord::Run(self.run.clone()));
        SimOutput { records: self.records, run: self.run }
    }
}

/// Simulate `trace` under `failures` on one node.
pub fn run_simulation(config: &SimConfig, trace: &[TraceRequest], failures: &[FailureEvent]) -> Result<SimOutput> {
    config.validate()?;
    if trace.windows(2).any(|w| w[1].arrival < w[0].arrival) {
        return Err(Error::validation("requests", "arrivals must be sorted"));
    }
    if failures.windows(2).any(|w| w[1].time < w[0].time) {
        return Err(Error::validation("failures", "events must be sorted"));
    }
    if let Some(f) = failures.iter().find(|f| f.gpu.0 >= config.cluster.num_gpus) {
        return Err(Error::validation("failures", format!("{} is not on this node", f.gpu)));
    }
    Sim::new(config, trace).run(failures)
}

/// One point of a throughput-latency curve.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepPoint {
    pub factor: f64,
    /// Requests per second after scaling.
    pub rate: f64,
    pub ttft: LatencyStats,
    pub tbt: LatencyStats,
    pub throughput: f64,
    pub finished: u64,
}

/// Run one simulation per arrival-time scale factor, in parallel; results
/// keep the order of `factors`.
pub fn sweep_request_rate(
    config: &SimConfig,
    base: &[TraceRequest],
    factors: &[f64],
    failures: &[FailureEvent],
) -> Result<Vec<SweepPoint>> {
    if let Some(f) = factors.iter().find(|f| !(**f > 0.0)) {
        return Err(Error::validation("factors", format!("scale factor {f} must be positive")));
    }
    factors
        .par_iter()
        .map(|f| {
            let trace = crate::trace::scale_arrivals(base, *f);
            let out = run_simulation(config, &trace, failures)?;
            let s = crate::metrics::summarize(&out.records);
            let span = trace.last().map_or(0.0, |r| r.arrival) - trace.first().map_or(0.0, |r| r.arrival);
            Ok(SweepPoint {
                factor: *f,
                rate: if span > 0.0 { (trace.len() - 1) as f64 / span } else { 0.0 },
                ttft: s.ttft,
                tbt: s.tbt,
                throughput: out.run.throughput,
                finished: out.run.finished,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cost::iteration_time;
    use crate::spec::parse_model_spec;
    use crate::trace::{synth_mooncake, synth_openthoughts};

    fn llama() -> ModelSpec {
        parse_model_spec(include_str!("../data/models/llama70b.toml")).unwrap()
    }

    fn cfg() -> SimConfig {
        SimConfig::new(llama(), ClusterSpec::h100x8())
    }

    fn requests(out: &SimOutput) -> Vec<&RequestRecord> {
        out.records
            .iter()
            .filter_map(|r| match r {
                MetricRecord::Request(q) => Some(q),
                _ => None,
            })
            .collect()
    }

    #[test]
    fn empty_trace() {
        let out = run_simulation(&cfg(), &[], &[]).unwrap();
        assert_eq!(out.records.len(), 1);
        assert_eq!(out.run.throughput, 0.0);
    }

    #[test]
    fn single_request_accounting() {
        let mut c = cfg();
        c.record_tbt = true;
        c.token_budget = 512;
        let trace = [TraceRequest { arrival: 0.5, input_len: 1200, output_len: 4 }];
        let out = run_simulation(&c, &trace, &[]).unwrap();
        let plan =
            placement(c.placement, &c.model, &(0..8).map(GpuId).collect(), default_num_shards(&c.model)).unwrap();
        let profile = PlanProfile::new(&plan);
        let params = CostParams::derive(&c.model, &c.cluster, &c.hardware, default_num_shards(&c.model));
        // Prefill chunks: 512, 512, 176 on rank 0.
        let mut ttft = 0.0;
        for (start, len) in [(0, 512), (512, 512), (1024, 176)] {
            ttft += iteration_time(&profile, &[WorkItem { rank: 0, tokens: len, context: start }], &params);
        }
        let r = requests(&out)[0];
        assert!((r.ttft - ttft).abs() < 1e-12, "{} vs {}", r.ttft, ttft);
        let tbt = r.tbt.as_ref().unwrap();
        assert_eq!(tbt.len(), 4);
        for (k, s) in tbt.iter().enumerate() {
            let t = iteration_time(&profile, &[WorkItem { rank: 0, tokens: 1, context: 1200 + k as u32 }], &params);
            assert!((s - t).abs() < 1e-12);
        }
        assert_eq!(out.run.processed_tokens, 1204);
        assert_eq!(out.run.useful_tokens, 1204);
    }

    #[test]
    fn deterministic_output() {
        let trace = synth_mooncake(60, 2.0, 4);
        let fails = [FailureEvent { time: 10.0, kind: FailureKind::Fail, gpu: GpuId(3) }];
        let a = run_simulation(&cfg(), &trace, &fails).unwrap();
        let b = run_simulation(&cfg(), &trace, &fails).unwrap();
        let mut x = Vec::new();
        let mut y = Vec::new();
        crate::metrics::write_jsonl(&a.records, &mut x).unwrap();
        crate::metrics::write_jsonl(&b.records, &mut y).unwrap();
        assert_eq!(x, y);
    }

    #[test]
    fn work_is_conserved_through_failures() {
        let trace = synth_mooncake(80, 3.0, 5);
        for mode in RecoveryMode::ALL {
            let mut c = cfg();
            c.recovery = mode;
            c.switch_latency = Some(1.0);
            let fails = [
                FailureEvent { time: 8.0, kind: FailureKind::Fail, gpu: GpuId(5) },
                FailureEvent { time: 20.0, kind: FailureKind::Recover, gpu: GpuId(5) },
            ];
            let out = run_simulation(&c, &trace, &fails).unwrap();
            assert_eq!(out.run.finished + out.run.rejected, 80, "{mode}");
            assert_eq!(out.run.processed_tokens, out.run.useful_tokens + out.run.discarded_tokens, "{mode}");
            let recs: Vec<_> = out.records.iter().filter(|r| matches!(r, MetricRecord::Recovery(_))).collect();
            assert_eq!(recs.len(), 2, "{mode}");
        }
    }

    #[test]
    fn records_are_time_ordered_intervals() {
        let out = run_simulation(&cfg(), &synth_mooncake(40, 2.0, 1), &[]).unwrap();
        let ends: Vec<f64> = out
            .records
            .iter()
            .filter_map(|r| match r {
                MetricRecord::Interval(i) => Some(i.end),
                _ => None,
            })
            .collect();
        assert!(ends.windows(2).all(|w| w[0] < w[1]));
        assert!(matches!(out.records.last(), Some(MetricRecord::Run(_))));
    }

    #[test]
    fn infeasible_world_queues_until_rejoin() {
        let mut c = cfg();
        c.initial_alive = Some(3);
        c.policy = ReconfigPolicy::new(PolicyKind::Flexible, 3);
        c.switch_latency = Some(0.0);
        let trace = synth_mooncake(10, 1.0, 2);
        let fails = [
            FailureEvent { time: 1.0, kind: FailureKind::Fail, gpu: GpuId(0) },
            FailureEvent { time: 30.0, kind: FailureKind::Recover, gpu: GpuId(0) },
        ];
        let out = run_simulation(&c, &trace, &fails).unwrap();
        assert_eq!(out.run.finished, 10);
        assert!(out.run.down_time >= 29.0 - 1e-9);
        assert!(out.records.iter().any(|r| matches!(r, MetricRecord::Recovery(x) if x.cold_start)));
    }

    #[test]
    fn scale_one_reproduces_run() {
        let trace = synth_mooncake(30, 2.0, 8);
        let pts = sweep_request_rate(&cfg(), &trace, &[1.0], &[]).unwrap();
        let out = run_simulation(&cfg(), &trace, &[]).unwrap();
        assert_eq!(pts[0].throughput, out.run.throughput);
    }

    #[test]
    fn capacity_cyclic_over_naive() {
        let trace = synth_openthoughts(300, 0.0, 2);
        let mut peak = BTreeMap::new();
        for mode in PlacementMode::ALL {
            let mut c = cfg();
            c.stage = Stage::DecodeOnly;
            c.initial_alive = Some(7);
            c.placement = mode;
            c.stop_at_drain = true;
            c.tbt_stats = false;
            peak.insert(mode.to_string(), run_simulation(&c, &trace, &[]).unwrap().run.max_resident);
        }
        assert!(peak["cyclic"] >= peak["naive"], "{peak:?}");
    }
}
