//! Request routing and prefill batch formation.
//!
//! Work is measured in cost units: prefilling token `t` of a request costs
//! `1 + kappa * t`, i.e. one unit of linear work plus attention over the `t`
//! tokens already in its context. Each rank's workload `W_r` is the cost of
//! its routed-but-unprefilled tokens plus, unless disabled, the per-step cost
//! of decoding its resident requests.

use std::collections::{BTreeMap, VecDeque};
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::request::Request;
use crate::spec::GpuId;

pub const DEFAULT_KAPPA: f64 = 1.0 / 512.0;

/// Cost of one prefill token at `position_in_chunk` of a chunk that starts
/// after `already_processed` tokens.
pub fn token_cost(position_in_chunk: u32, already_processed: u32, kappa: f64) -> f64 {
    1.0 + kappa * (already_processed as f64 + position_in_chunk as f64)
}

/// Closed form of `token_cost` summed over a chunk of `len` tokens.
pub fn chunk_cost(len: u32, already_processed: u32, kappa: f64) -> f64 {
    let n = len as f64;
    n + kappa * (n * already_processed as f64 + n * (n - 1.0) / 2.0)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SchedulerMode {
    /// Least-loaded routing with DP-aware adaptive chunked prefill.
    Adaptive,
    /// Round-robin routing with one-request-per-chunk FIFO prefill.
    Fifo,
}

impl fmt::Display for SchedulerMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SchedulerMode::Adaptive => "adaptive",
            SchedulerMode::Fifo => "fifo",
        })
    }
}

impl FromStr for SchedulerMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "adaptive" | "failsafe" => Ok(SchedulerMode::Adaptive),
            "fifo" | "round-robin" => Ok(SchedulerMode::Fifo),
            other => Err(Error::parse("scheduler", format!("unknown mode `{other}`"))),
        }
    }
}

/// Unprefilled tokens `[next, end)` of one request.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Segment {
    pub request: u64,
    pub next: u32,
    pub end: u32,
    /// Global enqueue order.
    pub seq: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BatchEntry {
    pub request: u64,
    pub rank: GpuId,
    pub start: u32,
    pub len: u32,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct PrefillBatch {
    pub entries: Vec<BatchEntry>,
    pub per_rank_load: BTreeMap<GpuId, f64>,
}

impl PrefillBatch {
    pub fn num_tokens(&self) -> u32 {
        self.entries.iter().map(|e| e.len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn max_load(&self) -> f64 {
        self.per_rank_load.values().copied().fold(0.0, f64::max)
    }

    /// Population variance of per-rank load.
    pub fn load_variance(&self) -> f64 {
        variance(self.per_rank_load.values().copied())
    }
}

fn variance(xs: impl Iterator<Item = f64> + Clone) -> f64 {
    let n = xs.clone().count() as f64;
    if n == 0.0 {
        return 0.0;
    }
    let mean = xs.clone().sum::<f64>() / n;
    xs.map(|x| (x - mean) * (x - mean)).sum::<f64>() / n
}

#[derive(Debug, Clone, PartialEq)]
pub struct SchedulerState {
    pub token_budget: u32,
    pub kappa: f64,
    pub rank_set: Vec<GpuId>,
    pub schedulable: BTreeMap<GpuId, VecDeque<Segment>>,
    /// Cost of routed tokens not yet prefilled, per rank.
    pub pending: BTreeMap<GpuId, f64>,
    /// Per-step decode cost of resident requests, per rank.
    pub decode: BTreeMap<GpuId, f64>,
    /// Leave decode work out of `W_r`.
    pub prefill_only_workload: bool,
    pub routing: BTreeMap<u64, GpuId>,
    rr_cursor: usize,
    next_seq: u64,
}

impl SchedulerState {
    pub fn new(token_budget: u32, ranks: impl IntoIterator<Item = GpuId>, kappa: f64) -> Self {
        let mut rank_set: Vec<GpuId> = ranks.into_iter().collect();
        rank_set.sort();
        rank_set.dedup();
        SchedulerState {
            token_budget,
            kappa,
            schedulable: rank_set.iter().map(|g| (*g, VecDeque::new())).collect(),
            pending: rank_set.iter().map(|g| (*g, 0.0)).collect(),
            decode: rank_set.iter().map(|g| (*g, 0.0)).collect(),
            rank_set,
            prefill_only_workload: false,
            routing: BTreeMap::new(),
            rr_cursor: 0,
            next_seq: 0,
        }
    }

    /// `W_r` for one rank.
    pub fn workload(&self, gpu: GpuId) -> f64 {
        let p = self.pending.get(&gpu).copied().unwrap_or(0.0);
        if self.prefill_only_workload {
            p
        } else {
            p + self.decode.get(&gpu).copied().unwrap_or(0.0)
        }
    }

    pub fn workloads(&self) -> BTreeMap<GpuId, f64> {
        self.rank_set.iter().map(|g| (*g, self.workload(*g))).collect()
    }

    pub fn set_decode_load(&mut self, gpu: GpuId, cost: f64) {
        if let Some(d) = self.decode.get_mut(&gpu) {
            *d = cost;
        }
    }

    pub fn pending_tokens(&self) -> u64 {
        self.schedulable.values().flatten().map(|s| (s.end - s.next) as u64).sum()
    }

    pub fn has_pending(&self) -> bool {
        self.schedulable.values().any(|q| !q.is_empty())
    }

    /// Queue the unprefilled tail of `request` on `gpu`.
    pub fn enqueue(&mut self, gpu: GpuId, request: &Request) -> Result<()> {
        let queue = self.schedulable.get_mut(&gpu).ok_or(Error::NoCapacity)?;
        self.routing.insert(request.id, gpu);
        if request.prefill_done() {
            return Ok(());
        }
        let seg =
            Segment { request: request.id, next: request.tokens_prefilled, end: request.input_len, seq: self.next_seq };
        self.next_seq += 1;
        queue.push_back(seg);
        *self.pending.get_mut(&gpu).expect("rank present") += chunk_cost(seg.end - seg.next, seg.next, self.kappa);
        Ok(())
    }

    /// Drop a request's queued tokens and routing entry.
    pub fn remove(&mut self, request: u64) {
        let Some(gpu) = self.routing.remove(&request) else {
            return;
        };
        let kappa = self.kappa;
        if let Some(q) = self.schedulable.get_mut(&gpu) {
            let mut freed = 0.0;
            q.retain(|s| {
                if s.request == request {
                    freed += chunk_cost(s.end - s.next, s.next, kappa);
                    false
                } else {
                    true
                }
            });
            let p = self.pending.get_mut(&gpu).expect("rank present");
            *p = (*p - freed).max(0.0);
        }
    }
}

/// Least-loaded rank, lowest id on ties.
fn least_loaded(state: &SchedulerState) -> Result<GpuId> {
    let mut best: Option<(GpuId, f64)> = None;
    for g in &state.rank_set {
        let w = state.workload(*g);
        if best.is_none_or(|(_, bw)| w < bw) {
            best = Some((*g, w));
        }
    }
    best.map(|(g, _)| g).ok_or(Error::NoCapacity)
}

/// Route to the rank with the smallest workload and queue the request there.
pub fn route_request(state: &mut SchedulerState, request: &Request) -> Result<GpuId> {
    let g = least_loaded(state)?;
    state.enqueue(g, request)?;
    Ok(g)
}

/// Route in strict rotation over the rank set.
pub fn round_robin_route(state: &mut SchedulerState, request: &Request) -> Result<GpuId> {
    if state.rank_set.is_empty() {
        return Err(Error::NoCapacity);
    }
    let g = state.rank_set[state.rr_cursor % state.rank_set.len()];
    state.rr_cursor += 1;
    state.enqueue(g, request)?;
    Ok(g)
}

/// Score of a candidate: more tokens, then lower max load, then lower
/// variance. Returns true if `a` beats `b`.
fn better(a: (u32, f64, f64), b: (u32, f64, f64)) -> bool {
    if a.0 != b.0 {
        return a.0 > b.0;
    }
    if a.1 != b.1 {
        return a.1 < b.1;
    }
    a.2 < b.2
}

/// Pick the best candidate; the first one wins full ties.
pub fn choose_best_batch(candidates: &[PrefillBatch]) -> Option<&PrefillBatch> {
    let mut best: Option<&PrefillBatch> = None;
    for c in candidates {
        let score = (c.num_tokens(), c.max_load(), c.load_variance());
        match best {
            Some(b) if !better(score, (b.num_tokens(), b.max_load(), b.load_variance())) => {}
            _ => best = Some(c),
        }
    }
    best
}

/// Per-token pops of the adaptive prefill loop without touching the state.
fn greedy_pops(state: &SchedulerState) -> Vec<(GpuId, u64, u32, f64)> {
    let mut loads: BTreeMap<GpuId, f64> = state.rank_set.iter().map(|g| (*g, 0.0)).collect();
    // Cursor per rank: (segment index, tokens taken from it).
    let mut cursor: BTreeMap<GpuId, (usize, u32)> = state.rank_set.iter().map(|g| (*g, (0, 0))).collect();
    let mut pops = Vec::new();
    while (pops.len() as u32) < state.token_budget {
        let mut pick: Option<(GpuId, f64)> = None;
        for g in &state.rank_set {
            let (si, _) = cursor[g];
            if si >= state.schedulable[g].len() {
                continue;
            }
            let l = loads[g];
            if pick.is_none_or(|(_, pl)| l < pl) {
                pick = Some((*g, l));
            }
        }
        let Some((g, _)) = pick else { break };
        let (si, taken) = cursor[&g];
        let seg = state.schedulable[&g][si];
        let t = seg.next + taken;
        let cost = token_cost(taken, seg.next, state.kappa);
        *loads.get_mut(&g).expect("rank") += cost;
        pops.push((g, seg.request, t, cost));
        let c = cursor.get_mut(&g).expect("rank");
        if t + 1 == seg.end {
            *c = (si + 1, 0);
        } else {
            c.1 += 1;
        }
    }
    pops
}

fn batch_from_pops(state: &SchedulerState, pops: &[(GpuId, u64, u32, f64)]) -> PrefillBatch {
    let mut batch =
        PrefillBatch { entries: Vec::new(), per_rank_load: state.rank_set.iter().map(|g| (*g, 0.0)).collect() };
    for (g, req, t, cost) in pops {
        *batch.per_rank_load.get_mut(g).expect("rank") += cost;
        match batch.entries.iter_mut().find(|e| e.request == *req) {
            Some(e) => e.len += 1,
            None => batch.entries.push(BatchEntry { request: *req, rank: *g, start: *t, len: 1 }),
        }
    }
    batch
}

/// Every prefix batch the adaptive loop passes through, in order.
pub fn prefill_candidates(state: &SchedulerState) -> Vec<PrefillBatch> {
    let pops = greedy_pops(state);
    (1..=pops.len()).map(|k| batch_from_pops(state, &pops[..k])).collect()
}

/// DP-aware adaptive chunked prefill: repeatedly give one token to the
/// least-loaded rank that still has queued work, remember each prefix, and
/// commit the best prefix.
pub fn build_prefill_batch(state: &mut SchedulerState) -> PrefillBatch {
    let pops = greedy_pops(state);
    if pops.is_empty() {
        return PrefillBatch::default();
    }
    // Prefix scores are tracked incrementally; the batch is rebuilt once.
    let n = state.rank_set.len() as f64;
    let index: BTreeMap<GpuId, usize> = state.rank_set.iter().enumerate().map(|(i, g)| (*g, i)).collect();
    let mut loads = vec![0.0; state.rank_set.len()];
    let (mut sum, mut sumsq, mut max) = (0.0, 0.0, 0.0f64);
    let mut best = (0usize, (0u32, f64::INFINITY, f64::INFINITY));
    for (k, (g, _, _, cost)) in pops.iter().enumerate() {
        let i = index[g];
        let old = loads[i];
        loads[i] += cost;
        sum += cost;
        sumsq += loads[i] * loads[i] - old * old;
        max = max.max(loads[i]);
        let mean = sum / n;
        let var = (sumsq / n - mean * mean).max(0.0);
        let score = ((k + 1) as u32, max, var);
        if better(score, best.1) {
            best = (k + 1, score);
        }
    }
    let batch = batch_from_pops(state, &pops[..best.0]);
    commit(state, &batch);
    batch
}

/// Conventional chunked prefill: the oldest queued request alone, up to the
/// token budget.
pub fn fifo_chunked_prefill(state: &mut SchedulerState) -> PrefillBatch {
    let oldest = state.schedulable.iter().filter_map(|(g, q)| q.front().map(|s| (*g, *s))).min_by_key(|(_, s)| s.seq);
    let Some((g, seg)) = oldest else {
        return PrefillBatch::default();
    };
    let len = state.token_budget.min(seg.end - seg.next);
    if len == 0 {
        return PrefillBatch::default();
    }
    let mut per_rank_load: BTreeMap<GpuId, f64> = state.rank_set.iter().map(|g| (*g, 0.0)).collect();
    per_rank_load.insert(g, chunk_cost(len, seg.next, state.kappa));
    let batch = PrefillBatch {
        entries: vec![BatchEntry { request: seg.request, rank: g, start: seg.next, len }],
        per_rank_load,
    };
    commit(state, &batch);
    batch
}

/// Remove scheduled tokens from the queues and pending workloads.
fn commit(state: &mut SchedulerState, batch: &PrefillBatch) {
    for e in &batch.entries {
        let q = state.schedulable.get_mut(&e.rank).expect("rank");
        let pos = q.iter().position(|s| s.request == e.request).expect("scheduled request is queued");
        debug_assert_eq!(q[pos].next, e.start);
        q[pos].next += e.len;
        if q[pos].next == q[pos].end {
            q.remove(pos);
        }
        let p = state.pending.get_mut(&e.rank).expect("rank");
        *p = (*p - chunk_cost(e.len, e.start, state.kappa)).max(0.0);
    }
}

/// Route with the policy matching `mode`.
pub fn route(mode: SchedulerMode, state: &mut SchedulerState, request: &Request) -> Result<GpuId> {
    let g = state.candidate(mode)?;
    state.assign(mode, g, request)?;
    Ok(g)
}

impl SchedulerState {
    /// Rank the `mode` router would pick next, without committing.
    pub fn candidate(&self, mode: SchedulerMode) -> Result<GpuId> {
        match mode {
            SchedulerMode::Adaptive => least_loaded(self),
            SchedulerMode::Fifo if self.rank_set.is_empty() => Err(Error::NoCapacity),
            SchedulerMode::Fifo => Ok(self.rank_set[self.rr_cursor % self.rank_set.len()]),
        }
    }

    /// Queue `request` on `gpu`; in round-robin mode this also advances the
    /// rotation.
    pub fn assign(&mut self, mode: SchedulerMode, gpu: GpuId, request: &Request) -> Result<()> {
        self.enqueue(gpu, request)?;
        if mode == SchedulerMode::Fifo {
            self.rr_cursor += 1;
        }
        Ok(())
    }
}

/// Form the next prefill batch with the policy matching `mode`.
pub fn next_prefill_batch(mode: SchedulerMode, state: &mut SchedulerState) -> PrefillBatch {
    match mode {
        SchedulerMode::Adaptive => build_prefill_batch(state),
        SchedulerMode::Fifo => fifo_chunked_prefill(state),
    }
}

/// A small replayable scheduling scenario.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scenario {
    pub ranks: u32,
    pub budget: u32,
    #[serde(default)]
    pub kappa: f64,
    pub requests: Vec<ScenarioRequest>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioRequest {
    pub id: u64,
    pub input_len: u32,
    /// Step before which the request arrives.
    #[serde(default)]
    pub arrival_step: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioStep {
    pub step: u32,
    pub routed: Vec<(u64, GpuId)>,
    pub batch: PrefillBatch,
}

/// Replay `scenario`: before each step route that step's arrivals, then
/// build one prefill batch. Stops once everything has been prefilled.
pub fn replay_scenario(scenario: &Scenario, mode: SchedulerMode) -> Result<Vec<ScenarioStep>> {
    let budget = scenario.budget;
    if scenario.ranks == 0 {
        return Err(Error::validation("ranks", "must be at least 1"));
    }
    if budget == 0 {
        return Err(Error::validation("budget", "must be at least 1"));
    }
    let mut state = SchedulerState::new(budget, (0..scenario.ranks).map(GpuId), scenario.kappa);
    let last_arrival = scenario.requests.iter().map(|r| r.arrival_step).max().unwrap_or(0);
    let mut steps = Vec::new();
    let mut step = 0;
    loop {
        let mut routed = Vec::new();
        for r in scenario.requests.iter().filter(|r| r.arrival_step == step) {
            let req = Request::new(r.id, step as f64, r.input_len, 0);
            routed.push((r.id, route(mode, &mut state, &req)?));
        }
        if step > last_arrival && !state.has_pending() {
            break;
        }
        let batch = next_prefill_batch(mode, &mut state);
        steps.push(ScenarioStep { step, routed, batch });
        step += 1;
    }
    Ok(steps)
}

pub fn format_scenario_steps(steps: &[ScenarioStep]) -> String {
    let mut out = String::new();
    for s in steps {
        out.push_str(&format!("step {}", s.step));
        for (id, g) in &s.routed {
            out.push_str(&format!(" route(req{id}->{g})"));
        }
        out.push_str(" batch:");
        if s.batch.is_empty() {
            out.push_str(" idle");
        }
        for e in &s.batch.entries {
            out.push_str(&format!(" req{}[{}..{})@{}", e.request, e.start, e.start + e.len, e.rank));
        }
        out.push('\n');
    }
    out
}
