//! Experiment recipes: a TOML file naming a model, a node, traces and a list
//! of systems to compare, plus the report files a run writes.
//!
//! Paths inside a recipe are relative to the recipe file.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::{max_tbt_cdf, summarize, write_cdf_csv, write_jsonl, MetricRecord, Summary};
use crate::placement::PlacementMode;
use crate::recovery::{
    availability_events, parse_availability_series, parse_failure_trace, AvailabilityPoint, FailureEvent, FailureKind,
    PolicyKind, ReconfigPolicy, RecoveryMode,
};
use crate::scheduler::SchedulerMode;
use crate::sim::{run_simulation, SimConfig, SimOutput, Stage};
use crate::spec::{
    min_feasible_gpus, parse_cluster_spec, parse_hardware_spec, parse_model_spec, ClusterSpec, GpuId, HardwareSpec,
    ModelSpec,
};
use crate::trace::{parse_request_trace, scale_arrivals, TraceRequest};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RecipeKind {
    /// Every system at every arrival scale factor.
    Sweep,
    /// Every system as a saturated prefill instance and a saturated decode
    /// instance.
    Breakdown,
    /// Steady-state throughput per world size, replayed over an
    /// availability trace.
    Offline,
    /// One injected failure per system on a decode instance.
    Recovery,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SystemSpec {
    pub name: String,
    pub placement: PlacementMode,
    pub scheduler: SchedulerMode,
    pub policy: PolicyKind,
    #[serde(default = "default_recovery")]
    pub recovery: RecoveryMode,
    /// Smallest usable world; derived from memory when absent.
    #[serde(default)]
    pub min_gpus: Option<u32>,
    /// GPUs alive at the start of each run.
    #[serde(default)]
    pub alive: Option<u32>,
}

fn default_recovery() -> RecoveryMode {
    RecoveryMode::Full
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Settings {
    pub stage: Stage,
    pub token_budget: u32,
    pub interval: f64,
    pub switch_latency: Option<f64>,
    pub backup_bw_fraction: f64,
    /// Full GPU count behind an availability trace.
    pub capacity: u32,
    pub record_tbt: bool,
}

impl Default for Settings {
    fn default() -> Self {
        Settings {
            stage: Stage::Mixed,
            token_budget: 2048,
            interval: 1.0,
            switch_latency: None,
            backup_bw_fraction: 0.1,
            capacity: 64,
            record_tbt: false,
        }
    }
}

/// A failure placed relative to the trace: `delay` seconds after the
/// arrival of request number `after_request` (1-based).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InjectedFailure {
    pub after_request: usize,
    pub delay: f64,
    pub gpu: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentRecipe {
    pub name: String,
    pub kind: RecipeKind,
    pub model: PathBuf,
    pub cluster: PathBuf,
    #[serde(default)]
    pub hardware: Option<PathBuf>,
    pub requests: PathBuf,
    #[serde(default)]
    pub failures: Option<PathBuf>,
    #[serde(default)]
    pub availability: Option<PathBuf>,
    /// Use only the first `window` requests of the trace.
    #[serde(default)]
    pub window: Option<usize>,
    #[serde(default = "default_factors")]
    pub factors: Vec<f64>,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub settings: Settings,
    #[serde(default)]
    pub inject: Option<InjectedFailure>,
    pub systems: Vec<SystemSpec>,
}

fn default_factors() -> Vec<f64> {
    vec![1.0]
}

impl ExperimentRecipe {
    pub fn parse(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::parse("recipe", e.to_string()))
    }

    pub fn load(path: &Path) -> Result<(Self, PathBuf)> {
        let text = fs::read_to_string(path)?;
        let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Ok((Self::parse(&text)?, base))
    }

    pub fn validate(&self) -> Result<()> {
        if self.systems.is_empty() {
            return Err(Error::validation("systems", "a recipe needs at least one system"));
        }
        let mut seen = BTreeSet::new();
        for s in &self.systems {
            if !seen.insert(s.name.as_str()) {
                return Err(Error::validation("systems", format!("duplicate system name `{}`", s.name)));
            }
        }
        if self.factors.is_empty() || self.factors.iter().any(|f| !(*f > 0.0)) {
            return Err(Error::validation("factors", "scale factors must be positive"));
        }
        if self.kind == RecipeKind::Offline && self.availability.is_none() {
            return Err(Error::validation("availability", "offline recipes need an availability trace"));
        }
        if self.kind == RecipeKind::Recovery && self.inject.is_none() && self.failures.is_none() {
            return Err(Error::validation("inject", "recovery recipes need a failure"));
        }
        Ok(())
    }
}

/// One row of `summary.csv`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub system: String,
    pub stage: Stage,
    pub factor: f64,
    pub requests: u64,
    pub finished: u64,
    pub rejected: u64,
    pub ttft_mean: f64,
    pub ttft_p50: f64,
    pub ttft_p90: f64,
    pub ttft_p99: f64,
    pub tbt_mean: f64,
    pub tbt_p50: f64,
    pub tbt_p90: f64,
    pub tbt_p99: f64,
    pub max_tbt_p50: f64,
    pub max_tbt_p90: f64,
    pub max_tbt_p99: f64,
    pub throughput: f64,
    pub sustained_throughput: f64,
    pub peak_throughput: f64,
    /// State restore time of the first recovery, seconds (0 if none).
    pub restore_s: f64,
    /// Full pause of the first recovery, seconds (0 if none).
    pub recovery_pause_s: f64,
}

impl SummaryRow {
    fn new(system: &str, stage: Stage, factor: f64, s: &Summary, records: &[MetricRecord]) -> Self {
        let rec = records.iter().find_map(|r| match r {
            MetricRecord::Recovery(x) => Some(x),
            _ => None,
        });
        SummaryRow {
            system: system.to_string(),
            stage,
            factor,
            requests: s.requests,
            finished: s.finished,
            rejected: s.rejected,
            ttft_mean: s.ttft.mean,
            ttft_p50: s.ttft.p50,
            ttft_p90: s.ttft.p90,
            ttft_p99: s.ttft.p99,
            tbt_mean: s.tbt.mean,
            tbt_p50: s.tbt.p50,
            tbt_p90: s.tbt.p90,
            tbt_p99: s.tbt.p99,
            max_tbt_p50: s.max_tbt.p50,
            max_tbt_p90: s.max_tbt.p90,
            max_tbt_p99: s.max_tbt.p99,
            throughput: s.throughput,
            sustained_throughput: s.sustained_throughput,
            peak_throughput: s.peak_throughput,
            restore_s: rec.map_or(0.0, |x| x.restore_s),
            recovery_pause_s: rec.map_or(0.0, |x| x.latency + x.switch_s),
        }
    }
}

/// One row of an offline recipe's `summary.csv`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OfflineRow {
    pub system: String,
    pub policy: PolicyKind,
    /// Time-averaged cluster throughput over the trace, tokens/s.
    pub avg_throughput: f64,
    /// Every node at full size with the flexible system's throughput.
    pub fault_free_throughput: f64,
    /// Fault-free throughput scaled by the available fraction of GPUs.
    pub fault_scaled_throughput: f64,
    pub fraction_of_fault_scaled: f64,
    pub mean_available_gpus: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecipeReport {
    pub name: String,
    pub kind: RecipeKind,
    pub rows: Vec<SummaryRow>,
    pub offline: Vec<OfflineRow>,
    /// Steady-state node throughput by world size, per system.
    pub world_throughput: BTreeMap<String, BTreeMap<u32, f64>>,
    pub files: Vec<PathBuf>,
}

struct Loaded {
    model: ModelSpec,
    cluster: ClusterSpec,
    hardware: HardwareSpec,
    trace: Vec<TraceRequest>,
    failures: Vec<FailureEvent>,
    availability: Vec<AvailabilityPoint>,
}

fn read(base: &Path, p: &Path) -> Result<String> {
    let path = base.join(p);
    fs::read_to_string(&path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
}

fn load(recipe: &ExperimentRecipe, base: &Path) -> Result<Loaded> {
    let model = parse_model_spec(&read(base, &recipe.model)?)?;
    let cluster = parse_cluster_spec(&read(base, &recipe.cluster)?)?;
    let hardware = match &recipe.hardware {
        Some(p) => parse_hardware_spec(&read(base, p)?)?,
        None => HardwareSpec::default(),
    };
    let mut trace = parse_request_trace(&read(base, &recipe.requests)?)?;
    if let Some(w) = recipe.window {
        trace.truncate(w);
    }
    let mut failures = match &recipe.failures {
        Some(p) => parse_failure_trace(&read(base, p)?)?,
        None => Vec::new(),
    };
    let availability = match &recipe.availability {
        Some(p) => parse_availability_series(&read(base, p)?, recipe.settings.capacity)?,
        None => Vec::new(),
    };
    if let Some(inj) = recipe.inject {
        let at = trace
            .get(inj.after_request.saturating_sub(1))
            .ok_or_else(|| Error::validation("inject.after_request", "beyond the end of the trace"))?;
        failures.push(FailureEvent { time: at.arrival + inj.delay, kind: FailureKind::Fail, gpu: GpuId(inj.gpu) });
        failures.sort_by(|a, b| a.time.total_cmp(&b.time));
    }
    Ok(Loaded { model, cluster, hardware, trace, failures, availability })
}

fn sim_config(recipe: &ExperimentRecipe, l: &Loaded, sys: &SystemSpec, stage: Stage) -> SimConfig {
    let mut c = SimConfig::new(l.model.clone(), l.cluster.clone());
    let min = sys.min_gpus.or_else(|| min_feasible_gpus(&l.model, &l.cluster, 0)).unwrap_or(l.cluster.num_gpus);
    c.hardware = l.hardware;
    c.placement = sys.placement;
    c.scheduler = sys.scheduler;
    c.policy = ReconfigPolicy::new(sys.policy, min);
    c.recovery = sys.recovery;
    c.stage = stage;
    c.initial_alive = sys.alive;
    c.token_budget = recipe.settings.token_budget;
    c.interval = recipe.settings.interval;
    c.switch_latency = recipe.settings.switch_latency;
    c.backup_bw_fraction = recipe.settings.backup_bw_fraction;
    c.record_tbt = recipe.settings.record_tbt;
    c.seed = recipe.seed;
    c
}

fn tag(system: &str, e: Error) -> Error {
    Error::Recipe { system: system.to_string(), source: Box::new(e) }
}

fn factor_label(f: f64) -> String {
    format!("{f}").replace('.', "p")
}

/// Run every simulation of `recipe`, write per-run JSONL logs and
/// `summary.csv` into `out`, and return the aggregated report.
pub fn run_recipe(recipe: &ExperimentRecipe, base: &Path, out: &Path) -> Result<RecipeReport> {
    recipe.validate()?;
    let l = load(recipe, base)?;
    fs::create_dir_all(out)?;
    let mut report = RecipeReport {
        name: recipe.name.clone(),
        kind: recipe.kind,
        rows: Vec::new(),
        offline: Vec::new(),
        world_throughput: BTreeMap::new(),
        files: Vec::new(),
    };
    match recipe.kind {
        RecipeKind::Sweep | RecipeKind::Recovery => {
            let jobs: Vec<(&SystemSpec, f64)> =
                recipe.systems.iter().flat_map(|s| recipe.factors.iter().map(move |f| (s, *f))).collect();
            let outs = run_jobs(&jobs, |(sys, f)| {
                let trace = scale_arrivals(&l.trace, *f);
                let failures: Vec<FailureEvent> =
                    l.failures.iter().map(|e| FailureEvent { time: e.time * f, ..*e }).collect();
                let cfg = sim_config(recipe, &l, sys, recipe.settings.stage);
                run_simulation(&cfg, &trace, &failures).map_err(|e| tag(&sys.name, e))
            })?;
            let single = recipe.factors.len() == 1;
            for ((sys, f), o) in jobs.iter().zip(&outs) {
                let stem = if single { sys.name.clone() } else { format!("{}_x{}", sys.name, factor_label(*f)) };
                report.files.push(write_log(out, &stem, &o.records)?);
                if recipe.kind == RecipeKind::Recovery {
                    let path = out.join(format!("{stem}_max_tbt_cdf.csv"));
                    write_cdf_csv(&max_tbt_cdf(&o.records), fs::File::create(&path)?)?;
                    report.files.push(path);
                }
                let s = summarize(&o.records);
                report.rows.push(SummaryRow::new(&sys.name, recipe.settings.stage, *f, &s, &o.records));
            }
        }
        RecipeKind::Breakdown => {
            let f = recipe.factors[0];
            let trace = scale_arrivals(&l.trace, f);
            let jobs: Vec<(&SystemSpec, Stage)> = [Stage::PrefillOnly, Stage::DecodeOnly]
                .into_iter()
                .flat_map(|st| recipe.systems.iter().map(move |s| (s, st)))
                .collect();
            let outs = run_jobs(&jobs, |(sys, st)| {
                let mut cfg = sim_config(recipe, &l, sys, *st);
                cfg.tbt_stats = false;
                run_simulation(&cfg, &trace, &[]).map_err(|e| tag(&sys.name, e))
            })?;
            for ((sys, st), o) in jobs.iter().zip(&outs) {
                report.files.push(write_log(out, &format!("{}_{}", sys.name, st), &o.records)?);
                let s = summarize(&o.records);
                report.rows.push(SummaryRow::new(&sys.name, *st, f, &s, &o.records));
            }
        }
        RecipeKind::Offline => {
            let mut jobs: Vec<(&SystemSpec, u32)> = Vec::new();
            for sys in &recipe.systems {
                let policy = sim_config(recipe, &l, sys, recipe.settings.stage).policy;
                let sizes: BTreeSet<u32> = (1..=l.cluster.num_gpus).filter_map(|a| policy.world_size(a)).collect();
                jobs.extend(sizes.into_iter().map(|w| (sys, w)));
            }
            let trace = scale_arrivals(&l.trace, recipe.factors[0]);
            let outs = run_jobs(&jobs, |(sys, w)| {
                let mut cfg = sim_config(recipe, &l, sys, recipe.settings.stage);
                cfg.initial_alive = Some(*w);
                cfg.stop_at_drain = true;
                cfg.tbt_stats = false;
                run_simulation(&cfg, &trace, &[]).map_err(|e| tag(&sys.name, e))
            })?;
            for ((sys, w), o) in jobs.iter().zip(&outs) {
                report.files.push(write_log(out, &format!("{}_world{}", sys.name, w), &o.records)?);
                report.world_throughput.entry(sys.name.clone()).or_default().insert(*w, o.run.sustained_throughput);
            }
            // Fault-free reference: the best full-node throughput among systems.
            let full = l.cluster.num_gpus;
            let best_full = report.world_throughput.values().filter_map(|t| t.get(&full)).copied().fold(0.0, f64::max);
            let switch = recipe.settings.switch_latency.unwrap_or(l.cluster.switch_latency);
            for sys in &recipe.systems {
                let policy = sim_config(recipe, &l, sys, recipe.settings.stage).policy;
                let table = &report.world_throughput[&sys.name];
                let r = offline_replay(
                    &l.availability,
                    recipe.settings.capacity,
                    l.cluster.num_gpus,
                    &policy,
                    table,
                    switch,
                    recipe.seed,
                );
                let fault_free = best_full * (recipe.settings.capacity / full) as f64;
                let fault_scaled = best_full * r.mean_available / full as f64;
                report.offline.push(OfflineRow {
                    system: sys.name.clone(),
                    policy: sys.policy,
                    avg_throughput: r.avg_throughput,
                    fault_free_throughput: fault_free,
                    fault_scaled_throughput: fault_scaled,
                    fraction_of_fault_scaled: if fault_scaled > 0.0 { r.avg_throughput / fault_scaled } else { 0.0 },
                    mean_available_gpus: r.mean_available,
                });
            }
            let path = out.join("world_throughput.csv");
            let mut w = csv::Writer::from_path(&path)?;
            w.write_record(["system", "world", "throughput"])?;
            for (name, t) in &report.world_throughput {
                for (n, v) in t {
                    w.write_record([name.clone(), n.to_string(), v.to_string()])?;
                }
            }
            w.flush()?;
            report.files.push(path);
        }
    }
    let path = out.join("summary.csv");
    let mut w = csv::Writer::from_path(&path)?;
    if recipe.kind == RecipeKind::Offline {
        for r in &report.offline {
            w.serialize(r)?;
        }
    } else {
        for r in &report.rows {
            w.serialize(r)?;
        }
    }
    w.flush()?;
    report.files.push(path);
    Ok(report)
}

fn run_jobs<J: Sync>(jobs: &[J], f: impl Fn(&J) -> Result<SimOutput> + Sync) -> Result<Vec<SimOutput>> {
    jobs.par_iter().map(&f).collect()
}

fn write_log(out: &Path, stem: &str, records: &[MetricRecord]) -> Result<PathBuf> {
    let path = out.join(format!("{stem}.jsonl"));
    let file = std::io::BufWriter::new(fs::File::create(&path)?);
    write_jsonl(records, file)?;
    Ok(path)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OfflineResult {
    pub avg_throughput: f64,
    pub mean_available: f64,
    pub duration: f64,
}

/// Replay an availability series over nodes of `node_size` GPUs. Each node
/// serves at the steady-state throughput of its current world size and
/// produces nothing for `switch` seconds after every world change.
pub fn offline_replay(
    series: &[AvailabilityPoint],
    capacity: u32,
    node_size: u32,
    policy: &ReconfigPolicy,
    world_throughput: &BTreeMap<u32, f64>,
    switch: f64,
    seed: u64,
) -> OfflineResult {
    let duration = series.last().map_or(0.0, |p| p.ts_s);
    if duration <= 0.0 {
        return OfflineResult { avg_throughput: 0.0, mean_available: capacity as f64, duration };
    }
    let events = availability_events(series, capacity, seed);
    let nodes = capacity.div_ceil(node_size) as usize;
    let node_of = |g: GpuId| (g.0 / node_size) as usize;
    let mut alive: Vec<BTreeSet<GpuId>> = (0..nodes)
        .map(|i| (i as u32 * node_size..((i as u32 + 1) * node_size).min(capacity)).map(GpuId).collect())
        .collect();
    let rate = |alive: &BTreeSet<GpuId>| -> (Option<BTreeSet<GpuId>>, f64) {
        let w = policy.select_world(alive);
        let t = w.as_ref().map_or(0.0, |w| world_throughput.get(&(w.len() as u32)).copied().unwrap_or(0.0));
        (w, t)
    };
    let mut world: Vec<Option<BTreeSet<GpuId>>> = Vec::with_capacity(nodes);
    let mut thr: Vec<f64> = Vec::with_capacity(nodes);
    for a in &alive {
        let (w, t) = rate(a);
        world.push(w);
        thr.push(t);
    }
    // Each node's output is `thr` except inside `[changed, changed + switch)`.
    let mut paused_until = vec![0.0f64; nodes];
    let mut last = 0.0;
    let mut tokens = 0.0;
    let mut gpu_seconds = 0.0;
    let mut up = capacity as f64;
    let produce = |from: f64, to: f64, thr: &[f64], paused: &[f64]| -> f64 {
        let mut acc = 0.0;
        for (t, p) in thr.iter().zip(paused) {
            let start = from.max(*p);
            if to > start {
                acc += t * (to - start);
            }
        }
        acc
    };
    for e in events.iter().filter(|e| e.time <= duration) {
        tokens += produce(last, e.time, &thr, &paused_until);
        gpu_seconds += up * (e.time - last);
        last = e.time;
        let i = node_of(e.gpu);
        match e.kind {
            FailureKind::Fail => {
                alive[i].remove(&e.gpu);
                up -= 1.0;
            }
            FailureKind::Recover => {
                alive[i].insert(e.gpu);
                up += 1.0;
            }
        }
        let (w, t) = rate(&alive[i]);
        if w != world[i] {
            world[i] = w;
            thr[i] = t;
            if t > 0.0 {
                paused_until[i] = e.time + switch;
            }
        }
    }
    tokens += produce(last, duration, &thr, &paused_until);
    gpu_seconds += up * (duration - last);
    OfflineResult { avg_throughput: tokens / duration, mean_available: gpu_seconds / duration, duration }
}
