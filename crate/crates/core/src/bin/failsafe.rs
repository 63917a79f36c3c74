use std::collections::BTreeSet;
use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use failsafe::cost::CostParams;
use failsafe::metrics::{max_tbt_cdf, read_jsonl, summarize, write_cdf_csv, write_jsonl};
use failsafe::placement::{default_num_shards, format_plan_table, placement, PlacementMode};
use failsafe::recipe::{run_recipe, ExperimentRecipe};
use failsafe::recovery::latency::per_gpu_table;
use failsafe::recovery::{
    parse_failure_trace, plan_recovery, reroute_for, BackupState, KvRequestState, Medium, PolicyKind, ReconfigPolicy,
    RecoveryInputs, RecoveryMode,
};
use failsafe::reference::verify_suite;
use failsafe::scheduler::{format_scenario_steps, replay_scenario, Scenario, SchedulerMode};
use failsafe::sim::{run_simulation, sweep_request_rate, SimConfig, Stage};
use failsafe::spec::{min_feasible_gpus, parse_cluster_spec, parse_hardware_spec, parse_model_spec};
use failsafe::trace::parse_request_trace;
use failsafe::{ClusterSpec, Error, GpuId, HardwareSpec, ModelSpec};

/// Plan, schedule and simulate tensor-parallel LLM serving through GPU
/// failures.
#[derive(Parser)]
#[command(name = "failsafe", version)]
struct Cli {
    /// Seed for anything randomized.
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,
    /// Print machine-readable JSON instead of text.
    #[arg(long, global = true)]
    json: bool,
    /// Write the main output here instead of stdout (a directory for `recipe`).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate one serving instance and write a JSONL metrics log.
    Simulate(SimArgs),
    /// Simulate at several arrival-rate scale factors.
    Sweep {
        #[command(flatten)]
        sim: SimArgs,
        /// Comma-separated arrival-time multipliers (2 halves the rate).
        #[arg(long, value_delimiter = ',', default_value = "2,1,0.5")]
        factors: Vec<f64>,
    },
    /// Plan the weight and KV movement for a world change.
    PlanRecovery {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        cluster: PathBuf,
        /// GPUs alive before the failure (ids 0..world).
        #[arg(long)]
        world: u32,
        /// Failed GPU ids, comma-separated.
        #[arg(long, value_delimiter = ',', required = true)]
        fail: Vec<u32>,
        #[arg(long, default_value = "full")]
        mode: RecoveryMode,
        #[arg(long, default_value = "hybrid")]
        placement: PlacementMode,
        /// In-flight requests spread round-robin over the old world.
        #[arg(long, default_value_t = 0)]
        resident: u64,
        /// KV tokens held per in-flight request.
        #[arg(long, default_value_t = 0)]
        context: u64,
    },
    /// Print a head and FFN-shard placement.
    Placement {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        world: u32,
        #[arg(long, default_value = "hybrid")]
        mode: PlacementMode,
        #[arg(long)]
        num_shards: Option<u32>,
    },
    /// Replay a small prefill-scheduling scenario step by step.
    Schedule {
        #[arg(long)]
        scenario: PathBuf,
        /// `adaptive`, `fifo`, or omit for both.
        #[arg(long)]
        mode: Option<SchedulerMode>,
    },
    /// Run the numerical equivalence suite on seeded toy models.
    Verify {
        #[arg(long, default_value_t = 100)]
        seeds: usize,
    },
    /// Summarize a JSONL metrics log.
    Report {
        metrics: PathBuf,
        /// Also write the per-request max-TBT CDF as CSV.
        #[arg(long)]
        cdf: Option<PathBuf>,
    },
    /// Run an experiment recipe; `--out` names the output directory.
    Recipe { recipe: PathBuf },
}

#[derive(Args)]
struct SimArgs {
    #[arg(long)]
    model: PathBuf,
    /// Cluster file; its optional `[hardware]` section sets compute rates.
    #[arg(long)]
    cluster: PathBuf,
    /// `arrival_ts_s,input_len,output_len` CSV.
    #[arg(long)]
    requests: PathBuf,
    /// `ts_s,event,gpu_id` CSV.
    #[arg(long)]
    failures: Option<PathBuf>,
    #[arg(long, default_value = "hybrid")]
    placement: PlacementMode,
    #[arg(long, default_value = "adaptive")]
    scheduler: SchedulerMode,
    #[arg(long, default_value = "flexible")]
    policy: PolicyKind,
    #[arg(long, default_value = "full")]
    recovery: RecoveryMode,
    #[arg(long, default_value = "mixed")]
    stage: Stage,
    /// Smallest usable world; derived from memory when absent.
    #[arg(long)]
    min_gpus: Option<u32>,
    /// GPUs alive at time zero.
    #[arg(long)]
    alive: Option<u32>,
    #[arg(long, default_value_t = 2048)]
    token_budget: u32,
    /// Reconfiguration pause, seconds; defaults to the cluster's.
    #[arg(long)]
    switch_latency: Option<f64>,
    /// Keep every TBT sample in request records.
    #[arg(long)]
    record_tbt: bool,
}

enum Failure {
    Validation(String),
    Runtime(String),
    Verification(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        if e.is_validation() {
            Failure::Validation(e.to_string())
        } else {
            Failure::Runtime(e.to_string())
        }
    }
}

impl From<io::Error> for Failure {
    fn from(e: io::Error) -> Self {
        Failure::Runtime(e.to_string())
    }
}

type CliResult<T> = std::result::Result<T, Failure>;

fn read(path: &Path) -> CliResult<String> {
    fs::read_to_string(path).map_err(|e| Failure::Validation(format!("{}: {e}", path.display())))
}

fn emit(out: Option<&Path>, bytes: &[u8]) -> CliResult<()> {
    match out {
        Some(p) => fs::write(p, bytes)?,
        None => io::stdout().write_all(bytes)?,
    }
    Ok(())
}

fn json<T: serde::Serialize>(v: &T) -> Vec<u8> {
    let mut s = serde_json::to_vec_pretty(v).expect("serializable");
    s.push(b'\n');
    s
}

fn load_node(model: &Path, cluster: &Path) -> CliResult<(ModelSpec, ClusterSpec, HardwareSpec)> {
    let m = parse_model_spec(&read(model)?)?;
    let text = read(cluster)?;
    Ok((m, parse_cluster_spec(&text)?, parse_hardware_spec(&text)?))
}

fn sim_setup(
    a: &SimArgs,
    seed: u64,
) -> CliResult<(SimConfig, Vec<failsafe::trace::TraceRequest>, Vec<failsafe::recovery::FailureEvent>)> {
    let (model, cluster, hardware) = load_node(&a.model, &a.cluster)?;
    let min = a.min_gpus.or_else(|| min_feasible_gpus(&model, &cluster, 0)).unwrap_or(cluster.num_gpus);
    let mut c = SimConfig::new(model, cluster);
    c.hardware = hardware;
    c.placement = a.placement;
    c.scheduler = a.scheduler;
    c.policy = ReconfigPolicy::new(a.policy, min);
    c.recovery = a.recovery;
    c.stage = a.stage;
    c.initial_alive = a.alive;
    c.token_budget = a.token_budget;
    c.switch_latency = a.switch_latency;
    c.record_tbt = a.record_tbt;
    c.seed = seed;
    c.validate()?;
    let trace = parse_request_trace(&read(&a.requests)?)?;
    let failures = match &a.failures {
        Some(p) => parse_failure_trace(&read(p)?)?,
        None => Vec::new(),
    };
    Ok((c, trace, failures))
}

fn run(cli: Cli) -> CliResult<()> {
    let out = cli.out.as_deref();
    match cli.command {
        Command::Simulate(a) => {
            let (config, trace, failures) = sim_setup(&a, cli.seed)?;
            let result = run_simulation(&config, &trace, &failures)?;
            let mut buf = Vec::new();
            write_jsonl(&result.records, &mut buf)?;
            emit(out, &buf)?;
            let r = &result.run;
            eprintln!(
                "{} finished, {} rejected, end {:.3} s, throughput {:.1} tok/s",
                r.finished, r.rejected, r.end_time, r.throughput
            );
        }
        Command::Sweep { sim, factors } => {
            let (config, trace, failures) = sim_setup(&sim, cli.seed)?;
            let points = sweep_request_rate(&config, &trace, &factors, &failures)?;
            if cli.json {
                emit(out, &json(&points))?;
            } else {
                let mut w = csv::Writer::from_writer(Vec::new());
                w.write_record([
                    "factor",
                    "rate",
                    "finished",
                    "throughput",
                    "ttft_mean",
                    "ttft_p50",
                    "ttft_p90",
                    "ttft_p99",
                    "tbt_mean",
                    "tbt_p50",
                    "tbt_p90",
                    "tbt_p99",
                ])
                .map_err(Error::from)?;
                for p in &points {
                    let row = [
                        p.factor,
                        p.rate,
                        p.finished as f64,
                        p.throughput,
                        p.ttft.mean,
                        p.ttft.p50,
                        p.ttft.p90,
                        p.ttft.p99,
                        p.tbt.mean,
                        p.tbt.p50,
                        p.tbt.p90,
                        p.tbt.p99,
                    ];
                    w.write_record(row.iter().map(|x| x.to_string())).map_err(Error::from)?;
                }
                emit(out, &w.into_inner().map_err(|e| Failure::Runtime(e.to_string()))?)?;
            }
        }
        Command::PlanRecovery { model, cluster, world, fail, mode, placement: mode_p, resident, context } => {
            let (m, c, hw) = load_node(&model, &cluster)?;
            if world == 0 || world > c.num_gpus {
                return Err(Failure::Validation(format!("--world must be in 1..={}", c.num_gpus)));
            }
            let alive: BTreeSet<GpuId> = (0..world).map(GpuId).collect();
            let mut new_alive = alive.clone();
            for f in &fail {
                if !new_alive.remove(&GpuId(*f)) {
                    return Err(Failure::Validation(format!("gpu{f} is not in the world")));
                }
            }
            let shards = default_num_shards(&m);
            let old = placement(mode_p, &m, &alive, shards)?;
            let params = CostParams::derive(&m, &c, &hw, shards);
            let world_ids: Vec<GpuId> = new_alive.iter().copied().collect();
            let mut requests: Vec<KvRequestState> = (0..resident)
                .map(|id| KvRequestState {
                    id,
                    kv_tokens: context,
                    old_rank: Some(old.world[id as usize % old.world.len()]),
                    new_rank: None,
                })
                .collect();
            reroute_for(&mut requests, &world_ids);
            // Host-restore modes assume the background backup has caught up.
            let mut backup = BackupState::new(true, 16);
            for r in &requests {
                backup.mark_backed(r.id, r.kv_tokens);
            }
            let inputs = RecoveryInputs {
                model: &m,
                cluster: &c,
                params: &params,
                old: &old,
                new_alive: &new_alive,
                requests: &requests,
                backup: mode.needs_backup().then_some(&backup),
                token_budget: 2048,
            };
            let outcome = plan_recovery(&inputs, mode)?;
            if cli.json {
                emit(out, &json(&outcome))?;
            } else {
                let p = &outcome.plan;
                let mut s =
                    format!("mode {mode}: {} -> {} GPUs, {} transfers\n", world, new_alive.len(), p.transfers.len());
                s.push_str(&format!("{:>6} {:>16} {:>16}\n", "gpu", "pcie_bytes", "nvlink_bytes"));
                for (g, pcie, nv) in per_gpu_table(p) {
                    s.push_str(&format!("{:>6} {:>16} {:>16}\n", g.to_string(), pcie, nv));
                }
                s.push_str(&format!(
                    "total pcie {} B, nvlink {} B, recompute {} tokens\n",
                    p.bytes_by(Medium::PcieHost),
                    p.bytes_by(Medium::NvlinkPeer),
                    p.recompute_tokens.values().sum::<u64>()
                ));
                s.push_str(&format!(
                    "transfer {:.6} s, recompute {:.6} s, latency {:.6} s\n",
                    outcome.transfer_seconds, outcome.recompute_seconds, outcome.latency
                ));
                emit(out, s.as_bytes())?;
            }
        }
        Command::Placement { model, world, mode, num_shards } => {
            let m = parse_model_spec(&read(&model)?)?;
            let alive: BTreeSet<GpuId> = (0..world).map(GpuId).collect();
            let plan = placement(mode, &m, &alive, num_shards.unwrap_or_else(|| default_num_shards(&m)))?;
            if cli.json {
                emit(out, &json(&plan))?;
            } else {
                let mut s = format_plan_table(&plan);
                s.push_str(&format!("{:>6} {:>14} {:>8} {:>16}\n", "gpu", "head_layers", "shards", "weight_bytes"));
                let counts = plan.ffn.counts();
                for g in &plan.world {
                    s.push_str(&format!(
                        "{:>6} {:>14} {:>8} {:>16}\n",
                        g.to_string(),
                        plan.tp_head_layers(*g) + plan.dp_head_layers(),
                        counts.get(g).copied().unwrap_or(0),
                        plan.weight_bytes(&m, *g)
                    ));
                }
                emit(out, s.as_bytes())?;
            }
        }
        Command::Schedule { scenario, mode } => {
            let sc: Scenario =
                serde_json::from_str(&read(&scenario)?).map_err(|e| Failure::Validation(e.to_string()))?;
            let modes = match mode {
                Some(m) => vec![m],
                None => vec![SchedulerMode::Adaptive, SchedulerMode::Fifo],
            };
            let mut runs = Vec::new();
            for m in modes {
                runs.push((m, replay_scenario(&sc, m)?));
            }
            if cli.json {
                let v: Vec<_> =
                    runs.iter().map(|(m, s)| serde_json::json!({ "mode": m.to_string(), "steps": s })).collect();
                emit(out, &json(&v))?;
            } else {
                let mut s = String::new();
                for (m, steps) in &runs {
                    s.push_str(&format!("[{m}]\n{}", format_scenario_steps(steps)));
                }
                emit(out, s.as_bytes())?;
            }
        }
        Command::Verify { seeds } => {
            if seeds == 0 {
                return Err(Failure::Validation("--seeds must be at least 1".into()));
            }
            let rows = verify_suite(seeds, cli.seed);
            if cli.json {
                emit(out, &json(&rows))?;
            } else {
                let mut s =
                    format!("{:<22} {:>6} {:>7} {:>12} {:>9}  result\n", "check", "cases", "passed", "max_dev", "tol");
                for r in &rows {
                    s.push_str(&format!(
                        "{:<22} {:>6} {:>7} {:>12.3e} {:>9.0e}  {}\n",
                        r.check,
                        r.cases,
                        r.passed,
                        r.max_deviation,
                        r.tolerance,
                        if r.ok() { "pass" } else { "FAIL" }
                    ));
                }
                emit(out, s.as_bytes())?;
            }
            if let Some(r) = rows.iter().find(|r| !r.ok()) {
                return Err(Failure::Verification(format!(
                    "{} failed {} of {} cases",
                    r.check,
                    r.cases - r.passed,
                    r.cases
                )));
            }
        }
        Command::Report { metrics, cdf } => {
            let records = read_jsonl(io::BufReader::new(
                fs::File::open(&metrics).map_err(|e| Failure::Validation(format!("{}: {e}", metrics.display())))?,
            ))?;
            let s = summarize(&records);
            if let Some(path) = cdf {
                write_cdf_csv(&max_tbt_cdf(&records), fs::File::create(path)?)?;
            }
            if cli.json {
                emit(out, &json(&s))?;
            } else {
                let mut t = format!(
                    "requests {}  finished {}  rejected {}\nthroughput {:.3} tok/s  sustained {:.3}  peak {:.3}\n",
                    s.requests, s.finished, s.rejected, s.throughput, s.sustained_throughput, s.peak_throughput
                );
                t.push_str(&format!(
                    "{:<8} {:>10} {:>10} {:>10} {:>10} {:>10}\n",
                    "", "mean", "p50", "p90", "p99", "max"
                ));
                for (name, l) in [("ttft", &s.ttft), ("tbt", &s.tbt), ("max_tbt", &s.max_tbt)] {
                    t.push_str(&format!(
                        "{:<8} {:>10.4} {:>10.4} {:>10.4} {:>10.4} {:>10.4}\n",
                        name, l.mean, l.p50, l.p90, l.p99, l.max
                    ));
                }
                t.push_str(&format!("recoveries {}  mean pause {:.4} s\n", s.recoveries, s.mean_recovery_latency));
                if let Some(w) = &s.warning {
                    t.push_str(&format!("warning: {w}\n"));
                }
                emit(out, t.as_bytes())?;
            }
        }
        Command::Recipe { recipe } => {
            let (r, base) = ExperimentRecipe::load(&recipe)?;
            r.validate()?;
            let dir = out.map(Path::to_path_buf).unwrap_or_else(|| PathBuf::from("out").join(&r.name));
            fs::create_dir_all(&dir)?;
            let report = run_recipe(&r, &base, &dir)?;
            for f in &report.files {
                println!("{}", f.display());
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Validation(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(1)
        }
        Err(Failure::Runtime(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(2)
        }
        Err(Failure::Verification(m)) => {
            eprintln!("verification failed: {m}");
            ExitCode::from(3)
        }
    }
}
