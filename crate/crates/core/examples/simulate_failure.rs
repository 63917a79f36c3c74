//! One mixed prefill/decode instance serving a short conversation trace
//! while GPU 6 fails and later rejoins.

use failsafe::metrics::{summarize, MetricRecord};
use failsafe::recovery::{FailureEvent, FailureKind};
use failsafe::sim::{run_simulation, SimConfig};
use failsafe::spec::parse_model_spec;
use failsafe::trace::synth_mooncake;
use failsafe::{ClusterSpec, GpuId};

fn main() -> failsafe::Result<()> {
    let model = parse_model_spec(include_str!("../data/models/llama70b.toml"))?;
    let mut config = SimConfig::new(model, ClusterSpec::h100x8());
    config.seed = 1;
    let trace = synth_mooncake(200, 1.0, 9);
    let failures = [
        FailureEvent { time: 60.0, kind: FailureKind::Fail, gpu: GpuId(6) },
        FailureEvent { time: 140.0, kind: FailureKind::Recover, gpu: GpuId(6) },
    ];
    let out = run_simulation(&config, &trace, &failures)?;
    for r in &out.records {
        if let MetricRecord::Recovery(x) = r {
            println!(
                "t={:>7.2}s {} -> {} GPUs: restore {:.3}s, recompute {} tokens, switch {:.1}s",
                x.time, x.from_world, x.to_world, x.restore_s, x.recompute_tokens, x.switch_s
            );
        }
    }
    let s = summarize(&out.records);
    println!("finished {}/{}", s.finished, s.requests);
    println!("TTFT p50 {:.3}s p99 {:.3}s; TBT p50 {:.4}s p99 {:.4}s", s.ttft.p50, s.ttft.p99, s.tbt.p50, s.tbt.p99);
    println!("throughput {:.0} tokens/s", out.run.throughput);
    Ok(())
}
