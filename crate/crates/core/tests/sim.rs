use failsafe::metrics::{read_jsonl, summarize, write_jsonl, MetricRecord};
use failsafe::placement::PlacementMode;
use failsafe::recovery::{FailureEvent, FailureKind, RecoveryMode};
use failsafe::sim::{run_simulation, sweep_request_rate, SimConfig};
use failsafe::spec::parse_model_spec;
use failsafe::trace::synth_mooncake;
use failsafe::{ClusterSpec, GpuId};

fn config() -> SimConfig {
    let m = parse_model_spec(include_str!("../data/models/llama70b.toml")).unwrap();
    SimConfig::new(m, ClusterSpec::h100x8())
}

#[test]
fn failure_and_rejoin_are_logged_and_everyone_finishes() {
    let trace = synth_mooncake(60, 1.0, 3);
    let fails = [
        FailureEvent { time: 20.0, kind: FailureKind::Fail, gpu: GpuId(5) },
        FailureEvent { time: 45.0, kind: FailureKind::Recover, gpu: GpuId(5) },
    ];
    let mut c = config();
    c.switch_latency = Some(1.0);
    for mode in RecoveryMode::ALL {
        c.recovery = mode;
        let out = run_simulation(&c, &trace, &fails).unwrap();
        assert_eq!(out.run.finished, 60, "{mode}");
        let recoveries: Vec<_> =
            out.records.iter().filter_map(|r| if let MetricRecord::Recovery(x) = r { Some(x) } else { None }).collect();
        assert_eq!(recoveries.len(), 2, "{mode}");
        assert_eq!((recoveries[0].from_world, recoveries[0].to_world), (8, 7));
        assert_eq!((recoveries[1].from_world, recoveries[1].to_world), (7, 8));
    }
}

#[test]
fn jsonl_log_summarizes_the_same_after_round_trip() {
    let out = run_simulation(&config(), &synth_mooncake(30, 0.5, 4), &[]).unwrap();
    let mut buf = Vec::new();
    write_jsonl(&out.records, &mut buf).unwrap();
    let back = read_jsonl(&buf[..]).unwrap();
    assert_eq!(back, out.records);
    let s = summarize(&back);
    assert_eq!(s.finished, 30);
    assert!(s.ttft.p50 <= s.ttft.p90 && s.ttft.p90 <= s.ttft.p99 && s.ttft.p99 <= s.ttft.max);
    assert!(s.warning.is_none());
}

#[test]
fn naive_placement_runs_and_heavier_load_means_longer_ttft() {
    let mut c = config();
    c.placement = PlacementMode::Naive;
    let pts = sweep_request_rate(&c, &synth_mooncake(80, 1.0, 5), &[4.0, 0.25], &[]).unwrap();
    assert!(pts[0].rate < pts[1].rate);
    assert!(pts[0].ttft.mean < pts[1].ttft.mean);
}
