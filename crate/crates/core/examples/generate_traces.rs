//! Regenerate the bundled synthetic traces.
//!
//! ```text
//! cargo run --example generate_traces -- [out_dir]
//! ```

use std::fs::File;
use std::path::PathBuf;

use failsafe::trace::{
    synth_availability, synth_mooncake, synth_openthoughts, write_availability_series, write_request_trace,
};

fn main() -> failsafe::Result<()> {
    let out: PathBuf = std::env::args()
        .nth(1)
        .map(Into::into)
        .unwrap_or_else(|| PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("data/traces"));
    std::fs::create_dir_all(&out)?;

    // Conversation workload, one request per second on average.
    let mooncake = synth_mooncake(3000, 1.0, 20250601);
    write_request_trace(&mooncake, File::create(out.join("mooncake.csv"))?)?;

    // Reasoning workload as an offline batch: everything arrives at t=0.
    let reasoning = synth_openthoughts(1000, 0.0, 20250602);
    write_request_trace(&reasoning, File::create(out.join("openthoughts.csv"))?)?;

    // 64 GPUs over one day: a GPU fails every ~8 h on average and is back
    // after ~30 min; some failures take out up to three GPUs at once.
    let avail = synth_availability(64, 86_400.0, 1.0 / 27_000.0, 1.0 / 1_800.0, 3, 20250603);
    let mut series = avail.clone();
    series.push(failsafe::recovery::AvailabilityPoint {
        ts_s: 86_400.0,
        available_gpus: avail.last().unwrap().available_gpus,
    });
    write_availability_series(&series, File::create(out.join("gcp_availability.csv"))?)?;

    let mean_len = |xs: &[failsafe::trace::TraceRequest], f: fn(&failsafe::trace::TraceRequest) -> u32| {
        xs.iter().map(|r| f(r) as f64).sum::<f64>() / xs.len() as f64
    };
    println!(
        "mooncake:      {} requests, mean input {:.0}, mean output {:.0}",
        mooncake.len(),
        mean_len(&mooncake, |r| r.input_len),
        mean_len(&mooncake, |r| r.output_len)
    );
    println!(
        "openthoughts:  {} requests, mean input {:.0}, mean output {:.0}",
        reasoning.len(),
        mean_len(&reasoning, |r| r.input_len),
        mean_len(&reasoning, |r| r.output_len)
    );
    let mut area = 0.0;
    for w in series.windows(2) {
        area += w[0].available_gpus as f64 * (w[1].ts_s - w[0].ts_s);
    }
    println!(
        "availability:  {} points, mean {:.2} of 64 GPUs, min {}",
        series.len(),
        area / 86_400.0,
        series.iter().map(|p| p.available_gpus).min().unwrap()
    );
    println!("written to {}", out.display());
    Ok(())
}
