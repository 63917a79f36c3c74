//! Replay a day of cloud GPU availability over eight nodes and compare
//! power-of-two fallback with flexible world sizes.
//!
//! ```text
//! cargo run --release --example offline_availability -- [out_dir]
//! ```

use std::path::{Path, PathBuf};

use failsafe::recipe::{run_recipe, ExperimentRecipe};

fn main() -> failsafe::Result<()> {
    let recipe = Path::new(env!("CARGO_MANIFEST_DIR")).join("data/recipes/offline-gcp.toml");
    let out: PathBuf =
        std::env::args().nth(1).map(Into::into).unwrap_or_else(|| std::env::temp_dir().join("offline-gcp"));
    let (r, base) = ExperimentRecipe::load(&recipe)?;
    let report = run_recipe(&r, &base, &out)?;

    println!("steady-state node throughput by world size (tokens/s):");
    for (system, table) in &report.world_throughput {
        let cells: Vec<String> = table.iter().map(|(n, t)| format!("{n}:{t:.0}")).collect();
        println!("  {system:<10} {}", cells.join("  "));
    }
    println!();
    for x in &report.offline {
        println!(
            "{:<10} avg {:>8.0} tok/s   {:.1}% of fault-scaled ({:.0})   mean GPUs up {:.2}",
            x.system,
            x.avg_throughput,
            100.0 * x.fraction_of_fault_scaled,
            x.fault_scaled_throughput,
            x.mean_available_gpus
        );
    }
    if let [a, b] = &report.offline[..] {
        println!("\n{} / {} = {:.2}x", a.system, b.system, a.avg_throughput / b.avg_throughput);
    }
    Ok(())
}
