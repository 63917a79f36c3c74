//! TTFT and TBT as the arrival rate rises, for a 7-GPU node with flexible
//! reconfiguration versus power-of-two fallback.
//!
//! ```text
//! cargo run --release --example latency_sweep -- [out_dir]
//! ```

use std::path::{Path, PathBuf};

use failsafe::recipe::{run_recipe, ExperimentRecipe};

fn main() -> failsafe::Result<()> {
    let recipe = Path::new(env!("CARGO_MANIFEST_DIR")).join("data/recipes/latency-sweep.toml");
    let out: PathBuf =
        std::env::args().nth(1).map(Into::into).unwrap_or_else(|| std::env::temp_dir().join("latency-sweep"));
    let (r, base) = ExperimentRecipe::load(&recipe)?;
    let report = run_recipe(&r, &base, &out)?;
    println!(
        "{:<10} {:>7} {:>10} {:>10} {:>10} {:>10}",
        "system", "factor", "ttft p50", "ttft p99", "tbt p50", "tbt p99"
    );
    for x in &report.rows {
        println!(
            "{:<10} {:>7} {:>9.3}s {:>9.3}s {:>9.4}s {:>9.4}s",
            x.system, x.factor, x.ttft_p50, x.ttft_p99, x.tbt_p50, x.tbt_p99
        );
    }
    Ok(())
}
