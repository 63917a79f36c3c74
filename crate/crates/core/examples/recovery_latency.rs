//! Recovery latency of the four strategies after one GPU of an 8-GPU decode
//! instance fails mid-trace, and the worst token gap each request sees.
//!
//! ```text
//! cargo run --release --example recovery_latency -- [out_dir]
//! ```

use std::path::{Path, PathBuf};

use failsafe::recipe::{run_recipe, ExperimentRecipe};

fn main() -> failsafe::Result<()> {
    let recipe = Path::new(env!("CARGO_MANIFEST_DIR")).join("data/recipes/recovery.toml");
    let out: PathBuf = std::env::args().nth(1).map(Into::into).unwrap_or_else(|| std::env::temp_dir().join("recovery"));
    let (r, base) = ExperimentRecipe::load(&recipe)?;
    let report = run_recipe(&r, &base, &out)?;

    println!("{:<10} {:>12} {:>14} {:>14}", "mode", "restore", "max TBT p50", "max TBT p99");
    for x in &report.rows {
        println!("{:<10} {:>10.3} s {:>12.3} s {:>12.3} s", x.system, x.restore_s, x.max_tbt_p50, x.max_tbt_p99);
    }
    println!("per-request max-TBT CDFs in {}", out.display());
    Ok(())
}
