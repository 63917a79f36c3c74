//! Where the throughput of a 7-GPU node comes from: falling back to TP4,
//! non-uniform TP7, memory-balanced placement, and compute-balanced hybrid
//! attention with load-aware scheduling.
//!
//! ```text
//! cargo run --release --example breakdown -- [out_dir]
//! ```

use std::path::{Path, PathBuf};

use failsafe::recipe::{run_recipe, ExperimentRecipe};
use failsafe::sim::Stage;

fn main() -> failsafe::Result<()> {
    let recipe = Path::new(env!("CARGO_MANIFEST_DIR")).join("data/recipes/breakdown.toml");
    let out: PathBuf =
        std::env::args().nth(1).map(Into::into).unwrap_or_else(|| std::env::temp_dir().join("breakdown"));
    let (r, base) = ExperimentRecipe::load(&recipe)?;
    let report = run_recipe(&r, &base, &out)?;

    for stage in [Stage::PrefillOnly, Stage::DecodeOnly] {
        println!("{stage}: saturated throughput (tokens/s)");
        let rows: Vec<_> = report.rows.iter().filter(|x| x.stage == stage).collect();
        let first = rows[0].sustained_throughput;
        for x in rows {
            println!("  {:<18} {:>9.0}  x{:.2}", x.system, x.sustained_throughput, x.sustained_throughput / first);
        }
    }
    println!("logs in {}", out.display());
    Ok(())
}
