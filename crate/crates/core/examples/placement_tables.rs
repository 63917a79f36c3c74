//! Head placement of a four-head model on three GPUs under the three
//! layouts, with the KV each GPU ends up holding for three equal requests.

use std::collections::{BTreeMap, BTreeSet};

use failsafe::placement::{format_plan_table, memory_footprint, placement, PlacementMode};
use failsafe::spec::parse_model_spec;
use failsafe::GpuId;

fn main() -> failsafe::Result<()> {
    let model = parse_model_spec(include_str!("../data/models/toy.toml"))?;
    let alive: BTreeSet<GpuId> = (0..3).map(GpuId).collect();
    let tokens: BTreeMap<u64, u64> = (0..3).map(|i| (i, 1000)).collect();
    let routing: BTreeMap<u64, GpuId> = (0..3).map(|i| (i, GpuId(i as u32))).collect();

    for mode in [PlacementMode::Naive, PlacementMode::Cyclic, PlacementMode::Hybrid] {
        let plan = placement(mode, &model, &alive, 12)?;
        println!("== {mode} ==");
        print!("{}", format_plan_table(&plan));
        let kv = memory_footprint(&plan, &model, &tokens, &routing)?;
        let cells: Vec<String> = kv.iter().map(|(g, b)| format!("{g} {} KiB", b / 1024)).collect();
        println!("KV: {}\n", cells.join(", "));
    }
    Ok(())
}
