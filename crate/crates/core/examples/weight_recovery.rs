//! Weight traffic when one GPU of an 8-GPU LLaMA-70B instance fails:
//! re-sharding from host versus fetching only what was lost.

use std::collections::BTreeSet;

use failsafe::placement::{default_num_shards, placement, PlacementMode};
use failsafe::recovery::latency::{per_gpu_table, transfer_time};
use failsafe::recovery::{lost_weight_bytes, plan_weight_recovery, Medium, WeightMode};
use failsafe::spec::parse_model_spec;
use failsafe::{ClusterSpec, GpuId};

fn main() -> failsafe::Result<()> {
    let model = parse_model_spec(include_str!("../data/models/llama70b.toml"))?;
    let cluster = ClusterSpec::h100x8();
    let old = placement(PlacementMode::Hybrid, &model, &(0..8).map(GpuId).collect(), default_num_shards(&model))?;
    let alive: BTreeSet<GpuId> = (0..7).map(GpuId).collect();
    let gib = |b: u64| b as f64 / (1u64 << 30) as f64;
    println!("lost with gpu7: {:.2} GiB", gib(lost_weight_bytes(&model, &old, &alive)));

    for mode in [WeightMode::NaiveReshard, WeightMode::OnDemand] {
        let (_, plan) = plan_weight_recovery(&model, &old, &alive, mode)?;
        println!(
            "\n{mode}: PCIe {:.2} GiB, NVLink {:.2} GiB, {:.3} s",
            gib(plan.bytes_by(Medium::PcieHost)),
            gib(plan.bytes_by(Medium::NvlinkPeer)),
            transfer_time(&plan, &cluster)
        );
        for (g, pcie, nv) in per_gpu_table(&plan) {
            println!("  {g}: pcie {:>6.2} GiB  nvlink {:>6.2} GiB", gib(pcie), gib(nv));
        }
    }
    Ok(())
}
