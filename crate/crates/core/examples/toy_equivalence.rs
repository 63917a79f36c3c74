//! Sharded execution of a toy transformer gives the single-device answer:
//! hybrid attention with the requests spread over three ranks, then the
//! same after losing a rank and recovering only the missing weights.

use std::collections::BTreeSet;

use failsafe::placement::{placement, PlacementMode};
use failsafe::recovery::{plan_weight_recovery, WeightMode};
use failsafe::reference::{
    max_relative_deviation, parallel_forward, recovery_equivalence, reference_forward, verify_suite, Mat, ShardedView,
    ToyConfig, ToyModel,
};
use failsafe::GpuId;

fn main() -> failsafe::Result<()> {
    let config = ToyConfig { num_layers: 2, num_kv_heads: 4, group_size: 2, head_dim: 4, hidden_dim: 16, ffn_dim: 48 };
    let model = ToyModel::random(config, 1)?;
    let spec = config.model_spec();
    let inputs: Vec<Mat> =
        (0..3).map(|r| Mat::from_fn(3, 16, |i, j| ((r * 31 + i * 7 + j) as f64 * 0.37).sin())).collect();

    let four: BTreeSet<GpuId> = (0..4).map(GpuId).collect();
    let three: BTreeSet<GpuId> = (0..3).map(GpuId).collect();
    let plan = placement(PlacementMode::Hybrid, &spec, &three, 12)?;
    let view = ShardedView::new(&model, &plan)?;
    let routing = [GpuId(0), GpuId(1), GpuId(2)];
    let got = parallel_forward(&view, &plan, Some(&routing), &inputs)?;
    let want = reference_forward(&model, &inputs)?;
    println!("hybrid on 3 ranks: max relative deviation {:.2e}", max_relative_deviation(&got, &want));

    let old = placement(PlacementMode::Hybrid, &spec, &four, 12)?;
    let (target, recovery) = plan_weight_recovery(&spec, &old, &three, WeightMode::OnDemand)?;
    let ok = recovery_equivalence(&model, &old, GpuId(3), &target, &recovery, &inputs)?;
    println!("4 -> 3 ranks with {} transfers: equivalent = {ok}", recovery.transfers.len());

    println!();
    for r in verify_suite(50, 0) {
        println!("{:<22} {}/{}  max deviation {:.2e}", r.check, r.passed, r.cases, r.max_deviation);
    }
    Ok(())
}
