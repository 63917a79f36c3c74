use std::collections::BTreeMap;

use super::plan::{Medium, RecoveryPlan};
use crate::cost::{reprefill_time, CostParams};
use crate::placement::PlanProfile;
use crate::spec::{ClusterSpec, GpuId};

/// Time for all transfers: each GPU pulls its PCIe bytes from host while
/// peer exchange overlaps, so only NVLink time beyond the PCIe time shows.
pub fn transfer_time(plan: &RecoveryPlan, cluster: &ClusterSpec) -> f64 {
    let worst = |m: Medium| plan.per_gpu(m).values().copied().max().unwrap_or(0) as f64;
    let pcie = worst(Medium::PcieHost) / cluster.pcie_bw_per_gpu;
    let nvlink = worst(Medium::NvlinkPeer) / cluster.nvlink_bw_per_gpu;
    pcie.max(nvlink)
}

/// Time to recompute the plan's recompute tokens by chunked re-prefill on
/// the new placement.
pub fn recompute_time(
    recompute_tokens: &BTreeMap<u64, u64>,
    profile: &PlanProfile,
    params: &CostParams,
    budget: u32,
) -> f64 {
    let lengths: Vec<u32> = recompute_tokens.values().map(|t| (*t).min(u32::MAX as u64) as u32).collect();
    reprefill_time(profile, params, &lengths, budget)
}

/// Completion time of a recovery plan; sets `plan.completion_time`.
pub fn recovery_latency(
    plan: &mut RecoveryPlan,
    cluster: &ClusterSpec,
    params: &CostParams,
    profile: &PlanProfile,
    budget: u32,
) -> f64 {
    let t = transfer_time(plan, cluster) + recompute_time(&plan.recompute_tokens, profile, params, budget);
    plan.completion_time = t;
    t
}

/// Per-GPU PCIe and NVLink byte table, one row per destination.
pub fn per_gpu_table(plan: &RecoveryPlan) -> Vec<(GpuId, u64, u64)> {
    let pcie = plan.per_gpu(Medium::PcieHost);
    let nv = plan.per_gpu(Medium::NvlinkPeer);
    let mut gpus: Vec<GpuId> = pcie.keys().chain(nv.keys()).copied().collect();
    gpus.sort();
    gpus.dedup();
    gpus.into_iter().map(|g| (g, pcie.get(&g).copied().unwrap_or(0), nv.get(&g).copied().unwrap_or(0))).collect()
}
