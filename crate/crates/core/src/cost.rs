//! Per-layer roofline timing of one serving iteration.
//!
//! Every layer is a synchronization point: its attention time is the slowest
//! GPU's attention time, followed by an all-reduce; the FFN half works the
//! same way. A GPU's time for a phase is `max(flops / peak, bytes / hbm_bw)`.

use serde::{Deserialize, Serialize};

use crate::placement::{shard_bytes, PlanProfile};
use crate::spec::{ClusterSpec, HardwareSpec, ModelSpec};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CostParams {
    /// Projection flops per KV head per token (all grouped query heads).
    pub attn_flop_per_head_token: f64,
    /// Score and value flops per KV head per (query token, context token).
    pub attn_context_flop: f64,
    pub ffn_flop_per_token_per_shard: f64,
    pub gpu_throughput: f64,
    pub hbm_bandwidth: f64,
    pub head_weight_bytes: f64,
    pub shard_bytes: f64,
    pub kv_head_token_bytes: f64,
    pub activation_bytes_per_token: f64,
    pub num_layers: u32,
    pub allreduce_alpha: f64,
    pub allreduce_beta: f64,
    /// Latency of a metadata-only (oracle) recovery.
    pub metadata_latency: f64,
}

impl CostParams {
    pub fn derive(model: &ModelSpec, cluster: &ClusterSpec, hw: &HardwareSpec, num_shards: u32) -> Self {
        let hd = model.head_dim as f64;
        let hidden = model.hidden_dim as f64;
        let g = model.group_size() as f64;
        let shard_width = (model.ffn_intermediate_dim / num_shards) as f64;
        CostParams {
            attn_flop_per_head_token: 2.0 * hidden * hd * (2.0 * g + 2.0),
            attn_context_flop: 4.0 * g * hd,
            ffn_flop_per_token_per_shard: 2.0 * 3.0 * hidden * shard_width * model.experts_per_token as f64,
            gpu_throughput: hw.gpu_flops,
            hbm_bandwidth: hw.hbm_bandwidth,
            head_weight_bytes: model.attn_bytes_per_head_layer() as f64,
            shard_bytes: shard_bytes(model, num_shards) as f64,
            kv_head_token_bytes: model.kv_bytes_per_head_token() as f64,
            activation_bytes_per_token: hidden * model.bytes_per_param as f64,
            num_layers: model.num_layers,
            allreduce_alpha: cluster.allreduce_alpha,
            allreduce_beta: cluster.allreduce_beta,
            metadata_latency: 0.015,
        }
    }

    /// Attention context cost relative to projection cost, per token; the
    /// `kappa` of the scheduler's token cost.
    pub fn kappa(&self) -> f64 {
        self.attn_context_flop / self.attn_flop_per_head_token
    }

    pub fn allreduce(&self, world: usize, tokens: u64) -> f64 {
        if world <= 1 || tokens == 0 {
            return 0.0;
        }
        self.allreduce_alpha + self.allreduce_beta * tokens as f64 * self.activation_bytes_per_token
    }
}

/// New tokens of one request processed in an iteration.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WorkItem {
    /// Index into the plan's world of the rank serving its replicated heads.
    pub rank: usize,
    pub tokens: u32,
    /// Tokens already in the request's KV before this iteration.
    pub context: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationProfile {
    pub total: f64,
    /// Per-rank busy seconds (excluding waits and communication).
    pub busy: Vec<f64>,
}

impl IterationProfile {
    /// Max over min per-rank busy time; 1 when perfectly balanced.
    pub fn busy_ratio(&self) -> f64 {
        let hi = self.busy.iter().copied().fold(0.0, f64::max);
        let lo = self.busy.iter().copied().fold(f64::INFINITY, f64::min);
        if lo <= 0.0 {
            if hi <= 0.0 {
                1.0
            } else {
                f64::INFINITY
            }
        } else {
            hi / lo
        }
    }
}

pub fn iteration_time(profile: &PlanProfile, items: &[WorkItem], params: &CostParams) -> f64 {
    iteration_profile(profile, items, params).total
}

pub fn iteration_profile(profile: &PlanProfile, items: &[WorkItem], params: &CostParams) -> IterationProfile {
    let n = profile.world.len();
    let mut busy = vec![0.0; n];
    if items.is_empty() || n == 0 {
        return IterationProfile { total: 0.0, busy };
    }
    // Per-head flops and KV bytes, over all items and per routed rank.
    let mut f_all = 0.0;
    let mut b_all = 0.0;
    let mut f_rank = vec![0.0; n];
    let mut b_rank = vec![0.0; n];
    let mut tokens = 0u64;
    for it in items {
        let t = it.tokens as f64;
        let c = it.context as f64;
        let f = params.attn_flop_per_head_token * t + params.attn_context_flop * (t * c + t * (t - 1.0) / 2.0);
        let b = params.kv_head_token_bytes * (c + t);
        f_all += f;
        b_all += b;
        f_rank[it.rank] += f;
        b_rank[it.rank] += b;
        tokens += it.tokens as u64;
    }
    let ar = params.allreduce(n, tokens);
    let mut total = 0.0;
    for (layer, tp_row) in profile.tp_counts.iter().enumerate() {
        let dp = profile.dp_counts[layer] as f64;
        let mut worst: f64 = 0.0;
        for g in 0..n {
            let tp = tp_row[g] as f64;
            let flops = tp * f_all + dp * f_rank[g];
            let bytes = (tp + dp) * params.head_weight_bytes + tp * b_all + dp * b_rank[g];
            let t = (flops / params.gpu_throughput).max(bytes / params.hbm_bandwidth);
            busy[g] += t;
            worst = worst.max(t);
        }
        total += worst + ar;
    }
    let layers = params.num_layers as f64;
    let mut worst: f64 = 0.0;
    for g in 0..n {
        let s = profile.shard_counts[g] as f64;
        let flops = s * tokens as f64 * params.ffn_flop_per_token_per_shard;
        let bytes = s * params.shard_bytes;
        let t = (flops / params.gpu_throughput).max(bytes / params.hbm_bandwidth);
        busy[g] += t * layers;
        worst = worst.max(t);
    }
    total += layers * (worst + ar);
    IterationProfile { total, busy }
}

/// Time to re-prefill `lengths` tokens from scratch, packing requests in
/// order into chunks of at most `budget` tokens.
pub fn reprefill_time(profile: &PlanProfile, params: &CostParams, lengths: &[u32], budget: u32) -> f64 {
    let n = profile.world.len().max(1);
    let mut time = 0.0;
    let mut batch: Vec<WorkItem> = Vec::new();
    let mut room = budget.max(1);
    for (i, len) in lengths.iter().enumerate() {
        let mut done = 0;
        while done < *len {
            let take = room.min(len - done);
            batch.push(WorkItem { rank: i % n, tokens: take, context: done });
            done += take;
            room -= take;
            if room == 0 {
                time += iteration_time(profile, &batch, params);
                batch.clear();
                room = budget.max(1);
            }
        }
    }
    if !batch.is_empty() {
        time += iteration_time(profile, &batch, params);
    }
    time
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::placement::{placement, PlacementMode};
    use crate::spec::{parse_model_spec, GpuId};
    use std::collections::BTreeSet;

    fn llama() -> ModelSpec {
        parse_model_spec(include_str!("../data/models/llama70b.toml")).unwrap()
    }

    fn setup(mode: PlacementMode, n: u32) -> (PlanProfile, CostParams) {
        let m = llama();
        let alive: BTreeSet<GpuId> = (0..n).map(GpuId).collect();
        let plan = placement(mode, &m, &alive, 896).unwrap();
        let params = CostParams::derive(&m, &ClusterSpec::h100x8(), &HardwareSpec::default(), 896);
        (PlanProfile::new(&plan), params)
    }

    /// Attention-only time of one layer on each rank, from first principles.
    fn attention_times(profile: &PlanProfile, items: &[WorkItem], p: &CostParams, layer: usize) -> Vec<f64> {
        (0..profile.world.len())
            .map(|g| {
                let mut flops = 0.0;
                let mut bytes = (profile.tp_counts[layer][g] + profile.dp_counts[layer]) as f64 * p.head_weight_bytes;
                for it in items {
                    let heads = profile.tp_counts[layer][g] as f64
                        + if it.rank == g { profile.dp_counts[layer] as f64 } else { 0.0 };
                    for k in 0..it.tokens {
                        flops += heads * (p.attn_flop_per_head_token + p.attn_context_flop * (it.context + k) as f64);
                    }
                    bytes += heads * p.kv_head_token_bytes * (it.context + it.tokens) as f64;
                }
                (flops / p.gpu_throughput).max(bytes / p.hbm_bandwidth)
            })
            .collect()
    }

    #[test]
    fn kappa_is_small_for_llama() {
        let (_, p) = setup(PlacementMode::Naive, 8);
        assert!((p.kappa() - 1.0 / 9216.0).abs() < 1e-9, "{}", p.kappa());
    }

    #[test]
    fn naive_seven_way_heavy_gpu_doubles_attention() {
        let (prof, p) = setup(PlacementMode::Naive, 7);
        let items: Vec<WorkItem> = (0..7).map(|r| WorkItem { rank: r, tokens: 512, context: 0 }).collect();
        let t = attention_times(&prof, &items, &p, 0);
        assert!((t[0] / t[1] - 2.0).abs() < 1e-9, "{t:?}");
        let busy = iteration_profile(&prof, &items, &p).busy;
        assert!(busy[0] > busy[1]);
    }

    #[test]
    fn hybrid_one_request_per_gpu_is_balanced() {
        let (prof, p) = setup(PlacementMode::Hybrid, 7);
        let items: Vec<WorkItem> = (0..7).map(|r| WorkItem { rank: r, tokens: 300, context: 40 }).collect();
        for layer in 0..3 {
            let t = attention_times(&prof, &items, &p, layer);
            assert!(t.iter().all(|x| (x - t[0]).abs() < 1e-15));
        }
        let ip = iteration_profile(&prof, &items, &p);
        assert!((ip.busy_ratio() - 1.0).abs() < 1e-9);
    }

    #[test]
    fn matches_brute_force_layer_sum() {
        let (prof, p) = setup(PlacementMode::Hybrid, 5);
        let items = vec![
            WorkItem { rank: 0, tokens: 7, context: 3 },
            WorkItem { rank: 3, tokens: 1, context: 900 },
            WorkItem { rank: 3, tokens: 60, context: 0 },
        ];
        let tokens: u64 = items.iter().map(|i| i.tokens as u64).sum();
        let ar = p.allreduce(5, tokens);
        let mut want = 0.0;
        for layer in 0..prof.tp_counts.len() {
            want += attention_times(&prof, &items, &p, layer).into_iter().fold(0.0, f64::max) + ar;
        }
        let ffn = prof
            .shard_counts
            .iter()
            .map(|s| {
                let s = *s as f64;
                (s * tokens as f64 * p.ffn_flop_per_token_per_shard / p.gpu_throughput)
                    .max(s * p.shard_bytes / p.hbm_bandwidth)
            })
            .fold(0.0, f64::max);
        want += p.num_layers as f64 * (ffn + ar);
        let got = iteration_time(&prof, &items, &p);
        assert!((got - want).abs() / want < 1e-12, "{got} vs {want}");
    }

    #[test]
    fn single_gpu_has_no_allreduce() {
        let (prof, p) = setup(PlacementMode::Cyclic, 1);
        assert_eq!(p.allreduce(1, 1000), 0.0);
        let items = [WorkItem { rank: 0, tokens: 100, context: 0 }];
        let ip = iteration_profile(&prof, &items, &p);
        assert!((ip.total - ip.busy[0]).abs() < 1e-12 * ip.total);
    }

    #[test]
    fn empty_batch_takes_no_time() {
        let (prof, p) = setup(PlacementMode::Naive, 4);
        assert_eq!(iteration_time(&prof, &[], &p), 0.0);
        assert_eq!(reprefill_time(&prof, &p, &[], 2048), 0.0);
    }

    #[test]
    fn reprefill_grows_with_tokens() {
        let (prof, p) = setup(PlacementMode::Hybrid, 7);
        let a = reprefill_time(&prof, &p, &[4000], 2048);
        let b = reprefill_time(&prof, &p, &[4000, 4000], 2048);
        assert!(b > a && a > 0.0);
    }
}
