//! Transfer plans that move a cluster from one placement to another.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::backup::BackupState;
use crate::error::{Error, Result};
use crate::placement::{shard_bytes, PlacementPlan};
use crate::spec::{GpuId, ModelSpec};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Medium {
    PcieHost,
    NvlinkPeer,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum TransferContent {
    /// One FFN shard across all layers.
    FfnShard { shard: u32 },
    /// Part `part` of `parts` of one attention head's weights in one layer.
    AttnHeadSlice { layer: u32, head: u32, part: u32, parts: u32 },
    /// KV of `tokens` tokens over `head_layers` (layer, head) pairs.
    KvSlice { request: u64, head_layers: u32, tokens: u64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Transfer {
    pub dst: GpuId,
    /// `None` for host memory.
    pub src: Option<GpuId>,
    pub bytes: u64,
    pub medium: Medium,
    pub content: TransferContent,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct RecoveryPlan {
    pub transfers: Vec<Transfer>,
    /// Tokens per request whose KV must be recomputed.
    pub recompute_tokens: BTreeMap<u64, u64>,
    pub completion_time: f64,
}

impl RecoveryPlan {
    pub fn is_empty(&self) -> bool {
        self.transfers.is_empty() && self.recompute_tokens.is_empty()
    }

    pub fn bytes_by(&self, medium: Medium) -> u64 {
        self.transfers.iter().filter(|t| t.medium == medium).map(|t| t.bytes).sum()
    }

    /// Bytes each destination receives over `medium`.
    pub fn per_gpu(&self, medium: Medium) -> BTreeMap<GpuId, u64> {
        let mut out = BTreeMap::new();
        for t in self.transfers.iter().filter(|t| t.medium == medium) {
            *out.entry(t.dst).or_insert(0) += t.bytes;
        }
        out
    }

    pub fn max_per_gpu(&self, medium: Medium) -> u64 {
        self.per_gpu(medium).values().copied().max().unwrap_or(0)
    }

    pub fn merge(mut self, other: RecoveryPlan) -> RecoveryPlan {
        self.transfers.extend(other.transfers);
        for (r, t) in other.recompute_tokens {
            *self.recompute_tokens.entry(r).or_insert(0) += t;
        }
        self
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WeightMode {
    /// Fresh contiguous partition; everything missing comes from host.
    NaiveReshard,
    /// Keep resident state, fetch only what was lost.
    OnDemand,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KvMode {
    Recompute,
    HostRestore,
}

impl FromStr for WeightMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "naive_reshard" | "naive-reshard" => Ok(WeightMode::NaiveReshard),
            "on_demand" | "on-demand" => Ok(WeightMode::OnDemand),
            o => Err(Error::parse("weight_mode", format!("unknown mode `{o}`"))),
        }
    }
}

impl fmt::Display for WeightMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            WeightMode::NaiveReshard => "naive_reshard",
            WeightMode::OnDemand => "on_demand",
        })
    }
}

/// Weights each GPU holds: whole FFN shards and per-(layer, head) byte counts.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Residency {
    pub shards: BTreeMap<GpuId, BTreeSet<u32>>,
    pub heads: BTreeMap<GpuId, BTreeMap<(u32, u32), u64>>,
}

impl Residency {
    pub fn from_plan(plan: &PlacementPlan, model: &ModelSpec) -> Self {
        let hb = model.attn_bytes_per_head_layer();
        let mut res = Residency::default();
        for g in &plan.world {
            res.shards.insert(*g, plan.ffn.shards_of(*g).into_iter().collect());
            let heads = res.heads.entry(*g).or_default();
            for a in &plan.per_layer {
                for h in a.resident_heads(*g) {
                    heads.insert((a.layer, h), hb);
                }
            }
        }
        res
    }

    fn has_head(&self, g: GpuId, key: (u32, u32), full: u64) -> bool {
        self.heads.get(&g).and_then(|m| m.get(&key)).is_some_and(|b| *b >= full)
    }

    fn has_shard(&self, g: GpuId, s: u32) -> bool {
        self.shards.get(&g).is_some_and(|x| x.contains(&s))
    }

    /// Apply a plan's weight transfers as a checked state transition onto
    /// `target`: state of GPUs outside the new world is dropped, every
    /// transfer lands on its destination, and the result must hold exactly
    /// what `target` requires. Peer transfers must come from a GPU that holds
    /// the content at the time of the transfer.
    pub fn apply(&self, plan: &RecoveryPlan, target: &PlacementPlan, model: &ModelSpec) -> Result<Residency> {
        let hb = model.attn_bytes_per_head_layer();
        let world: BTreeSet<GpuId> = target.alive_set();
        let mut next = Residency {
            shards: self.shards.iter().filter(|(g, _)| world.contains(g)).map(|(g, s)| (*g, s.clone())).collect(),
            heads: self.heads.iter().filter(|(g, _)| world.contains(g)).map(|(g, h)| (*g, h.clone())).collect(),
        };
        // Slices loaded from host are staged per GPU until forwarded.
        let mut staged: BTreeMap<(GpuId, u32, u32, u32), u64> = BTreeMap::new();
        for t in &plan.transfers {
            if !world.contains(&t.dst) {
                return Err(Error::Integrity(format!("transfer to {} outside the new world", t.dst)));
            }
            if let Some(src) = t.src {
                if !world.contains(&src) {
                    return Err(Error::Integrity(format!("peer transfer from dead {src}")));
                }
            }
            match t.content {
                TransferContent::FfnShard { shard } => {
                    if let Some(src) = t.src {
                        if !next.has_shard(src, shard) {
                            return Err(Error::Integrity(format!("{src} does not hold shard {shard}")));
                        }
                    }
                    next.shards.entry(t.dst).or_default().insert(shard);
                }
                TransferContent::AttnHeadSlice { layer, head, part, .. } => {
                    match t.src {
                        None => {
                            staged.insert((t.dst, layer, head, part), t.bytes);
                        }
                        Some(src) => {
                            let from_stage = staged.get(&(src, layer, head, part)) == Some(&t.bytes);
                            if !from_stage && !next.has_head(src, (layer, head), hb) {
                                return Err(Error::Integrity(format!(
                                    "{src} has no copy of layer {layer} head {head}"
                                )));
                            }
                        }
                    }
                    *next.heads.entry(t.dst).or_default().entry((layer, head)).or_insert(0) += t.bytes;
                }
                TransferContent::KvSlice { .. } => {}
            }
        }
        for g in &world {
            next.shards.entry(*g).or_default();
            next.heads.entry(*g).or_default();
        }
        // Check completeness, then drop what the target no longer needs.
        for g in &target.world {
            for s in target.ffn.shards_of(*g) {
                if !next.has_shard(*g, s) {
                    return Err(Error::Integrity(format!("{g} is missing FFN shard {s}")));
                }
            }
            for a in &target.per_layer {
                for h in a.resident_heads(*g) {
                    if !next.has_head(*g, (a.layer, h), hb) {
                        return Err(Error::Integrity(format!("{g} is missing layer {} head {h}", a.layer)));
                    }
                }
            }
        }
        let exact = Residency::from_plan(target, model);
        Ok(exact)
    }
}

/// Plan weight movement from `old` to a replan over `new_alive`. Returns the
/// new placement and the transfers.
pub fn plan_weight_recovery(
    model: &ModelSpec,
    old: &PlacementPlan,
    new_alive: &BTreeSet<GpuId>,
    mode: WeightMode,
) -> Result<(PlacementPlan, RecoveryPlan)> {
    if *new_alive == old.alive_set() {
        return Ok((old.clone(), RecoveryPlan::default()));
    }
    let new = match mode {
        WeightMode::OnDemand => old.replan(model, new_alive)?,
        WeightMode::NaiveReshard => old.replan_contiguous_ffn(model, new_alive)?,
    };
    let res = Residency::from_plan(old, model);
    let survivors: Vec<GpuId> = new.world.iter().copied().filter(|g| old.rank_of(*g).is_some()).collect();
    let hb = model.attn_bytes_per_head_layer();
    let sb = shard_bytes(model, new.ffn.num_shards) * model.num_layers as u64;
    let mut transfers = Vec::new();

    for g in &new.world {
        for s in new.ffn.shards_of(*g) {
            if res.has_shard(*g, s) {
                continue;
            }
            let holder = survivors.iter().copied().find(|p| res.has_shard(*p, s));
            let (src, medium) = match (mode, holder) {
                (WeightMode::OnDemand, Some(p)) => (Some(p), Medium::NvlinkPeer),
                _ => (None, Medium::PcieHost),
            };
            transfers.push(Transfer {
                dst: *g,
                src,
                bytes: sb,
                medium,
                content: TransferContent::FfnShard { shard: s },
            });
        }
    }

    let mut lost_heads: Vec<(u32, u32, Vec<GpuId>)> = Vec::new();
    for a in &new.per_layer {
        let layer = a.layer;
        for head in 0..model.num_kv_heads {
            let needers: Vec<GpuId> = if a.dp_heads.contains(&head) {
                new.world.clone()
            } else {
                vec![a.tp_owner(head).expect("partitioned")]
            };
            let lacking: Vec<GpuId> = needers.into_iter().filter(|g| !res.has_head(*g, (layer, head), hb)).collect();
            if lacking.is_empty() {
                continue;
            }
            let holder = survivors.iter().copied().find(|p| res.has_head(*p, (layer, head), hb));
            match (mode, holder) {
                (WeightMode::OnDemand, Some(p)) => {
                    for d in lacking {
                        transfers.push(Transfer {
                            dst: d,
                            src: Some(p),
                            bytes: hb,
                            medium: Medium::NvlinkPeer,
                            content: TransferContent::AttnHeadSlice { layer, head, part: 0, parts: 1 },
                        });
                    }
                }
                (WeightMode::OnDemand, None) => lost_heads.push((layer, head, lacking)),
                (WeightMode::NaiveReshard, _) => {
                    for d in lacking {
                        transfers.push(Transfer {
                            dst: d,
                            src: None,
                            bytes: hb,
                            medium: Medium::PcieHost,
                            content: TransferContent::AttnHeadSlice { layer, head, part: 0, parts: 1 },
                        });
                    }
                }
            }
        }
    }
    if !lost_heads.is_empty() {
        slice_lost_heads(&new.world, &lost_heads, hb, &mut transfers);
    }
    Ok((new, RecoveryPlan { transfers, recompute_tokens: BTreeMap::new(), completion_time: 0.0 }))
}

/// Lost heads are concatenated into one byte stream that is cut into
/// contiguous per-GPU pieces sized to level host-link load; every GPU then
/// forwards its pieces to the GPUs that need them.
fn slice_lost_heads(world: &[GpuId], lost: &[(u32, u32, Vec<GpuId>)], hb: u64, transfers: &mut Vec<Transfer>) {
    let mut base = vec![0u64; world.len()];
    for t in transfers.iter().filter(|t| t.medium == Medium::PcieHost) {
        base[world.binary_search(&t.dst).expect("in world")] += t.bytes;
    }
    let mut alloc = water_fill(&base, hb * lost.len() as u64);
    let parts = world.len() as u32;
    let mut cur = 0;
    for (layer, head, lacking) in lost {
        let (layer, head) = (*layer, *head);
        let mut pieces = Vec::new();
        let mut remaining = hb;
        while remaining > 0 {
            while alloc[cur] == 0 {
                cur += 1;
            }
            let take = remaining.min(alloc[cur]);
            alloc[cur] -= take;
            remaining -= take;
            pieces.push((cur, take));
        }
        for (i, bytes) in &pieces {
            transfers.push(Transfer {
                dst: world[*i],
                src: None,
                bytes: *bytes,
                medium: Medium::PcieHost,
                content: TransferContent::AttnHeadSlice { layer, head, part: *i as u32, parts },
            });
        }
        for d in lacking {
            for (i, bytes) in &pieces {
                if world[*i] == *d {
                    continue;
                }
                transfers.push(Transfer {
                    dst: *d,
                    src: Some(world[*i]),
                    bytes: *bytes,
                    medium: Medium::NvlinkPeer,
                    content: TransferContent::AttnHeadSlice { layer, head, part: *i as u32, parts },
                });
            }
        }
    }
}

/// Split `total` over slots so that `base + share` is as level as possible;
/// leftover units go to the lowest-indexed slots at the level.
pub(crate) fn water_fill(base: &[u64], total: u64) -> Vec<u64> {
    let fill = |level: u64| -> u64 { base.iter().map(|b| level.saturating_sub(*b)).sum() };
    let (mut lo, mut hi) = (0u64, base.iter().copied().max().unwrap_or(0) + total);
    while lo < hi {
        let mid = lo + (hi - lo) / 2;
        if fill(mid) >= total {
            hi = mid;
        } else {
            lo = mid + 1;
        }
    }
    let level = lo.saturating_sub(1);
    let mut share: Vec<u64> = base.iter().map(|b| level.saturating_sub(*b)).collect();
    let mut rest = total - fill(level).min(total);
    for (i, b) in base.iter().enumerate() {
        if rest == 0 {
            break;
        }
        if *b <= level {
            share[i] += 1;
            rest -= 1;
        }
    }
    share
}

/// Weight bytes held by GPUs in `old` that no GPU in `new_alive` holds.
pub fn lost_weight_bytes(model: &ModelSpec, old: &PlacementPlan, new_alive: &BTreeSet<GpuId>) -> u64 {
    let res = Residency::from_plan(old, model);
    let survivors: Vec<GpuId> = old.world.iter().copied().filter(|g| new_alive.contains(g)).collect();
    let sb = shard_bytes(model, old.ffn.num_shards) * model.num_layers as u64;
    let mut lost = 0;
    for s in 0..old.ffn.num_shards {
        if !survivors.iter().any(|g| res.has_shard(*g, s)) {
            lost += sb;
        }
    }
    let hb = model.attn_bytes_per_head_layer();
    for a in &old.per_layer {
        for h in 0..model.num_kv_heads {
            if !survivors.iter().any(|g| res.has_head(*g, (a.layer, h), hb)) {
                lost += hb;
            }
        }
    }
    lost
}

/// KV state of one in-flight request.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KvRequestState {
    pub id: u64,
    pub kv_tokens: u64,
    /// Rank serving its replicated heads before and after the change.
    pub old_rank: Option<GpuId>,
    pub new_rank: Option<GpuId>,
}

/// Holder of one (layer, head) of a request's KV under `plan`.
fn kv_holder(plan: &PlacementPlan, layer: usize, head: u32, rank: Option<GpuId>, id: u64) -> Result<GpuId> {
    let a = &plan.per_layer[layer];
    if a.dp_heads.contains(&head) {
        rank.ok_or(Error::MissingRouting(id))
    } else {
        Ok(a.tp_owner(head).expect("partitioned"))
    }
}

/// Plan KV movement for in-flight requests. KV whose holder survives but
/// changes moves over NVLink; KV whose holder died is restored from host
/// (backed-up tokens) or recomputed.
pub fn plan_kv_recovery(
    model: &ModelSpec,
    old: &PlacementPlan,
    new: &PlacementPlan,
    requests: &[KvRequestState],
    backup: Option<&BackupState>,
    mode: KvMode,
) -> Result<RecoveryPlan> {
    if mode == KvMode::HostRestore && !backup.is_some_and(|b| b.enabled) {
        return Err(Error::Config("host restore requires host KV backup to be enabled".into()));
    }
    let bpt = model.kv_bytes_per_head_token();
    let alive = new.alive_set();
    let mut plan = RecoveryPlan::default();
    for r in requests {
        if r.kv_tokens == 0 {
            continue;
        }
        let mut lost: BTreeMap<GpuId, u32> = BTreeMap::new();
        let mut moved: BTreeMap<(GpuId, GpuId), u32> = BTreeMap::new();
        for layer in 0..old.per_layer.len() {
            for head in 0..model.num_kv_heads {
                let from = kv_holder(old, layer, head, r.old_rank, r.id)?;
                let to = kv_holder(new, layer, head, r.new_rank, r.id)?;
                if !alive.contains(&from) {
                    *lost.entry(to).or_insert(0) += 1;
                } else if from != to {
                    *moved.entry((from, to)).or_insert(0) += 1;
                }
            }
        }
        if !lost.is_empty() && mode == KvMode::Recompute {
            plan.recompute_tokens.insert(r.id, r.kv_tokens);
            continue;
        }
        for ((src, dst), hl) in moved {
            plan.transfers.push(Transfer {
                dst,
                src: Some(src),
                bytes: hl as u64 * r.kv_tokens * bpt,
                medium: Medium::NvlinkPeer,
                content: TransferContent::KvSlice { request: r.id, head_layers: hl, tokens: r.kv_tokens },
            });
        }
        if lost.is_empty() {
            continue;
        }
        let backed = backup.map_or(0, |b| b.backed_tokens(r.id)).min(r.kv_tokens);
        if backed > 0 {
            for (dst, hl) in lost {
                plan.transfers.push(Transfer {
                    dst,
                    src: None,
                    bytes: hl as u64 * backed * bpt,
                    medium: Medium::PcieHost,
                    content: TransferContent::KvSlice { request: r.id, head_layers: hl, tokens: backed },
                });
            }
        }
        if backed < r.kv_tokens {
            plan.recompute_tokens.insert(r.id, r.kv_tokens - backed);
        }
    }
    Ok(plan)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::placement::{placement, PlacementMode};

    fn model(layers: u32, heads: u32, ffn: u32) -> ModelSpec {
        ModelSpec {
            num_layers: layers,
            num_kv_heads: heads,
            num_q_heads: heads,
            head_dim: 4,
            hidden_dim: 16,
            ffn_intermediate_dim: ffn,
            bytes_per_param: 2,
            bytes_per_kv_element: 2,
            num_experts: 1,
            experts_per_token: 1,
        }
    }

    fn gpus(xs: impl IntoIterator<Item = u32>) -> BTreeSet<GpuId> {
        xs.into_iter().map(GpuId).collect()
    }

    fn shard_loads(plan: &RecoveryPlan) -> BTreeMap<GpuId, Vec<u32>> {
        let mut out: BTreeMap<GpuId, Vec<u32>> = BTreeMap::new();
        for t in &plan.transfers {
            if let (TransferContent::FfnShard { shard }, Medium::PcieHost) = (t.content, t.medium) {
                out.entry(t.dst).or_default().push(shard);
            }
        }
        out
    }

    /// Shards each new rank lacks under contiguous partitions, by interval overlap.
    fn contiguous_missing(num_shards: u32, old_n: u32, new_n: u32) -> Vec<u32> {
        let block = |n: u32, i: u32| -> (u32, u32) {
            let base = num_shards / n;
            let heavy = num_shards % n;
            let start = i * base + i.min(heavy);
            (start, start + base + u32::from(i < heavy))
        };
        (0..new_n)
            .map(|i| {
                let (s, e) = block(new_n, i);
                let (os, oe) = block(old_n, i);
                let overlap = e.min(oe).saturating_sub(s.max(os));
                (e - s) - overlap
            })
            .collect()
    }

    #[test]
    fn six_shard_example_on_demand_loads_one_each() {
        let m = model(2, 4, 12);
        let old = placement(PlacementMode::Cyclic, &m, &gpus(0..4), 12).unwrap();
        let (new, plan) = plan_weight_recovery(&m, &old, &gpus(0..3), WeightMode::OnDemand).unwrap();
        let loads = shard_loads(&plan);
        assert_eq!(loads[&GpuId(0)], vec![9]);
        assert_eq!(loads[&GpuId(1)], vec![10]);
        assert_eq!(loads[&GpuId(2)], vec![11]);
        Residency::from_plan(&old, &m).apply(&plan, &new, &m).unwrap();
    }

    #[test]
    fn six_shard_example_naive_reshard_loads_six() {
        let m = model(2, 4, 12);
        let old = placement(PlacementMode::Cyclic, &m, &gpus(0..4), 12).unwrap();
        let (_, plan) = plan_weight_recovery(&m, &old, &gpus(0..3), WeightMode::NaiveReshard).unwrap();
        let counts: Vec<usize> = shard_loads(&plan).values().map(|v| v.len()).collect();
        assert_eq!(counts, vec![1, 2, 3]);
        assert_eq!(contiguous_missing(12, 4, 3), vec![1, 2, 3]);
    }

    #[test]
    fn water_fill_levels() {
        assert_eq!(water_fill(&[0, 0, 0], 9), vec![3, 3, 3]);
        assert_eq!(water_fill(&[5, 0, 0], 4), vec![0, 2, 2]);
        assert_eq!(water_fill(&[5, 0, 1], 5), vec![0, 3, 2]);
        assert_eq!(water_fill(&[0, 0], 3), vec![2, 1]);
        assert_eq!(water_fill(&[2, 2], 0), vec![0, 0]);
    }

    #[test]
    fn unchanged_world_is_empty() {
        let m = model(2, 4, 12);
        let old = placement(PlacementMode::Hybrid, &m, &gpus(0..3), 12).unwrap();
        let (new, plan) = plan_weight_recovery(&m, &old, &gpus(0..3), WeightMode::OnDemand).unwrap();
        assert!(plan.is_empty());
        assert_eq!(new, old);
    }

    #[test]
    fn dropping_a_transfer_fails_the_check() {
        let m = model(3, 4, 12);
        let old = placement(PlacementMode::Hybrid, &m, &gpus(0..4), 12).unwrap();
        let (new, mut plan) = plan_weight_recovery(&m, &old, &gpus(0..3), WeightMode::OnDemand).unwrap();
        let res = Residency::from_plan(&old, &m);
        assert!(res.apply(&plan, &new, &m).is_ok());
        for i in 0..plan.transfers.len() {
            let mut broken = plan.clone();
            broken.transfers.remove(i);
            assert!(matches!(res.apply(&broken, &new, &m), Err(Error::Integrity(_))), "transfer {i}");
        }
        plan.transfers.clear();
        assert!(res.apply(&plan, &new, &m).is_err());
    }

    fn in_flight(n: u64, plan: &PlacementPlan, new: &PlacementPlan) -> Vec<KvRequestState> {
        (0..n)
            .map(|i| KvRequestState {
                id: i,
                kv_tokens: 100 + 37 * i,
                old_rank: Some(plan.world[i as usize % plan.world.len()]),
                new_rank: Some(new.world[i as usize % new.world.len()]),
            })
            .collect()
    }

    #[test]
    fn cyclic_restore_splits_evenly() {
        let m = model(12, 4, 12);
        let old = placement(PlacementMode::Cyclic, &m, &gpus(0..4), 12).unwrap();
        let (new, _) = plan_weight_recovery(&m, &old, &gpus(0..3), WeightMode::OnDemand).unwrap();
        let mut b = BackupState::new(true, 16);
        b.mark_backed(0, 500);
        let reqs = [KvRequestState { id: 0, kv_tokens: 500, old_rank: None, new_rank: None }];
        let kv = plan_kv_recovery(&m, &old, &new, &reqs, Some(&b), KvMode::HostRestore).unwrap();
        let per = kv.per_gpu(Medium::PcieHost);
        let total: u64 = per.values().sum();
        assert_eq!(per.len(), 3);
        assert!(per.values().all(|v| *v * 3 == total), "{per:?}");
        assert!(kv.recompute_tokens.is_empty());
    }

    #[test]
    fn naive_restore_is_lopsided() {
        let m = model(12, 8, 12);
        let reqs = [KvRequestState { id: 0, kv_tokens: 500, old_rank: None, new_rank: None }];
        let mut b = BackupState::new(true, 16);
        b.mark_backed(0, 500);
        let max_for = |mode| {
            let old = placement(mode, &m, &gpus(0..8), 12).unwrap();
            let (new, _) = plan_weight_recovery(&m, &old, &gpus(0..7), WeightMode::OnDemand).unwrap();
            plan_kv_recovery(&m, &old, &new, &reqs, Some(&b), KvMode::HostRestore)
                .unwrap()
                .max_per_gpu(Medium::PcieHost)
        };
        assert!(max_for(PlacementMode::Naive) > max_for(PlacementMode::Cyclic));
    }

    #[test]
    fn host_restore_needs_backup_and_degrades_without_progress() {
        let m = model(4, 4, 12);
        let old = placement(PlacementMode::Hybrid, &m, &gpus(0..4), 12).unwrap();
        let (new, _) = plan_weight_recovery(&m, &old, &gpus(0..3), WeightMode::OnDemand).unwrap();
        let reqs = in_flight(5, &old, &new);
        assert!(matches!(plan_kv_recovery(&m, &old, &new, &reqs, None, KvMode::HostRestore), Err(Error::Config(_))));
        let empty = BackupState::new(true, 16);
        let host = plan_kv_recovery(&m, &old, &new, &reqs, Some(&empty), KvMode::HostRestore).unwrap();
        let rec = plan_kv_recovery(&m, &old, &new, &reqs, None, KvMode::Recompute).unwrap();
        assert_eq!(host.bytes_by(Medium::PcieHost), 0);
        assert_eq!(host.recompute_tokens, rec.recompute_tokens);
    }

    #[test]
    fn missing_routing_for_replicated_heads() {
        let m = model(4, 4, 12);
        let old = placement(PlacementMode::Hybrid, &m, &gpus(0..3), 12).unwrap();
        let (new, _) = plan_weight_recovery(&m, &old, &gpus(0..2), WeightMode::OnDemand).unwrap();
        let reqs = [KvRequestState { id: 9, kv_tokens: 10, old_rank: None, new_rank: None }];
        assert!(matches!(
            plan_kv_recovery(&m, &old, &new, &reqs, None, KvMode::Recompute),
            Err(Error::MissingRouting(9))
        ));
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #![proptest_config(ProptestConfig::with_cases(200))]

            #[test]
            fn on_demand_is_exact_and_dominates(
                h in 1u32..=12, n_raw in 2u32..=8, layers in 1u32..6,
                shard_mult in 1u32..4, mode_ix in 0usize..3, fail_raw in 0u32..8,
            ) {
                let n = n_raw.min(h).max(2);
                if n > h { return Ok(()); }
                let shards = n * shard_mult + fail_raw % 3;
                let m = model(layers, h, shards * 8);
                let old = placement(PlacementMode::ALL[mode_ix], &m, &gpus(0..n), shards).unwrap();
                let fail = fail_raw % n;
                let alive: BTreeSet<GpuId> = old.world.iter().copied().filter(|g| g.0 != fail).collect();
                let (new_od, od) = plan_weight_recovery(&m, &old, &alive, WeightMode::OnDemand).unwrap();
                let (new_nr, nr) = plan_weight_recovery(&m, &old, &alive, WeightMode::NaiveReshard).unwrap();
                let res = Residency::from_plan(&old, &m);
                prop_assert!(res.apply(&od, &new_od, &m).is_ok());
                prop_assert!(res.apply(&nr, &new_nr, &m).is_ok());
                prop_assert_eq!(od.bytes_by(Medium::PcieHost), lost_weight_bytes(&m, &old, &alive));
                prop_assert!(od.bytes_by(Medium::PcieHost) <= nr.bytes_by(Medium::PcieHost));
                prop_assert!(od.max_per_gpu(Medium::PcieHost) <= nr.max_per_gpu(Medium::PcieHost));
            }

            #[test]
            fn restored_plus_recomputed_is_lost(
                h in 2u32..=8, layers in 1u32..6, backed in proptest::collection::vec(0u64..300, 1..6),
                mode_ix in 0usize..3,
            ) {
                let n = h.min(4);
                let m = model(layers, h, 840);
                let old = placement(PlacementMode::ALL[mode_ix], &m, &gpus(0..n), 840).unwrap();
                let alive = gpus(1..n);
                let (new, _) = plan_weight_recovery(&m, &old, &alive, WeightMode::OnDemand).unwrap();
                let mut b = BackupState::new(true, 16);
                let reqs: Vec<KvRequestState> = backed.iter().enumerate().map(|(i, bk)| {
                    b.mark_backed(i as u64, *bk);
                    KvRequestState {
                        id: i as u64, kv_tokens: 200,
                        old_rank: Some(GpuId(i as u32 % n)), new_rank: Some(new.world[i % new.world.len()]),
                    }
                }).collect();
                let kv = plan_kv_recovery(&m, &old, &new, &reqs, Some(&b), KvMode::HostRestore).unwrap();
                for r in &reqs {
                    let restored: u64 = kv.transfers.iter().filter_map(|t| match t.content {
                        TransferContent::KvSlice { request, tokens, .. } if request == r.id && t.medium == Medium::PcieHost => Some(tokens),
                        _ => None,
                    }).max().unwrap_or(0);
                    let lost_any = kv.transfers.iter().any(|t| matches!(t.content, TransferContent::KvSlice { request, .. } if request == r.id) && t.medium == Medium::PcieHost)
                        || kv.recompute_tokens.contains_key(&r.id);
                    if lost_any {
                        prop_assert!(restored <= b.backed_tokens(r.id));
                        prop_assert_eq!(restored + kv.recompute_tokens.get(&r.id).copied().unwrap_or(0), r.kv_tokens);
                    }
                }
            }
        }
    }
}
