//! Attention-head and FFN-shard placement for arbitrary tensor-parallel
//! world sizes.
//!
//! Heads are cut into `n` contiguous blocks, heavy blocks (`ceil(H/n)` heads)
//! first. Naive placement gives block `i` to rank `i` in every layer. Cyclic
//! placement gives block `b` of layer `l` to rank `(b + l) mod n`, so any
//! window of `n` consecutive layers puts exactly `H` head-layers on every
//! rank. Hybrid placement gives each rank `floor(H/n)` tensor-parallel heads
//! and replicates the remaining `H mod n` heads on every rank, where they are
//! served data-parallel: each rank handles those heads only for the requests
//! routed to it. The replicated set rotates by `H mod n` heads per layer.
//!
//! Ranks are the alive GPUs in ascending physical order.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::ops::Range;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::spec::{GpuId, ModelSpec};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PlacementMode {
    Naive,
    Cyclic,
    Hybrid,
}

impl PlacementMode {
    pub const ALL: [PlacementMode; 3] = [PlacementMode::Naive, PlacementMode::Cyclic, PlacementMode::Hybrid];
}

impl fmt::Display for PlacementMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            PlacementMode::Naive => "naive",
            PlacementMode::Cyclic => "cyclic",
            PlacementMode::Hybrid => "hybrid",
        })
    }
}

impl FromStr for PlacementMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "naive" => Ok(PlacementMode::Naive),
            "cyclic" => Ok(PlacementMode::Cyclic),
            "hybrid" => Ok(PlacementMode::Hybrid),
            other => Err(Error::parse("placement", format!("unknown mode `{other}`"))),
        }
    }
}

/// Head ownership within one layer.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct HeadAssignment {
    pub layer: u32,
    /// Tensor-parallel heads owned by each rank.
    pub tp_heads: BTreeMap<GpuId, BTreeSet<u32>>,
    /// Heads replicated on every rank and served data-parallel.
    pub dp_heads: BTreeSet<u32>,
}

impl HeadAssignment {
    pub fn tp_count(&self, gpu: GpuId) -> u32 {
        self.tp_heads.get(&gpu).map_or(0, |s| s.len() as u32)
    }

    /// Tensor-parallel owner of `head`, or `None` if the head is replicated.
    pub fn tp_owner(&self, head: u32) -> Option<GpuId> {
        self.tp_heads.iter().find(|(_, heads)| heads.contains(&head)).map(|(g, _)| *g)
    }

    /// Every head a rank must hold weights for: its TP heads plus all DP heads.
    pub fn resident_heads(&self, gpu: GpuId) -> BTreeSet<u32> {
        let mut out = self.dp_heads.clone();
        if let Some(tp) = self.tp_heads.get(&gpu) {
            out.extend(tp.iter().copied());
        }
        out
    }
}

/// FFN shard ownership; shard `s` covers intermediate columns
/// `[s * w, (s + 1) * w)` of every layer.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ShardAssignment {
    pub num_shards: u32,
    /// `owner[s]` holds shard `s`.
    pub owner: Vec<GpuId>,
}

impl ShardAssignment {
    pub fn shards_of(&self, gpu: GpuId) -> Vec<u32> {
        self.owner.iter().enumerate().filter(|(_, g)| **g == gpu).map(|(s, _)| s as u32).collect()
    }

    pub fn counts(&self) -> BTreeMap<GpuId, u32> {
        let mut out = BTreeMap::new();
        for g in &self.owner {
            *out.entry(*g).or_insert(0) += 1;
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PlacementPlan {
    pub mode: PlacementMode,
    /// Ranks in ascending physical order.
    pub world: Vec<GpuId>,
    pub per_layer: Vec<HeadAssignment>,
    pub ffn: ShardAssignment,
}

impl PlacementPlan {
    pub fn world_size(&self) -> usize {
        self.world.len()
    }

    pub fn rank_of(&self, gpu: GpuId) -> Option<usize> {
        self.world.binary_search(&gpu).ok()
    }

    pub fn alive_set(&self) -> BTreeSet<GpuId> {
        self.world.iter().copied().collect()
    }

    /// Head-layer count held by `gpu` as tensor-parallel owner.
    pub fn tp_head_layers(&self, gpu: GpuId) -> u64 {
        self.per_layer.iter().map(|a| a.tp_count(gpu) as u64).sum()
    }

    pub fn dp_head_layers(&self) -> u64 {
        self.per_layer.iter().map(|a| a.dp_heads.len() as u64).sum()
    }

    /// Parameter bytes resident on `gpu`.
    pub fn weight_bytes(&self, model: &ModelSpec, gpu: GpuId) -> u64 {
        let heads = self.tp_head_layers(gpu) + self.dp_head_layers();
        let shards = self.ffn.owner.iter().filter(|g| **g == gpu).count() as u64;
        heads * model.attn_bytes_per_head_layer()
            + shards * shard_bytes(model, self.ffn.num_shards) * model.num_layers as u64
    }

    /// Retention-aware replanning onto `new_alive`: surviving ranks keep the
    /// heads and shards they already hold wherever the target layout allows,
    /// and orphaned state is spread over the new world.
    pub fn replan(&self, model: &ModelSpec, new_alive: &BTreeSet<GpuId>) -> Result<PlacementPlan> {
        let world = check_alive(model, new_alive)?;
        let per_layer =
            self.per_layer.iter().map(|old| replan_layer(self.mode, old, &world, model.num_kv_heads)).collect();
        Ok(PlacementPlan { mode: self.mode, world: world.clone(), per_layer, ffn: retain_shards(&self.ffn, &world) })
    }

    /// Like [`replan`](Self::replan) but with a fresh contiguous FFN layout,
    /// as a conventional re-shard would produce.
    pub fn replan_contiguous_ffn(&self, model: &ModelSpec, new_alive: &BTreeSet<GpuId>) -> Result<PlacementPlan> {
        let mut plan = self.replan(model, new_alive)?;
        plan.ffn = ffn_assignment(model, new_alive, self.ffn.num_shards)?;
        Ok(plan)
    }

    /// Check the structural invariants of the plan.
    pub fn validate(&self, model: &ModelSpec) -> Result<()> {
        let h = model.num_kv_heads;
        let n = self.world.len() as u32;
        if self.per_layer.len() != model.num_layers as usize {
            return Err(Error::Integrity(format!(
                "plan has {} layers, model has {}",
                self.per_layer.len(),
                model.num_layers
            )));
        }
        for a in &self.per_layer {
            let mut seen = BTreeSet::new();
            for (g, heads) in &a.tp_heads {
                if self.rank_of(*g).is_none() {
                    return Err(Error::Integrity(format!("layer {}: {g} not in world", a.layer)));
                }
                for head in heads {
                    if a.dp_heads.contains(head) || !seen.insert(*head) {
                        return Err(Error::Integrity(format!("layer {}: head {head} owned twice", a.layer)));
                    }
                }
            }
            if seen.len() + a.dp_heads.len() != h as usize || a.dp_heads.iter().chain(seen.iter()).any(|x| *x >= h) {
                return Err(Error::Integrity(format!("layer {}: heads not partitioned", a.layer)));
            }
            let counts: Vec<u32> = self.world.iter().map(|g| a.tp_count(*g)).collect();
            let (lo, hi) = (*counts.iter().min().unwrap_or(&0), *counts.iter().max().unwrap_or(&0));
            match self.mode {
                PlacementMode::Hybrid => {
                    if lo != hi || a.dp_heads.len() as u32 != h % n {
                        return Err(Error::Integrity(format!("layer {}: hybrid counts unequal", a.layer)));
                    }
                }
                _ => {
                    if !a.dp_heads.is_empty() || hi - lo > 1 {
                        return Err(Error::Integrity(format!(
                            "layer {}: per-rank counts differ by more than one",
                            a.layer
                        )));
                    }
                }
            }
        }
        if self.ffn.owner.len() != self.ffn.num_shards as usize {
            return Err(Error::Integrity("shard owner table has wrong length".into()));
        }
        if self.ffn.owner.iter().any(|g| self.rank_of(*g).is_none()) {
            return Err(Error::Integrity("shard owned by a GPU outside the world".into()));
        }
        let counts = self.ffn.counts();
        let lo = self.world.iter().map(|g| counts.get(g).copied().unwrap_or(0)).min().unwrap_or(0);
        let hi = counts.values().copied().max().unwrap_or(0);
        if hi - lo > 1 {
            return Err(Error::Integrity("shard counts differ by more than one".into()));
        }
        Ok(())
    }
}

/// Bytes of one FFN shard in one layer.
pub fn shard_bytes(model: &ModelSpec, num_shards: u32) -> u64 {
    model.ffn_bytes_per_layer() / num_shards as u64
}

/// Contiguous head ranges, `ceil(H/n)`-sized blocks first.
pub fn head_blocks(num_heads: u32, n: u32) -> Vec<Range<u32>> {
    let base = num_heads / n;
    let heavy = num_heads % n;
    let mut start = 0;
    (0..n)
        .map(|b| {
            let len = base + u32::from(b < heavy);
            let r = start..start + len;
            start += len;
            r
        })
        .collect()
}

fn check_alive(model: &ModelSpec, alive: &BTreeSet<GpuId>) -> Result<Vec<GpuId>> {
    if alive.is_empty() {
        return Err(Error::Unsupported("no alive GPUs".into()));
    }
    if alive.len() > model.num_kv_heads as usize {
        return Err(Error::Unsupported(format!(
            "{} GPUs cannot each hold one of {} KV heads",
            alive.len(),
            model.num_kv_heads
        )));
    }
    Ok(alive.iter().copied().collect())
}

/// Largest shard count that divides the FFN width and is a multiple of
/// `lcm(1..=8) = 840`; falls back to `gcd(ffn, 840 * 16)` when no such
/// multiple exists.
pub fn default_num_shards(model: &ModelSpec) -> u32 {
    let ffn = model.ffn_intermediate_dim;
    let mut best = None;
    let mut k = 840;
    while k <= ffn && k <= 840 * 16 {
        if ffn.is_multiple_of(k) {
            best = Some(k);
        }
        k += 840;
    }
    best.unwrap_or_else(|| gcd(ffn, 840 * 16))
}

fn gcd(mut a: u32, mut b: u32) -> u32 {
    while b != 0 {
        (a, b) = (b, a % b);
    }
    a
}

pub fn naive_placement(model: &ModelSpec, alive: &BTreeSet<GpuId>) -> Result<PlacementPlan> {
    placement(PlacementMode::Naive, model, alive, default_num_shards(model))
}

pub fn cyclic_placement(model: &ModelSpec, alive: &BTreeSet<GpuId>) -> Result<PlacementPlan> {
    placement(PlacementMode::Cyclic, model, alive, default_num_shards(model))
}

pub fn hybrid_placement(model: &ModelSpec, alive: &BTreeSet<GpuId>) -> Result<PlacementPlan> {
    placement(PlacementMode::Hybrid, model, alive, default_num_shards(model))
}

/// Build a fresh plan in `mode` over `alive` with `num_shards` FFN shards.
pub fn placement(
    mode: PlacementMode,
    model: &ModelSpec,
    alive: &BTreeSet<GpuId>,
    num_shards: u32,
) -> Result<PlacementPlan> {
    let world = check_alive(model, alive)?;
    let n = world.len() as u32;
    let h = model.num_kv_heads;
    let per_layer = (0..model.num_layers)
        .map(|layer| match mode {
            PlacementMode::Naive => block_layer(layer, &world, &head_blocks(h, n), 0),
            PlacementMode::Cyclic => block_layer(layer, &world, &head_blocks(h, n), layer),
            PlacementMode::Hybrid => hybrid_layer(layer, &world, h),
        })
        .collect();
    Ok(PlacementPlan { mode, world, per_layer, ffn: ffn_assignment(model, alive, num_shards)? })
}

fn block_layer(layer: u32, world: &[GpuId], blocks: &[Range<u32>], shift: u32) -> HeadAssignment {
    let n = world.len() as u32;
    let mut tp_heads: BTreeMap<GpuId, BTreeSet<u32>> = world.iter().map(|g| (*g, BTreeSet::new())).collect();
    for (b, block) in blocks.iter().enumerate() {
        let rank = (b as u32 + shift) % n;
        tp_heads.get_mut(&world[rank as usize]).expect("rank in world").extend(block.clone());
    }
    HeadAssignment { layer, tp_heads, dp_heads: BTreeSet::new() }
}

fn hybrid_layer(layer: u32, world: &[GpuId], h: u32) -> HeadAssignment {
    let n = world.len() as u32;
    let q = h / n;
    let r = h % n;
    let offset = (layer as u64 * r as u64 % h as u64) as u32;
    let dp_heads = (0..r).map(|j| (offset + j) % h).collect();
    let mut tp_heads: BTreeMap<GpuId, BTreeSet<u32>> = world.iter().map(|g| (*g, BTreeSet::new())).collect();
    for b in 0..n {
        let rank = (b + layer) % n;
        let set = tp_heads.get_mut(&world[rank as usize]).expect("rank in world");
        for k in 0..q {
            set.insert((offset + r + b * q + k) % h);
        }
    }
    HeadAssignment { layer, tp_heads, dp_heads }
}

/// Contiguous FFN shard blocks over `alive`, larger blocks first.
pub fn ffn_assignment(model: &ModelSpec, alive: &BTreeSet<GpuId>, num_shards: u32) -> Result<ShardAssignment> {
    if alive.is_empty() {
        return Err(Error::Unsupported("no alive GPUs".into()));
    }
    if num_shards < alive.len() as u32 {
        return Err(Error::validation("num_shards", format!("{num_shards} shards cannot cover {} GPUs", alive.len())));
    }
    if !model.ffn_intermediate_dim.is_multiple_of(num_shards) {
        return Err(Error::validation(
            "num_shards",
            format!("{num_shards} does not divide ffn_intermediate_dim {}", model.ffn_intermediate_dim),
        ));
    }
    let world: Vec<GpuId> = alive.iter().copied().collect();
    let mut owner = Vec::with_capacity(num_shards as usize);
    for (rank, block) in head_blocks(num_shards, world.len() as u32).iter().enumerate() {
        owner.extend(block.clone().map(|_| world[rank]));
    }
    Ok(ShardAssignment { num_shards, owner })
}

/// Per-GPU KV bytes held for the given requests.
///
/// Non-replicated heads store every request's tokens on their owner;
/// replicated heads store a request's tokens only on its routed rank.
pub fn memory_footprint(
    plan: &PlacementPlan,
    model: &ModelSpec,
    per_request_tokens: &BTreeMap<u64, u64>,
    routing: &BTreeMap<u64, GpuId>,
) -> Result<BTreeMap<GpuId, u64>> {
    let per_head_token = model.kv_bytes_per_head_token();
    let all_tokens: u64 = per_request_tokens.values().sum();
    let dp_layers = plan.dp_head_layers();
    let mut routed: BTreeMap<GpuId, u64> = BTreeMap::new();
    if dp_layers > 0 || plan.mode == PlacementMode::Hybrid {
        for (req, tokens) in per_request_tokens {
            let g = routing.get(req).ok_or(Error::MissingRouting(*req))?;
            *routed.entry(*g).or_insert(0) += tokens;
        }
    }
    Ok(plan
        .world
        .iter()
        .map(|g| {
            let head_tokens = plan.tp_head_layers(*g) * all_tokens + dp_layers * routed.get(g).copied().unwrap_or(0);
            (*g, head_tokens * per_head_token)
        })
        .collect())
}

/// Per-layer, per-rank head counts and totals, flattened for hot loops.
#[derive(Debug, Clone, PartialEq)]
pub struct PlanProfile {
    pub world: Vec<GpuId>,
    /// `tp_counts[layer][rank]`.
    pub tp_counts: Vec<Vec<u32>>,
    /// `dp_counts[layer]`.
    pub dp_counts: Vec<u32>,
    /// Total TP head-layers per rank.
    pub tp_head_layers: Vec<u64>,
    pub dp_head_layers: u64,
    /// FFN shards per rank.
    pub shard_counts: Vec<u32>,
}

impl PlanProfile {
    pub fn new(plan: &PlacementPlan) -> Self {
        let tp_counts: Vec<Vec<u32>> =
            plan.per_layer.iter().map(|a| plan.world.iter().map(|g| a.tp_count(*g)).collect()).collect();
        let n = plan.world.len();
        let tp_head_layers = (0..n).map(|r| tp_counts.iter().map(|row| row[r] as u64).sum()).collect();
        let counts = plan.ffn.counts();
        PlanProfile {
            world: plan.world.clone(),
            dp_counts: plan.per_layer.iter().map(|a| a.dp_heads.len() as u32).collect(),
            dp_head_layers: plan.dp_head_layers(),
            tp_head_layers,
            tp_counts,
            shard_counts: plan.world.iter().map(|g| counts.get(g).copied().unwrap_or(0)).collect(),
        }
    }

    pub fn rank_of(&self, gpu: GpuId) -> Option<usize> {
        self.world.binary_search(&gpu).ok()
    }
}

fn replan_layer(mode: PlacementMode, old: &HeadAssignment, world: &[GpuId], h: u32) -> HeadAssignment {
    let n = world.len() as u32;
    let layer = old.layer;
    let in_world = |g: &GpuId| world.binary_search(g).is_ok();
    let targets: Vec<u32> = match mode {
        PlacementMode::Hybrid => vec![h / n; n as usize],
        PlacementMode::Naive | PlacementMode::Cyclic => {
            let sizes: Vec<u32> = head_blocks(h, n).iter().map(|b| b.len() as u32).collect();
            let shift = if mode == PlacementMode::Cyclic { layer % n } else { 0 };
            (0..n).map(|rank| sizes[((rank + n - shift) % n) as usize]).collect()
        }
    };
    let dp_size = if mode == PlacementMode::Hybrid { h % n } else { 0 };

    // Pick the replicated set: prefer heads that were already replicated,
    // then orphans, then heads a survivor holds beyond its new target.
    let mut excess: BTreeMap<GpuId, u32> = BTreeMap::new();
    for (rank, g) in world.iter().enumerate() {
        let have = old.tp_count(*g);
        if have > targets[rank] {
            excess.insert(*g, have - targets[rank]);
        }
    }
    let mut candidates: Vec<(u8, u32)> = (0..h)
        .map(|head| {
            let class = if old.dp_heads.contains(&head) {
                0
            } else {
                match old.tp_owner(head) {
                    Some(g) if !in_world(&g) => 1,
                    None => 1,
                    Some(g) if excess.contains_key(&g) => 2,
                    Some(_) => 3,
                }
            };
            (class, head)
        })
        .collect();
    candidates.sort_by_key(|(class, head)| {
        // Excess heads are released highest index first.
        let key = if *class == 2 { u32::MAX - head } else { *head };
        (*class, key)
    });
    let mut dp_heads = BTreeSet::new();
    for (class, head) in &candidates {
        if dp_heads.len() as u32 == dp_size {
            break;
        }
        if *class == 2 {
            let g = old.tp_owner(*head).expect("class 2 has an owner");
            let left = excess.get_mut(&g).expect("excess owner");
            if *left == 0 {
                continue;
            }
            *left -= 1;
        }
        dp_heads.insert(*head);
    }
    if (dp_heads.len() as u32) < dp_size {
        for (_, head) in &candidates {
            if dp_heads.len() as u32 == dp_size {
                break;
            }
            dp_heads.insert(*head);
        }
    }

    let mut tp_heads: BTreeMap<GpuId, BTreeSet<u32>> = BTreeMap::new();
    let mut taken: BTreeSet<u32> = dp_heads.clone();
    for (rank, g) in world.iter().enumerate() {
        let keep: BTreeSet<u32> = old
            .tp_heads
            .get(g)
            .map(|s| s.iter().filter(|x| !dp_heads.contains(x)).take(targets[rank] as usize).copied().collect())
            .unwrap_or_default();
        taken.extend(keep.iter().copied());
        tp_heads.insert(*g, keep);
    }
    let mut pool = (0..h).filter(|x| !taken.contains(x));
    for (rank, g) in world.iter().enumerate() {
        let set = tp_heads.get_mut(g).expect("rank present");
        while (set.len() as u32) < targets[rank] {
            set.insert(pool.next().expect("enough heads for targets"));
        }
    }
    debug_assert!(pool.next().is_none());
    HeadAssignment { layer, tp_heads, dp_heads }
}

/// Keep every surviving shard in place; orphaned shards go to the rank with
/// the fewest shards (lowest rank on ties), then counts are levelled for any
/// newly joined ranks.
fn retain_shards(old: &ShardAssignment, world: &[GpuId]) -> ShardAssignment {
    let in_world = |g: &GpuId| world.binary_search(g).is_ok();
    let mut owner = old.owner.clone();
    let mut counts: BTreeMap<GpuId, u32> = world.iter().map(|g| (*g, 0)).collect();
    for g in owner.iter().filter(|g| in_world(g)) {
        *counts.get_mut(g).expect("in world") += 1;
    }
    let least =
        |counts: &BTreeMap<GpuId, u32>| *counts.iter().min_by_key(|(g, c)| (**c, **g)).expect("non-empty world").0;
    for slot in owner.iter_mut() {
        if !in_world(slot) {
            let g = least(&counts);
            *slot = g;
            *counts.get_mut(&g).expect("in world") += 1;
        }
    }
    loop {
        let lo = least(&counts);
        let (hi, hi_count) =
            counts.iter().max_by_key(|(g, c)| (**c, **g)).map(|(g, c)| (*g, *c)).expect("non-empty world");
        if hi_count - counts[&lo] <= 1 {
            break;
        }
        let s = owner.iter().rposition(|g| *g == hi).expect("max owner holds a shard");
        owner[s] = lo;
        *counts.get_mut(&hi).expect("in world") -= 1;
        *counts.get_mut(&lo).expect("in world") += 1;
    }
    ShardAssignment { num_shards: old.num_shards, owner }
}

/// Render a per-layer assignment table, one row per layer.
pub fn format_plan_table(plan: &PlacementPlan) -> String {
    let mut out = String::new();
    out.push_str(&format!("{:>6}", "layer"));
    for g in &plan.world {
        out.push_str(&format!(" {:>12}", g.to_string()));
    }
    out.push_str(&format!(" {:>12}\n", "dp"));
    let fmt_set = |s: &BTreeSet<u32>| {
        if s.is_empty() {
            "-".to_string()
        } else {
            s.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",")
        }
    };
    for a in &plan.per_layer {
        out.push_str(&format!("{:>6}", a.layer));
        for g in &plan.world {
            let s = a.tp_heads.get(g).cloned().unwrap_or_default();
            out.push_str(&format!(" {:>12}", fmt_set(&s)));
        }
        out.push_str(&format!(" {:>12}\n", fmt_set(&a.dp_heads)));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn model(layers: u32, heads: u32) -> ModelSpec {
        ModelSpec {
            num_layers: layers,
            num_kv_heads: heads,
            num_q_heads: heads,
            head_dim: 4,
            hidden_dim: 16,
            ffn_intermediate_dim: 840,
            bytes_per_param: 2,
            bytes_per_kv_element: 2,
            num_experts: 1,
            experts_per_token: 1,
        }
    }

    pub(crate) fn gpus(n: u32) -> BTreeSet<GpuId> {
        (0..n).map(GpuId).collect()
    }

    fn set(xs: &[u32]) -> BTreeSet<u32> {
        xs.iter().copied().collect()
    }

    /// Brute-force head-layer counter over every layer window, independent of
    /// the plan's own bookkeeping.
    fn window_counts(plan: &PlacementPlan, start: usize, len: usize) -> Vec<u32> {
        plan.world
            .iter()
            .map(|g| plan.per_layer[start..start + len].iter().map(|a| a.tp_heads[g].len() as u32).sum())
            .collect()
    }

    #[test]
    fn naive_four_heads_on_three_gpus() {
        let m = model(3, 4);
        let plan = naive_placement(&m, &gpus(3)).unwrap();
        for a in &plan.per_layer {
            assert_eq!(a.tp_heads[&GpuId(0)], set(&[0, 1]));
            assert_eq!(a.tp_heads[&GpuId(1)], set(&[2]));
            assert_eq!(a.tp_heads[&GpuId(2)], set(&[3]));
            assert!(a.dp_heads.is_empty());
        }
        plan.validate(&m).unwrap();
    }

    #[test]
    fn naive_uniform_and_seven_way() {
        let m = model(4, 8);
        let plan = naive_placement(&m, &gpus(8)).unwrap();
        for a in &plan.per_layer {
            assert!(plan.world.iter().all(|g| a.tp_count(*g) == 1));
        }
        let plan = naive_placement(&m, &gpus(7)).unwrap();
        for a in &plan.per_layer {
            let twos = plan.world.iter().filter(|g| a.tp_count(**g) == 2).count();
            assert_eq!(twos, 1);
            assert_eq!(a.tp_count(GpuId(0)), 2);
        }
    }

    #[test]
    fn too_many_gpus_is_unsupported() {
        let m = model(2, 4);
        for mode in PlacementMode::ALL {
            assert!(matches!(placement(mode, &m, &gpus(5), 840), Err(Error::Unsupported(_))));
        }
    }

    #[test]
    fn cyclic_four_heads_three_gpus_balances_capacity() {
        let m = model(3, 4);
        let cyc = cyclic_placement(&m, &gpus(3)).unwrap();
        let naive = naive_placement(&m, &gpus(3)).unwrap();
        assert_eq!(window_counts(&cyc, 0, 3), vec![4, 4, 4]);
        assert_eq!(window_counts(&naive, 0, 3), vec![6, 3, 3]);
    }

    #[test]
    fn cyclic_uniform_matches_naive_counts() {
        let m = model(5, 8);
        let cyc = cyclic_placement(&m, &gpus(8)).unwrap();
        let naive = naive_placement(&m, &gpus(8)).unwrap();
        for g in &cyc.world {
            assert_eq!(cyc.tp_head_layers(*g), naive.tp_head_layers(*g));
        }
    }

    #[test]
    fn cyclic_eight_heads_seven_gpus_fourteen_layers() {
        // Frozen from the brute-force window counter: 2 windows x 8 heads.
        let m = model(14, 8);
        let cyc = cyclic_placement(&m, &gpus(7)).unwrap();
        assert_eq!(window_counts(&cyc, 0, 14), vec![16; 7]);
    }

    #[test]
    fn cyclic_window_balance_exhaustive_small() {
        for h in 1..=12 {
            for n in 1..=h.min(8) {
                let m = model(2 * n + 3, h);
                let plan = cyclic_placement(&m, &gpus(n)).unwrap();
                plan.validate(&m).unwrap();
                for start in 0..=(m.num_layers - n) as usize {
                    assert!(window_counts(&plan, start, n as usize).iter().all(|c| *c == h));
                }
            }
        }
    }

    #[test]
    fn hybrid_examples() {
        let m = model(7, 8);
        let plan = hybrid_placement(&m, &gpus(7)).unwrap();
        for a in &plan.per_layer {
            assert_eq!(a.dp_heads.len(), 1);
            assert!(plan.world.iter().all(|g| a.tp_count(*g) == 1));
        }
        let plan = hybrid_placement(&m, &gpus(8)).unwrap();
        for a in &plan.per_layer {
            assert!(a.dp_heads.is_empty());
            assert!(plan.world.iter().all(|g| a.tp_count(*g) == 1));
        }
        let m = model(3, 4);
        let plan = hybrid_placement(&m, &gpus(3)).unwrap();
        for a in &plan.per_layer {
            assert_eq!(a.dp_heads.len(), 1);
            assert!(plan.world.iter().all(|g| a.tp_count(*g) == 1));
        }
        plan.validate(&m).unwrap();
    }

    #[test]
    fn hybrid_dp_heads_rotate_evenly() {
        // Over H / gcd(H, r) layers every head is replicated r / gcd times.
        for h in 1..=16u32 {
            for n in 1..=h {
                let r = h % n;
                if r == 0 {
                    continue;
                }
                let period = h / gcd(h, r);
                let m = model(period * 2, h);
                let plan = hybrid_placement(&m, &gpus(n)).unwrap();
                plan.validate(&m).unwrap();
                for start in 0..period as usize {
                    let mut hits = vec![0u32; h as usize];
                    for a in &plan.per_layer[start..start + period as usize] {
                        for x in &a.dp_heads {
                            hits[*x as usize] += 1;
                        }
                    }
                    let want = r / gcd(h, r);
                    assert!(hits.iter().all(|c| *c == want), "h={h} n={n}: {hits:?}");
                }
            }
        }
    }

    #[test]
    fn ffn_assignment_examples() {
        let m = model(1, 8);
        let mut m12 = m.clone();
        m12.ffn_intermediate_dim = 1200;
        let a = ffn_assignment(&m12, &gpus(4), 12).unwrap();
        for (g, want) in [(0, vec![0, 1, 2]), (1, vec![3, 4, 5]), (2, vec![6, 7, 8]), (3, vec![9, 10, 11])] {
            assert_eq!(a.shards_of(GpuId(g)), want);
        }
        let a = ffn_assignment(&m12, &gpus(3), 12).unwrap();
        assert!(a.counts().values().all(|c| *c == 4));
        let mut m7 = m.clone();
        m7.ffn_intermediate_dim = 700;
        let a = ffn_assignment(&m7, &gpus(3), 7).unwrap();
        assert_eq!(a.counts().values().copied().collect::<Vec<_>>(), vec![3, 2, 2]);
        assert!(matches!(ffn_assignment(&m7, &gpus(3), 6), Err(Error::Validation { .. })));
        assert!(ffn_assignment(&m7, &gpus(3), 2).is_err());
    }

    #[test]
    fn default_shards_divide_the_ffn() {
        let llama = crate::spec::parse_model_spec(include_str!("../data/models/llama70b.toml")).unwrap();
        let s = default_num_shards(&llama);
        assert_eq!(llama.ffn_intermediate_dim % s, 0);
        assert_eq!(s, 896);
        let m = model(1, 8);
        assert_eq!(default_num_shards(&m), 840);
    }

    fn one_request(tokens: u64, gpu: GpuId) -> (BTreeMap<u64, u64>, BTreeMap<u64, GpuId>) {
        (BTreeMap::from([(0, tokens)]), BTreeMap::from([(0, gpu)]))
    }

    #[test]
    fn naive_seven_way_footprint_doubles_on_heavy_gpu() {
        let m = model(4, 8);
        let plan = naive_placement(&m, &gpus(7)).unwrap();
        let (t, r) = one_request(1000, GpuId(0));
        let fp = memory_footprint(&plan, &m, &t, &r).unwrap();
        let light = fp[&GpuId(1)];
        assert_eq!(fp[&GpuId(0)], 2 * light);
        assert!(plan.world[1..].iter().all(|g| fp[g] == light));
    }

    #[test]
    fn cyclic_toy_footprint_is_flat() {
        let m = model(3, 4);
        let plan = cyclic_placement(&m, &gpus(3)).unwrap();
        let (t, r) = one_request(10, GpuId(0));
        let fp = memory_footprint(&plan, &m, &t, &r).unwrap();
        // Brute force: 4 head-layers x 10 tokens x bytes per head-token.
        let want = 4 * 10 * m.kv_bytes_per_head_token();
        assert!(fp.values().all(|v| *v == want), "{fp:?}");
    }

    #[test]
    fn footprint_edge_cases() {
        let m = model(3, 4);
        let plan = hybrid_placement(&m, &gpus(3)).unwrap();
        let fp = memory_footprint(&plan, &m, &BTreeMap::new(), &BTreeMap::new()).unwrap();
        assert!(fp.values().all(|v| *v == 0));
        let tokens = BTreeMap::from([(5, 10)]);
        assert!(matches!(memory_footprint(&plan, &m, &tokens, &BTreeMap::new()), Err(Error::MissingRouting(5))));
    }

    #[test]
    fn retention_replan_keeps_survivor_heads() {
        let m = model(16, 8);
        let old = hybrid_placement(&m, &gpus(8)).unwrap();
        let alive: BTreeSet<GpuId> = (0..7).map(GpuId).collect();
        let new = old.replan(&m, &alive).unwrap();
        new.validate(&m).unwrap();
        for (o, n) in old.per_layer.iter().zip(&new.per_layer) {
            for g in &alive {
                assert_eq!(o.tp_heads[g], n.tp_heads[g]);
            }
            assert_eq!(n.dp_heads, o.tp_heads[&GpuId(7)]);
        }
        // The lost FFN shards spread one-for-one over survivors.
        let counts = new.ffn.counts();
        assert!(counts.values().all(|c| *c == 120));
    }

    #[test]
    fn replan_grows_back() {
        let m = model(8, 8);
        let old = hybrid_placement(&m, &gpus(7)).unwrap();
        let new = old.replan(&m, &gpus(8)).unwrap();
        new.validate(&m).unwrap();
        let shrunk = cyclic_placement(&m, &gpus(5)).unwrap();
        let grown = shrunk.replan(&m, &gpus(8)).unwrap();
        grown.validate(&m).unwrap();
        assert_eq!(grown.ffn.counts().values().copied().collect::<Vec<_>>(), vec![105; 8]);
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn window_balance(h in 1u32..=64, n_raw in 1u32..=16, extra in 0u32..20) {
                let n = n_raw.min(h);
                let m = model(n + extra, h);
                let plan = cyclic_placement(&m, &gpus(n)).unwrap();
                for start in 0..=extra as usize {
                    prop_assert!(window_counts(&plan, start, n as usize).iter().all(|c| *c == h));
                }
            }

            #[test]
            fn every_mode_partitions(h in 1u32..=24, n_raw in 1u32..=12, layers in 1u32..12) {
                let n = n_raw.min(h);
                let m = model(layers, h);
                for mode in PlacementMode::ALL {
                    let plan = placement(mode, &m, &gpus(n), 840).unwrap();
                    prop_assert!(plan.validate(&m).is_ok());
                }
            }

            #[test]
            fn footprint_monotone_and_cyclic_dominates(
                h in 1u32..=16, n_raw in 1u32..=8, layers in 1u32..20,
                reqs in proptest::collection::vec((1u64..5000, 0u32..8), 1..12),
            ) {
                let n = n_raw.min(h);
                let m = model(layers, h);
                let naive = naive_placement(&m, &gpus(n)).unwrap();
                let cyc = cyclic_placement(&m, &gpus(n)).unwrap();
                let hyb = hybrid_placement(&m, &gpus(n)).unwrap();
                let mut tokens = BTreeMap::new();
                let mut routing = BTreeMap::new();
                let mut prev: Option<BTreeMap<GpuId, u64>> = None;
                for (i, (t, g)) in reqs.iter().enumerate() {
                    tokens.insert(i as u64, *t);
                    routing.insert(i as u64, GpuId(g % n));
                    let fp = memory_footprint(&hyb, &m, &tokens, &routing).unwrap();
                    if let Some(p) = &prev {
                        for g in &hyb.world {
                            prop_assert!(fp[g] >= p[g]);
                        }
                    }
                    prev = Some(fp);
                }
                let max = |plan: &PlacementPlan| {
                    *memory_footprint(plan, &m, &tokens, &routing).unwrap().values().max().unwrap()
                };
                prop_assert!(max(&cyc) <= max(&naive));
                if h % n == 0 {
                    prop_assert_eq!(max(&cyc), max(&naive));
                }
            }

            #[test]
            fn replan_preserves_invariants(
                h in 1u32..=16, n_raw in 1u32..=8, layers in 1u32..10,
                mode_ix in 0usize..3, drop in proptest::collection::btree_set(0u32..8, 0..4),
                add in proptest::collection::btree_set(8u32..12, 0..3),
            ) {
                let n = n_raw.min(h);
                let m = model(layers, h);
                let old = placement(PlacementMode::ALL[mode_ix], &m, &gpus(n), 840).unwrap();
                let mut alive: BTreeSet<GpuId> = old.alive_set();
                for d in &drop { alive.remove(&GpuId(*d)); }
                for a in &add { alive.insert(GpuId(*a)); }
                if alive.is_empty() || alive.len() > h as usize {
                    return Ok(());
                }
                let new = old.replan(&m, &alive).unwrap();
                prop_assert!(new.validate(&m).is_ok(), "{:?}", new.validate(&m));
                if old.mode == PlacementMode::Cyclic && layers >= alive.len() as u32 {
                    let k = alive.len();
                    for start in 0..=(layers as usize - k) {
                        prop_assert!(window_counts(&new, start, k).iter().all(|c| *c == h));
                    }
                }
            }
        }
    }
}
