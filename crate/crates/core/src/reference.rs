//! Small dense executor used to check that sharded execution reproduces
//! single-device results.
//!
//! Everything is `f64`. Ranks are simulated one after another in world order
//! and partial results are summed in that order, so runs are reproducible
//! bit for bit.

use std::collections::{BTreeMap, BTreeSet};

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::placement::{placement, PlacementMode, PlacementPlan};
use crate::recovery::{plan_weight_recovery, RecoveryPlan, TransferContent, WeightMode};
use crate::spec::{GpuId, ModelSpec};

pub type Mat = DMatrix<f64>;

/// Tolerance for sharded-vs-reference comparisons (relative to the largest
/// reference entry).
pub const PARALLEL_TOL: f64 = 1e-10;
/// Tolerance for FFN permutation comparisons (absolute).
pub const PERMUTATION_TOL: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ToyConfig {
    pub num_layers: u32,
    pub num_kv_heads: u32,
    /// Query heads per KV head.
    pub group_size: u32,
    pub head_dim: u32,
    pub hidden_dim: u32,
    pub ffn_dim: u32,
}

impl ToyConfig {
    pub fn validate(&self) -> Result<()> {
        let dims = [
            ("num_layers", self.num_layers, 16),
            ("num_kv_heads", self.num_kv_heads, 8),
            ("group_size", self.group_size, 8),
            ("head_dim", self.head_dim, 64),
            ("hidden_dim", self.hidden_dim, 64),
            ("ffn_dim", self.ffn_dim, 128),
        ];
        for (field, v, max) in dims {
            if v == 0 || v > max {
                return Err(Error::validation(field, format!("must be in 1..={max}, got {v}")));
            }
        }
        Ok(())
    }

    /// The matching [`ModelSpec`] with 8-byte parameters, so byte counts in
    /// recovery plans address `f64` weights directly.
    pub fn model_spec(&self) -> ModelSpec {
        ModelSpec {
            num_layers: self.num_layers,
            num_kv_heads: self.num_kv_heads,
            num_q_heads: self.num_kv_heads * self.group_size,
            head_dim: self.head_dim,
            hidden_dim: self.hidden_dim,
            ffn_intermediate_dim: self.ffn_dim,
            bytes_per_param: 8,
            bytes_per_kv_element: 8,
            num_experts: 1,
            experts_per_token: 1,
        }
    }

    fn head_bytes(&self) -> usize {
        (self.hidden_dim * self.head_dim * (2 * self.group_size + 2)) as usize * 8
    }
}

/// One KV head with its query group. All matrices are `head_dim x hidden`.
#[derive(Debug, Clone, PartialEq)]
pub struct HeadWeights {
    pub wq: Vec<Mat>,
    pub wk: Mat,
    pub wv: Mat,
    pub wo: Vec<Mat>,
}

impl HeadWeights {
    fn mats(&self) -> impl Iterator<Item = &Mat> {
        self.wq.iter().chain([&self.wk, &self.wv]).chain(self.wo.iter())
    }

    fn to_bytes(&self) -> Vec<u8> {
        self.mats().flat_map(|m| m.as_slice().iter().flat_map(|x| x.to_le_bytes())).collect()
    }

    fn from_bytes(cfg: &ToyConfig, bytes: &[u8]) -> HeadWeights {
        let (d, h, g) = (cfg.head_dim as usize, cfg.hidden_dim as usize, cfg.group_size as usize);
        let mut vals = bytes.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")));
        let mut next = || Mat::from_iterator(d, h, vals.by_ref().take(d * h));
        let wq = (0..g).map(|_| next()).collect();
        let wk = next();
        let wv = next();
        let wo = (0..g).map(|_| next()).collect();
        HeadWeights { wq, wk, wv, wo }
    }
}

/// Columns of the gate and up projections and the matching rows of down.
#[derive(Debug, Clone, PartialEq)]
pub struct ShardWeights {
    pub gate: Mat,
    pub up: Mat,
    pub down: Mat,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ToyLayerWeights {
    pub heads: Vec<HeadWeights>,
    /// `hidden x ffn`
    pub gate: Mat,
    /// `hidden x ffn`
    pub up: Mat,
    /// `ffn x hidden`
    pub down: Mat,
}

impl ToyLayerWeights {
    pub fn shard(&self, shard: u32, num_shards: u32) -> ShardWeights {
        let w = self.gate.ncols() / num_shards as usize;
        let start = shard as usize * w;
        ShardWeights {
            gate: self.gate.columns(start, w).into_owned(),
            up: self.up.columns(start, w).into_owned(),
            down: self.down.rows(start, w).into_owned(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ToyModel {
    pub config: ToyConfig,
    pub layers: Vec<ToyLayerWeights>,
}

impl ToyModel {
    /// Weights drawn from `N(0, 1/hidden)`.
    pub fn random(config: ToyConfig, seed: u64) -> Result<ToyModel> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let scale = 1.0 / (config.hidden_dim as f64).sqrt();
        let mut mat = |r: u32, c: u32| {
            Mat::from_fn(r as usize, c as usize, |_, _| {
                let z: f64 = StandardNormal.sample(&mut rng);
                scale * z
            })
        };
        let (d, h, f) = (config.head_dim, config.hidden_dim, config.ffn_dim);
        let layers = (0..config.num_layers)
            .map(|_| {
                let heads = (0..config.num_kv_heads)
                    .map(|_| HeadWeights {
                        wq: (0..config.group_size).map(|_| mat(d, h)).collect(),
                        wk: mat(d, h),
                        wv: mat(d, h),
                        wo: (0..config.group_size).map(|_| mat(d, h)).collect(),
                    })
                    .collect();
                ToyLayerWeights { heads, gate: mat(h, f), up: mat(h, f), down: mat(f, h) }
            })
            .collect();
        Ok(ToyModel { config, layers })
    }
}

fn silu(x: f64) -> f64 {
    x / (1.0 + (-x).exp())
}

/// Causal softmax attention of one KV head (all its query heads) over one
/// request, projected back to `T x hidden`.
fn head_attention(w: &HeadWeights, x: &Mat) -> Mat {
    let t = x.nrows();
    let scale = 1.0 / (w.wk.nrows() as f64).sqrt();
    let k = x * w.wk.transpose();
    let v = x * w.wv.transpose();
    let mut out = Mat::zeros(t, x.ncols());
    for (wq, wo) in w.wq.iter().zip(&w.wo) {
        let q = x * wq.transpose();
        let mut scores = &q * k.transpose() * scale;
        for i in 0..t {
            let m = (0..=i).map(|j| scores[(i, j)]).fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for j in 0..t {
                let e = if j <= i { (scores[(i, j)] - m).exp() } else { 0.0 };
                scores[(i, j)] = e;
                sum += e;
            }
            for j in 0..=i {
                scores[(i, j)] /= sum;
            }
        }
        out += scores * &v * wo;
    }
    out
}

fn ffn(gate: &Mat, up: &Mat, down: &Mat, x: &Mat) -> Mat {
    let a = (x * gate).map(silu).component_mul(&(x * up));
    a * down
}

fn check_inputs(cfg: &ToyConfig, inputs: &[Mat]) -> Result<()> {
    for (i, x) in inputs.iter().enumerate() {
        if x.ncols() != cfg.hidden_dim as usize {
            return Err(Error::Shape(format!(
                "request {i} has {} columns, model hidden size is {}",
                x.ncols(),
                cfg.hidden_dim
            )));
        }
    }
    Ok(())
}

/// Single-device forward pass. Each input is one request's `T x hidden`
/// activations; requests never attend to each other.
pub fn reference_forward(model: &ToyModel, inputs: &[Mat]) -> Result<Vec<Mat>> {
    check_inputs(&model.config, inputs)?;
    Ok(inputs
        .iter()
        .map(|x| {
            let mut x = x.clone();
            for layer in &model.layers {
                let mut attn = Mat::zeros(x.nrows(), x.ncols());
                for h in &layer.heads {
                    attn += head_attention(h, &x);
                }
                x += attn;
                x += ffn(&layer.gate, &layer.up, &layer.down, &x);
            }
            x
        })
        .collect())
}

/// FFN of one layer with its intermediate dimension reordered by `perm`:
/// column `i` of gate/up and row `i` of down come from index `perm[i]`.
pub fn permuted_ffn_forward(layer: &ToyLayerWeights, perm: &[usize], x: &Mat) -> Result<Mat> {
    let f = layer.gate.ncols();
    let mut seen = vec![false; f];
    if perm.len() != f || !perm.iter().all(|p| *p < f && !std::mem::replace(&mut seen[*p], true)) {
        return Err(Error::validation("permutation", format!("not a bijection on 0..{f}")));
    }
    if x.ncols() != layer.gate.nrows() {
        return Err(Error::Shape(format!("input has {} columns, expected {}", x.ncols(), layer.gate.nrows())));
    }
    let gate = layer.gate.select_columns(perm);
    let up = layer.up.select_columns(perm);
    let down = layer.down.select_rows(perm);
    Ok(ffn(&gate, &up, &down, x))
}

/// Unpermuted FFN of one layer.
pub fn ffn_forward(layer: &ToyLayerWeights, x: &Mat) -> Mat {
    ffn(&layer.gate, &layer.up, &layer.down, x)
}

#[derive(Debug, Clone, PartialEq)]
struct HeadBuf {
    bytes: Vec<u8>,
    filled: Vec<bool>,
}

impl HeadBuf {
    fn complete(&self) -> bool {
        self.filled.iter().all(|f| *f)
    }
}

/// What one rank holds: serialized head slices (possibly partial while a
/// recovery is in progress) and FFN shards, keyed by `(layer, index)`.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct RankState {
    heads: BTreeMap<(u32, u32), HeadBuf>,
    shards: BTreeMap<(u32, u32), ShardWeights>,
}

impl RankState {
    fn head(&self, cfg: &ToyConfig, layer: u32, head: u32) -> Option<HeadWeights> {
        self.heads.get(&(layer, head)).filter(|b| b.complete()).map(|b| HeadWeights::from_bytes(cfg, &b.bytes))
    }
}

/// The toy model distributed over ranks. `host` is the full copy in host
/// memory, the source of every PCIe transfer.
#[derive(Debug, Clone)]
pub struct ShardedView {
    pub host: ToyModel,
    pub num_shards: u32,
    pub ranks: BTreeMap<GpuId, RankState>,
}

impl ShardedView {
    /// Slice `model` the way `plan` places it.
    pub fn new(model: &ToyModel, plan: &PlacementPlan) -> Result<ShardedView> {
        let cfg = &model.config;
        check_plan(cfg, plan)?;
        let mut ranks: BTreeMap<GpuId, RankState> = BTreeMap::new();
        for g in &plan.world {
            let st = ranks.entry(*g).or_default();
            for (l, a) in plan.per_layer.iter().enumerate() {
                let layer = &model.layers[l];
                for h in a.resident_heads(*g) {
                    let bytes = layer.heads[h as usize].to_bytes();
                    let filled = vec![true; bytes.len()];
                    st.heads.insert((l as u32, h), HeadBuf { bytes, filled });
                }
                for s in plan.ffn.shards_of(*g) {
                    st.shards.insert((l as u32, s), layer.shard(s, plan.ffn.num_shards));
                }
            }
        }
        Ok(ShardedView { host: model.clone(), num_shards: plan.ffn.num_shards, ranks })
    }

    /// Rebuild full weights from the ranks alone.
    pub fn reassemble(&self) -> Result<ToyModel> {
        let cfg = self.host.config;
        let w = (cfg.ffn_dim / self.num_shards) as usize;
        let mut layers = Vec::new();
        for l in 0..cfg.num_layers {
            let heads = (0..cfg.num_kv_heads)
                .map(|h| {
                    self.ranks
                        .values()
                        .find_map(|r| r.head(&cfg, l, h))
                        .ok_or_else(|| Error::Integrity(format!("no rank holds layer {l} head {h}")))
                })
                .collect::<Result<Vec<_>>>()?;
            let (hd, f) = (cfg.hidden_dim as usize, cfg.ffn_dim as usize);
            let (mut gate, mut up, mut down) = (Mat::zeros(hd, f), Mat::zeros(hd, f), Mat::zeros(f, hd));
            for s in 0..self.num_shards {
                let sw = self
                    .ranks
                    .values()
                    .find_map(|r| r.shards.get(&(l, s)))
                    .ok_or_else(|| Error::Integrity(format!("no rank holds layer {l} shard {s}")))?;
                let start = s as usize * w;
                gate.columns_mut(start, w).copy_from(&sw.gate);
                up.columns_mut(start, w).copy_from(&sw.up);
                down.rows_mut(start, w).copy_from(&sw.down);
            }
            layers.push(ToyLayerWeights { heads, gate, up, down });
        }
        Ok(ToyModel { config: cfg, layers })
    }

    /// Execute a recovery plan's weight transfers in order and return the
    /// resulting view over `target`'s world. Ranks outside that world lose
    /// their state; peer transfers read from the source's current state.
    pub fn apply_recovery(&self, recovery: &RecoveryPlan, target: &PlacementPlan) -> Result<ShardedView> {
        let cfg = self.host.config;
        check_plan(&cfg, target)?;
        if target.ffn.num_shards != self.num_shards {
            return Err(Error::Integrity("target changes the FFN shard count".into()));
        }
        let world: BTreeSet<GpuId> = target.alive_set();
        let mut ranks: BTreeMap<GpuId, RankState> =
            world.iter().map(|g| (*g, self.ranks.get(g).cloned().unwrap_or_default())).collect();
        let head_len = cfg.head_bytes();
        let shard_len = cfg.model_spec().ffn_bytes_per_layer() / self.num_shards as u64 * cfg.num_layers as u64;
        let offsets = slice_offsets(recovery, head_len)?;

        for t in &recovery.transfers {
            if !world.contains(&t.dst) {
                return Err(Error::Integrity(format!("transfer to {} outside the new world", t.dst)));
            }
            if let Some(src) = t.src {
                if !world.contains(&src) {
                    return Err(Error::Integrity(format!("transfer from {src}, which is not alive")));
                }
            }
            match t.content {
                TransferContent::FfnShard { shard } => {
                    if t.bytes != shard_len {
                        return Err(Error::Integrity(format!("shard {shard} transfer has {} bytes", t.bytes)));
                    }
                    for l in 0..cfg.num_layers {
                        let data = match t.src {
                            None => self.host.layers[l as usize].shard(shard, self.num_shards),
                            Some(src) => ranks[&src].shards.get(&(l, shard)).cloned().ok_or_else(|| {
                                Error::Integrity(format!("{src} does not hold layer {l} shard {shard}"))
                            })?,
                        };
                        ranks.get_mut(&t.dst).expect("in world").shards.insert((l, shard), data);
                    }
                }
                TransferContent::AttnHeadSlice { layer, head, part, .. } => {
                    let (off, len) = offsets[&(layer, head, part)];
                    if t.bytes as usize != len {
                        return Err(Error::Integrity(format!("inconsistent size for layer {layer} head {head}")));
                    }
                    let data: Vec<u8> = match t.src {
                        None => {
                            self.host.layers[layer as usize].heads[head as usize].to_bytes()[off..off + len].to_vec()
                        }
                        Some(src) => {
                            let buf = ranks[&src]
                                .heads
                                .get(&(layer, head))
                                .filter(|b| b.filled[off..off + len].iter().all(|f| *f))
                                .ok_or_else(|| {
                                    Error::Integrity(format!(
                                        "{src} lacks bytes {off}..{} of layer {layer} head {head}",
                                        off + len
                                    ))
                                })?;
                            buf.bytes[off..off + len].to_vec()
                        }
                    };
                    let dst = ranks
                        .get_mut(&t.dst)
                        .expect("in world")
                        .heads
                        .entry((layer, head))
                        .or_insert_with(|| HeadBuf { bytes: vec![0; head_len], filled: vec![false; head_len] });
                    dst.bytes[off..off + len].copy_from_slice(&data);
                    dst.filled[off..off + len].iter_mut().for_each(|f| *f = true);
                }
                TransferContent::KvSlice { .. } => {}
            }
        }
        let view = ShardedView { host: self.host.clone(), num_shards: self.num_shards, ranks };
        view.check_holds(target)?;
        Ok(view)
    }

    /// Every rank of `plan` holds every head and shard the plan assigns it.
    pub fn check_holds(&self, plan: &PlacementPlan) -> Result<()> {
        for g in &plan.world {
            let st = self.ranks.get(g).ok_or_else(|| Error::Integrity(format!("{g} has no state")))?;
            for (l, a) in plan.per_layer.iter().enumerate() {
                let l = l as u32;
                for h in a.resident_heads(*g) {
                    if !st.heads.get(&(l, h)).is_some_and(HeadBuf::complete) {
                        return Err(Error::Integrity(format!("{g} is missing layer {l} head {h}")));
                    }
                }
                for s in plan.ffn.shards_of(*g) {
                    if !st.shards.contains_key(&(l, s)) {
                        return Err(Error::Integrity(format!("{g} is missing layer {l} shard {s}")));
                    }
                }
            }
        }
        Ok(())
    }
}

/// Byte range of every head-slice part named in the plan. A head split into
/// parts is laid out in part order.
fn slice_offsets(recovery: &RecoveryPlan, head_len: usize) -> Result<BTreeMap<(u32, u32, u32), (usize, usize)>> {
    let mut sizes: BTreeMap<(u32, u32), BTreeMap<u32, usize>> = BTreeMap::new();
    for t in &recovery.transfers {
        if let TransferContent::AttnHeadSlice { layer, head, part, .. } = t.content {
            sizes.entry((layer, head)).or_default().entry(part).or_insert(t.bytes as usize);
        }
    }
    let mut out = BTreeMap::new();
    for ((layer, head), parts) in sizes {
        let mut off = 0;
        for (part, len) in parts {
            if off + len > head_len {
                return Err(Error::Integrity(format!("slices of layer {layer} head {head} overrun the head")));
            }
            out.insert((layer, head, part), (off, len));
            off += len;
        }
    }
    Ok(out)
}

fn check_plan(cfg: &ToyConfig, plan: &PlacementPlan) -> Result<()> {
    if plan.per_layer.len() != cfg.num_layers as usize {
        return Err(Error::Shape(format!("plan has {} layers, model has {}", plan.per_layer.len(), cfg.num_layers)));
    }
    if plan.ffn.num_shards == 0 || !cfg.ffn_dim.is_multiple_of(plan.ffn.num_shards) {
        return Err(Error::Shape(format!("{} shards do not divide ffn width {}", plan.ffn.num_shards, cfg.ffn_dim)));
    }
    plan.validate(&cfg.model_spec())
}

/// Sharded forward pass. Each rank computes attention over its partitioned
/// heads for every request and over the replicated heads for the requests
/// routed to it, plus its FFN shards; partials are then summed in rank
/// order. A replicated-head result exists on one rank only, so the sum
/// doubles as the gather that hands it to every rank.
pub fn parallel_forward(
    view: &ShardedView,
    plan: &PlacementPlan,
    routing: Option<&[GpuId]>,
    inputs: &[Mat],
) -> Result<Vec<Mat>> {
    let cfg = view.host.config;
    check_inputs(&cfg, inputs)?;
    check_plan(&cfg, plan)?;
    view.check_holds(plan)?;
    let routing: Vec<Option<GpuId>> = match (plan.mode, routing) {
        (PlacementMode::Hybrid, None) => return Err(Error::MissingRouting(0)),
        (PlacementMode::Hybrid, Some(r)) if r.len() < inputs.len() => {
            return Err(Error::MissingRouting(r.len() as u64))
        }
        (_, Some(r)) => {
            if let Some(g) = r.iter().find(|g| plan.rank_of(**g).is_none()) {
                return Err(Error::validation("routing", format!("{g} is not in the world")));
            }
            (0..inputs.len()).map(|i| r.get(i).copied()).collect()
        }
        (_, None) => vec![None; inputs.len()],
    };

    let mut xs: Vec<Mat> = inputs.to_vec();
    for (l, a) in plan.per_layer.iter().enumerate() {
        let layer = l as u32;
        let mut attn: Vec<Mat> = xs.iter().map(|x| Mat::zeros(x.nrows(), x.ncols())).collect();
        for g in &plan.world {
            let st = &view.ranks[g];
            let mut partial: Vec<Mat> = xs.iter().map(|x| Mat::zeros(x.nrows(), x.ncols())).collect();
            for h in &a.tp_heads[g] {
                let w = st.head(&cfg, layer, *h).expect("checked");
                for (p, x) in partial.iter_mut().zip(&xs) {
                    *p += head_attention(&w, x);
                }
            }
            for h in &a.dp_heads {
                let w = st.head(&cfg, layer, *h).expect("checked");
                for ((p, x), r) in partial.iter_mut().zip(&xs).zip(&routing) {
                    if *r == Some(*g) {
                        *p += head_attention(&w, x);
                    }
                }
            }
            for (acc, p) in attn.iter_mut().zip(partial) {
                *acc += p;
            }
        }
        for (x, a) in xs.iter_mut().zip(attn) {
            *x += a;
        }
        let mut out: Vec<Mat> = xs.iter().map(|x| Mat::zeros(x.nrows(), x.ncols())).collect();
        for g in &plan.world {
            let st = &view.ranks[g];
            let mut partial: Vec<Mat> = xs.iter().map(|x| Mat::zeros(x.nrows(), x.ncols())).collect();
            for s in plan.ffn.shards_of(*g) {
                let sw = &st.shards[&(layer, s)];
                for (p, x) in partial.iter_mut().zip(&xs) {
                    *p += ffn(&sw.gate, &sw.up, &sw.down, x);
                }
            }
            for (acc, p) in out.iter_mut().zip(partial) {
                *acc += p;
            }
        }
        for (x, o) in xs.iter_mut().zip(out) {
            *x += o;
        }
    }
    Ok(xs)
}

/// Largest absolute difference divided by the largest absolute reference
/// entry.
pub fn max_relative_deviation(got: &[Mat], reference: &[Mat]) -> f64 {
    let scale = reference.iter().flat_map(|m| m.iter()).fold(0.0f64, |a, x| a.max(x.abs()));
    max_abs_deviation(got, reference) / scale.max(f64::MIN_POSITIVE)
}

pub fn max_abs_deviation(got: &[Mat], reference: &[Mat]) -> f64 {
    if got.len() != reference.len() {
        return f64::INFINITY;
    }
    got.iter()
        .zip(reference)
        .map(|(a, b)| if a.shape() != b.shape() { f64::INFINITY } else { (a - b).amax() })
        .fold(0.0, f64::max)
}

/// Apply `recovery` to `old`'s layout after `failed` dies, run the sharded
/// forward pass on `target`, and compare with the reference. Requests are
/// routed round-robin over the new world.
///
/// Returns an integrity error if the transfers leave a rank without weights
/// it needs.
pub fn recovery_equivalence(
    model: &ToyModel,
    old: &PlacementPlan,
    failed: GpuId,
    target: &PlacementPlan,
    recovery: &RecoveryPlan,
    inputs: &[Mat],
) -> Result<bool> {
    if old.rank_of(failed).is_none() || target.rank_of(failed).is_some() {
        return Err(Error::validation("failed", format!("{failed} must leave the world")));
    }
    let mut before = ShardedView::new(model, old)?;
    before.ranks.remove(&failed);
    let after = before.apply_recovery(recovery, target)?;
    let routing: Vec<GpuId> = (0..inputs.len()).map(|i| target.world[i % target.world.len()]).collect();
    let got = parallel_forward(&after, target, Some(&routing), inputs)?;
    let want = reference_forward(model, inputs)?;
    Ok(max_relative_deviation(&got, &want) <= PARALLEL_TOL)
}

/// A seeded random model, placement, routing and batch.
#[derive(Debug, Clone)]
pub struct ToyInstance {
    pub model: ToyModel,
    pub plan: PlacementPlan,
    pub routing: Vec<GpuId>,
    pub inputs: Vec<Mat>,
}

impl ToyInstance {
    /// World size is at least `min_world` (capped by the head count, which
    /// is raised if needed).
    pub fn random(seed: u64, min_world: u32) -> Result<ToyInstance> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let heads = rng.random_range(min_world.max(1)..=8);
        let n = rng.random_range(min_world.max(1)..=heads);
        let num_shards = rng.random_range(n..=n.max(16));
        let config = ToyConfig {
            num_layers: rng.random_range(1..=3),
            num_kv_heads: heads,
            group_size: rng.random_range(1..=2),
            head_dim: rng.random_range(2..=4),
            hidden_dim: rng.random_range(4..=16),
            ffn_dim: num_shards * rng.random_range(1..=(128 / num_shards).min(3)),
        };
        let mode = [PlacementMode::Naive, PlacementMode::Cyclic, PlacementMode::Hybrid][rng.random_range(0..3)];
        let mut ids: Vec<u32> = (0..8).collect();
        for i in (1..ids.len()).rev() {
            ids.swap(i, rng.random_range(0..=i));
        }
        let alive: BTreeSet<GpuId> = ids[..n as usize].iter().map(|i| GpuId(*i)).collect();
        let plan = placement(mode, &config.model_spec(), &alive, num_shards)?;
        let model = ToyModel::random(config, rng.random())?;
        let batch = rng.random_range(1..=3);
        let inputs: Vec<Mat> = (0..batch)
            .map(|_| {
                let t = rng.random_range(1..=4);
                Mat::from_fn(t, config.hidden_dim as usize, |_, _| StandardNormal.sample(&mut rng))
            })
            .collect();
        let routing = (0..batch).map(|_| plan.world[rng.random_range(0..plan.world.len())]).collect();
        Ok(ToyInstance { model, plan, routing, inputs })
    }

    /// Sharded output's deviation from the reference.
    pub fn parallel_deviation(&self) -> Result<f64> {
        let view = ShardedView::new(&self.model, &self.plan)?;
        let got = parallel_forward(&view, &self.plan, Some(&self.routing), &self.inputs)?;
        Ok(max_relative_deviation(&got, &reference_forward(&self.model, &self.inputs)?))
    }

    /// Fail a random rank, plan on-demand recovery, and check equivalence.
    pub fn recovery_check(&self, seed: u64) -> Result<bool> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let failed = self.plan.world[rng.random_range(0..self.plan.world.len())];
        let mut alive = self.plan.alive_set();
        alive.remove(&failed);
        let spec = self.model.config.model_spec();
        let (target, recovery) = plan_weight_recovery(&spec, &self.plan, &alive, WeightMode::OnDemand)?;
        recovery_equivalence(&self.model, &self.plan, failed, &target, &recovery, &self.inputs)
    }
}

/// Outcome of one equivalence check over many seeded cases.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CheckResult {
    pub check: String,
    pub cases: usize,
    pub passed: usize,
    /// Worst deviation seen (relative for forward checks, absolute for the
    /// permutation check; 0 for boolean checks).
    pub max_deviation: f64,
    pub tolerance: f64,
}

impl CheckResult {
    pub fn ok(&self) -> bool {
        self.passed == self.cases
    }
}

/// The full equivalence suite: `cases` seeded instances for the sharded
/// forward pass, FFN permutation, and reassembly, and `cases / 2` (at least
/// one) for recovery.
pub fn verify_suite(cases: usize, seed: u64) -> Vec<CheckResult> {
    let case_seed = |i: usize| seed.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(i as u64);
    let mut out = Vec::new();

    let mut forward =
        CheckResult { check: "parallel_forward".into(), cases, passed: 0, max_deviation: 0.0, tolerance: PARALLEL_TOL };
    let mut reassembly =
        CheckResult { check: "reassembly".into(), cases, passed: 0, max_deviation: 0.0, tolerance: 0.0 };
    let mut perm = CheckResult {
        check: "ffn_permutation".into(),
        cases,
        passed: 0,
        max_deviation: 0.0,
        tolerance: PERMUTATION_TOL,
    };
    for i in 0..cases {
        let Ok(inst) = ToyInstance::random(case_seed(i), 1) else { continue };
        if let Ok(d) = inst.parallel_deviation() {
            forward.max_deviation = forward.max_deviation.max(d);
            forward.passed += usize::from(d <= PARALLEL_TOL);
        }
        if let Ok(view) = ShardedView::new(&inst.model, &inst.plan) {
            reassembly.passed += usize::from(view.reassemble().is_ok_and(|m| m == inst.model));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(case_seed(i) ^ 1);
        let layer = &inst.model.layers[0];
        let mut p: Vec<usize> = (0..layer.gate.ncols()).collect();
        for j in (1..p.len()).rev() {
            p.swap(j, rng.random_range(0..=j));
        }
        let x = inst.inputs.concat_rows();
        if let Ok(y) = permuted_ffn_forward(layer, &p, &x) {
            let d = (y - ffn_forward(layer, &x)).amax();
            perm.max_deviation = perm.max_deviation.max(d);
            perm.passed += usize::from(d <= PERMUTATION_TOL);
        }
    }
    out.extend([forward, perm, reassembly]);

    let rc = (cases / 2).max(1);
    let mut rec = CheckResult {
        check: "recovery_equivalence".into(),
        cases: rc,
        passed: 0,
        max_deviation: 0.0,
        tolerance: PARALLEL_TOL,
    };
    for i in 0..rc {
        let s = case_seed(cases + i);
        if let Ok(inst) = ToyInstance::random(s, 2) {
            rec.passed += usize::from(matches!(inst.recovery_check(s ^ 2), Ok(true)));
        }
    }
    out.push(rec);
    out
}

trait ConcatRows {
    fn concat_rows(&self) -> Mat;
}

impl ConcatRows for Vec<Mat> {
    fn concat_rows(&self) -> Mat {
        let cols = self[0].ncols();
        let rows: usize = self.iter().map(|m| m.nrows()).sum();
        let mut out = Mat::zeros(rows, cols);
        let mut r = 0;
        for m in self {
            out.rows_mut(r, m.nrows()).copy_from(m);
            r += m.nrows();
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::recovery::{Medium, Transfer};

    fn cfg(heads: u32, ffn: u32) -> ToyConfig {
        ToyConfig { num_layers: 2, num_kv_heads: heads, group_size: 2, head_dim: 3, hidden_dim: 8, ffn_dim: ffn }
    }

    fn gpus(n: u32) -> BTreeSet<GpuId> {
        (0..n).map(GpuId).collect()
    }

    fn batch(hidden: usize, lens: &[usize], seed: u64) -> Vec<Mat> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        lens.iter().map(|t| Mat::from_fn(*t, hidden, |_, _| StandardNormal.sample(&mut rng))).collect()
    }

    #[test]
    fn hand_computed_single_token() {
        let i2 = Mat::identity(2, 2);
        let layer = ToyLayerWeights {
            heads: vec![HeadWeights { wq: vec![i2.clone()], wk: i2.clone(), wv: i2.clone(), wo: vec![i2.clone()] }],
            gate: i2.clone(),
            up: i2.clone(),
            down: i2.clone(),
        };
        let config =
            ToyConfig { num_layers: 1, num_kv_heads: 1, group_size: 1, head_dim: 2, hidden_dim: 2, ffn_dim: 2 };
        let model = ToyModel { config, layers: vec![layer] };
        let x = Mat::from_row_slice(1, 2, &[1.0, -1.0]);
        // One token attends only to itself, so attention returns v = x and
        // the residual doubles it; the FFN adds silu(2x) * 2x.
        let y = &reference_forward(&model, &[x]).unwrap()[0];
        let s = |z: f64| z / (1.0 + (-z).exp());
        assert!((y[0] - (2.0 + 2.0 * s(2.0))).abs() < 1e-15);
        assert!((y[1] - (-2.0 + -2.0 * s(-2.0))).abs() < 1e-15);
        assert!((y[0] - 5.523_188_311_911_53).abs() < 1e-12);
    }

    #[test]
    fn batched_requests_do_not_interact() {
        let model = ToyModel::random(cfg(4, 12), 1).unwrap();
        let xs = batch(8, &[3, 1, 4], 2);
        let together = reference_forward(&model, &xs).unwrap();
        for (i, x) in xs.iter().enumerate() {
            assert_eq!(reference_forward(&model, std::slice::from_ref(x)).unwrap()[0], together[i]);
        }
    }

    #[test]
    fn shape_mismatch_is_an_error() {
        let model = ToyModel::random(cfg(2, 4), 1).unwrap();
        assert!(matches!(reference_forward(&model, &[Mat::zeros(2, 7)]), Err(Error::Shape(_))));
    }

    #[test]
    fn hybrid_routing_matches_reference() {
        let model = ToyModel::random(cfg(4, 12), 3).unwrap();
        let plan = placement(PlacementMode::Hybrid, &model.config.model_spec(), &gpus(3), 12).unwrap();
        let view = ShardedView::new(&model, &plan).unwrap();
        let xs = batch(8, &[2, 3, 1], 4);
        let routing = [GpuId(0), GpuId(1), GpuId(2)];
        let got = parallel_forward(&view, &plan, Some(&routing), &xs).unwrap();
        let want = reference_forward(&model, &xs).unwrap();
        assert!(max_relative_deviation(&got, &want) <= PARALLEL_TOL);
        assert!(matches!(parallel_forward(&view, &plan, None, &xs), Err(Error::MissingRouting(_))));
    }

    #[test]
    fn uniform_world_hybrid_equals_tp() {
        let model = ToyModel::random(cfg(8, 16), 5).unwrap();
        let spec = model.config.model_spec();
        let xs = batch(8, &[2, 2], 6);
        let routing = [GpuId(3), GpuId(5)];
        let hybrid = placement(PlacementMode::Hybrid, &spec, &gpus(8), 8).unwrap();
        let naive = placement(PlacementMode::Naive, &spec, &gpus(8), 8).unwrap();
        let a = parallel_forward(&ShardedView::new(&model, &hybrid).unwrap(), &hybrid, Some(&routing), &xs).unwrap();
        let b = parallel_forward(&ShardedView::new(&model, &naive).unwrap(), &naive, None, &xs).unwrap();
        let want = reference_forward(&model, &xs).unwrap();
        assert!(max_relative_deviation(&a, &want) <= PARALLEL_TOL);
        assert!(max_relative_deviation(&a, &b) <= PARALLEL_TOL);
    }

    #[test]
    fn routing_changes_nothing_but_rounding() {
        let model = ToyModel::random(cfg(5, 12), 7).unwrap();
        let plan = placement(PlacementMode::Hybrid, &model.config.model_spec(), &gpus(3), 12).unwrap();
        let view = ShardedView::new(&model, &plan).unwrap();
        let xs = batch(8, &[2, 3, 2], 8);
        let a = parallel_forward(&view, &plan, Some(&[GpuId(0); 3]), &xs).unwrap();
        let b = parallel_forward(&view, &plan, Some(&[GpuId(2), GpuId(1), GpuId(0)]), &xs).unwrap();
        assert!(max_relative_deviation(&a, &b) <= PARALLEL_TOL);
    }

    #[test]
    fn permutations() {
        let model = ToyModel::random(cfg(2, 4), 9).unwrap();
        let layer = &model.layers[0];
        let x = batch(8, &[3], 10).remove(0);
        assert_eq!(permuted_ffn_forward(layer, &[0, 1, 2, 3], &x).unwrap(), ffn_forward(layer, &x));
        let rev = permuted_ffn_forward(layer, &[3, 2, 1, 0], &x).unwrap();
        assert!((rev - ffn_forward(layer, &x)).amax() <= PERMUTATION_TOL);
        assert!(permuted_ffn_forward(layer, &[0, 0, 1, 2], &x).is_err());
        assert!(permuted_ffn_forward(layer, &[0, 1, 2], &x).is_err());
    }

    #[test]
    fn views_reassemble_exactly() {
        let model = ToyModel::random(cfg(4, 12), 11).unwrap();
        for mode in [PlacementMode::Naive, PlacementMode::Cyclic, PlacementMode::Hybrid] {
            let plan = placement(mode, &model.config.model_spec(), &gpus(3), 6).unwrap();
            assert_eq!(ShardedView::new(&model, &plan).unwrap().reassemble().unwrap(), model);
        }
    }

    fn failover_case() -> (ToyModel, PlacementPlan, PlacementPlan, RecoveryPlan) {
        let model = ToyModel::random(cfg(4, 24), 12).unwrap();
        let spec = model.config.model_spec();
        let old = placement(PlacementMode::Hybrid, &spec, &gpus(4), 12).unwrap();
        let (target, rec) = plan_weight_recovery(&spec, &old, &gpus(3), WeightMode::OnDemand).unwrap();
        (model, old, target, rec)
    }

    #[test]
    fn failover_recovery_is_equivalent() {
        let (model, old, target, rec) = failover_case();
        let xs = batch(8, &[2, 1, 3], 13);
        assert!(recovery_equivalence(&model, &old, GpuId(3), &target, &rec, &xs).unwrap());
    }

    #[test]
    fn dropping_a_transfer_is_an_integrity_error() {
        let (model, old, target, rec) = failover_case();
        let xs = batch(8, &[2], 14);
        for i in 0..rec.transfers.len() {
            let mut broken = rec.clone();
            broken.transfers.remove(i);
            let r = recovery_equivalence(&model, &old, GpuId(3), &target, &broken, &xs);
            assert!(matches!(r, Err(Error::Integrity(_))), "transfer {i}: {r:?}");
        }
    }

    #[test]
    fn host_transfers_must_match_sizes() {
        let (model, old, target, mut rec) = failover_case();
        rec.transfers.push(Transfer {
            dst: GpuId(0),
            src: None,
            bytes: 1,
            medium: Medium::PcieHost,
            content: TransferContent::FfnShard { shard: 0 },
        });
        let r = recovery_equivalence(&model, &old, GpuId(3), &target, &rec, &batch(8, &[1], 1));
        assert!(matches!(r, Err(Error::Integrity(_))));
    }

    #[test]
    fn random_instances() {
        for s in 0..20 {
            let inst = ToyInstance::random(s, 1).unwrap();
            assert!(inst.parallel_deviation().unwrap() <= PARALLEL_TOL, "seed {s}");
            let inst = ToyInstance::random(s, 2).unwrap();
            assert!(inst.recovery_check(s).unwrap(), "seed {s}");
        }
    }
}
