//! Model and cluster descriptions, config-file parsing and memory feasibility.
//!
//! Config files are TOML with a `[model]` and/or `[cluster]` section. Keys
//! mirror the struct field names exactly; unknown keys and sections are
//! rejected.

use std::fmt;

use serde::{Deserialize, Serialize};
use toml::{Table, Value};

use crate::error::{Error, Result};

/// Physical GPU index within one scale-up domain.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize, Default)]
#[serde(transparent)]
pub struct GpuId(pub u32);

impl fmt::Display for GpuId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "gpu{}", self.0)
    }
}

/// Transformer architecture constants relevant to placement and cost.
///
/// The FFN is gated (gate, up and down projections), so a dense layer holds
/// `3 * hidden * ffn` parameters per expert.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub num_layers: u32,
    pub num_kv_heads: u32,
    pub num_q_heads: u32,
    pub head_dim: u32,
    pub hidden_dim: u32,
    pub ffn_intermediate_dim: u32,
    pub bytes_per_param: u64,
    pub bytes_per_kv_element: u64,
    /// Experts per MoE layer; 1 for dense models.
    #[serde(default = "one")]
    pub num_experts: u32,
    /// Experts each token is routed through; 1 for dense models.
    #[serde(default = "one")]
    pub experts_per_token: u32,
}

fn one() -> u32 {
    1
}

impl ModelSpec {
    /// Query heads sharing one KV head.
    pub fn group_size(&self) -> u64 {
        (self.num_q_heads / self.num_kv_heads) as u64
    }

    /// Parameter bytes of one KV head's attention slice in one layer: its
    /// query group, key, value and the matching output-projection columns.
    pub fn attn_bytes_per_head_layer(&self) -> u64 {
        let g = self.group_size();
        self.hidden_dim as u64 * self.head_dim as u64 * (2 * g + 2) * self.bytes_per_param
    }

    /// FFN parameter bytes of one layer across all experts.
    pub fn ffn_bytes_per_layer(&self) -> u64 {
        3 * self.hidden_dim as u64 * self.ffn_intermediate_dim as u64 * self.num_experts as u64 * self.bytes_per_param
    }

    pub fn total_weight_bytes(&self) -> u64 {
        let per_layer = self.attn_bytes_per_head_layer() * self.num_kv_heads as u64 + self.ffn_bytes_per_layer();
        per_layer * self.num_layers as u64
    }

    /// Key plus value bytes for one token in one KV head of one layer.
    pub fn kv_bytes_per_head_token(&self) -> u64 {
        2 * self.head_dim as u64 * self.bytes_per_kv_element
    }

    /// KV bytes for one token across all layers and heads.
    pub fn kv_bytes_per_token(&self) -> u64 {
        self.kv_bytes_per_head_token() * self.num_kv_heads as u64 * self.num_layers as u64
    }

    pub fn validate(&self) -> Result<()> {
        let dims = [
            ("num_layers", self.num_layers as u64),
            ("num_kv_heads", self.num_kv_heads as u64),
            ("num_q_heads", self.num_q_heads as u64),
            ("head_dim", self.head_dim as u64),
            ("hidden_dim", self.hidden_dim as u64),
            ("ffn_intermediate_dim", self.ffn_intermediate_dim as u64),
            ("bytes_per_param", self.bytes_per_param),
            ("bytes_per_kv_element", self.bytes_per_kv_element),
            ("num_experts", self.num_experts as u64),
            ("experts_per_token", self.experts_per_token as u64),
        ];
        for (field, v) in dims {
            if v == 0 {
                return Err(Error::validation(field, "must be at least 1"));
            }
        }
        if !self.num_q_heads.is_multiple_of(self.num_kv_heads) {
            return Err(Error::validation(
                "num_q_heads",
                format!("{} is not a multiple of num_kv_heads {}", self.num_q_heads, self.num_kv_heads),
            ));
        }
        if self.experts_per_token > self.num_experts {
            return Err(Error::validation("experts_per_token", "exceeds num_experts"));
        }
        Ok(())
    }
}

/// Per-node hardware description.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterSpec {
    pub num_gpus: u32,
    pub hbm_bytes_per_gpu: u64,
    /// Host-to-device bandwidth per GPU, bytes/s.
    pub pcie_bw_per_gpu: f64,
    /// Peer-to-peer bandwidth per GPU, bytes/s.
    pub nvlink_bw_per_gpu: f64,
    /// Fixed all-reduce latency, seconds.
    pub allreduce_alpha: f64,
    /// All-reduce cost per payload byte, seconds/byte.
    pub allreduce_beta: f64,
    pub host_memory_bytes: u64,
    /// Reconfiguration latency charged on every world-size change, seconds.
    #[serde(default = "default_switch_latency")]
    pub switch_latency: f64,
}

fn default_switch_latency() -> f64 {
    10.0
}

impl ClusterSpec {
    /// Eight 80 GB H100-class GPUs on PCIe 5.0 x16 and 4th-gen NVLink.
    pub fn h100x8() -> Self {
        ClusterSpec {
            num_gpus: 8,
            hbm_bytes_per_gpu: 80_000_000_000,
            pcie_bw_per_gpu: 50e9,
            nvlink_bw_per_gpu: 400e9,
            allreduce_alpha: 15e-6,
            allreduce_beta: 1.0 / 200e9,
            host_memory_bytes: 2_000_000_000_000,
            switch_latency: default_switch_latency(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_gpus == 0 {
            return Err(Error::validation("num_gpus", "must be at least 1"));
        }
        if self.hbm_bytes_per_gpu == 0 {
            return Err(Error::validation("hbm_bytes_per_gpu", "must be positive"));
        }
        let positive = [("pcie_bw_per_gpu", self.pcie_bw_per_gpu), ("nvlink_bw_per_gpu", self.nvlink_bw_per_gpu)];
        for (field, v) in positive {
            if !(v.is_finite() && v > 0.0) {
                return Err(Error::validation(field, "must be a positive number"));
            }
        }
        let non_negative = [
            ("allreduce_alpha", self.allreduce_alpha),
            ("allreduce_beta", self.allreduce_beta),
            ("switch_latency", self.switch_latency),
        ];
        for (field, v) in non_negative {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::validation(field, "must be a non-negative number"));
            }
        }
        if self.nvlink_bw_per_gpu <= self.pcie_bw_per_gpu {
            return Err(Error::validation("nvlink_bw_per_gpu", "must exceed pcie_bw_per_gpu"));
        }
        Ok(())
    }
}

/// Compute-throughput constants of one GPU, read from an optional `[hardware]`
/// section of the cluster file.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HardwareSpec {
    /// Sustained dense throughput, FLOP/s.
    pub gpu_flops: f64,
    /// Sustained HBM bandwidth, bytes/s.
    pub hbm_bandwidth: f64,
}

impl Default for HardwareSpec {
    fn default() -> Self {
        HardwareSpec { gpu_flops: 600e12, hbm_bandwidth: 2.6e12 }
    }
}

struct Section<'a> {
    name: &'static str,
    table: &'a Table,
}

impl<'a> Section<'a> {
    fn get(&self, key: &str) -> Option<&'a Value> {
        self.table.get(key)
    }

    fn field_name(&self, key: &str) -> String {
        format!("{}.{}", self.name, key)
    }

    fn require(&self, key: &str) -> Result<&'a Value> {
        self.get(key).ok_or_else(|| Error::parse(self.field_name(key), "missing"))
    }

    fn int(&self, key: &str) -> Result<i64> {
        self.require(key)?.as_integer().ok_or_else(|| Error::parse(self.field_name(key), "expected an integer"))
    }

    fn count(&self, key: &str) -> Result<u64> {
        let v = self.int(key)?;
        if v <= 0 {
            return Err(Error::validation(self.field_name(key), format!("must be positive, got {v}")));
        }
        Ok(v as u64)
    }

    fn count_or(&self, key: &str, default: u64) -> Result<u64> {
        match self.get(key) {
            None => Ok(default),
            Some(_) => self.count(key),
        }
    }

    fn float(&self, key: &str) -> Result<f64> {
        let v = self.require(key)?;
        let x = match v {
            Value::Float(f) => *f,
            Value::Integer(i) => *i as f64,
            _ => return Err(Error::parse(self.field_name(key), "expected a number")),
        };
        if !x.is_finite() || x < 0.0 {
            return Err(Error::validation(self.field_name(key), format!("must be a non-negative number, got {x}")));
        }
        Ok(x)
    }

    fn float_or(&self, key: &str, default: f64) -> Result<f64> {
        match self.get(key) {
            None => Ok(default),
            Some(_) => self.float(key),
        }
    }

    fn reject_unknown(&self, known: &[&str]) -> Result<()> {
        for key in self.table.keys() {
            if !known.contains(&key.as_str()) {
                return Err(Error::parse(self.field_name(key), "unknown key"));
            }
        }
        Ok(())
    }
}

const TOP_LEVEL: &[&str] = &["model", "cluster", "hardware"];

fn parse_document(text: &str) -> Result<Table> {
    let table: Table = text.parse().map_err(|e: toml::de::Error| Error::parse("document", e.message().to_string()))?;
    for key in table.keys() {
        if !TOP_LEVEL.contains(&key.as_str()) {
            return Err(Error::parse(key.clone(), "unknown section"));
        }
    }
    Ok(table)
}

fn section<'a>(doc: &'a Table, name: &'static str) -> Result<Option<Section<'a>>> {
    match doc.get(name) {
        None => Ok(None),
        Some(Value::Table(table)) => Ok(Some(Section { name, table })),
        Some(_) => Err(Error::parse(name, "expected a table")),
    }
}

fn to_u32(field: &str, v: u64) -> Result<u32> {
    u32::try_from(v).map_err(|_| Error::validation(field, "value out of range"))
}

/// Parse the `[model]` section of a config document.
pub fn parse_model_spec(text: &str) -> Result<ModelSpec> {
    let doc = parse_document(text)?;
    let s = section(&doc, "model")?.ok_or_else(|| Error::parse("model", "missing section"))?;
    s.reject_unknown(&[
        "num_layers",
        "num_kv_heads",
        "num_q_heads",
        "head_dim",
        "hidden_dim",
        "ffn_intermediate_dim",
        "bytes_per_param",
        "bytes_per_kv_element",
        "num_experts",
        "experts_per_token",
    ])?;
    let spec = ModelSpec {
        num_layers: to_u32("model.num_layers", s.count("num_layers")?)?,
        num_kv_heads: to_u32("model.num_kv_heads", s.count("num_kv_heads")?)?,
        num_q_heads: to_u32("model.num_q_heads", s.count("num_q_heads")?)?,
        head_dim: to_u32("model.head_dim", s.count("head_dim")?)?,
        hidden_dim: to_u32("model.hidden_dim", s.count("hidden_dim")?)?,
        ffn_intermediate_dim: to_u32("model.ffn_intermediate_dim", s.count("ffn_intermediate_dim")?)?,
        bytes_per_param: s.count("bytes_per_param")?,
        bytes_per_kv_element: s.count("bytes_per_kv_element")?,
        num_experts: to_u32("model.num_experts", s.count_or("num_experts", 1)?)?,
        experts_per_token: to_u32("model.experts_per_token", s.count_or("experts_per_token", 1)?)?,
    };
    spec.validate()?;
    Ok(spec)
}

/// Parse the `[cluster]` section of a config document.
pub fn parse_cluster_spec(text: &str) -> Result<ClusterSpec> {
    let doc = parse_document(text)?;
    let s = section(&doc, "cluster")?.ok_or_else(|| Error::parse("cluster", "missing section"))?;
    s.reject_unknown(&[
        "num_gpus",
        "hbm_bytes_per_gpu",
        "pcie_bw_per_gpu",
        "nvlink_bw_per_gpu",
        "allreduce_alpha",
        "allreduce_beta",
        "host_memory_bytes",
        "switch_latency",
    ])?;
    let spec = ClusterSpec {
        num_gpus: to_u32("cluster.num_gpus", s.count("num_gpus")?)?,
        hbm_bytes_per_gpu: s.count("hbm_bytes_per_gpu")?,
        pcie_bw_per_gpu: s.float("pcie_bw_per_gpu")?,
        nvlink_bw_per_gpu: s.float("nvlink_bw_per_gpu")?,
        allreduce_alpha: s.float("allreduce_alpha")?,
        allreduce_beta: s.float("allreduce_beta")?,
        host_memory_bytes: s.count("host_memory_bytes")?,
        switch_latency: s.float_or("switch_latency", default_switch_latency())?,
    };
    spec.validate()?;
    Ok(spec)
}

/// Parse the optional `[hardware]` section; defaults apply when absent.
pub fn parse_hardware_spec(text: &str) -> Result<HardwareSpec> {
    let doc = parse_document(text)?;
    let Some(s) = section(&doc, "hardware")? else {
        return Ok(HardwareSpec::default());
    };
    s.reject_unknown(&["gpu_flops", "hbm_bandwidth"])?;
    let d = HardwareSpec::default();
    let hw = HardwareSpec {
        gpu_flops: s.float_or("gpu_flops", d.gpu_flops)?,
        hbm_bandwidth: s.float_or("hbm_bandwidth", d.hbm_bandwidth)?,
    };
    if hw.gpu_flops <= 0.0 || hw.hbm_bandwidth <= 0.0 {
        return Err(Error::validation("hardware", "rates must be positive"));
    }
    Ok(hw)
}

#[derive(Serialize)]
struct ModelDoc<'a> {
    model: &'a ModelSpec,
}

#[derive(Serialize)]
struct ClusterDoc<'a> {
    cluster: &'a ClusterSpec,
}

/// Serialize a model spec as a `[model]` document accepted by [`parse_model_spec`].
pub fn model_to_toml(model: &ModelSpec) -> String {
    toml::to_string(&ModelDoc { model }).expect("model spec serializes")
}

/// Serialize a cluster spec as a `[cluster]` document.
pub fn cluster_to_toml(cluster: &ClusterSpec) -> String {
    toml::to_string(&ClusterDoc { cluster }).expect("cluster spec serializes")
}

/// Smallest GPU count whose per-GPU weight share plus `min_kv_bytes` fits
/// in HBM, or `None` when no count up to `cluster.num_gpus` works.
pub fn min_feasible_gpus(model: &ModelSpec, cluster: &ClusterSpec, min_kv_bytes: u64) -> Option<u32> {
    min_feasible_gpus_for_bytes(model.total_weight_bytes(), cluster, min_kv_bytes)
}

pub fn min_feasible_gpus_for_bytes(weight_bytes: u64, cluster: &ClusterSpec, min_kv_bytes: u64) -> Option<u32> {
    let room = cluster.hbm_bytes_per_gpu.checked_sub(min_kv_bytes)?;
    (1..=cluster.num_gpus).find(|&n| weight_bytes as u128 <= n as u128 * room as u128)
}
