use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::spec::GpuId;

/// One inference request and its progress through prefill and decode.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Request {
    pub id: u64,
    pub arrival_time: f64,
    pub input_len: u32,
    pub output_len: u32,
    /// Rank serving this request's replicated (DP) attention heads.
    pub dp_rank: Option<GpuId>,
    pub tokens_prefilled: u32,
    pub tokens_decoded: u32,
    pub ttft: Option<f64>,
    pub tbt_samples: Vec<f64>,
}

impl Request {
    pub fn new(id: u64, arrival_time: f64, input_len: u32, output_len: u32) -> Self {
        Request {
            id,
            arrival_time,
            input_len,
            output_len,
            dp_rank: None,
            tokens_prefilled: 0,
            tokens_decoded: 0,
            ttft: None,
            tbt_samples: Vec::new(),
        }
    }

    pub fn prefill_remaining(&self) -> u32 {
        self.input_len - self.tokens_prefilled
    }

    pub fn prefill_done(&self) -> bool {
        self.tokens_prefilled == self.input_len
    }

    pub fn finished(&self) -> bool {
        self.prefill_done() && self.tokens_decoded >= self.output_len
    }

    /// Tokens whose KV entries currently exist.
    pub fn kv_tokens(&self) -> u64 {
        self.tokens_prefilled as u64 + self.tokens_decoded as u64
    }

    /// Record `tokens` more prefilled tokens at time `now`. Returns true if
    /// this call completed the prefill, in which case `ttft` is set.
    pub fn advance_prefill(&mut self, tokens: u32, now: f64) -> bool {
        assert!(tokens <= self.prefill_remaining(), "request {} over-prefilled", self.id);
        if tokens == 0 {
            return false;
        }
        self.tokens_prefilled += tokens;
        if self.prefill_done() && self.ttft.is_none() {
            self.ttft = Some(now - self.arrival_time);
            return true;
        }
        false
    }

    /// Forget all progress, as after losing KV state that must be recomputed.
    /// A TTFT already reported to the client is kept.
    pub fn reset_progress(&mut self) {
        self.tokens_prefilled = 0;
        self.tokens_decoded = 0;
    }
}

/// Mutable per-GPU bookkeeping owned by a simulation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GpuState {
    pub gpu_id: GpuId,
    pub alive: bool,
    pub kv_bytes_used: u64,
    pub kv_bytes_capacity: u64,
    pub pending_dp_tokens: u64,
    pub resident_shards: BTreeSet<u32>,
    pub resident_heads: BTreeMap<u32, BTreeSet<u32>>,
}

impl GpuState {
    pub fn new(gpu_id: GpuId, kv_bytes_capacity: u64) -> Self {
        GpuState {
            gpu_id,
            alive: true,
            kv_bytes_used: 0,
            kv_bytes_capacity,
            pending_dp_tokens: 0,
            resident_shards: BTreeSet::new(),
            resident_heads: BTreeMap::new(),
        }
    }

    pub fn kv_headroom(&self) -> u64 {
        self.kv_bytes_capacity.saturating_sub(self.kv_bytes_used)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ttft_is_set_once_on_completion() {
        let mut r = Request::new(7, 1.0, 10, 3);
        assert!(!r.advance_prefill(4, 2.0));
        assert_eq!(r.ttft, None);
        assert!(r.advance_prefill(6, 3.5));
        assert_eq!(r.ttft, Some(2.5));
        r.reset_progress();
        r.advance_prefill(10, 9.0);
        assert_eq!(r.ttft, Some(2.5));
    }

    #[test]
    #[should_panic]
    fn prefill_cannot_overshoot() {
        let mut r = Request::new(0, 0.0, 2, 1);
        r.advance_prefill(3, 0.0);
    }
}
