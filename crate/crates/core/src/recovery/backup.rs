//! Background copy of KV to host memory.
//!
//! New KV enters a FIFO of pending segments. Each interval drains the FIFO,
//! oldest tokens first, at the configured share of aggregate PCIe bandwidth.
//! Host usage is counted in whole pages.

use std::collections::{BTreeMap, BTreeSet, VecDeque};

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BackupState {
    pub enabled: bool,
    pub page_tokens: u64,
    /// Tokens per request already on host.
    pub backed_up: BTreeMap<u64, u64>,
    /// Tokens per request produced but not yet on host.
    pub backup_lag_tokens: BTreeMap<u64, u64>,
    pub host_bytes_used: u64,
    /// Requests evicted from host memory, in eviction order.
    pub evicted: Vec<u64>,
    queue: VecDeque<(u64, u64)>,
    finished: VecDeque<u64>,
    finished_set: BTreeSet<u64>,
    credit_bytes: f64,
}

/// Inputs for one backup interval.
#[derive(Debug, Clone, Copy)]
pub struct BackupLink {
    /// Bytes of KV per token across all layers and heads.
    pub kv_bytes_per_token: u64,
    /// Aggregate host-link bytes per second available to backup.
    pub bandwidth: f64,
    pub host_capacity: u64,
}

impl BackupState {
    pub fn new(enabled: bool, page_tokens: u64) -> Self {
        BackupState {
            enabled,
            page_tokens: page_tokens.max(1),
            backed_up: BTreeMap::new(),
            backup_lag_tokens: BTreeMap::new(),
            host_bytes_used: 0,
            evicted: Vec::new(),
            queue: VecDeque::new(),
            finished: VecDeque::new(),
            finished_set: BTreeSet::new(),
            credit_bytes: 0.0,
        }
    }

    pub fn backed_tokens(&self, request: u64) -> u64 {
        self.backed_up.get(&request).copied().unwrap_or(0)
    }

    pub fn lag_tokens(&self, request: u64) -> u64 {
        self.backup_lag_tokens.get(&request).copied().unwrap_or(0)
    }

    pub fn total_lag(&self) -> u64 {
        self.backup_lag_tokens.values().sum()
    }

    /// Record tokens as already on host (for fixtures and scenarios).
    pub fn mark_backed(&mut self, request: u64, tokens: u64) {
        *self.backed_up.entry(request).or_insert(0) += tokens;
    }

    fn pages(&self, tokens: u64) -> u64 {
        tokens.div_ceil(self.page_tokens)
    }

    fn recount(&mut self, kv_bytes_per_token: u64) {
        self.host_bytes_used =
            self.backed_up.values().map(|t| self.pages(*t) * self.page_tokens * kv_bytes_per_token).sum();
    }

    /// The request completed; its backup becomes evictable.
    pub fn mark_finished(&mut self, request: u64) {
        if self.finished_set.insert(request) {
            self.finished.push_back(request);
        }
    }

    /// Forget a request entirely (its KV was discarded).
    pub fn drop_request(&mut self, request: u64) {
        self.backed_up.remove(&request);
        self.backup_lag_tokens.remove(&request);
        self.queue.retain(|(r, _)| *r != request);
        if self.finished_set.remove(&request) {
            self.finished.retain(|r| *r != request);
        }
    }

    /// Drain for `elapsed` seconds, then enqueue `new_tokens` produced during
    /// the interval.
    pub fn advance(&mut self, elapsed: f64, new_tokens: &[(u64, u64)], link: &BackupLink) {
        if !self.enabled {
            return;
        }
        self.credit_bytes += elapsed.max(0.0) * link.bandwidth;
        let per_token = link.kv_bytes_per_token.max(1) as f64;
        while let Some((req, tokens)) = self.queue.front_mut() {
            let can = (self.credit_bytes / per_token).floor() as u64;
            if can == 0 {
                break;
            }
            let take = can.min(*tokens);
            let req = *req;
            *tokens -= take;
            self.credit_bytes -= take as f64 * per_token;
            *self.backed_up.entry(req).or_insert(0) += take;
            let lag = self.backup_lag_tokens.get_mut(&req).expect("queued request has lag");
            *lag -= take;
            if *lag == 0 {
                self.backup_lag_tokens.remove(&req);
            }
            if *tokens == 0 {
                self.queue.pop_front();
            }
        }
        if self.queue.is_empty() {
            // Idle link time cannot be banked.
            self.credit_bytes = 0.0;
        }
        for (req, t) in new_tokens {
            if *t == 0 {
                continue;
            }
            *self.backup_lag_tokens.entry(*req).or_insert(0) += t;
            match self.queue.back_mut() {
                Some((r, q)) if r == req => *q += t,
                _ => self.queue.push_back((*req, *t)),
            }
        }
        self.recount(link.kv_bytes_per_token);
        while self.host_bytes_used > link.host_capacity {
            let Some(victim) = self.finished.pop_front() else { break };
            self.finished_set.remove(&victim);
            if self.backed_up.remove(&victim).is_some() {
                self.evicted.push(victim);
            }
            self.recount(link.kv_bytes_per_token);
        }
    }
}

/// Free functional form of [`BackupState::advance`].
pub fn advance_backup(
    mut backup: BackupState,
    elapsed: f64,
    new_tokens: &[(u64, u64)],
    link: &BackupLink,
) -> BackupState {
    backup.advance(elapsed, new_tokens, link);
    backup
}

#[cfg(test)]
mod tests {
    use super::*;

    fn link(bw: f64) -> BackupLink {
        BackupLink { kv_bytes_per_token: 10, bandwidth: bw, host_capacity: u64::MAX }
    }

    #[test]
    fn ample_bandwidth_clears_lag_next_interval() {
        let mut b = BackupState::new(true, 16);
        b.advance(0.03, &[(0, 5), (1, 5)], &link(1e9));
        assert_eq!(b.total_lag(), 10);
        b.advance(0.03, &[], &link(1e9));
        assert_eq!(b.total_lag(), 0);
        assert_eq!(b.backed_tokens(0), 5);
    }

    #[test]
    fn slow_link_lag_grows_then_drains() {
        // 100 bytes/s at 10 bytes/token = 10 tokens/s.
        let l = link(100.0);
        let mut b = BackupState::new(true, 16);
        let mut lags = Vec::new();
        for new in [40, 40, 0, 0, 0, 0, 0, 0, 0, 0] {
            b.advance(1.0, &[(0, new)], &l);
            lags.push(b.total_lag());
        }
        // Hand fluid model: +40, +40-10, then -10 per second.
        assert_eq!(lags, vec![40, 70, 60, 50, 40, 30, 20, 10, 0, 0]);
        assert_eq!(b.backed_tokens(0), 80);
    }

    #[test]
    fn oldest_tokens_drain_first() {
        let l = link(100.0);
        let mut b = BackupState::new(true, 16);
        b.advance(0.0, &[(0, 5), (1, 20)], &l);
        b.advance(1.0, &[], &l);
        assert_eq!((b.backed_tokens(0), b.backed_tokens(1)), (5, 5));
    }

    #[test]
    fn noop_and_disabled() {
        let mut b = BackupState::new(true, 16);
        let before = b.clone();
        b.advance(1.0, &[], &link(1.0));
        assert_eq!(b, before);
        let mut off = BackupState::new(false, 16);
        off.advance(1.0, &[(0, 100)], &link(1e9));
        assert_eq!(off.backed_tokens(0), 0);
    }

    #[test]
    fn host_pressure_evicts_oldest_finished() {
        let l = BackupLink { kv_bytes_per_token: 1, bandwidth: 1e9, host_capacity: 48 };
        let mut b = BackupState::new(true, 16);
        b.advance(0.0, &[(0, 16), (1, 16), (2, 16)], &l);
        b.advance(1.0, &[], &l);
        assert_eq!(b.host_bytes_used, 48);
        b.mark_finished(1);
        b.mark_finished(0);
        b.advance(1.0, &[(3, 16)], &l);
        b.advance(1.0, &[], &l);
        assert_eq!(b.evicted, vec![1]);
        assert!(b.host_bytes_used <= 48);
    }

    #[test]
    fn pages_round_up() {
        let l = BackupLink { kv_bytes_per_token: 2, bandwidth: 1e9, host_capacity: u64::MAX };
        let mut b = BackupState::new(true, 16);
        b.advance(0.0, &[(0, 17)], &l);
        b.advance(1.0, &[], &l);
        assert_eq!(b.host_bytes_used, 32 * 2);
    }
}
