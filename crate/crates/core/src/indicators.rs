//! Indicator factory: per-instance load indicators and the request-
//! conditioned KV$ indicators that every policy scores with.

use std::collections::VecDeque;

use crate::engine::{EngineRequest, InstanceSim, Micros};

/// Point-in-time load indicators of one instance.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct IndicatorSnapshot {
    /// Requests in decode.
    pub r_bs: u32,
    /// Requests still waiting for (part of) their prefill.
    pub q_bs: u32,
    pub bs: u32,
    pub pending_prefill_tokens: u64,
    /// Prompt plus generated tokens over unfinished requests.
    pub total_tokens: u64,
    /// Context tokens of decode-phase requests.
    pub dc_tokens: u64,
    pub as_of: Micros,
}

pub fn snapshot(instance: &InstanceSim, now: Micros) -> IndicatorSnapshot {
    let mut s = IndicatorSnapshot {
        as_of: now,
        ..Default::default()
    };
    for q in instance.queued() {
        s.q_bs += 1;
        s.pending_prefill_tokens += q.remaining_prefill as u64;
        s.total_tokens += q.req.input_tokens as u64;
    }
    for r in instance.running() {
        s.r_bs += 1;
        s.total_tokens += r.context_tokens();
        s.dc_tokens += r.context_tokens();
    }
    s.bs = s.r_bs + s.q_bs;
    s
}

/// Snapshots recorded after each state change, for reading indicators
/// with a delay.
#[derive(Debug, Clone, Default)]
pub struct SnapshotHistory {
    entries: VecDeque<IndicatorSnapshot>,
}

impl SnapshotHistory {
    pub fn record(&mut self, snap: IndicatorSnapshot) {
        match self.entries.back_mut() {
            Some(last) if last.as_of == snap.as_of => *last = snap,
            _ => self.entries.push_back(snap),
        }
    }

    /// Latest snapshot taken at or before `t`; the empty snapshot if none.
    pub fn at(&self, t: Micros) -> IndicatorSnapshot {
        let idx = self.entries.partition_point(|s| s.as_of <= t);
        match idx {
            0 => IndicatorSnapshot {
                as_of: t,
                ..Default::default()
            },
            i => self.entries[i - 1],
        }
    }

    /// Drops entries no longer needed to answer queries at or after `t`.
    pub fn prune_before(&mut self, t: Micros) {
        while self.entries.len() > 1 && self.entries[1].as_of <= t {
            self.entries.pop_front();
        }
    }
}

/// KV$ indicators of one request against one instance. Read-only on the
/// cache.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RequestIndicators {
    pub hit_blocks: usize,
    pub hit_tokens: u32,
    pub hit_ratio: f64,
    /// Tokens this request would prefill here (at least 1).
    pub new_prefill_tokens: u64,
}

pub fn request_indicators(instance: &InstanceSim, req: &EngineRequest) -> RequestIndicators {
    let hit_blocks = instance.cache().match_chain(&req.chain);
    let hit_tokens = instance.hit_tokens_for(hit_blocks, req.input_tokens);
    RequestIndicators {
        hit_blocks,
        hit_tokens,
        hit_ratio: hit_tokens as f64 / req.input_tokens as f64,
        new_prefill_tokens: (req.input_tokens - hit_tokens).max(1) as u64,
    }
}

pub fn kv_hit_ratio(instance: &InstanceSim, req: &EngineRequest) -> f64 {
    request_indicators(instance, req).hit_ratio
}

/// Pending prefill backlog plus this request's new prefill tokens.
pub fn p_tokens(snap: &IndicatorSnapshot, ind: &RequestIndicators) -> u64 {
    snap.pending_prefill_tokens + ind.new_prefill_tokens
}
