//! A single PD-colocated serving instance as a discrete-event state machine.
//!
//! Requests wait in a FIFO queue until their (post-hit) prefill tokens have
//! been processed in chunks, then decode one token per step. Every step runs
//! one batch: all running decodes plus as many queued prefill tokens as the
//! chunk budget allows. Step time comes from an affine [`CostModel`].
//!
//! The cluster drives an instance through [`InstanceSim::start_step`] and
//! [`InstanceSim::complete_step`]; a step's effects become visible only when
//! it completes.

use std::collections::{HashSet, VecDeque};
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::hashing::{combine, splitmix64};
use crate::kvcache::{Capacity, PrefixCache};

/// Simulation time in microseconds.
pub type Micros = u64;

pub fn ms_to_us(ms: f64) -> Micros {
    (ms * 1000.0).round() as Micros
}

pub fn us_to_ms(us: Micros) -> f64 {
    us as f64 / 1000.0
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum EngineError {
    #[error("request {0} is already on instance")]
    DuplicateRequest(u64),
    #[error("invalid cost model: {0}")]
    InvalidCostModel(&'static str),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CostModel {
    pub prefill_base_ms: f64,
    pub prefill_per_token_ms: f64,
    pub decode_base_ms: f64,
    pub decode_per_seq_ms: f64,
    pub decode_per_ctx_token_ms: f64,
    pub chunk_tokens: u32,
    pub max_batch_requests: u32,
}

impl Default for CostModel {
    fn default() -> Self {
        Self {
            prefill_base_ms: 5.0,
            prefill_per_token_ms: 0.1,
            decode_base_ms: 20.0,
            decode_per_seq_ms: 1.0,
            decode_per_ctx_token_ms: 0.0,
            chunk_tokens: 2048,
            max_batch_requests: 256,
        }
    }
}

/// Time split of one engine step.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct StepCost {
    pub prefill_us: Micros,
    pub decode_us: Micros,
}

impl StepCost {
    pub fn total_us(&self) -> Micros {
        self.prefill_us + self.decode_us
    }
}

impl CostModel {
    pub fn validate(&self) -> Result<(), EngineError> {
        let times = [
            self.prefill_base_ms,
            self.prefill_per_token_ms,
            self.decode_base_ms,
            self.decode_per_seq_ms,
            self.decode_per_ctx_token_ms,
        ];
        if times.iter().any(|t| !(t.is_finite() && *t >= 0.0)) {
            return Err(EngineError::InvalidCostModel("times must be non-negative"));
        }
        if self.chunk_tokens == 0 {
            return Err(EngineError::InvalidCostModel("chunk_tokens must be >= 1"));
        }
        if self.max_batch_requests == 0 {
            return Err(EngineError::InvalidCostModel("max_batch_requests must be >= 1"));
        }
        Ok(())
    }

    /// Same batching limits, every time coefficient multiplied by `factor`.
    pub fn scaled(&self, factor: f64) -> CostModel {
        CostModel {
            prefill_base_ms: self.prefill_base_ms * factor,
            prefill_per_token_ms: self.prefill_per_token_ms * factor,
            decode_base_ms: self.decode_base_ms * factor,
            decode_per_seq_ms: self.decode_per_seq_ms * factor,
            decode_per_ctx_token_ms: self.decode_per_ctx_token_ms * factor,
            ..self.clone()
        }
    }

    /// Cost of a step; each phase is rounded to whole microseconds.
    pub fn step_cost(&self, prefill_tokens: u64, decode_count: usize, ctx_tokens: u64) -> StepCost {
        let prefill_ms = if prefill_tokens > 0 {
            self.prefill_base_ms + self.prefill_per_token_ms * prefill_tokens as f64
        } else {
            0.0
        };
        let decode_ms = if decode_count > 0 {
            self.decode_base_ms
                + self.decode_per_seq_ms * decode_count as f64
                + self.decode_per_ctx_token_ms * ctx_tokens as f64
        } else {
            0.0
        };
        StepCost {
            prefill_us: ms_to_us(prefill_ms),
            decode_us: ms_to_us(decode_ms),
        }
    }
}

/// Immutable request description as seen by an instance.
#[derive(Debug, Clone)]
pub struct EngineRequest {
    pub id: u64,
    pub arrival_us: Micros,
    pub input_tokens: u32,
    pub output_tokens: u32,
    /// Chain keys of the prompt blocks.
    pub chain: Arc<[u64]>,
}

#[derive(Debug, Clone)]
pub struct QueuedRequest {
    pub req: EngineRequest,
    pub hit_blocks: usize,
    pub hit_tokens: u32,
    pub remaining_prefill: u32,
}

#[derive(Debug, Clone)]
pub struct RunningRequest {
    pub req: EngineRequest,
    pub hit_blocks: usize,
    /// Output tokens produced so far (the first token counts).
    pub generated: u32,
}

impl RunningRequest {
    pub fn context_tokens(&self) -> u64 {
        self.req.input_tokens as u64 + self.generated as u64
    }

    pub fn remaining_output(&self) -> u32 {
        self.req.output_tokens - self.generated
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct BatchPlan {
    /// Running requests that decode one token this step.
    pub decode: Vec<u64>,
    /// `(request id, prefill tokens)` in queue order.
    pub prefill: Vec<(u64, u32)>,
}

impl BatchPlan {
    pub fn is_empty(&self) -> bool {
        self.decode.is_empty() && self.prefill.is_empty()
    }

    pub fn prefill_tokens(&self) -> u64 {
        self.prefill.iter().map(|&(_, n)| n as u64).sum()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum EngineEvent {
    FirstToken { request_id: u64, time: Micros },
    Token { request_id: u64, time: Micros },
    Finish { request_id: u64, time: Micros },
}

impl EngineEvent {
    pub fn request_id(&self) -> u64 {
        match *self {
            EngineEvent::FirstToken { request_id, .. }
            | EngineEvent::Token { request_id, .. }
            | EngineEvent::Finish { request_id, .. } => request_id,
        }
    }

    pub fn time(&self) -> Micros {
        match *self {
            EngineEvent::FirstToken { time, .. }
            | EngineEvent::Token { time, .. }
            | EngineEvent::Finish { time, .. } => time,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StepRecord {
    pub start: Micros,
    pub end: Micros,
    pub prefill_us: Micros,
    pub prefill_tokens: u64,
    pub decode_count: usize,
}

#[derive(Debug, Clone)]
pub struct StepOutcome {
    pub events: Vec<EngineEvent>,
    pub next_idle: Micros,
}

#[derive(Debug, Clone)]
pub struct InFlight {
    pub plan: BatchPlan,
    pub start: Micros,
    pub end: Micros,
}

#[derive(Debug, Clone)]
pub struct InstanceSim {
    id: usize,
    cost: CostModel,
    block_size: u32,
    queue: VecDeque<QueuedRequest>,
    running: Vec<RunningRequest>,
    present: HashSet<u64>,
    cache: PrefixCache,
    busy_until: Micros,
    in_flight: Option<InFlight>,
    steps: Vec<StepRecord>,
    /// `(time, bs)` at every change of the batch size.
    bs_log: Vec<(Micros, u32)>,
}

impl InstanceSim {
    pub fn new(id: usize, cost: CostModel, capacity: Capacity, block_size: u32) -> Self {
        Self {
            id,
            cost,
            block_size,
            queue: VecDeque::new(),
            running: Vec::new(),
            present: HashSet::new(),
            cache: PrefixCache::new(capacity),
            busy_until: 0,
            in_flight: None,
            steps: Vec::new(),
            bs_log: vec![(0, 0)],
        }
    }

    pub fn id(&self) -> usize {
        self.id
    }

    pub fn cost_model(&self) -> &CostModel {
        &self.cost
    }

    pub fn block_size(&self) -> u32 {
        self.block_size
    }

    pub fn cache(&self) -> &PrefixCache {
        &self.cache
    }

    pub fn cache_mut(&mut self) -> &mut PrefixCache {
        &mut self.cache
    }

    pub fn queued(&self) -> impl Iterator<Item = &QueuedRequest> {
        self.queue.iter()
    }

    pub fn running(&self) -> &[RunningRequest] {
        &self.running
    }

    pub fn busy_until(&self) -> Micros {
        self.busy_until
    }

    pub fn in_flight(&self) -> Option<&InFlight> {
        self.in_flight.as_ref()
    }

    pub fn steps(&self) -> &[StepRecord] {
        &self.steps
    }

    pub fn bs_log(&self) -> &[(Micros, u32)] {
        &self.bs_log
    }

    pub fn has_work(&self) -> bool {
        !self.queue.is_empty() || !self.running.is_empty()
    }

    pub fn batch_size(&self) -> u32 {
        (self.queue.len() + self.running.len()) as u32
    }

    /// Prompt tokens a request would reuse from this instance's cache.
    pub fn hit_tokens_for(&self, hit_blocks: usize, input_tokens: u32) -> u32 {
        (hit_blocks as u64 * self.block_size as u64).min(input_tokens as u64) as u32
    }

    fn log_bs(&mut self, now: Micros) {
        let bs = self.batch_size();
        match self.bs_log.last_mut() {
            Some(last) if last.0 == now => last.1 = bs,
            Some(last) if last.1 == bs => {}
            _ => self.bs_log.push((now, bs)),
        }
    }

    /// Admits a request. Its cache hit is fixed now and the hit blocks stay
    /// pinned until it finishes. A full hit still leaves one token to
    /// prefill.
    pub fn enqueue(&mut self, req: EngineRequest, now: Micros) -> Result<(), EngineError> {
        if !self.present.insert(req.id) {
            return Err(EngineError::DuplicateRequest(req.id));
        }
        let hit_blocks = self.cache.match_chain(&req.chain);
        self.cache.touch_chain(&req.chain[..hit_blocks], now);
        self.cache.pin_chain(&req.chain, hit_blocks);
        let hit_tokens = self.hit_tokens_for(hit_blocks, req.input_tokens);
        let remaining_prefill = (req.input_tokens - hit_tokens).max(1);
        self.queue.push_back(QueuedRequest {
            req,
            hit_blocks,
            hit_tokens,
            remaining_prefill,
        });
        self.log_bs(now);
        Ok(())
    }

    /// Plans the next step: all running requests decode (up to the batch
    /// limit), and the remaining token budget goes to queued prefills in
    /// FIFO order.
    pub fn form_batch(&self, _now: Micros) -> BatchPlan {
        let max = self.cost.max_batch_requests as usize;
        let decode: Vec<u64> = self.running.iter().take(max).map(|r| r.req.id).collect();
        let mut budget = (self.cost.chunk_tokens as usize).saturating_sub(decode.len()) as u32;
        let mut prefill = Vec::new();
        for q in &self.queue {
            if budget == 0 || decode.len() + prefill.len() >= max {
                break;
            }
            let take = q.remaining_prefill.min(budget);
            prefill.push((q.req.id, take));
            budget -= take;
        }
        BatchPlan { decode, prefill }
    }

    pub fn plan_cost(&self, plan: &BatchPlan) -> StepCost {
        // The decode set is always a prefix of `running`.
        let ctx: u64 = self
            .running
            .iter()
            .take(plan.decode.len())
            .map(RunningRequest::context_tokens)
            .sum();
        self.cost
            .step_cost(plan.prefill_tokens(), plan.decode.len(), ctx)
    }

    /// Runs `plan` as a step starting at `now` and applies its effects.
    /// Events are stamped with the step end.
    pub fn execute_batch(&mut self, plan: &BatchPlan, now: Micros) -> StepOutcome {
        if plan.is_empty() {
            return StepOutcome {
                events: Vec::new(),
                next_idle: now,
            };
        }
        let cost = self.plan_cost(plan);
        let end = now + cost.total_us();
        let mut events = Vec::new();
        let mut finished: Vec<RunningRequest> = Vec::new();

        // Decodes first: requests joining from prefill this step must not
        // also decode in it.
        let mut decode_idx = 0;
        let mut kept = Vec::with_capacity(self.running.len());
        for mut r in std::mem::take(&mut self.running) {
            if decode_idx < plan.decode.len() && plan.decode[decode_idx] == r.req.id {
                decode_idx += 1;
                r.generated += 1;
                events.push(EngineEvent::Token {
                    request_id: r.req.id,
                    time: end,
                });
                if r.remaining_output() == 0 {
                    finished.push(r);
                    continue;
                }
            }
            kept.push(r);
        }
        debug_assert_eq!(decode_idx, plan.decode.len(), "decode set out of order");
        self.running = kept;

        for &(id, tokens) in &plan.prefill {
            let q = self
                .queue
                .iter_mut()
                .find(|q| q.req.id == id)
                .expect("planned request left the queue");
            q.remaining_prefill -= tokens;
            if q.remaining_prefill == 0 {
                let q = self.queue.pop_front().expect("queue emptied");
                debug_assert_eq!(q.req.id, id, "prefill completion out of FIFO order");
                events.push(EngineEvent::FirstToken {
                    request_id: id,
                    time: end,
                });
                let r = RunningRequest {
                    req: q.req,
                    hit_blocks: q.hit_blocks,
                    generated: 1,
                };
                if r.remaining_output() == 0 {
                    finished.push(r);
                } else {
                    self.running.push(r);
                }
            }
        }

        for r in finished {
            events.push(EngineEvent::Finish {
                request_id: r.req.id,
                time: end,
            });
            self.retire(&r, end);
        }

        self.steps.push(StepRecord {
            start: now,
            end,
            prefill_us: cost.prefill_us,
            prefill_tokens: plan.prefill_tokens(),
            decode_count: plan.decode.len(),
        });
        self.busy_until = end;
        self.log_bs(end);
        StepOutcome {
            events,
            next_idle: end,
        }
    }

    fn retire(&mut self, r: &RunningRequest, now: Micros) {
        self.present.remove(&r.req.id);
        self.cache.unpin_chain(&r.req.chain, r.hit_blocks);
        let total_blocks =
            (r.req.input_tokens + r.req.output_tokens).div_ceil(self.block_size) as usize;
        let mut chain = r.req.chain.to_vec();
        let mut key = chain.last().copied().unwrap_or(0);
        let salt = splitmix64(r.req.id);
        for j in chain.len()..total_blocks {
            key = combine(key, combine(salt, j as u64));
            chain.push(key);
        }
        // Pinned blocks never exceed capacity here: the request just
        // released its own pins and new blocks are evictable.
        let _ = self.cache.insert_chain(&chain, now);
    }

    /// Starts a step at `now` if the instance is idle and has work.
    /// Returns the step end time.
    pub fn start_step(&mut self, now: Micros) -> Option<Micros> {
        if self.in_flight.is_some() || now < self.busy_until {
            return None;
        }
        let plan = self.form_batch(now);
        if plan.is_empty() {
            return None;
        }
        let end = now + self.plan_cost(&plan).total_us();
        self.busy_until = end;
        self.in_flight = Some(InFlight {
            plan,
            start: now,
            end,
        });
        Some(end)
    }

    /// Applies the in-flight step if it ends at or before `now`.
    pub fn complete_step(&mut self, now: Micros) -> Vec<EngineEvent> {
        match &self.in_flight {
            Some(f) if f.end <= now => {
                let f = self.in_flight.take().expect("checked above");
                let out = self.execute_batch(&f.plan, f.start);
                debug_assert_eq!(out.next_idle, f.end);
                out.events
            }
            _ => Vec::new(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::hashing::chain_keys;

    fn req(id: u64, blocks: &[u64], input: u32, output: u32) -> EngineRequest {
        EngineRequest {
            id,
            arrival_us: 0,
            input_tokens: input,
            output_tokens: output,
            chain: chain_keys(blocks).into(),
        }
    }

    fn fresh_blocks(id: u64, input: u32) -> Vec<u64> {
        (0..input.div_ceil(16) as u64).map(|b| id * 1_000_000 + b).collect()
    }

    fn inst() -> InstanceSim {
        InstanceSim::new(0, CostModel::default(), Capacity::Infinite, 16)
    }

    #[test]
    fn enqueue_on_idle_instance() {
        let mut i = inst();
        i.enqueue(req(1, &fresh_blocks(1, 500), 500, 4), 0).unwrap();
        assert_eq!(i.batch_size(), 1);
        assert_eq!(i.queued().next().unwrap().remaining_prefill, 500);
        assert_eq!(
            i.enqueue(req(1, &fresh_blocks(1, 500), 500, 4), 0),
            Err(EngineError::DuplicateRequest(1))
        );
    }

    #[test]
    fn full_hit_leaves_one_token() {
        let mut i = inst();
        i.cache_mut().insert(&[1, 2], 0).unwrap();
        i.enqueue(req(1, &[1, 2], 32, 4), 0).unwrap();
        let q = i.queued().next().unwrap();
        assert_eq!(q.hit_tokens, 32);
        assert_eq!(q.remaining_prefill, 1);
        let plan = i.form_batch(0);
        assert_eq!(plan.prefill, vec![(1, 1)]);
        let out = i.execute_batch(&plan, 0);
        // 5 ms + 0.1 ms
        assert_eq!(out.next_idle, 5_100);
        assert!(matches!(out.events[0], EngineEvent::FirstToken { request_id: 1, time: 5_100 }));
    }

    #[test]
    fn fifo_order_in_batch() {
        let mut i = inst();
        i.enqueue(req(7, &fresh_blocks(7, 100), 100, 2), 0).unwrap();
        i.enqueue(req(3, &fresh_blocks(3, 100), 100, 2), 0).unwrap();
        assert_eq!(i.form_batch(0).prefill, vec![(7, 100), (3, 100)]);
    }

    #[test]
    fn chunked_prefill_spans_steps() {
        let mut i = inst();
        i.enqueue(req(1, &fresh_blocks(1, 3000), 3000, 2), 0).unwrap();
        let p1 = i.form_batch(0);
        assert_eq!(p1.prefill, vec![(1, 2048)]);
        let o1 = i.execute_batch(&p1, 0);
        assert!(o1.events.is_empty());
        let p2 = i.form_batch(o1.next_idle);
        assert_eq!(p2.prefill, vec![(1, 952)]);
    }

    #[test]
    fn decodes_reduce_prefill_budget() {
        let mut i = inst();
        for id in 0..10 {
            i.enqueue(req(id, &fresh_blocks(id, 16), 16, 100), 0).unwrap();
        }
        let p = i.form_batch(0);
        i.execute_batch(&p, 0);
        assert_eq!(i.running().len(), 10);
        i.enqueue(req(99, &fresh_blocks(99, 5000), 5000, 2), 0).unwrap();
        let p = i.form_batch(0);
        assert_eq!(p.decode.len(), 10);
        assert_eq!(p.prefill, vec![(99, 2038)]);
    }

    #[test]
    fn empty_instance_plans_nothing() {
        let mut i = inst();
        let p = i.form_batch(0);
        assert!(p.is_empty());
        let out = i.execute_batch(&p, 42);
        assert!(out.events.is_empty());
        assert_eq!(out.next_idle, 42);
        assert_eq!(i.start_step(0), None);
    }

    #[test]
    fn prefill_step_time() {
        let mut i = inst();
        i.enqueue(req(1, &fresh_blocks(1, 1000), 1000, 3), 0).unwrap();
        let p = i.form_batch(0);
        let out = i.execute_batch(&p, 0);
        assert_eq!(out.next_idle, 105_000);
        assert_eq!(
            out.events,
            vec![EngineEvent::FirstToken { request_id: 1, time: 105_000 }]
        );
    }

    #[test]
    fn pure_decode_step_time() {
        let mut i = inst();
        for id in 0..8 {
            i.enqueue(req(id, &fresh_blocks(id, 16), 16, 10), 0).unwrap();
        }
        let p = i.form_batch(0);
        let t = i.execute_batch(&p, 0).next_idle;
        let p = i.form_batch(t);
        assert!(p.prefill.is_empty());
        let out = i.execute_batch(&p, t);
        assert_eq!(out.next_idle - t, 28_000);
        assert_eq!(out.events.len(), 8);
        assert!(out.events.iter().all(|e| matches!(e, EngineEvent::Token { .. })));
    }

    #[test]
    fn token_conservation_and_cache_fill() {
        let mut i = inst();
        let blocks = fresh_blocks(5, 40);
        i.enqueue(req(5, &blocks, 40, 6), 0).unwrap();
        let mut now = 0;
        let mut tokens = 0;
        let mut finished = false;
        while let Some(end) = i.start_step(now) {
            now = end;
            for e in i.complete_step(now) {
                match e {
                    EngineEvent::FirstToken { .. } | EngineEvent::Token { .. } => tokens += 1,
                    EngineEvent::Finish { .. } => finished = true,
                }
            }
        }
        assert_eq!(tokens, 6);
        assert!(finished);
        assert_eq!(i.batch_size(), 0);
        // 46 tokens still fit the 3 prompt blocks.
        assert_eq!(i.cache().match_prefix(&blocks), 3);
        assert_eq!(i.cache().occupancy(), 3);
        assert_eq!(i.cache().pinned_blocks(), 0);
    }

    #[test]
    fn single_token_output_finishes_at_first_token() {
        let mut i = inst();
        i.enqueue(req(1, &fresh_blocks(1, 10), 10, 1), 0).unwrap();
        let p = i.form_batch(0);
        let out = i.execute_batch(&p, 0);
        assert_eq!(out.events.len(), 2);
        assert!(matches!(out.events[1], EngineEvent::Finish { .. }));
        assert!(!i.has_work());
    }

    #[test]
    fn batch_limit_caps_admission() {
        let cost = CostModel {
            max_batch_requests: 2,
            ..CostModel::default()
        };
        let mut i = InstanceSim::new(0, cost, Capacity::Infinite, 16);
        for id in 0..3 {
            i.enqueue(req(id, &fresh_blocks(id, 16), 16, 5), 0).unwrap();
        }
        let p = i.form_batch(0);
        assert_eq!(p.prefill.len(), 2);
        i.execute_batch(&p, 0);
        let p = i.form_batch(0);
        assert_eq!(p.decode.len(), 2);
        assert!(p.prefill.is_empty());
    }

    #[test]
    fn scaled_model_multiplies_times() {
        let m = CostModel::default().scaled(4.0);
        assert_eq!(m.step_cost(1000, 0, 0).total_us(), 420_000);
        assert_eq!(m.chunk_tokens, 2048);
    }
}
