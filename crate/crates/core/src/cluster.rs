//! Global scheduler and discrete-event loop.
//!
//! Arrivals come straight from the (time-ordered) trace; instance step
//! completions sit in a min-heap ordered by `(time, instance, sequence)`.
//! At equal times arrivals go first, so a request can join a batch formed
//! at that instant.

use std::cmp::Reverse;
use std::collections::{BinaryHeap, HashSet};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::detector::{class_key, ClassObservation, Detector, DetectorConfig};
use crate::engine::{CostModel, EngineError, EngineEvent, EngineRequest, InstanceSim, Micros};
use crate::hashing::{chain_keys, combine};
use crate::indicators::{request_indicators, snapshot, SnapshotHistory};
use crate::kvcache::Capacity;
use crate::metrics::{RequestRecord, RunReport};
use crate::policies::{
    Candidate, DetectorVerdict, Policy, PolicyConfig, PolicyError, PolicySpec, QueueDetail,
    RoutingDecision,
};
use crate::trace::{self, TraceError, TraceRecord, DEFAULT_BLOCK_SIZE};

#[derive(Debug, Error)]
pub enum ClusterError {
    #[error(transparent)]
    Trace(#[from] TraceError),
    #[error(transparent)]
    Engine(#[from] EngineError),
    #[error(transparent)]
    Policy(#[from] PolicyError),
    #[error("invalid config: {0}")]
    Config(String),
    #[error("duplicate request id {0} in trace")]
    DuplicateRequest(u64),
    #[error("invariant violated: {0}")]
    Invariant(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CacheConfig {
    pub capacity: Capacity,
    pub block_size: u32,
}

impl Default for CacheConfig {
    fn default() -> Self {
        Self {
            capacity: Capacity::default(),
            block_size: DEFAULT_BLOCK_SIZE,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ClusterConfig {
    pub n_instances: usize,
    pub cost_model: CostModel,
    pub cache: CacheConfig,
    pub policy: PolicyConfig,
    pub detector: DetectorConfig,
    /// Age of the load indicators the router sees.
    pub staleness_ms: f64,
    pub seed: u64,
}

impl Default for ClusterConfig {
    fn default() -> Self {
        Self {
            n_instances: 16,
            cost_model: CostModel::default(),
            cache: CacheConfig::default(),
            policy: PolicyConfig::default(),
            detector: DetectorConfig::default(),
            staleness_ms: 0.0,
            seed: 0,
        }
    }
}

impl ClusterConfig {
    pub fn validate(&self) -> Result<(), ClusterError> {
        if self.n_instances < 1 {
            return Err(ClusterError::Config("n_instances must be >= 1".into()));
        }
        if self.cache.block_size < 1 {
            return Err(ClusterError::Config("block_size must be >= 1".into()));
        }
        if !(self.staleness_ms.is_finite() && self.staleness_ms >= 0.0) {
            return Err(ClusterError::Config("staleness_ms must be non-negative".into()));
        }
        self.cost_model.validate()?;
        self.policy.spec.validate()?;
        self.detector.validate().map_err(ClusterError::Config)?;
        Ok(())
    }

    pub fn with_policy(&self, spec: PolicySpec) -> Self {
        let mut c = self.clone();
        c.policy.spec = spec;
        c
    }
}

pub fn to_engine_request(r: &TraceRecord) -> EngineRequest {
    EngineRequest {
        id: r.request_id,
        arrival_us: (r.arrival_s * 1e6).round() as Micros,
        input_tokens: r.input_tokens,
        output_tokens: r.output_tokens,
        chain: chain_keys(&r.prefix_blocks).into(),
    }
}

/// Hash of the arrival stream as the simulator replays it.
pub fn arrivals_hash(trace: &[TraceRecord]) -> u64 {
    trace.iter().fold(0, |h, r| {
        let e = to_engine_request(r);
        let h = combine(h, e.id);
        let h = combine(h, e.arrival_us);
        let h = combine(h, ((e.input_tokens as u64) << 32) | e.output_tokens as u64);
        e.chain.iter().fold(h, |h, &k| combine(h, k))
    })
}

pub struct Cluster {
    cfg: ClusterConfig,
    instances: Vec<InstanceSim>,
    histories: Vec<SnapshotHistory>,
    staleness_us: Micros,
    policy: Policy,
    detector: Option<Detector>,
    wakes: BinaryHeap<Reverse<(Micros, usize, u64)>>,
    seq: u64,
    records: Vec<RequestRecord>,
    /// Request id to position in `records`.
    slots: std::collections::HashMap<u64, usize>,
    routed: u64,
    finished: u64,
    now: Micros,
}

impl Cluster {
    pub fn new(cfg: ClusterConfig) -> Result<Self, ClusterError> {
        cfg.validate()?;
        let instances: Vec<InstanceSim> = (0..cfg.n_instances)
            .map(|i| {
                InstanceSim::new(
                    i,
                    cfg.cost_model.clone(),
                    cfg.cache.capacity,
                    cfg.cache.block_size,
                )
            })
            .collect();
        let mut policy_cfg = cfg.policy.clone();
        policy_cfg.tie_break_seed = policy_cfg.tie_break_seed.wrapping_add(cfg.seed);
        let policy = Policy::new(&policy_cfg, &cfg.cost_model);
        let detector = cfg
            .detector
            .enabled
            .then(|| Detector::new(cfg.detector.clone(), cfg.n_instances));
        let mut histories = vec![SnapshotHistory::default(); cfg.n_instances];
        for (h, inst) in histories.iter_mut().zip(&instances) {
            h.record(snapshot(inst, 0));
        }
        Ok(Self {
            staleness_us: (cfg.staleness_ms * 1000.0).round() as Micros,
            cfg,
            instances,
            histories,
            policy,
            detector,
            wakes: BinaryHeap::new(),
            seq: 0,
            records: Vec::new(),
            slots: Default::default(),
            routed: 0,
            finished: 0,
            now: 0,
        })
    }

    pub fn config(&self) -> &ClusterConfig {
        &self.cfg
    }

    pub fn instances(&self) -> &[InstanceSim] {
        &self.instances
    }

    /// Direct access for setting up scenarios, e.g. pre-warming caches.
    pub fn instances_mut(&mut self) -> &mut [InstanceSim] {
        &mut self.instances
    }

    pub fn detector(&self) -> Option<&Detector> {
        self.detector.as_ref()
    }

    pub fn now(&self) -> Micros {
        self.now
    }

    fn candidates(&self, req: &EngineRequest, now: Micros) -> Vec<Candidate> {
        let detail = self.policy.needs_queue_detail();
        self.instances
            .iter()
            .enumerate()
            .map(|(i, inst)| Candidate {
                instance: i,
                snapshot: if self.staleness_us == 0 {
                    snapshot(inst, now)
                } else {
                    self.histories[i].at(now.saturating_sub(self.staleness_us))
                },
                kv: request_indicators(inst, req),
                detail: detail.then(|| QueueDetail::capture(inst, now)),
            })
            .collect()
    }

    fn push_wake(&mut self, t: Micros, instance: usize) {
        self.wakes.push(Reverse((t, instance, self.seq)));
        self.seq += 1;
    }

    fn record_state(&mut self, i: usize, now: Micros) {
        if self.staleness_us > 0 {
            self.histories[i].record(snapshot(&self.instances[i], now));
            self.histories[i].prune_before(now.saturating_sub(self.staleness_us));
        }
    }

    /// Routes one request at `now` and admits it to the chosen instance.
    pub fn route(&mut self, rec: &TraceRecord, now: Micros) -> Result<RoutingDecision, ClusterError> {
        if self.slots.contains_key(&rec.request_id) {
            return Err(ClusterError::DuplicateRequest(rec.request_id));
        }
        self.now = self.now.max(now);
        let req = to_engine_request(rec);
        let cands = self.candidates(&req, now);

        let k = self.cfg.detector.class_key_blocks;
        let class = class_key(&rec.prefix_blocks, k);
        let mut m = Vec::new();
        let verdict = match self.detector.as_mut() {
            Some(d) => {
                let need = d.class_blocks(rec.prefix_blocks.len());
                m = cands
                    .iter()
                    .filter(|c| c.kv.hit_blocks >= need)
                    .map(|c| c.instance)
                    .collect();
                let hit_tokens = cands.iter().map(|c| c.kv.hit_tokens).max().unwrap_or(0);
                d.observe_arrival(
                    now,
                    &ClassObservation {
                        class_key: class,
                        hit_tokens: hit_tokens as u64,
                        m: m.clone(),
                    },
                );
                d.verdict(class, &m)
            }
            None => DetectorVerdict::None,
        };

        let decision = self
            .policy
            .choose(&cands, req.input_tokens, req.output_tokens, &verdict, now)?;
        let chosen = decision.chosen;
        let hit_tokens = cands[chosen].kv.hit_tokens;
        self.instances[chosen].enqueue(req, now)?;
        self.record_state(chosen, now);
        if let Some(d) = self.detector.as_mut() {
            d.observe_decision(class, &decision, &cands, &m);
        }

        self.slots.insert(rec.request_id, self.records.len());
        self.records.push(RequestRecord {
            request_id: rec.request_id,
            arrival_us: now,
            first_token_us: None,
            finish_us: None,
            input_tokens: rec.input_tokens,
            output_tokens: rec.output_tokens,
            hit_tokens,
            instance: chosen,
            class_key: class,
            rerouted: !decision.filtered.is_empty() || decision.forced_least_bs,
        });
        self.routed += 1;
        if self.instances[chosen].in_flight().is_none() {
            self.push_wake(now, chosen);
        }
        Ok(decision)
    }

    fn wake(&mut self, t: Micros, i: usize) {
        self.now = self.now.max(t);
        let events = self.instances[i].complete_step(t);
        let changed = !events.is_empty();
        for e in events {
            let slot = self.slots[&e.request_id()];
            match e {
                EngineEvent::FirstToken { time, .. } => self.records[slot].first_token_us = Some(time),
                EngineEvent::Finish { time, .. } => {
                    self.records[slot].finish_us = Some(time);
                    self.finished += 1;
                }
                EngineEvent::Token { .. } => {}
            }
        }
        if changed {
            self.record_state(i, t);
        }
        if let Some(end) = self.instances[i].start_step(t) {
            self.push_wake(end, i);
        }
    }

    /// Processes every engine event due at or before `t`.
    pub fn advance_to(&mut self, t: Micros) {
        while let Some(&Reverse((tw, i, _))) = self.wakes.peek() {
            if tw > t {
                break;
            }
            self.wakes.pop();
            self.wake(tw, i);
        }
        self.now = self.now.max(t);
    }

    /// Replays `trace` and runs every request to completion.
    pub fn run_trace(mut self, trace: &[TraceRecord]) -> Result<RunReport, ClusterError> {
        for w in trace.windows(2) {
            if w[1].arrival_s < w[0].arrival_s {
                return Err(TraceError::NonMonotoneArrival {
                    line: self.records.len() + 1,
                }
                .into());
            }
        }
        trace::validate_blocks(trace, self.cfg.cache.block_size)?;
        let mut ids = HashSet::with_capacity(trace.len());
        for r in trace {
            if !ids.insert(r.request_id) {
                return Err(ClusterError::DuplicateRequest(r.request_id));
            }
        }

        let mut queued_at_last = 0;
        for (n, rec) in trace.iter().enumerate() {
            let t = to_engine_request(rec).arrival_us;
            // Step completions strictly before the arrival go first.
            if t > 0 {
                self.advance_to(t - 1);
            }
            self.route(rec, t)?;
            if n + 1 == trace.len() {
                if let Some(d) = self.detector.as_mut() {
                    d.finish(t);
                }
                queued_at_last = self
                    .instances
                    .iter()
                    .map(|i| snapshot(i, t).q_bs as u64)
                    .sum();
            }
        }
        self.advance_to(Micros::MAX);
        let mut report = self.into_report();
        report.arrivals_hash = arrivals_hash(trace);
        report.queued_at_last_arrival = queued_at_last;
        if report.routed != report.finished {
            return Err(ClusterError::Invariant(format!(
                "{} requests routed but {} finished",
                report.routed, report.finished
            )));
        }
        Ok(report)
    }

    pub fn into_report(self) -> RunReport {
        let end_us = self
            .instances
            .iter()
            .map(|i| i.busy_until())
            .chain(self.records.iter().map(|r| r.arrival_us))
            .max()
            .unwrap_or(0);
        let (detector_rows, alarms) = match &self.detector {
            Some(d) => (d.rows().to_vec(), d.alarms().to_vec()),
            None => (Vec::new(), Vec::new()),
        };
        RunReport {
            policy: self.cfg.policy.spec.label(),
            seed: self.cfg.seed,
            n_instances: self.cfg.n_instances,
            requests: self.records,
            steps: self.instances.iter().map(|i| i.steps().to_vec()).collect(),
            bs_logs: self.instances.iter().map(|i| i.bs_log().to_vec()).collect(),
            detector_rows,
            alarms,
            arrivals_hash: 0,
            routed: self.routed,
            finished: self.finished,
            end_us,
            queued_at_last_arrival: 0,
        }
    }
}

pub fn run(trace: &[TraceRecord], cfg: &ClusterConfig) -> Result<RunReport, ClusterError> {
    Cluster::new(cfg.clone())?.run_trace(trace)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ProbeOptions {
    pub lo_rps: f64,
    pub hi_rps: f64,
    pub iterations: u32,
}

impl Default for ProbeOptions {
    fn default() -> Self {
        Self {
            lo_rps: 0.01,
            hi_rps: 10_000.0,
            iterations: 24,
        }
    }
}

/// Whether the cluster keeps up with `trace`: fewer than two queued
/// requests per instance remain right after the last arrival.
pub fn is_stable(report: &RunReport) -> bool {
    report.queued_at_last_arrival < 2 * report.n_instances as u64
}

/// Highest mean arrival rate (requests/s) at which `shape`, rescaled, is
/// still served without a growing queue. Bisects on a log scale.
pub fn probe_capacity(
    shape: &[TraceRecord],
    cfg: &ClusterConfig,
    opts: ProbeOptions,
) -> Result<f64, ClusterError> {
    if shape.len() < 2 {
        return Err(TraceError::EmptyTrace.into());
    }
    let stable_at = |rate: f64| -> Result<bool, ClusterError> {
        let t = trace::scale_trace(shape, rate)?;
        Ok(is_stable(&run(&t, cfg)?))
    };
    if stable_at(opts.hi_rps)? {
        return Ok(opts.hi_rps);
    }
    let (mut lo, mut hi) = (opts.lo_rps, opts.hi_rps);
    for _ in 0..opts.iterations {
        let mid = (lo * hi).sqrt();
        if stable_at(mid)? {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok(lo)
}
