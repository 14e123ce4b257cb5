//! Routing policies. Every policy turns per-instance candidates into a
//! score where lower is better and routes to the minimum; filter and
//! simulate encode their own selection rules in the same form.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::engine::{us_to_ms, CostModel, InstanceSim, Micros};
use crate::indicators::{p_tokens, IndicatorSnapshot, RequestIndicators};

/// Cost multiplier applied to the estimator when `mis_tuned` is set.
pub const MIS_TUNED_SCALE: f64 = 4.0;

/// Relative tolerance under which two scores count as tied.
const TIE_RTOL: f64 = 1e-12;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum PolicyError {
    #[error("no instances to route to")]
    NoInstances,
    #[error("unknown policy '{0}'")]
    UnknownPolicy(String),
    #[error("invalid policy parameter: {0}")]
    InvalidParameter(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PolicyKind {
    Vllm,
    Linear,
    Filter,
    Simulate,
    Multiplicative,
    LeastBs,
}

impl PolicyKind {
    pub fn name(self) -> &'static str {
        match self {
            PolicyKind::Vllm => "vllm",
            PolicyKind::Linear => "linear",
            PolicyKind::Filter => "filter",
            PolicyKind::Simulate => "simulate",
            PolicyKind::Multiplicative => "multiplicative",
            PolicyKind::LeastBs => "least_bs",
        }
    }
}

impl fmt::Display for PolicyKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KvIndicator {
    #[default]
    PTokens,
    OneMinusHit,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BalanceIndicator {
    #[default]
    Bs,
    TotalTokens,
}

fn one() -> f64 {
    1.0
}

fn default_kv_weight() -> f64 {
    0.4
}

fn default_range() -> u32 {
    4
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum PolicySpec {
    Vllm {
        #[serde(default = "one")]
        q_weight: f64,
    },
    Linear {
        /// Weight of the KV$ term, in `[0, 1]`.
        #[serde(default = "default_kv_weight")]
        kv_weight: f64,
        /// Fixed batch-size normalizer; the per-decision maximum when unset.
        #[serde(default, skip_serializing_if = "Option::is_none")]
        bs_cap: Option<u32>,
    },
    Filter {
        #[serde(default = "default_range")]
        range_threshold: u32,
    },
    Simulate {
        #[serde(default)]
        mis_tuned: bool,
    },
    Multiplicative {
        #[serde(default)]
        kv_indicator: KvIndicator,
        #[serde(default)]
        balance_indicator: BalanceIndicator,
    },
    LeastBs,
}

impl Default for PolicySpec {
    fn default() -> Self {
        PolicySpec::Multiplicative {
            kv_indicator: KvIndicator::PTokens,
            balance_indicator: BalanceIndicator::Bs,
        }
    }
}

impl PolicySpec {
    pub fn kind(&self) -> PolicyKind {
        match self {
            PolicySpec::Vllm { .. } => PolicyKind::Vllm,
            PolicySpec::Linear { .. } => PolicyKind::Linear,
            PolicySpec::Filter { .. } => PolicyKind::Filter,
            PolicySpec::Simulate { .. } => PolicyKind::Simulate,
            PolicySpec::Multiplicative { .. } => PolicyKind::Multiplicative,
            PolicySpec::LeastBs => PolicyKind::LeastBs,
        }
    }

    pub fn validate(&self) -> Result<(), PolicyError> {
        match *self {
            PolicySpec::Vllm { q_weight } if !(q_weight.is_finite() && q_weight >= 0.0) => Err(
                PolicyError::InvalidParameter(format!("q_weight must be non-negative, got {q_weight}")),
            ),
            PolicySpec::Linear { kv_weight, bs_cap } => {
                if !(0.0..=1.0).contains(&kv_weight) {
                    return Err(PolicyError::InvalidParameter(format!(
                        "kv_weight must be in [0, 1], got {kv_weight}"
                    )));
                }
                if bs_cap == Some(0) {
                    return Err(PolicyError::InvalidParameter("bs_cap must be >= 1".into()));
                }
                Ok(())
            }
            PolicySpec::Filter { range_threshold } if range_threshold < 1 => Err(
                PolicyError::InvalidParameter("range_threshold must be >= 1".into()),
            ),
            _ => Ok(()),
        }
    }

    /// Short label including the tuning parameter, e.g. `linear:0.4`.
    pub fn label(&self) -> String {
        match *self {
            PolicySpec::Linear { kv_weight, .. } => format!("linear:{kv_weight}"),
            PolicySpec::Filter { range_threshold } => format!("filter:{range_threshold}"),
            PolicySpec::Simulate { mis_tuned: true } => "simulate:mistuned".into(),
            ref other => other.kind().name().into(),
        }
    }
}

/// Parses `name` or `name:param` (`linear:0.7`, `filter:6`, `vllm:2`,
/// `simulate:mistuned`).
impl FromStr for PolicySpec {
    type Err = PolicyError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let (name, param) = match s.split_once(':') {
            Some((n, p)) => (n, Some(p)),
            None => (s, None),
        };
        let bad = || PolicyError::InvalidParameter(format!("bad parameter in '{s}'"));
        let spec = match (name, param) {
            ("vllm", p) => PolicySpec::Vllm {
                q_weight: p.map(str::parse).transpose().map_err(|_| bad())?.unwrap_or(1.0),
            },
            ("linear", p) => PolicySpec::Linear {
                kv_weight: p
                    .map(str::parse)
                    .transpose()
                    .map_err(|_| bad())?
                    .unwrap_or_else(default_kv_weight),
                bs_cap: None,
            },
            ("filter", p) => PolicySpec::Filter {
                range_threshold: p
                    .map(str::parse)
                    .transpose()
                    .map_err(|_| bad())?
                    .unwrap_or_else(default_range),
            },
            ("simulate", None) => PolicySpec::Simulate { mis_tuned: false },
            ("simulate", Some("mistuned")) => PolicySpec::Simulate { mis_tuned: true },
            ("multiplicative", None) => PolicySpec::default(),
            ("multiplicative", Some("one_minus_hit")) => PolicySpec::Multiplicative {
                kv_indicator: KvIndicator::OneMinusHit,
                balance_indicator: BalanceIndicator::Bs,
            },
            ("multiplicative", Some("total_tokens")) => PolicySpec::Multiplicative {
                kv_indicator: KvIndicator::PTokens,
                balance_indicator: BalanceIndicator::TotalTokens,
            },
            ("least_bs", None) => PolicySpec::LeastBs,
            ("simulate" | "multiplicative" | "least_bs", Some(_)) => return Err(bad()),
            _ => return Err(PolicyError::UnknownPolicy(s.to_string())),
        };
        spec.validate()?;
        Ok(spec)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct PolicyConfig {
    #[serde(flatten)]
    pub spec: PolicySpec,
    #[serde(default)]
    pub tie_break_seed: u64,
}

/// What the hotspot detector asks of the next routing decision.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub enum DetectorVerdict {
    #[default]
    None,
    Exclude(Vec<usize>),
    ForceLeastBs,
}

/// Work on an instance as the estimator sees it.
#[derive(Debug, Clone, PartialEq)]
pub struct QueueDetail {
    pub now: Micros,
    pub in_flight: Option<InFlightDetail>,
    /// Queued requests in FIFO order.
    pub queue: Vec<PendingWork>,
    /// Running requests in decode order.
    pub running: Vec<DecodeWork>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct InFlightDetail {
    pub start: Micros,
    pub prefill_tokens: u64,
    pub decode_count: usize,
    pub ctx_tokens: u64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PendingWork {
    pub remaining_prefill: u32,
    /// Part of `remaining_prefill` being processed by the in-flight step.
    pub in_flight_tokens: u32,
    pub input_tokens: u32,
    pub output_tokens: u32,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DecodeWork {
    pub generated: u32,
    pub input_tokens: u32,
    pub output_tokens: u32,
    pub in_flight: bool,
}

impl QueueDetail {
    pub fn capture(instance: &InstanceSim, now: Micros) -> Self {
        let flight = instance.in_flight();
        let decode_n = flight.map_or(0, |f| f.plan.decode.len());
        let running: Vec<DecodeWork> = instance
            .running()
            .iter()
            .enumerate()
            .map(|(i, r)| DecodeWork {
                generated: r.generated,
                input_tokens: r.req.input_tokens,
                output_tokens: r.req.output_tokens,
                in_flight: i < decode_n,
            })
            .collect();
        let queue = instance
            .queued()
            .map(|q| PendingWork {
                remaining_prefill: q.remaining_prefill,
                in_flight_tokens: flight
                    .and_then(|f| f.plan.prefill.iter().find(|(id, _)| *id == q.req.id))
                    .map_or(0, |&(_, n)| n),
                input_tokens: q.req.input_tokens,
                output_tokens: q.req.output_tokens,
            })
            .collect();
        let in_flight = flight.map(|f| InFlightDetail {
            start: f.start,
            prefill_tokens: f.plan.prefill_tokens(),
            decode_count: f.plan.decode.len(),
            ctx_tokens: running
                .iter()
                .filter(|d| d.in_flight)
                .map(|d| d.input_tokens as u64 + d.generated as u64)
                .sum(),
        });
        QueueDetail {
            now,
            in_flight,
            queue,
            running,
        }
    }
}

/// Estimated milliseconds from `detail.now` until a request with
/// `new_prefill_tokens` to compute would emit its first token here, by
/// replaying the instance's chunked-prefill schedule under `model`.
pub fn estimate_ttft(
    detail: &QueueDetail,
    new_prefill_tokens: u32,
    input_tokens: u32,
    output_tokens: u32,
    model: &CostModel,
) -> f64 {
    // (remaining output, context tokens)
    let mut running: Vec<(u32, u64)> = Vec::new();
    // (remaining prefill, input, output, is_target)
    let mut queue: std::collections::VecDeque<(u32, u32, u32, bool)> = Default::default();

    let mut t = detail.now;
    if let Some(f) = detail.in_flight {
        let cost = model
            .step_cost(f.prefill_tokens, f.decode_count, f.ctx_tokens)
            .total_us();
        t = t.max(f.start + cost);
    }
    for d in &detail.running {
        let generated = d.generated + u32::from(d.in_flight);
        if generated < d.output_tokens {
            running.push((
                d.output_tokens - generated,
                d.input_tokens as u64 + generated as u64,
            ));
        }
    }
    for p in &detail.queue {
        let left = p.remaining_prefill - p.in_flight_tokens;
        if left == 0 {
            if p.output_tokens > 1 {
                running.push((p.output_tokens - 1, p.input_tokens as u64 + 1));
            }
        } else {
            queue.push_back((left, p.input_tokens, p.output_tokens, false));
        }
    }
    queue.push_back((new_prefill_tokens.max(1), input_tokens, output_tokens, true));

    let max = model.max_batch_requests as usize;
    loop {
        let n_decode = running.len().min(max);
        let ctx: u64 = running.iter().take(n_decode).map(|r| r.1).sum();
        let mut budget = (model.chunk_tokens as usize).saturating_sub(n_decode) as u32;
        let mut allocs = Vec::new();
        for (i, q) in queue.iter().enumerate() {
            if budget == 0 || n_decode + allocs.len() >= max {
                break;
            }
            let take = q.0.min(budget);
            allocs.push((i, take));
            budget -= take;
        }
        let prefill: u64 = allocs.iter().map(|a| a.1 as u64).sum();
        t += model.step_cost(prefill, n_decode, ctx).total_us();

        let mut next_running = Vec::with_capacity(running.len());
        for (i, (left, ctx)) in running.into_iter().enumerate() {
            if i < n_decode {
                if left > 1 {
                    next_running.push((left - 1, ctx + 1));
                }
            } else {
                next_running.push((left, ctx));
            }
        }
        running = next_running;

        let mut done = 0;
        for (i, take) in allocs {
            queue[i].0 -= take;
            if queue[i].0 == 0 {
                done += 1;
            }
        }
        for _ in 0..done {
            let (_, input, output, is_target) = queue.pop_front().expect("completed entry");
            if is_target {
                return us_to_ms(t - detail.now);
            }
            if output > 1 {
                running.push((output - 1, input as u64 + 1));
            }
        }
    }
}

/// Everything a policy may look at for one instance.
#[derive(Debug, Clone)]
pub struct Candidate {
    pub instance: usize,
    pub snapshot: IndicatorSnapshot,
    pub kv: RequestIndicators,
    /// Only filled for policies that need it.
    pub detail: Option<QueueDetail>,
}

impl Candidate {
    pub fn p_tokens(&self) -> u64 {
        p_tokens(&self.snapshot, &self.kv)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RoutingDecision {
    pub chosen: usize,
    /// `(instance, score)` for every instance that was scored.
    pub scores: Vec<(usize, f64)>,
    /// Instances removed from consideration by the detector.
    pub filtered: Vec<usize>,
    pub policy: PolicyKind,
    pub forced_least_bs: bool,
    pub time: Micros,
}

impl RoutingDecision {
    pub fn score_of(&self, instance: usize) -> Option<f64> {
        self.scores
            .iter()
            .find(|(i, _)| *i == instance)
            .map(|&(_, s)| s)
    }
}

/// Seeded round-robin over tied instances: the k-th tie (counting from 0)
/// picks `tied[(seed + k) % tied.len()]`.
#[derive(Debug, Clone)]
pub struct TieBreaker {
    counter: u64,
}

impl TieBreaker {
    pub fn new(seed: u64) -> Self {
        Self { counter: seed }
    }

    pub fn pick(&mut self, tied: &[usize]) -> usize {
        match tied.len() {
            0 => panic!("tie-break over an empty set"),
            1 => tied[0],
            n => {
                let i = (self.counter % n as u64) as usize;
                self.counter = self.counter.wrapping_add(1);
                tied[i]
            }
        }
    }
}

/// Instances whose score is (within rounding) the minimum.
pub fn argmin_set(scores: &[(usize, f64)]) -> Vec<usize> {
    let min = scores
        .iter()
        .map(|s| s.1)
        .fold(f64::INFINITY, f64::min);
    let tol = min.abs() * TIE_RTOL;
    scores
        .iter()
        .filter(|s| s.1 <= min + tol)
        .map(|s| s.0)
        .collect()
}

pub fn score_vllm(snap: &IndicatorSnapshot, q_weight: f64) -> f64 {
    q_weight * snap.q_bs as f64 + snap.r_bs as f64
}

pub fn score_linear(snap: &IndicatorSnapshot, hit_ratio: f64, kv_weight: f64, bs_norm: u32) -> f64 {
    let load = (snap.bs as f64 / bs_norm.max(1) as f64).min(1.0);
    kv_weight * (1.0 - hit_ratio) + (1.0 - kv_weight) * load
}

pub fn score_multiplicative(
    cand: &Candidate,
    kv_indicator: KvIndicator,
    balance_indicator: BalanceIndicator,
) -> f64 {
    let kv = match kv_indicator {
        KvIndicator::PTokens => cand.p_tokens() as f64,
        KvIndicator::OneMinusHit => 1.0 - cand.kv.hit_ratio,
    };
    let balance = match balance_indicator {
        BalanceIndicator::Bs => cand.snapshot.bs.max(1) as f64,
        BalanceIndicator::TotalTokens => cand.snapshot.total_tokens.max(1) as f64,
    };
    kv * balance
}

/// Filter-based combination: if the batch-size range exceeds the
/// threshold, route to the least loaded instance; otherwise to the highest
/// hit ratio. Scores are `bs` or `1 - hit` accordingly.
pub fn filter_scores(cands: &[&Candidate], range_threshold: u32) -> Vec<(usize, f64)> {
    let max = cands.iter().map(|c| c.snapshot.bs).max().unwrap_or(0);
    let min = cands.iter().map(|c| c.snapshot.bs).min().unwrap_or(0);
    let imbalanced = max - min > range_threshold;
    cands
        .iter()
        .map(|c| {
            let s = if imbalanced {
                c.snapshot.bs as f64
            } else {
                1.0 - c.kv.hit_ratio
            };
            (c.instance, s)
        })
        .collect()
}

pub fn route_filter(
    cands: &[&Candidate],
    range_threshold: u32,
    ties: &mut TieBreaker,
) -> Result<usize, PolicyError> {
    if cands.is_empty() {
        return Err(PolicyError::NoInstances);
    }
    Ok(ties.pick(&argmin_set(&filter_scores(cands, range_threshold))))
}

/// A policy bound to its tie-break state and estimator model.
#[derive(Debug, Clone)]
pub struct Policy {
    spec: PolicySpec,
    estimator: CostModel,
    ties: TieBreaker,
}

impl Policy {
    pub fn new(config: &PolicyConfig, engine_cost: &CostModel) -> Self {
        let estimator = match config.spec {
            PolicySpec::Simulate { mis_tuned: true } => engine_cost.scaled(MIS_TUNED_SCALE),
            _ => engine_cost.clone(),
        };
        Self {
            spec: config.spec.clone(),
            estimator,
            ties: TieBreaker::new(config.tie_break_seed),
        }
    }

    pub fn spec(&self) -> &PolicySpec {
        &self.spec
    }

    pub fn estimator(&self) -> &CostModel {
        &self.estimator
    }

    pub fn needs_queue_detail(&self) -> bool {
        matches!(self.spec, PolicySpec::Simulate { .. })
    }

    /// Scores of the unfiltered candidates under this policy.
    pub fn scores(&self, cands: &[&Candidate], input_tokens: u32, output_tokens: u32) -> Vec<(usize, f64)> {
        match self.spec {
            PolicySpec::Vllm { q_weight } => cands
                .iter()
                .map(|c| (c.instance, score_vllm(&c.snapshot, q_weight)))
                .collect(),
            PolicySpec::Linear { kv_weight, bs_cap } => {
                let norm = bs_cap.unwrap_or_else(|| {
                    cands.iter().map(|c| c.snapshot.bs).max().unwrap_or(0).max(1)
                });
                cands
                    .iter()
                    .map(|c| {
                        (
                            c.instance,
                            score_linear(&c.snapshot, c.kv.hit_ratio, kv_weight, norm),
                        )
                    })
                    .collect()
            }
            PolicySpec::Filter { range_threshold } => filter_scores(cands, range_threshold),
            PolicySpec::Simulate { .. } => cands
                .iter()
                .map(|c| {
                    let detail = c
                        .detail
                        .as_ref()
                        .expect("simulate policy needs queue detail");
                    let est = estimate_ttft(
                        detail,
                        c.kv.new_prefill_tokens as u32,
                        input_tokens,
                        output_tokens,
                        &self.estimator,
                    );
                    (c.instance, est)
                })
                .collect(),
            PolicySpec::Multiplicative {
                kv_indicator,
                balance_indicator,
            } => cands
                .iter()
                .map(|c| (c.instance, score_multiplicative(c, kv_indicator, balance_indicator)))
                .collect(),
            PolicySpec::LeastBs => least_bs_scores(cands),
        }
    }

    /// Filters by the detector verdict (failing open if nothing would
    /// remain), scores, and picks the minimum.
    pub fn choose(
        &mut self,
        cands: &[Candidate],
        input_tokens: u32,
        output_tokens: u32,
        verdict: &DetectorVerdict,
        now: Micros,
    ) -> Result<RoutingDecision, PolicyError> {
        if cands.is_empty() {
            return Err(PolicyError::NoInstances);
        }
        let mut filtered = Vec::new();
        let mut pool: Vec<&Candidate> = cands.iter().collect();
        if let DetectorVerdict::Exclude(ex) = verdict {
            let kept: Vec<&Candidate> = cands.iter().filter(|c| !ex.contains(&c.instance)).collect();
            if !kept.is_empty() {
                filtered = cands
                    .iter()
                    .filter(|c| ex.contains(&c.instance))
                    .map(|c| c.instance)
                    .collect();
                pool = kept;
            }
        }
        let forced = matches!(verdict, DetectorVerdict::ForceLeastBs);
        let scores = if forced {
            least_bs_scores(&pool)
        } else {
            self.scores(&pool, input_tokens, output_tokens)
        };
        let chosen = self.ties.pick(&argmin_set(&scores));
        Ok(RoutingDecision {
            chosen,
            scores,
            filtered,
            policy: self.spec.kind(),
            forced_least_bs: forced,
            time: now,
        })
    }
}

fn least_bs_scores(cands: &[&Candidate]) -> Vec<(usize, f64)> {
    cands
        .iter()
        .map(|c| (c.instance, c.snapshot.bs as f64))
        .collect()
}
