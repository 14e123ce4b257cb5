//! KV$ hotspot detection for the multiplicative policy.
//!
//! Requests sharing a prompt head form a class. For a class with arrival
//! fraction `x` (over a sliding window) whose prefix is cached on the
//! instance set `M`, routing every class request into `M` cannot unbalance
//! batch sizes while `x / (1 - x) <= |M| / |M̄|`. Phase 1 flags classes that
//! violate this. Phase 2 confirms the alarm once more than
//! `consecutive_multiplier * |M|` consecutive class requests were routed
//! into `M` with a multiplicative score no worse than the best instance
//! outside it. A confirmed class has `M` filtered out (or is routed to the
//! least loaded instance) until the condition has held for a full window.

use std::collections::{BTreeMap, HashMap, VecDeque};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::engine::Micros;
use crate::hashing::{combine, splitmix64};
use crate::policies::{Candidate, DetectorVerdict, RoutingDecision};

const BUCKET_US: Micros = 1_000_000;
const CLASS_ROOT: u64 = 0x636c_6173_735f_6b65;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum DetectorError {
    #[error("batch-size ratio needs |M| >= 1 and |M̄| >= 1 (got {m}, {m_bar})")]
    Domain { m: usize, m_bar: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MitigationMode {
    #[default]
    ExcludeM,
    ForceLeastBs,
}

/// Which outside instance the phase-2 score comparison uses.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MbarReference {
    #[default]
    Best,
    Average,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DetectorConfig {
    pub enabled: bool,
    /// Apply verdicts; when false the detector only observes.
    pub mitigate: bool,
    pub window_s: f64,
    pub top_k_classes: usize,
    pub class_key_blocks: usize,
    pub consecutive_multiplier: f64,
    pub mitigation_mode: MitigationMode,
    pub mbar_reference: MbarReference,
}

impl Default for DetectorConfig {
    fn default() -> Self {
        Self {
            enabled: false,
            mitigate: true,
            window_s: 60.0,
            top_k_classes: 8,
            class_key_blocks: 2,
            consecutive_multiplier: 2.0,
            mitigation_mode: MitigationMode::ExcludeM,
            mbar_reference: MbarReference::Best,
        }
    }
}

impl DetectorConfig {
    pub fn validate(&self) -> Result<(), String> {
        if !(self.window_s.is_finite() && self.window_s > 0.0) {
            return Err("window_s must be positive".into());
        }
        if self.top_k_classes < 1 {
            return Err("top_k_classes must be >= 1".into());
        }
        if self.class_key_blocks < 1 {
            return Err("class_key_blocks must be >= 1".into());
        }
        if !(self.consecutive_multiplier.is_finite() && self.consecutive_multiplier >= 0.0) {
            return Err("consecutive_multiplier must be non-negative".into());
        }
        Ok(())
    }

    fn window_buckets(&self) -> u64 {
        (self.window_s.round() as u64).max(1)
    }

    fn window_us(&self) -> Micros {
        self.window_buckets() * BUCKET_US
    }
}

/// Key identifying the shared-prefix class of a prompt: a hash of its
/// first `k` blocks.
pub fn class_key(prefix_blocks: &[u64], k: usize) -> u64 {
    prefix_blocks
        .iter()
        .take(k)
        .fold(CLASS_ROOT, |acc, &b| combine(acc, b))
}

/// Expected batch-size ratio between instances inside and outside `M`
/// after `t` seconds of routing all class requests into `M`:
/// `(bs0 + x·qps/|M|·t) / (bs0 + (1-x)·qps/|M̄|·t)`.
pub fn estimate_bs_ratio(
    x: f64,
    qps: f64,
    m: usize,
    m_bar: usize,
    bs0: f64,
    t: f64,
) -> Result<f64, DetectorError> {
    if m == 0 || m_bar == 0 {
        return Err(DetectorError::Domain { m, m_bar });
    }
    let num = bs0 + x * qps / m as f64 * t;
    let den = bs0 + (1.0 - x) * qps / m_bar as f64 * t;
    if num == den {
        return Ok(1.0);
    }
    Ok(num / den)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase1 {
    Benign,
    Suspect,
}

/// Phase-1 test on exact counts: suspect iff
/// `class / (total - class) > m / m_bar`, evaluated as
/// `class * m_bar > (total - class) * m`. A class cached nowhere has no
/// hotspot to form.
pub fn phase1_counts(class_arrivals: u64, total_arrivals: u64, m: usize, m_bar: usize) -> Phase1 {
    if m == 0 {
        return Phase1::Benign;
    }
    let lhs = class_arrivals as u128 * m_bar as u128;
    let rhs = (total_arrivals - class_arrivals) as u128 * m as u128;
    if lhs > rhs {
        Phase1::Suspect
    } else {
        Phase1::Benign
    }
}

/// Phase-1 test on a fraction `x`.
pub fn phase1_check(x: f64, m: usize, m_bar: usize) -> Phase1 {
    if m > 0 && x * m_bar as f64 > (1.0 - x) * m as f64 {
        Phase1::Suspect
    } else {
        Phase1::Benign
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AlarmPhase {
    None,
    Phase1,
    Phase2,
}

impl AlarmPhase {
    pub fn name(self) -> &'static str {
        match self {
            AlarmPhase::None => "none",
            AlarmPhase::Phase1 => "phase1",
            AlarmPhase::Phase2 => "phase2",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClassWindowStats {
    pub class_key: u64,
    pub arrivals_in_window: u64,
    pub total_in_window: u64,
    pub x: f64,
    pub x_bar: f64,
    /// Instances holding the class prefix at the latest class arrival.
    pub m: Vec<usize>,
    pub m_bar: Vec<usize>,
    pub phase1: Phase1,
    pub consecutive_hotspot_count: u64,
    pub alarm_phase: AlarmPhase,
    /// Start of the current benign stretch while a phase-2 alarm is active.
    pub benign_since: Option<Micros>,
    pub last_update: Micros,
}

impl ClassWindowStats {
    fn new(class_key: u64) -> Self {
        Self {
            class_key,
            arrivals_in_window: 0,
            total_in_window: 0,
            x: 0.0,
            x_bar: 1.0,
            m: Vec::new(),
            m_bar: Vec::new(),
            phase1: Phase1::Benign,
            consecutive_hotspot_count: 0,
            alarm_phase: AlarmPhase::None,
            benign_since: None,
            last_update: 0,
        }
    }

    fn refresh(&mut self, class_arrivals: u64, total: u64, m: &[usize], n_instances: usize) {
        self.arrivals_in_window = class_arrivals;
        self.total_in_window = total;
        self.x = if total == 0 {
            0.0
        } else {
            class_arrivals as f64 / total as f64
        };
        self.x_bar = 1.0 - self.x;
        self.m = m.to_vec();
        self.m_bar = (0..n_instances).filter(|i| !m.contains(i)).collect();
        self.phase1 = phase1_counts(class_arrivals, total, self.m.len(), self.m_bar.len());
    }
}

/// Advances a class's alarm state on a phase-2 observation. Returns the
/// new phase.
pub fn phase2_update(
    stats: &mut ClassWindowStats,
    qualifies: bool,
    consecutive_multiplier: f64,
) -> AlarmPhase {
    if stats.phase1 != Phase1::Suspect || stats.alarm_phase == AlarmPhase::None {
        stats.consecutive_hotspot_count = 0;
        return stats.alarm_phase;
    }
    if qualifies {
        stats.consecutive_hotspot_count += 1;
    } else {
        stats.consecutive_hotspot_count = 0;
    }
    let threshold = consecutive_multiplier * stats.m.len() as f64;
    if stats.alarm_phase == AlarmPhase::Phase1 && stats.consecutive_hotspot_count as f64 > threshold {
        stats.alarm_phase = AlarmPhase::Phase2;
    }
    stats.alarm_phase
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AlarmEvent {
    pub time_us: Micros,
    pub class_key: u64,
    pub phase: AlarmPhase,
}

/// One line of the per-window detector dump.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DetectorRow {
    pub window_end_s: f64,
    pub class_key: u64,
    pub arrivals: u64,
    pub total_arrivals: u64,
    pub x: f64,
    pub x_over_xbar: f64,
    pub m: usize,
    pub m_bar: usize,
    pub m_over_mbar: f64,
    pub benign: bool,
    pub phase: &'static str,
}

#[derive(Debug, Clone, Default)]
struct Bucket {
    index: u64,
    total: u64,
    classes: HashMap<u64, (u64, u64)>,
}

/// Time-bucketed sliding window of per-class arrivals and hit tokens.
#[derive(Debug, Clone)]
pub struct ArrivalWindow {
    buckets: u64,
    ring: VecDeque<Bucket>,
    total: u64,
    /// class -> (arrivals, hit tokens) over the window.
    classes: HashMap<u64, (u64, u64)>,
}

impl ArrivalWindow {
    pub fn new(buckets: u64) -> Self {
        Self {
            buckets,
            ring: VecDeque::new(),
            total: 0,
            classes: HashMap::new(),
        }
    }

    /// Expires buckets older than the window ending at bucket `b`.
    pub fn roll_to(&mut self, b: u64) {
        while let Some(front) = self.ring.front() {
            if front.index + self.buckets > b {
                break;
            }
            let old = self.ring.pop_front().expect("front exists");
            self.total -= old.total;
            for (k, (a, h)) in old.classes {
                let e = self.classes.get_mut(&k).expect("class in window");
                e.0 -= a;
                e.1 -= h;
                if e.0 == 0 {
                    self.classes.remove(&k);
                }
            }
        }
    }

    pub fn add(&mut self, now: Micros, class: u64, hit_tokens: u64) {
        let b = now / BUCKET_US;
        self.roll_to(b);
        if self.ring.back().map(|x| x.index) != Some(b) {
            self.ring.push_back(Bucket {
                index: b,
                ..Default::default()
            });
        }
        let bucket = self.ring.back_mut().expect("just pushed");
        bucket.total += 1;
        let e = bucket.classes.entry(class).or_default();
        e.0 += 1;
        e.1 += hit_tokens;
        self.total += 1;
        let e = self.classes.entry(class).or_default();
        e.0 += 1;
        e.1 += hit_tokens;
    }

    pub fn total(&self) -> u64 {
        self.total
    }

    pub fn arrivals(&self, class: u64) -> u64 {
        self.classes.get(&class).map_or(0, |e| e.0)
    }

    /// Up to `k` classes with the most hit tokens (ties by key).
    pub fn top_by_hits(&self, k: usize) -> Vec<u64> {
        let mut all: Vec<(u64, u64)> = self.classes.iter().map(|(&c, &(_, h))| (c, h)).collect();
        all.sort_unstable_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(&b.0)));
        all.into_iter().take(k).map(|(c, _)| c).collect()
    }
}

/// Per-request inputs the detector needs from the cluster.
#[derive(Debug, Clone)]
pub struct ClassObservation {
    pub class_key: u64,
    /// Best hit tokens of the request over all instances.
    pub hit_tokens: u64,
    /// Instances holding the class prefix.
    pub m: Vec<usize>,
}

#[derive(Debug, Clone)]
pub struct Detector {
    cfg: DetectorConfig,
    n_instances: usize,
    window: ArrivalWindow,
    current_bucket: Option<u64>,
    tracked: BTreeMap<u64, ClassWindowStats>,
    alarms: Vec<AlarmEvent>,
    rows: Vec<DetectorRow>,
    next_report: Micros,
}

impl Detector {
    pub fn new(cfg: DetectorConfig, n_instances: usize) -> Self {
        let buckets = cfg.window_buckets();
        let next_report = cfg.window_us();
        Self {
            cfg,
            n_instances,
            window: ArrivalWindow::new(buckets),
            current_bucket: None,
            tracked: BTreeMap::new(),
            alarms: Vec::new(),
            rows: Vec::new(),
            next_report,
        }
    }

    pub fn config(&self) -> &DetectorConfig {
        &self.cfg
    }

    pub fn class_key(&self, prefix_blocks: &[u64]) -> u64 {
        class_key(prefix_blocks, self.cfg.class_key_blocks)
    }

    /// Blocks of a prompt that must be cached for an instance to be in `M`.
    pub fn class_blocks(&self, prompt_blocks: usize) -> usize {
        self.cfg.class_key_blocks.min(prompt_blocks)
    }

    pub fn stats(&self, class: u64) -> Option<&ClassWindowStats> {
        self.tracked.get(&class)
    }

    pub fn tracked(&self) -> impl Iterator<Item = &ClassWindowStats> {
        self.tracked.values()
    }

    pub fn window(&self) -> &ArrivalWindow {
        &self.window
    }

    pub fn alarms(&self) -> &[AlarmEvent] {
        &self.alarms
    }

    pub fn rows(&self) -> &[DetectorRow] {
        &self.rows
    }

    /// Emits window reports due before `now` and expires old buckets.
    pub fn advance(&mut self, now: Micros) {
        let window_us = self.cfg.window_us();
        while now >= self.next_report {
            let end_bucket = self.next_report / BUCKET_US - 1;
            self.window.roll_to(end_bucket);
            self.report(self.next_report);
            self.next_report += window_us;
        }
        let b = now / BUCKET_US;
        self.window.roll_to(b);
        if self.current_bucket != Some(b) {
            self.current_bucket = Some(b);
            self.rerank();
        }
    }

    /// Reports the trailing partial window ending at `now`, if any
    /// arrivals fell after the last full window.
    pub fn finish(&mut self, now: Micros) {
        self.advance(now);
        let last = self.next_report - self.cfg.window_us();
        if now > last {
            self.report(now);
        }
    }

    fn rerank(&mut self) {
        let top = self.window.top_by_hits(self.cfg.top_k_classes);
        let mut next = BTreeMap::new();
        for k in top {
            let s = self.tracked.remove(&k).unwrap_or_else(|| ClassWindowStats::new(k));
            next.insert(k, s);
        }
        for (k, s) in std::mem::take(&mut self.tracked) {
            if s.alarm_phase != AlarmPhase::None {
                next.insert(k, s);
            }
        }
        self.tracked = next;
    }

    fn report(&mut self, at: Micros) {
        let total = self.window.total();
        for s in self.tracked.values() {
            // Not routed since it was picked up: no M to compare against.
            if s.m.is_empty() && s.m_bar.is_empty() {
                continue;
            }
            let arrivals = self.window.arrivals(s.class_key);
            let x = if total == 0 {
                0.0
            } else {
                arrivals as f64 / total as f64
            };
            let phase1 = phase1_counts(arrivals, total, s.m.len(), s.m_bar.len());
            self.rows.push(DetectorRow {
                window_end_s: at as f64 / 1e6,
                class_key: s.class_key,
                arrivals,
                total_arrivals: total,
                x,
                x_over_xbar: x / (1.0 - x),
                m: s.m.len(),
                m_bar: s.m_bar.len(),
                m_over_mbar: s.m.len() as f64 / s.m_bar.len() as f64,
                benign: phase1 == Phase1::Benign,
                phase: s.alarm_phase.name(),
            });
        }
    }

    fn set_phase(&mut self, class: u64, phase: AlarmPhase, now: Micros) {
        let s = self.tracked.get_mut(&class).expect("tracked class");
        if s.alarm_phase != phase {
            s.alarm_phase = phase;
            self.alarms.push(AlarmEvent {
                time_us: now,
                class_key: class,
                phase,
            });
        }
    }

    /// Records an arrival and re-evaluates phase 1 for its class.
    pub fn observe_arrival(&mut self, now: Micros, obs: &ClassObservation) {
        self.advance(now);
        self.window.add(now, obs.class_key, obs.hit_tokens);
        if !self.tracked.contains_key(&obs.class_key) {
            if self.tracked.len() >= self.cfg.top_k_classes {
                return;
            }
            self.tracked
                .insert(obs.class_key, ClassWindowStats::new(obs.class_key));
        }
        let arrivals = self.window.arrivals(obs.class_key);
        let total = self.window.total();
        let window_us = self.cfg.window_us();
        let n = self.n_instances;
        let s = self.tracked.get_mut(&obs.class_key).expect("tracked");
        s.refresh(arrivals, total, &obs.m, n);
        s.last_update = now;
        let phase = s.alarm_phase;
        match (s.phase1, phase) {
            (Phase1::Suspect, AlarmPhase::None) => {
                s.consecutive_hotspot_count = 0;
                self.set_phase(obs.class_key, AlarmPhase::Phase1, now);
            }
            (Phase1::Suspect, _) => s.benign_since = None,
            (Phase1::Benign, AlarmPhase::Phase1) => {
                s.consecutive_hotspot_count = 0;
                self.set_phase(obs.class_key, AlarmPhase::None, now);
            }
            (Phase1::Benign, AlarmPhase::Phase2) => {
                let since = *s.benign_since.get_or_insert(now);
                if now - since >= window_us {
                    s.benign_since = None;
                    s.consecutive_hotspot_count = 0;
                    self.set_phase(obs.class_key, AlarmPhase::None, now);
                }
            }
            (Phase1::Benign, AlarmPhase::None) => {}
        }
    }

    /// Routing constraint for a request of `class` whose prefix is held by
    /// `m`.
    pub fn verdict(&self, class: u64, m: &[usize]) -> DetectorVerdict {
        if !self.cfg.mitigate {
            return DetectorVerdict::None;
        }
        match self.tracked.get(&class) {
            Some(s) if s.alarm_phase == AlarmPhase::Phase2 => match self.cfg.mitigation_mode {
                MitigationMode::ExcludeM => DetectorVerdict::Exclude(m.to_vec()),
                MitigationMode::ForceLeastBs => DetectorVerdict::ForceLeastBs,
            },
            _ => DetectorVerdict::None,
        }
    }

    /// Phase-2 bookkeeping after a class request has been routed.
    pub fn observe_decision(
        &mut self,
        class: u64,
        decision: &RoutingDecision,
        cands: &[Candidate],
        m: &[usize],
    ) {
        let Some(s) = self.tracked.get_mut(&class) else {
            return;
        };
        let product = |c: &Candidate| c.p_tokens() as f64 * c.snapshot.bs.max(1) as f64;
        let qualifies = m.contains(&decision.chosen) && {
            let chosen = cands
                .iter()
                .find(|c| c.instance == decision.chosen)
                .expect("chosen instance is a candidate");
            let outside: Vec<f64> = cands
                .iter()
                .filter(|c| !m.contains(&c.instance) && !decision.filtered.contains(&c.instance))
                .map(product)
                .collect();
            let reference = match self.cfg.mbar_reference {
                MbarReference::Best => outside.iter().copied().fold(f64::INFINITY, f64::min),
                MbarReference::Average if outside.is_empty() => f64::INFINITY,
                MbarReference::Average => outside.iter().sum::<f64>() / outside.len() as f64,
            };
            !outside.is_empty() && product(chosen) <= reference
        };
        let before = s.alarm_phase;
        let after = phase2_update(s, qualifies, self.cfg.consecutive_multiplier);
        if after != before {
            s.alarm_phase = before;
            self.set_phase(class, after, decision.time);
        }
    }
}

/// Stable short label for a class key in exports.
pub fn class_label(key: u64) -> u64 {
    splitmix64(key) >> 16
}
