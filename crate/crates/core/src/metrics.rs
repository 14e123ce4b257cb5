//! Per-request and per-window measurements of a finished run, and their
//! CSV/JSON exports.
//!
//! Export files and columns:
//!
//! - `requests.csv`: request_id, arrival_s, first_token_s, finish_s, ttft_ms,
//!   tpot_ms (empty for single-token outputs), input_tokens, output_tokens,
//!   hit_tokens, hit_ratio, instance, class_key, rerouted
//! - `cdf_ttft.csv`, `cdf_tpot.csv`: value_ms, cumulative_fraction
//! - `hit_timeline.csv`: window_start_s, admissions, hit_tokens, input_tokens,
//!   hit_ratio
//! - `imbalance.csv`: window_start_s, instance, prefill_s, mean_bs
//! - `detector.csv`: window_end_s, class_key, arrivals, total_arrivals, x,
//!   x_over_xbar, m, m_bar, m_over_mbar, benign, phase
//! - `summary.json`: see [`Summary`]

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::Serialize;
use thiserror::Error;

use crate::detector::{AlarmEvent, DetectorRow};
use crate::engine::{Micros, StepRecord};

pub const DEFAULT_WINDOW_S: f64 = 10.0;

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("percentile of an empty series")]
    EmptySeries,
    #[error("percentile must be in [0, 100], got {0}")]
    InvalidPercentile(f64),
    #[error("cannot write {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RequestRecord {
    pub request_id: u64,
    pub arrival_us: Micros,
    pub first_token_us: Option<Micros>,
    pub finish_us: Option<Micros>,
    pub input_tokens: u32,
    pub output_tokens: u32,
    /// Cache hit on the chosen instance at admission.
    pub hit_tokens: u32,
    pub instance: usize,
    pub class_key: u64,
    /// Routed under a detector verdict.
    pub rerouted: bool,
}

impl RequestRecord {
    pub fn ttft_ms(&self) -> Option<f64> {
        self.first_token_us
            .map(|f| (f - self.arrival_us) as f64 / 1000.0)
    }

    /// Undefined for single-token outputs.
    pub fn tpot_ms(&self) -> Option<f64> {
        match (self.first_token_us, self.finish_us) {
            (Some(f), Some(e)) if self.output_tokens > 1 => {
                Some((e - f) as f64 / 1000.0 / (self.output_tokens - 1) as f64)
            }
            _ => None,
        }
    }

    pub fn hit_ratio(&self) -> f64 {
        self.hit_tokens as f64 / self.input_tokens as f64
    }
}

/// Everything a run produced.
#[derive(Debug, Clone, PartialEq)]
pub struct RunReport {
    pub policy: String,
    pub seed: u64,
    pub n_instances: usize,
    /// In trace order.
    pub requests: Vec<RequestRecord>,
    pub steps: Vec<Vec<StepRecord>>,
    pub bs_logs: Vec<Vec<(Micros, u32)>>,
    pub detector_rows: Vec<DetectorRow>,
    pub alarms: Vec<AlarmEvent>,
    pub arrivals_hash: u64,
    pub routed: u64,
    pub finished: u64,
    pub end_us: Micros,
    /// Total queued requests right after the last arrival was routed.
    pub queued_at_last_arrival: u64,
}

impl RunReport {
    pub fn empty(policy: String, seed: u64, n_instances: usize) -> Self {
        Self {
            policy,
            seed,
            n_instances,
            requests: Vec::new(),
            steps: vec![Vec::new(); n_instances],
            bs_logs: vec![Vec::new(); n_instances],
            detector_rows: Vec::new(),
            alarms: Vec::new(),
            arrivals_hash: 0,
            routed: 0,
            finished: 0,
            end_us: 0,
            queued_at_last_arrival: 0,
        }
    }

    pub fn ttfts_ms(&self) -> Vec<f64> {
        self.requests.iter().filter_map(RequestRecord::ttft_ms).collect()
    }

    pub fn tpots_ms(&self) -> Vec<f64> {
        self.requests.iter().filter_map(RequestRecord::tpot_ms).collect()
    }

    /// Token-weighted hit ratio over all admissions.
    pub fn hit_ratio(&self) -> f64 {
        let (hit, input) = self.requests.iter().fold((0u64, 0u64), |(h, i), r| {
            (h + r.hit_tokens as u64, i + r.input_tokens as u64)
        });
        if input == 0 {
            0.0
        } else {
            hit as f64 / input as f64
        }
    }

    pub fn request_hit_ratio(&self) -> f64 {
        mean(&self.requests.iter().map(RequestRecord::hit_ratio).collect::<Vec<_>>()).unwrap_or(0.0)
    }
}

pub fn mean(xs: &[f64]) -> Option<f64> {
    if xs.is_empty() {
        None
    } else {
        Some(xs.iter().sum::<f64>() / xs.len() as f64)
    }
}

/// Nearest-rank percentile: the `ceil(p/100 · n)`-th smallest value.
pub fn percentile(series: &[f64], p: f64) -> Result<f64, MetricsError> {
    if series.is_empty() {
        return Err(MetricsError::EmptySeries);
    }
    if !(0.0..=100.0).contains(&p) {
        return Err(MetricsError::InvalidPercentile(p));
    }
    let mut v = series.to_vec();
    v.sort_by(f64::total_cmp);
    let rank = ((p * v.len() as f64 / 100.0).ceil() as usize).max(1);
    Ok(v[rank - 1])
}

/// Sorted values with their cumulative fraction.
pub fn cdf(series: &[f64]) -> Vec<(f64, f64)> {
    let mut v = series.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len() as f64;
    v.into_iter()
        .enumerate()
        .map(|(i, x)| (x, (i + 1) as f64 / n))
        .collect()
}

/// Integral of a piecewise-constant batch-size log over `[a, b)`, in
/// request-microseconds. The batch size is zero before the first entry.
fn bs_integral(log: &[(Micros, u32)], a: Micros, b: Micros) -> f64 {
    if b <= a {
        return 0.0;
    }
    let mut acc = 0.0;
    // Index of the last entry at or before `a`.
    let start = log.partition_point(|&(t, _)| t <= a);
    let mut cur_t = a;
    let mut cur_bs = if start == 0 { 0 } else { log[start - 1].1 };
    for &(t, bs) in &log[start..] {
        if t >= b {
            break;
        }
        acc += (t - cur_t) as f64 * cur_bs as f64;
        cur_t = t;
        cur_bs = bs;
    }
    acc + (b - cur_t) as f64 * cur_bs as f64
}

/// Time-weighted mean batch size of each instance over `[0, end)`.
pub fn mean_bs(report: &RunReport) -> Vec<f64> {
    report
        .bs_logs
        .iter()
        .map(|log| {
            if report.end_us == 0 {
                0.0
            } else {
                bs_integral(log, 0, report.end_us) / report.end_us as f64
            }
        })
        .collect()
}

/// Max over min of the per-instance mean batch sizes (1 for an idle run).
pub fn bs_spread(report: &RunReport) -> f64 {
    let m = mean_bs(report);
    let max = m.iter().copied().fold(0.0, f64::max);
    let min = m.iter().copied().fold(f64::INFINITY, f64::min);
    if max == 0.0 {
        1.0
    } else {
        max / min
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct WindowProfile {
    pub window_start_s: f64,
    /// Prefill busy seconds per instance.
    pub prefill_s: Vec<f64>,
    pub mean_bs: Vec<f64>,
    pub admissions: u64,
    pub hit_tokens: u64,
    pub input_tokens: u64,
}

impl WindowProfile {
    pub fn hit_ratio(&self) -> f64 {
        if self.input_tokens == 0 {
            0.0
        } else {
            self.hit_tokens as f64 / self.input_tokens as f64
        }
    }
}

/// Slices the run into windows of `window_s` seconds. A step's prefill
/// time is spread evenly over the step's duration.
pub fn window_profiles(report: &RunReport, window_s: f64) -> Vec<WindowProfile> {
    let w = ((window_s * 1e6).round() as Micros).max(1);
    let n_windows = report.end_us.div_ceil(w) as usize;
    let n = report.n_instances;
    let mut out: Vec<WindowProfile> = (0..n_windows)
        .map(|k| WindowProfile {
            window_start_s: (k as u64 * w) as f64 / 1e6,
            prefill_s: vec![0.0; n],
            mean_bs: vec![0.0; n],
            admissions: 0,
            hit_tokens: 0,
            input_tokens: 0,
        })
        .collect();
    for (i, steps) in report.steps.iter().enumerate() {
        for s in steps {
            let dur = s.end - s.start;
            if dur == 0 || s.prefill_us == 0 {
                continue;
            }
            let rate = s.prefill_us as f64 / dur as f64;
            let first = (s.start / w) as usize;
            let last = ((s.end - 1) / w) as usize;
            for (k, win) in out.iter_mut().enumerate().take(last + 1).skip(first) {
                let a = s.start.max(k as u64 * w);
                let b = s.end.min((k as u64 + 1) * w);
                win.prefill_s[i] += (b - a) as f64 * rate / 1e6;
            }
        }
    }
    for (k, win) in out.iter_mut().enumerate() {
        let a = k as u64 * w;
        let b = (a + w).min(report.end_us);
        for (i, log) in report.bs_logs.iter().enumerate() {
            win.mean_bs[i] = bs_integral(log, a, b) / (b - a) as f64;
        }
    }
    for r in &report.requests {
        let k = (r.arrival_us / w) as usize;
        if let Some(win) = out.get_mut(k) {
            win.admissions += 1;
            win.hit_tokens += r.hit_tokens as u64;
            win.input_tokens += r.input_tokens as u64;
        }
    }
    out
}

fn pstddev(xs: &[f64]) -> f64 {
    match mean(xs) {
        None => 0.0,
        Some(m) => (xs.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / xs.len() as f64).sqrt(),
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ImbalanceProfile {
    pub windows: Vec<WindowProfile>,
    /// The two instances whose windowed prefill time varies most.
    pub top_pair: (usize, usize),
    /// Set when the cluster has a single instance.
    pub degenerate: bool,
    /// Mean over windows of the cross-instance stddev of prefill seconds.
    pub mean_window_stddev_s: f64,
}

pub fn imbalance_profile(report: &RunReport, window_s: f64) -> ImbalanceProfile {
    let windows = window_profiles(report, window_s);
    let n = report.n_instances;
    let per_instance: Vec<f64> = (0..n)
        .map(|i| pstddev(&windows.iter().map(|w| w.prefill_s[i]).collect::<Vec<_>>()))
        .collect();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| per_instance[b].total_cmp(&per_instance[a]).then(a.cmp(&b)));
    let top_pair = match order.as_slice() {
        [a, b, ..] => (*a, *b),
        [a] => (*a, *a),
        [] => (0, 0),
    };
    let mean_window_stddev_s =
        mean(&windows.iter().map(|w| pstddev(&w.prefill_s)).collect::<Vec<_>>()).unwrap_or(0.0);
    ImbalanceProfile {
        windows,
        top_pair,
        degenerate: n < 2,
        mean_window_stddev_s,
    }
}

/// Keys of `summary.json`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Summary {
    pub policy: String,
    pub seed: u64,
    pub n_instances: usize,
    pub requests: usize,
    pub routed: u64,
    pub finished: u64,
    pub mean_ttft_ms: Option<f64>,
    pub p50_ttft_ms: Option<f64>,
    pub p95_ttft_ms: Option<f64>,
    pub p99_ttft_ms: Option<f64>,
    pub tpot_samples: usize,
    pub mean_tpot_ms: Option<f64>,
    pub p50_tpot_ms: Option<f64>,
    pub p95_tpot_ms: Option<f64>,
    pub p99_tpot_ms: Option<f64>,
    pub hit_ratio: f64,
    pub request_hit_ratio: f64,
    pub mean_bs: Vec<f64>,
    pub bs_spread: f64,
    pub prefill_window_stddev_s: f64,
    pub alarms: usize,
    pub end_s: f64,
    pub arrivals_hash: String,
}

pub fn summarize(report: &RunReport) -> Summary {
    let ttft = report.ttfts_ms();
    let tpot = report.tpots_ms();
    let pct = |s: &[f64], p| percentile(s, p).ok();
    Summary {
        policy: report.policy.clone(),
        seed: report.seed,
        n_instances: report.n_instances,
        requests: report.requests.len(),
        routed: report.routed,
        finished: report.finished,
        mean_ttft_ms: mean(&ttft),
        p50_ttft_ms: pct(&ttft, 50.0),
        p95_ttft_ms: pct(&ttft, 95.0),
        p99_ttft_ms: pct(&ttft, 99.0),
        tpot_samples: tpot.len(),
        mean_tpot_ms: mean(&tpot),
        p50_tpot_ms: pct(&tpot, 50.0),
        p95_tpot_ms: pct(&tpot, 95.0),
        p99_tpot_ms: pct(&tpot, 99.0),
        hit_ratio: report.hit_ratio(),
        request_hit_ratio: report.request_hit_ratio(),
        mean_bs: mean_bs(report),
        bs_spread: bs_spread(report),
        prefill_window_stddev_s: imbalance_profile(report, DEFAULT_WINDOW_S).mean_window_stddev_s,
        alarms: report.alarms.len(),
        end_s: report.end_us as f64 / 1e6,
        arrivals_hash: format!("{:016x}", report.arrivals_hash),
    }
}

fn opt(v: Option<impl std::fmt::Display>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

fn write_file(dir: &Path, name: &str, body: &str) -> Result<(), MetricsError> {
    let path = dir.join(name);
    fs::write(&path, body).map_err(|source| MetricsError::Io {
        path: path.display().to_string(),
        source,
    })
}

fn cdf_csv(series: &[f64]) -> String {
    let mut s = String::from("value_ms,cumulative_fraction\n");
    for (v, f) in cdf(series) {
        let _ = writeln!(s, "{v},{f}");
    }
    s
}

pub fn detector_csv(rows: &[DetectorRow]) -> String {
    let mut s = String::from(
        "window_end_s,class_key,arrivals,total_arrivals,x,x_over_xbar,m,m_bar,m_over_mbar,benign,phase\n",
    );
    for r in rows {
        let _ = writeln!(
            s,
            "{},{:016x},{},{},{},{},{},{},{},{},{}",
            r.window_end_s,
            r.class_key,
            r.arrivals,
            r.total_arrivals,
            r.x,
            r.x_over_xbar,
            r.m,
            r.m_bar,
            r.m_over_mbar,
            r.benign,
            r.phase
        );
    }
    s
}

/// Writes all export files into `out_dir`, creating it if needed.
pub fn export(report: &RunReport, out_dir: &Path) -> Result<Summary, MetricsError> {
    fs::create_dir_all(out_dir).map_err(|source| MetricsError::Io {
        path: out_dir.display().to_string(),
        source,
    })?;

    let mut s = String::from(
        "request_id,arrival_s,first_token_s,finish_s,ttft_ms,tpot_ms,input_tokens,output_tokens,hit_tokens,hit_ratio,instance,class_key,rerouted\n",
    );
    for r in &report.requests {
        let _ = writeln!(
            s,
            "{},{},{},{},{},{},{},{},{},{},{},{:016x},{}",
            r.request_id,
            r.arrival_us as f64 / 1e6,
            opt(r.first_token_us.map(|t| t as f64 / 1e6)),
            opt(r.finish_us.map(|t| t as f64 / 1e6)),
            opt(r.ttft_ms()),
            opt(r.tpot_ms()),
            r.input_tokens,
            r.output_tokens,
            r.hit_tokens,
            r.hit_ratio(),
            r.instance,
            r.class_key,
            r.rerouted
        );
    }
    write_file(out_dir, "requests.csv", &s)?;
    write_file(out_dir, "cdf_ttft.csv", &cdf_csv(&report.ttfts_ms()))?;
    write_file(out_dir, "cdf_tpot.csv", &cdf_csv(&report.tpots_ms()))?;

    let profile = imbalance_profile(report, DEFAULT_WINDOW_S);
    let mut hits = String::from("window_start_s,admissions,hit_tokens,input_tokens,hit_ratio\n");
    let mut imb = String::from("window_start_s,instance,prefill_s,mean_bs\n");
    for w in &profile.windows {
        let _ = writeln!(
            hits,
            "{},{},{},{},{}",
            w.window_start_s,
            w.admissions,
            w.hit_tokens,
            w.input_tokens,
            w.hit_ratio()
        );
        for i in 0..report.n_instances {
            let _ = writeln!(imb, "{},{},{},{}", w.window_start_s, i, w.prefill_s[i], w.mean_bs[i]);
        }
    }
    write_file(out_dir, "hit_timeline.csv", &hits)?;
    write_file(out_dir, "imbalance.csv", &imb)?;
    write_file(out_dir, "detector.csv", &detector_csv(&report.detector_rows))?;

    let summary = summarize(report);
    let json = serde_json::to_string_pretty(&summary).expect("summary serializes");
    write_file(out_dir, "summary.json", &(json + "\n"))?;
    Ok(summary)
}

pub const EXPORT_FILES: [&str; 7] = [
    "requests.csv",
    "cdf_ttft.csv",
    "cdf_tpot.csv",
    "hit_timeline.csv",
    "imbalance.csv",
    "detector.csv",
    "summary.json",
];
