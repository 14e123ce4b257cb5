//! Command-line front end: `run`, `compare`, `audit`, `probe` and `gen`.
//!
//! Exit codes: 0 on success, 1 on user or config errors, 2 when the
//! simulator detects a broken internal invariant.

use std::collections::HashSet;
use std::ffi::OsString;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use crate::cluster::{self, ClusterConfig, ClusterError, ProbeOptions};
use crate::config::FileConfig;
use crate::kvcache::Capacity;
use crate::metrics::{self, Summary};
use crate::policies::PolicySpec;
use crate::trace::{self, SyntheticSpec, TraceRecord};

pub const OUT_ENV: &str = "KVSCHED_OUT";

#[derive(Debug, Parser)]
#[command(name = "kvsched", version, about = "KV-cache-aware routing simulator")]
struct Cli {
    #[command(subcommand)]
    cmd: Command,
}

#[derive(Debug, Args)]
struct Common {
    /// JSON config file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// JSONL trace; overrides the config's trace block.
    #[arg(long)]
    trace: Option<PathBuf>,
    /// Policy, e.g. `vllm`, `linear:0.4`, `filter:4`, `simulate`, `multiplicative`.
    #[arg(long)]
    policy: Option<PolicySpec>,
    /// Rescale the trace to this mean arrival rate (requests/s).
    #[arg(long)]
    rate: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, env = OUT_ENV, default_value = "out")]
    out: PathBuf,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Simulate one policy and export metrics.
    Run(Common),
    /// Simulate several policies on the same arrivals.
    Compare {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_delimiter = ',', required = true)]
        policies: Vec<PolicySpec>,
        /// Rates as fractions of the probed capacity.
        #[arg(long, value_delimiter = ',')]
        rates: Vec<f64>,
    },
    /// Check the hotspot condition over a trace with unbounded caches.
    Audit {
        #[command(flatten)]
        common: Common,
        /// Assumed cluster size.
        #[arg(long, default_value_t = 16)]
        instances: usize,
    },
    /// Find the highest sustainable arrival rate for the trace shape.
    Probe {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value_t = ProbeOptions::default().lo_rps)]
        lo: f64,
        #[arg(long, default_value_t = ProbeOptions::default().hi_rps)]
        hi: f64,
    },
    /// Generate a synthetic trace.
    Gen {
        /// Synthetic spec as JSON; defaults to the config's `trace.synthetic`.
        #[arg(long)]
        spec: Option<PathBuf>,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        /// Output trace file.
        #[arg(long)]
        out: PathBuf,
    },
}

struct Resolved {
    cfg: ClusterConfig,
    trace: Vec<TraceRecord>,
}

fn resolve(c: &Common) -> Result<Resolved> {
    let mut file = match &c.config {
        Some(p) => FileConfig::load(p)?,
        None => FileConfig::default(),
    };
    if let Some(t) = &c.trace {
        file.trace.path = Some(t.clone());
        file.trace.synthetic = None;
    }
    if let Some(r) = c.rate {
        file.trace.rate_rps = Some(r);
    }
    if let Some(p) = &c.policy {
        file.policy.spec = p.clone();
    }
    if let Some(s) = c.seed {
        file.cluster.seed = s;
    }
    let cfg = file.cluster_config();
    cfg.validate()?;
    let trace = file.load_trace()?;
    Ok(Resolved { cfg, trace })
}

fn summary_line(s: &Summary) -> String {
    format!(
        "{}: {} requests, mean TTFT {:.3} ms, P99 TTFT {:.3} ms, mean TPOT {:.3} ms, hit ratio {:.4}",
        s.policy,
        s.requests,
        s.mean_ttft_ms.unwrap_or(0.0),
        s.p99_ttft_ms.unwrap_or(0.0),
        s.mean_tpot_ms.unwrap_or(0.0),
        s.hit_ratio
    )
}

fn cmd_run(c: &Common) -> Result<()> {
    let r = resolve(c)?;
    let report = cluster::run(&r.trace, &r.cfg)?;
    let s = metrics::export(&report, &c.out)?;
    println!("{}", summary_line(&s));
    println!("wrote {}", c.out.display());
    Ok(())
}

fn compare_csv(rows: &[Summary]) -> String {
    let mut s = String::from(
        "policy,mean_ttft_ms,p50_ttft_ms,p95_ttft_ms,p99_ttft_ms,mean_tpot_ms,p50_tpot_ms,p95_tpot_ms,p99_tpot_ms,hit_ratio,bs_spread,arrivals_hash\n",
    );
    let o = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
    for r in rows {
        let _ = writeln!(
            s,
            "{},{},{},{},{},{},{},{},{},{},{},{}",
            r.policy,
            o(r.mean_ttft_ms),
            o(r.p50_ttft_ms),
            o(r.p95_ttft_ms),
            o(r.p99_ttft_ms),
            o(r.mean_tpot_ms),
            o(r.p50_tpot_ms),
            o(r.p95_tpot_ms),
            o(r.p99_tpot_ms),
            r.hit_ratio,
            r.bs_spread,
            r.arrivals_hash
        );
    }
    s
}

fn compare_at(trace: &[TraceRecord], cfg: &ClusterConfig, policies: &[PolicySpec], out: &Path) -> Result<()> {
    let mut rows = Vec::new();
    for p in policies {
        let report = cluster::run(trace, &cfg.with_policy(p.clone()))?;
        let s = metrics::export(&report, &out.join(p.label()))?;
        println!("{}", summary_line(&s));
        rows.push(s);
    }
    if rows.windows(2).any(|w| w[0].arrivals_hash != w[1].arrivals_hash) {
        return Err(ClusterError::Invariant("policies saw different arrival streams".into()).into());
    }
    let path = out.join("compare.csv");
    fs::write(&path, compare_csv(&rows)).with_context(|| format!("cannot write {}", path.display()))?;
    Ok(())
}

fn cmd_compare(c: &Common, policies: &[PolicySpec], rates: &[f64]) -> Result<()> {
    if policies.len() < 2 {
        bail!("compare needs at least two policies");
    }
    let mut seen = HashSet::new();
    for p in policies {
        if !seen.insert(p.label()) {
            bail!("duplicate policy '{}'", p.label());
        }
    }
    let r = resolve(c)?;
    if rates.is_empty() {
        return compare_at(&r.trace, &r.cfg, policies, &c.out);
    }
    if let Some(f) = rates.iter().find(|f| !(f.is_finite() && **f > 0.0)) {
        bail!("rate fractions must be positive, got {f}");
    }
    let probe_cfg = r.cfg.with_policy(PolicySpec::Vllm { q_weight: 1.0 });
    let cap = cluster::probe_capacity(&r.trace, &probe_cfg, ProbeOptions::default())?;
    println!("probed capacity: {cap:.4} req/s");
    for f in rates {
        let t = trace::scale_trace(&r.trace, f * cap)?;
        let dir = c.out.join(format!("rate_{f}"));
        println!("rate {f} x capacity = {:.4} req/s", f * cap);
        compare_at(&t, &r.cfg, policies, &dir)?;
    }
    Ok(())
}

/// Audit result: the first non-benign window row, if any.
pub fn audit_verdict(rows: &[crate::detector::DetectorRow]) -> Option<&crate::detector::DetectorRow> {
    rows.iter().find(|r| !r.benign)
}

fn cmd_audit(c: &Common, instances: usize) -> Result<()> {
    let mut r = resolve(c)?;
    r.cfg.n_instances = instances;
    r.cfg.cache.capacity = Capacity::Infinite;
    r.cfg.detector.enabled = true;
    r.cfg.detector.mitigate = false;
    if c.policy.is_none() {
        r.cfg.policy.spec = PolicySpec::default();
    }
    r.cfg.validate()?;
    let report = cluster::run(&r.trace, &r.cfg)?;
    fs::create_dir_all(&c.out).with_context(|| format!("cannot create {}", c.out.display()))?;
    let path = c.out.join("detector.csv");
    fs::write(&path, metrics::detector_csv(&report.detector_rows))
        .with_context(|| format!("cannot write {}", path.display()))?;
    match audit_verdict(&report.detector_rows) {
        None => println!(
            "benign everywhere ({} class windows checked)",
            report.detector_rows.len()
        ),
        Some(row) => println!(
            "violation: class {:016x} at {} s (x/x̄ = {:.4} > |M|/|M̄| = {:.4})",
            row.class_key, row.window_end_s, row.x_over_xbar, row.m_over_mbar
        ),
    }
    Ok(())
}

fn cmd_probe(c: &Common, lo: f64, hi: f64) -> Result<()> {
    if !(lo > 0.0 && hi > lo) {
        bail!("need 0 < lo < hi");
    }
    let r = resolve(c)?;
    let opts = ProbeOptions {
        lo_rps: lo,
        hi_rps: hi,
        ..Default::default()
    };
    let cap = cluster::probe_capacity(&r.trace, &r.cfg, opts)?;
    println!("{cap}");
    Ok(())
}

fn cmd_gen(spec: Option<&Path>, config: Option<&Path>, seed: Option<u64>, out: &Path) -> Result<()> {
    let mut s: SyntheticSpec = match (spec, config) {
        (Some(p), _) => {
            let text = fs::read_to_string(p).with_context(|| format!("cannot read {}", p.display()))?;
            serde_json::from_str(&text).with_context(|| format!("invalid spec {}", p.display()))?
        }
        (None, Some(p)) => FileConfig::load(p)?
            .trace
            .synthetic
            .with_context(|| format!("{} has no trace.synthetic block", p.display()))?,
        (None, None) => bail!("gen needs --spec or --config"),
    };
    if let Some(seed) = seed {
        s.seed = seed;
    }
    let records = trace::generate_synthetic(&s)?;
    trace::write_trace(out, &records)?;
    println!("wrote {} requests to {}", records.len(), out.display());
    Ok(())
}

fn exit_code(err: &anyhow::Error) -> i32 {
    match err.downcast_ref::<ClusterError>() {
        Some(ClusterError::Invariant(_)) => 2,
        _ => 1,
    }
}

/// Runs the CLI on `args` (including the program name) and returns the
/// process exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 1 } else { 0 };
        }
    };
    let result = match &cli.cmd {
        Command::Run(c) => cmd_run(c),
        Command::Compare {
            common,
            policies,
            rates,
        } => cmd_compare(common, policies, rates),
        Command::Audit { common, instances } => cmd_audit(common, *instances),
        Command::Probe { common, lo, hi } => cmd_probe(common, *lo, *hi),
        Command::Gen {
            spec,
            config,
            seed,
            out,
        } => cmd_gen(spec.as_deref(), config.as_deref(), *seed, out),
    };
    match result {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e:#}");
            exit_code(&e)
        }
    }
}
