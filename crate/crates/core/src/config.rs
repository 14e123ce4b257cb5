//! JSON run configuration. Every block and field is optional.
//!
//! ```json
//! {
//!   "cluster":    { "n_instances": 16, "staleness_ms": 0, "seed": 0 },
//!   "cost_model": { "prefill_base_ms": 5, "prefill_per_token_ms": 0.1, ... },
//!   "cache":      { "capacity": { "blocks": 40000 }, "block_size": 16 },
//!   "policy":     { "kind": "multiplicative", "tie_break_seed": 0 },
//!   "detector":   { "enabled": false, "window_s": 60, ... },
//!   "trace":      { "path": "trace.jsonl", "rate_rps": 20 }
//! }
//! ```
//!
//! `trace` takes either `path` or `synthetic` (a [`SyntheticSpec`]).

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::cluster::{CacheConfig, ClusterConfig};
use crate::detector::DetectorConfig;
use crate::engine::CostModel;
use crate::policies::PolicyConfig;
use crate::trace::{self, SyntheticSpec, TraceError, TraceRecord};

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read config {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("invalid config {path}: {source}")]
    Parse {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
    #[error("trace block must set exactly one of `path` and `synthetic`")]
    TraceSource,
    #[error(transparent)]
    Trace(#[from] TraceError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ClusterBlock {
    pub n_instances: usize,
    pub staleness_ms: f64,
    pub seed: u64,
}

impl Default for ClusterBlock {
    fn default() -> Self {
        let d = ClusterConfig::default();
        Self {
            n_instances: d.n_instances,
            staleness_ms: d.staleness_ms,
            seed: d.seed,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TraceBlock {
    pub path: Option<PathBuf>,
    pub synthetic: Option<SyntheticSpec>,
    /// Rescale arrivals to this mean rate.
    pub rate_rps: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FileConfig {
    pub cluster: ClusterBlock,
    pub cost_model: CostModel,
    pub cache: CacheConfig,
    pub policy: PolicyConfig,
    pub detector: DetectorConfig,
    pub trace: TraceBlock,
}

impl FileConfig {
    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        serde_json::from_str(&text).map_err(|source| ConfigError::Parse {
            path: path.to_path_buf(),
            source,
        })
    }

    pub fn cluster_config(&self) -> ClusterConfig {
        ClusterConfig {
            n_instances: self.cluster.n_instances,
            cost_model: self.cost_model.clone(),
            cache: self.cache.clone(),
            policy: self.policy.clone(),
            detector: self.detector.clone(),
            staleness_ms: self.cluster.staleness_ms,
            seed: self.cluster.seed,
        }
    }

    /// Loads or generates the configured trace and applies `rate_rps`.
    pub fn load_trace(&self) -> Result<Vec<TraceRecord>, ConfigError> {
        let records = match (&self.trace.path, &self.trace.synthetic) {
            (Some(p), None) => trace::load_trace(p)?,
            (None, Some(spec)) => trace::generate_synthetic(spec)?,
            _ => return Err(ConfigError::TraceSource),
        };
        match self.trace.rate_rps {
            Some(rate) if records.len() >= 2 => Ok(trace::scale_trace(&records, rate)?),
            _ => Ok(records),
        }
    }
}
