//! Simulation and routing-policy library for KV-cache-aware LLM serving.
//!
//! A trace of requests is replayed against a cluster of simulated
//! PD-colocated instances, each with a prefix KV cache. A global router
//! scores instances with one of several policies and an optional hotspot
//! detector overrides decisions that would pile one prompt class onto the
//! few instances that cache it.

pub mod cli;
pub mod cluster;
pub mod config;
pub mod detector;
pub mod engine;
pub mod hashing;
pub mod indicators;
pub mod kvcache;
pub mod metrics;
pub mod policies;
pub mod trace;

pub use cluster::{run, Cluster, ClusterConfig, ClusterError};
pub use metrics::RunReport;
pub use policies::{PolicyConfig, PolicySpec};
pub use trace::TraceRecord;
