#![allow(dead_code)]

pub mod reference;

use kvsched::cluster::{CacheConfig, ClusterConfig, ProbeOptions};
use kvsched::kvcache::Capacity;
use kvsched::policies::{PolicyConfig, PolicySpec};
use kvsched::trace::{generate_synthetic, ClassSpec, LengthDist, SyntheticSpec, TraceRecord};

/// Eight equally likely classes with long shared heads.
pub fn s1_spec(seed: u64) -> SyntheticSpec {
    SyntheticSpec {
        duration_s: 300.0,
        mean_rate_rps: 10.0,
        classes: (0..8)
            .map(|_| ClassSpec {
                weight: 0.125,
                shared_prefix_blocks: 200,
                suffix_blocks: LengthDist::Uniform { min: 1, max: 8 },
                output_tokens: LengthDist::Uniform { min: 16, max: 128 },
            })
            .collect(),
        seed,
        block_size: 16,
    }
}

pub fn s1_trace(seed: u64) -> Vec<TraceRecord> {
    generate_synthetic(&s1_spec(seed)).unwrap()
}

pub fn s1_config(spec: PolicySpec, seed: u64) -> ClusterConfig {
    ClusterConfig {
        n_instances: 16,
        cache: CacheConfig {
            capacity: Capacity::Blocks(600),
            block_size: 16,
        },
        policy: PolicyConfig {
            spec,
            tie_break_seed: 0,
        },
        seed,
        ..Default::default()
    }
}

pub fn s1_probe_options() -> ProbeOptions {
    ProbeOptions {
        lo_rps: 1.0,
        hi_rps: 1000.0,
        iterations: 14,
    }
}

pub const HOT_PREFIX_BLOCKS: u64 = 196;

/// Hot-class scenario: one class is 20% of arrivals with 3.2k-token
/// prompts that share 98% of their blocks; the rest are unrelated prompts.
pub fn hotspot_trace(seed: u64, duration_s: f64, rate_rps: f64) -> Vec<TraceRecord> {
    use rand::{Rng, SeedableRng};
    use rand_distr::{Distribution, Exp};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let gap = Exp::new(rate_rps).unwrap();
    let mut t = 0.0;
    let mut out = Vec::new();
    let mut id = 0u64;
    loop {
        t += gap.sample(&mut rng);
        if t >= duration_s {
            break;
        }
        let hot = rng.random_bool(0.2);
        let blocks: Vec<u64> = if hot {
            (0..HOT_PREFIX_BLOCKS)
                .map(|b| 0xA000_0000 + b)
                .chain((0..4).map(|b| (id << 16) | 0x8000 | b))
                .collect()
        } else {
            (0..64).map(|b| (id << 16) | b).collect()
        };
        let input = blocks.len() as u32 * 16;
        out.push(TraceRecord {
            request_id: id,
            arrival_s: t,
            prefix_blocks: blocks,
            input_tokens: input,
            output_tokens: rng.random_range(128..=384),
            class_label: Some(hot as u64),
        });
        id += 1;
    }
    out
}

pub fn hot_prefix() -> Vec<u64> {
    (0..HOT_PREFIX_BLOCKS).map(|b| 0xA000_0000 + b).collect()
}
