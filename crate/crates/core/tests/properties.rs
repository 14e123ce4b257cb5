mod common;

use proptest::prelude::*;

use kvsched::detector::{estimate_bs_ratio, phase1_check, phase1_counts, Phase1};
use kvsched::hashing::chain_keys;
use kvsched::indicators::IndicatorSnapshot;
use kvsched::kvcache::{Capacity, PrefixCache};
use kvsched::policies::score_linear;
use kvsched::trace::{observed_rate, scale_trace, TraceRecord};

fn trace_from_gaps(gaps: &[f64]) -> Vec<TraceRecord> {
    let mut t = 0.0;
    gaps.iter()
        .enumerate()
        .map(|(i, g)| {
            t += g;
            TraceRecord {
                request_id: i as u64,
                arrival_s: t,
                prefix_blocks: vec![i as u64],
                input_tokens: 16,
                output_tokens: 1,
                class_label: None,
            }
        })
        .collect()
}

#[derive(Debug, Clone)]
enum Op {
    Insert(Vec<u64>),
    Touch(Vec<u64>),
    Pin(Vec<u64>),
    Unpin,
}

fn op() -> impl Strategy<Value = Op> {
    let blocks = || prop::collection::vec(0u64..3, 1..5);
    prop_oneof![
        3 => blocks().prop_map(Op::Insert),
        1 => blocks().prop_map(Op::Touch),
        1 => blocks().prop_map(Op::Pin),
        1 => Just(Op::Unpin),
    ]
}

proptest! {
    #[test]
    fn cache_stays_closed_and_bounded(cap in 4usize..16, ops in prop::collection::vec(op(), 1..60)) {
        let mut cache = PrefixCache::new(Capacity::Blocks(cap));
        let mut pins: Vec<(Vec<u64>, usize)> = Vec::new();
        for (now, op) in ops.into_iter().enumerate() {
            let pinned: usize = pins.iter().map(|p| p.1).sum();
            match op {
                Op::Insert(b) if pinned + b.len() <= cap => {
                    cache.insert(&b, now as u64).unwrap();
                }
                Op::Insert(_) => {}
                Op::Touch(b) => cache.touch(&b, now as u64),
                Op::Pin(b) => {
                    let keys = chain_keys(&b);
                    let k = cache.match_chain(&keys);
                    if k > 0 && pinned + k <= cap / 2 {
                        cache.pin_chain(&keys, k);
                        pins.push((keys, k));
                    }
                }
                Op::Unpin => {
                    if let Some((keys, k)) = pins.pop() {
                        cache.unpin_chain(&keys, k);
                    }
                }
            }
            prop_assert!(cache.occupancy() <= cap);
            prop_assert_eq!(cache.check_invariants(), Ok(()));
            for (keys, k) in &pins {
                prop_assert!(cache.match_chain(keys) >= *k);
            }
        }
    }

    #[test]
    fn freshly_inserted_chain_matches_fully(b in prop::collection::vec(any::<u64>(), 1..20)) {
        let mut cache = PrefixCache::new(Capacity::Blocks(64));
        cache.insert(&b, 0).unwrap();
        prop_assert_eq!(cache.match_prefix(&b), b.len());
        prop_assert_eq!(cache.match_prefix(&b[..1]), 1);
    }

    #[test]
    fn scaling_hits_the_target_and_is_idempotent(
        gaps in prop::collection::vec(0.001f64..5.0, 2..200),
        target in 0.01f64..1000.0,
    ) {
        let t = trace_from_gaps(&gaps);
        let once = scale_trace(&t, target).unwrap();
        let rate = observed_rate(&once).unwrap();
        prop_assert!((rate / target - 1.0).abs() < 1e-9);
        let twice = scale_trace(&once, target).unwrap();
        for (a, b) in once.iter().zip(&twice) {
            prop_assert!((a.arrival_s - b.arrival_s).abs() <= 1e-9 * a.arrival_s.max(1.0));
        }
        prop_assert!(once.windows(2).all(|w| w[0].arrival_s <= w[1].arrival_s));
    }

    #[test]
    fn benign_condition_bounds_the_ratio(
        m in 1usize..64,
        m_bar in 1usize..64,
        frac in 0.0f64..=1.0,
        qps in 0.0f64..500.0,
        bs0 in 0.0f64..100.0,
        t in 0.0f64..600.0,
    ) {
        let x = frac * m as f64 / (m + m_bar) as f64;
        prop_assume!(phase1_check(x, m, m_bar) == Phase1::Benign);
        let r = estimate_bs_ratio(x, qps, m, m_bar, bs0, t).unwrap();
        prop_assert!(r <= 1.0 + 1e-12, "ratio {}", r);
    }

    #[test]
    fn integer_and_float_phase1_agree(class in 0u64..1000, rest in 1u64..1000, m in 1usize..32, m_bar in 1usize..32) {
        let total = class + rest;
        let exact = phase1_counts(class, total, m, m_bar);
        // Float check only where the comparison is not razor-thin.
        let lhs = class as f64 * m_bar as f64;
        let rhs = rest as f64 * m as f64;
        prop_assume!((lhs - rhs).abs() > 1e-6 * rhs.max(1.0));
        let x = class as f64 / total as f64;
        prop_assert_eq!(exact, phase1_check(x, m, m_bar));
    }

    #[test]
    fn linear_score_is_monotone(
        bs in 0u32..300,
        extra in 1u32..50,
        hit in 0.0f64..1.0,
        more_hit in 0.0f64..1.0,
        lambda in 0.0f64..=1.0,
        norm in 1u32..256,
    ) {
        let snap = |bs| IndicatorSnapshot { bs, r_bs: bs, ..Default::default() };
        let base = score_linear(&snap(bs), hit, lambda, norm);
        prop_assert!(score_linear(&snap(bs + extra), hit, lambda, norm) >= base);
        let better = (hit + more_hit * (1.0 - hit)).min(1.0);
        prop_assert!(score_linear(&snap(bs), better, lambda, norm) <= base);
    }
}
