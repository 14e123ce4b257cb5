//! Brute-force reference simulator for small scenarios: multiplicative
//! routing, unbounded prefix caches kept as sets of block prefixes, and
//! step effects applied when the step ends.

use std::collections::HashSet;

pub struct RefCost {
    pub prefill_base_ms: f64,
    pub prefill_per_token_ms: f64,
    pub decode_base_ms: f64,
    pub decode_per_seq_ms: f64,
    pub decode_per_ctx_token_ms: f64,
    pub chunk_tokens: u64,
    pub max_batch: usize,
}

#[derive(Clone)]
pub struct RefReq {
    pub id: u64,
    pub arrival_us: u64,
    pub blocks: Vec<u64>,
    pub input: u64,
    pub output: u64,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RefOutcome {
    pub id: u64,
    pub instance: usize,
    pub first_token_us: u64,
    pub finish_us: u64,
}

struct Waiting {
    idx: usize,
    left: u64,
}

struct Decoding {
    idx: usize,
    generated: u64,
}

struct Step {
    end: u64,
    decode: Vec<usize>,
    prefill: Vec<(usize, u64)>,
}

#[derive(Default)]
struct Inst {
    prefixes: HashSet<Vec<u64>>,
    waiting: Vec<Waiting>,
    decoding: Vec<Decoding>,
    step: Option<Step>,
}

fn us(ms: f64) -> u64 {
    (ms * 1000.0).round() as u64
}

pub fn simulate(reqs: &[RefReq], n: usize, c: &RefCost, block_size: u64, tie_seed: u64) -> Vec<RefOutcome> {
    let mut insts: Vec<Inst> = (0..n).map(|_| Inst::default()).collect();
    let mut out: Vec<RefOutcome> = reqs
        .iter()
        .map(|r| RefOutcome {
            id: r.id,
            instance: usize::MAX,
            first_token_us: 0,
            finish_us: 0,
        })
        .collect();
    let mut ties = tie_seed;
    let mut next = 0;
    loop {
        let t_arr = reqs.get(next).map(|r| r.arrival_us);
        let t_step = insts.iter().filter_map(|i| i.step.as_ref().map(|s| s.end)).min();
        let now = match (t_arr, t_step) {
            (None, None) => break,
            (Some(a), None) => a,
            (None, Some(s)) => s,
            (Some(a), Some(s)) => a.min(s),
        };

        // Arrivals first.
        while next < reqs.len() && reqs[next].arrival_us == now {
            let r = &reqs[next];
            let mut scores = Vec::new();
            for inst in &insts {
                let mut hit = 0;
                while hit < r.blocks.len() && inst.prefixes.contains(&r.blocks[..hit + 1]) {
                    hit += 1;
                }
                let hit_tokens = (hit as u64 * block_size).min(r.input);
                let new = (r.input - hit_tokens).max(1);
                let pending: u64 = inst.waiting.iter().map(|w| w.left).sum();
                let bs = (inst.waiting.len() + inst.decoding.len()) as u64;
                scores.push(((pending + new) * bs.max(1), new));
            }
            let best = scores.iter().map(|s| s.0).min().unwrap();
            let tied: Vec<usize> = (0..n).filter(|&i| scores[i].0 == best).collect();
            let pick = if tied.len() == 1 {
                tied[0]
            } else {
                let p = tied[(ties % tied.len() as u64) as usize];
                ties += 1;
                p
            };
            insts[pick].waiting.push(Waiting {
                idx: next,
                left: scores[pick].1,
            });
            out[next].instance = pick;
            next += 1;
        }

        // Finish steps ending now.
        for inst in insts.iter_mut() {
            if inst.step.as_ref().is_some_and(|s| s.end == now) {
                let step = inst.step.take().unwrap();
                let mut done = Vec::new();
                inst.decoding.retain_mut(|d| {
                    if step.decode.contains(&d.idx) {
                        d.generated += 1;
                        if d.generated == reqs[d.idx].output {
                            done.push(d.idx);
                            return false;
                        }
                    }
                    true
                });
                for (idx, take) in &step.prefill {
                    let w = inst.waiting.iter_mut().find(|w| w.idx == *idx).unwrap();
                    w.left -= take;
                }
                let mut still = Vec::new();
                for w in inst.waiting.drain(..) {
                    if w.left == 0 {
                        out[w.idx].first_token_us = now;
                        if reqs[w.idx].output == 1 {
                            done.push(w.idx);
                        } else {
                            inst.decoding.push(Decoding {
                                idx: w.idx,
                                generated: 1,
                            });
                        }
                    } else {
                        still.push(w);
                    }
                }
                inst.waiting = still;
                for idx in done {
                    out[idx].finish_us = now;
                    let b = &reqs[idx].blocks;
                    for k in 1..=b.len() {
                        inst.prefixes.insert(b[..k].to_vec());
                    }
                }
            }
        }

        // Start steps on idle instances.
        for inst in insts.iter_mut() {
            if inst.step.is_some() || (inst.waiting.is_empty() && inst.decoding.is_empty()) {
                continue;
            }
            let decode: Vec<usize> = inst.decoding.iter().take(c.max_batch).map(|d| d.idx).collect();
            let ctx: u64 = inst
                .decoding
                .iter()
                .take(c.max_batch)
                .map(|d| reqs[d.idx].input + d.generated)
                .sum();
            let mut budget = c.chunk_tokens.saturating_sub(decode.len() as u64);
            let mut prefill = Vec::new();
            for w in &inst.waiting {
                if budget == 0 || decode.len() + prefill.len() >= c.max_batch {
                    break;
                }
                let take = w.left.min(budget);
                prefill.push((w.idx, take));
                budget -= take;
            }
            let tokens: u64 = prefill.iter().map(|p| p.1).sum();
            let mut dur = 0;
            if tokens > 0 {
                dur += us(c.prefill_base_ms + c.prefill_per_token_ms * tokens as f64);
            }
            if !decode.is_empty() {
                dur += us(c.decode_base_ms
                    + c.decode_per_seq_ms * decode.len() as f64
                    + c.decode_per_ctx_token_ms * ctx as f64);
            }
            inst.step = Some(Step {
                end: now + dur,
                decode,
                prefill,
            });
        }
    }
    out
}
