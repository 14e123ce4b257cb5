//! Per-instance prefix KV cache model.
//!
//! Entries are keyed by the running hash of a block prefix (see
//! [`crate::hashing::chain_keys`]) instead of an explicit radix tree; a
//! chain of length `k` is present only if all its shorter prefixes are.
//! Eviction is LRU on last-touch time with deeper chains going first on
//! ties, which always removes a leaf.

use std::cmp::Reverse;
use std::collections::{BTreeSet, HashMap};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::hashing::chain_keys;

pub const DEFAULT_CAPACITY_BLOCKS: usize = 40_000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Capacity {
    Blocks(usize),
    Infinite,
}

impl Default for Capacity {
    fn default() -> Self {
        Capacity::Blocks(DEFAULT_CAPACITY_BLOCKS)
    }
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum CacheError {
    #[error("pinned blocks ({pinned}) exceed cache capacity ({capacity})")]
    CapacityExhausted { pinned: usize, capacity: usize },
}

#[derive(Debug, Clone, Copy)]
struct Entry {
    parent: Option<u64>,
    last_touch: u64,
    depth: u32,
    pins: u32,
}

type LruKey = (u64, Reverse<u32>, u64);

#[derive(Debug, Clone)]
pub struct PrefixCache {
    entries: HashMap<u64, Entry>,
    /// Unpinned entries in eviction order.
    lru: BTreeSet<LruKey>,
    capacity: Capacity,
}

impl PrefixCache {
    pub fn new(capacity: Capacity) -> Self {
        Self {
            entries: HashMap::new(),
            lru: BTreeSet::new(),
            capacity,
        }
    }

    pub fn capacity(&self) -> Capacity {
        self.capacity
    }

    /// Changes the capacity, evicting as needed.
    pub fn set_capacity(&mut self, capacity: Capacity) -> Result<usize, CacheError> {
        self.capacity = capacity;
        self.evict_to_capacity()
    }

    pub fn occupancy(&self) -> usize {
        self.entries.len()
    }

    pub fn pinned_blocks(&self) -> usize {
        self.entries.len() - self.lru.len()
    }

    /// Length of the longest cached prefix of `blocks`.
    pub fn match_prefix(&self, blocks: &[u64]) -> usize {
        self.match_chain(&chain_keys(blocks))
    }

    /// Like [`match_prefix`](Self::match_prefix) over precomputed chain keys.
    pub fn match_chain(&self, chain: &[u64]) -> usize {
        chain
            .iter()
            .take_while(|k| self.entries.contains_key(k))
            .count()
    }

    pub fn contains_chain(&self, key: u64) -> bool {
        self.entries.contains_key(&key)
    }

    pub fn insert(&mut self, blocks: &[u64], now: u64) -> Result<usize, CacheError> {
        self.insert_chain(&chain_keys(blocks), now)
    }

    /// Makes every prefix of `chain` present with last-touch `now`, then
    /// evicts down to capacity. Returns the number of evicted blocks.
    pub fn insert_chain(&mut self, chain: &[u64], now: u64) -> Result<usize, CacheError> {
        for (i, &key) in chain.iter().enumerate() {
            match self.entries.get_mut(&key) {
                Some(e) => {
                    let t = e.last_touch.max(now);
                    if e.pins == 0 {
                        self.lru.remove(&(e.last_touch, Reverse(e.depth), key));
                        self.lru.insert((t, Reverse(e.depth), key));
                    }
                    e.last_touch = t;
                }
                None => {
                    let depth = i as u32 + 1;
                    self.entries.insert(
                        key,
                        Entry {
                            parent: i.checked_sub(1).map(|p| chain[p]),
                            last_touch: now,
                            depth,
                            pins: 0,
                        },
                    );
                    self.lru.insert((now, Reverse(depth), key));
                }
            }
        }
        self.evict_to_capacity()
    }

    fn evict_to_capacity(&mut self) -> Result<usize, CacheError> {
        let Capacity::Blocks(cap) = self.capacity else {
            return Ok(0);
        };
        let mut evicted = 0;
        while self.entries.len() > cap {
            match self.lru.pop_first() {
                Some((_, _, key)) => {
                    self.entries.remove(&key);
                    evicted += 1;
                }
                None => {
                    return Err(CacheError::CapacityExhausted {
                        pinned: self.pinned_blocks(),
                        capacity: cap,
                    })
                }
            }
        }
        Ok(evicted)
    }

    pub fn touch(&mut self, blocks: &[u64], now: u64) {
        self.touch_chain(&chain_keys(blocks), now)
    }

    /// Refreshes last-touch on the matched part of `chain`.
    pub fn touch_chain(&mut self, chain: &[u64], now: u64) {
        for key in chain {
            let Some(e) = self.entries.get_mut(key) else {
                break;
            };
            let t = e.last_touch.max(now);
            if e.pins == 0 && t != e.last_touch {
                self.lru.remove(&(e.last_touch, Reverse(e.depth), *key));
                self.lru.insert((t, Reverse(e.depth), *key));
            }
            e.last_touch = t;
        }
    }

    /// Pins the first `len` chains; they must be present.
    pub fn pin_chain(&mut self, chain: &[u64], len: usize) {
        for key in &chain[..len] {
            let e = self
                .entries
                .get_mut(key)
                .expect("pinning a chain that is not cached");
            if e.pins == 0 {
                self.lru.remove(&(e.last_touch, Reverse(e.depth), *key));
            }
            e.pins += 1;
        }
    }

    pub fn unpin_chain(&mut self, chain: &[u64], len: usize) {
        for key in &chain[..len] {
            let e = self
                .entries
                .get_mut(key)
                .expect("unpinning a chain that is not cached");
            debug_assert!(e.pins > 0);
            e.pins -= 1;
            if e.pins == 0 {
                self.lru.insert((e.last_touch, Reverse(e.depth), *key));
            }
        }
    }

    /// Checks prefix closure, the capacity bound and the LRU index.
    /// `O(n)`; meant for tests and debug runs.
    pub fn check_invariants(&self) -> Result<(), String> {
        if let Capacity::Blocks(cap) = self.capacity {
            if self.entries.len() > cap && !self.lru.is_empty() {
                return Err(format!(
                    "occupancy {} exceeds capacity {cap} with evictable entries",
                    self.entries.len()
                ));
            }
        }
        for (key, e) in &self.entries {
            if let Some(parent) = e.parent {
                match self.entries.get(&parent) {
                    None => return Err(format!("chain {key:#x} present without its parent")),
                    Some(p) if e.pins > p.pins => {
                        return Err(format!("chain {key:#x} pinned more than its parent"))
                    }
                    _ => {}
                }
            }
        }
        let unpinned = self.entries.values().filter(|e| e.pins == 0).count();
        if unpinned != self.lru.len() {
            return Err("lru index out of sync with entries".into());
        }
        Ok(())
    }
}
