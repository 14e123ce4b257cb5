//! Stable 64-bit mixing used for prefix chains, class keys and synthetic
//! block identities. Must not depend on process-random state.

/// SplitMix64 finalizer.
#[inline]
pub fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Order-sensitive combination of two words.
#[inline]
pub fn combine(parent: u64, value: u64) -> u64 {
    splitmix64(parent.rotate_left(23) ^ splitmix64(value))
}

/// Root of every prefix chain.
pub const CHAIN_ROOT: u64 = 0x6b76_7363_6865_6421;

/// Running chain keys: element `i` identifies the prefix `blocks[..=i]`.
pub fn chain_keys(blocks: &[u64]) -> Vec<u64> {
    let mut key = CHAIN_ROOT;
    blocks
        .iter()
        .map(|&b| {
            key = combine(key, b);
            key
        })
        .collect()
}
