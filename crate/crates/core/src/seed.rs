//! Deterministic sub-seed derivation.
//!
//! Every random choice in a run (weight init, exemplar selection, shuffling,
//! synthetic data) draws from a named stream derived from the single
//! experiment seed, so two runs with the same config are bit-identical.

/// Derives a child seed from `master` for the stream named `tag` at `index`.
///
/// FNV-1a over the tag bytes, mixed with the master seed and index, then a
/// splitmix64 finalizer. Stable across platforms.
pub fn derive_seed(master: u64, tag: &str, index: u64) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in tag.as_bytes() {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h ^= master.rotate_left(17);
    h = h.wrapping_mul(0x0000_0100_0000_01b3);
    h ^= index;
    splitmix64(h)
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}
