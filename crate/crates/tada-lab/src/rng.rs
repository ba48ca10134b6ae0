//! Deterministic, splittable RNG substreams.
//!
//! Every random draw in the crate comes from a substream keyed by
//! `(master seed, purpose tag, index)`, so each dataset, generated point,
//! and Monte Carlo trial has its own independent stream that can be
//! re-derived regardless of evaluation order. This is what makes seed
//! parallelism safe and reruns bit-identical.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h = 0xcbf2_9ce4_8422_2325u64;
    for &b in bytes {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

/// ChaCha8 stream for `(master, tag, index)`.
pub fn substream(master: u64, tag: &str, index: u64) -> ChaCha8Rng {
    let mut state = splitmix(master);
    state = splitmix(state ^ fnv1a(tag.as_bytes()));
    state = splitmix(state ^ index);
    let mut seed = [0u8; 32];
    for chunk in seed.chunks_exact_mut(8) {
        state = splitmix(state);
        chunk.copy_from_slice(&state.to_le_bytes());
    }
    ChaCha8Rng::from_seed(seed)
}

/// Fresh 64-bit seed for `(master, tag, index)`, for components that take
/// their own master seed.
pub fn derive_seed(master: u64, tag: &str, index: u64) -> u64 {
    splitmix(splitmix(splitmix(master) ^ fnv1a(tag.as_bytes())) ^ index)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::RngCore;

    #[test]
    fn substreams_are_deterministic() {
        let mut a = substream(7, "noise", 3);
        let mut b = substream(7, "noise", 3);
        for _ in 0..16 {
            assert_eq!(a.next_u64(), b.next_u64());
        }
    }

    #[test]
    fn substreams_differ_by_tag_and_index() {
        let mut base = substream(7, "noise", 3);
        let mut other_tag = substream(7, "label", 3);
        let mut other_index = substream(7, "noise", 4);
        let mut other_master = substream(8, "noise", 3);
        let x = base.next_u64();
        assert_ne!(x, other_tag.next_u64());
        assert_ne!(x, other_index.next_u64());
        assert_ne!(x, other_master.next_u64());
    }

    #[test]
    fn derived_seeds_are_stable_and_distinct() {
        assert_eq!(derive_seed(1, "a", 0), derive_seed(1, "a", 0));
        assert_ne!(derive_seed(1, "a", 0), derive_seed(1, "a", 1));
        assert_ne!(derive_seed(1, "a", 0), derive_seed(1, "b", 0));
    }
}
