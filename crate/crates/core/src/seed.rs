//! Deterministic seed derivation.
//!
//! Every random draw in the crate comes from a `ChaCha8Rng` whose seed is
//! derived from a base seed plus a list of string tags (subject id, node
//! names, stage name). Work items therefore get the same stream no matter
//! which thread runs them or in what order.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Mix a base seed with a sequence of tags.
pub fn derive(base: u64, tags: &[&str]) -> u64 {
    let mut h = splitmix64(base);
    for tag in tags {
        let mut f = FNV_OFFSET;
        for b in tag.as_bytes() {
            f ^= u64::from(*b);
            f = f.wrapping_mul(FNV_PRIME);
        }
        // separator so that ["ab","c"] and ["a","bc"] differ
        f ^= 0xff;
        f = f.wrapping_mul(FNV_PRIME);
        h = splitmix64(h ^ f);
    }
    h
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn derive_rng(base: u64, tags: &[&str]) -> ChaCha8Rng {
    rng(derive(base, tags))
}
