//! Named seed splits.
//!
//! Every random stream in the engine is derived from one master seed by
//! hashing a stream name and an index, so adding a consumer never shifts the
//! draws of another and parallel work can be scheduled in any order.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Derives the seed of stream `name[index]` from `master`.
pub fn split(master: u64, name: &str, index: u64) -> u64 {
    // FNV-1a over the name, then mixed with master and index.
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in name.bytes() {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    splitmix64(splitmix64(master ^ h).wrapping_add(index))
}

pub fn rng(seed: u64) -> Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn stream(master: u64, name: &str, index: u64) -> Rng {
    rng(split(master, name, index))
}
