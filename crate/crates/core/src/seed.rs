//! Named, splittable seed streams.
//!
//! A single run seed is split into independent substreams (data order,
//! parameter init, scene generation) so each consumer can be reproduced on
//! its own, independent of evaluation order.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn fnv1a(name: &str) -> u64 {
    name.bytes().fold(0xcbf2_9ce4_8422_2325u64, |h, b| {
        (h ^ b as u64).wrapping_mul(0x0000_0100_0000_01B3)
    })
}

/// Derives the seed of substream `(name, index)` from a root seed.
pub fn derive(root: u64, name: &str, index: u64) -> u64 {
    splitmix64(splitmix64(root ^ fnv1a(name)).wrapping_add(splitmix64(index)))
}

pub fn rng(root: u64, name: &str, index: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive(root, name, index))
}
