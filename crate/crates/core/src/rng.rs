//! Deterministic per-replica random streams.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn hash_tag(tag: &str) -> u64 {
    // FNV-1a, stable across platforms and releases
    tag.bytes().fold(0xcbf2_9ce4_8422_2325u64, |h, b| (h ^ b as u64).wrapping_mul(0x100_0000_01b3))
}

/// Seed for replica `index` of stream `tag` under `root`.
pub fn derive_seed(root: u64, tag: &str, index: u64) -> u64 {
    splitmix(splitmix(root ^ hash_tag(tag)).wrapping_add(index))
}

pub fn stream(root: u64, tag: &str, index: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(root, tag, index))
}
