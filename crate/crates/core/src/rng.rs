//! Seed splitting.
//!
//! Every run is driven by one 64-bit master seed. Named sub-streams are
//! derived as `splitmix64(master ^ fnv1a64(name))`, and indexed children
//! (episode `i` of the `eval` stream, say) as
//! `splitmix64(parent ^ splitmix64(i + 1))`. Each derived seed keys a
//! `ChaCha8Rng`.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub const DATA_STREAM: &str = "data";
pub const TRAIN_STREAM: &str = "train";
pub const EVAL_STREAM: &str = "eval";

const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;

pub fn fnv1a64(bytes: &[u8]) -> u64 {
    bytes
        .iter()
        .fold(FNV_OFFSET, |h, &b| (h ^ b as u64).wrapping_mul(FNV_PRIME))
}

pub fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Seed of the named sub-stream of `master`.
pub fn derive_seed(master: u64, name: &str) -> u64 {
    splitmix64(master ^ fnv1a64(name.as_bytes()))
}

/// Seed of the `index`-th child of `parent`.
pub fn child_seed(parent: u64, index: u64) -> u64 {
    splitmix64(parent ^ splitmix64(index.wrapping_add(1)))
}

pub fn stream(master: u64, name: &str) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(master, name))
}

pub fn child_stream(parent: u64, index: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(child_seed(parent, index))
}
