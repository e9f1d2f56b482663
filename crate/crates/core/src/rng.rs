//! Seed derivation. Every random stream in the pipeline is a ChaCha stream
//! keyed by the experiment seed plus a purpose tag, so stages never share
//! generator state.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub fn derive(seed: u64, tag: &str) -> u64 {
    tag.bytes().fold(splitmix(seed), |h, b| splitmix(h ^ u64::from(b)))
}

pub fn stream(seed: u64, tag: &str) -> Rng {
    ChaCha8Rng::seed_from_u64(derive(seed, tag))
}

/// Stream keyed by a seed, a tag and an index (trial number, repeat, ...).
pub fn indexed(seed: u64, tag: &str, index: u64) -> Rng {
    ChaCha8Rng::seed_from_u64(splitmix(derive(seed, tag) ^ splitmix(index)))
}
