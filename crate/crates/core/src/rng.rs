//! Seeded random streams.
//!
//! Every stochastic step draws from a ChaCha8 stream keyed by the run seed
//! plus a small tag path (stage, epoch, image index, ...), so results do not
//! depend on evaluation order or thread scheduling.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

fn mix(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Derive an independent stream from `seed` and a tag path.
pub fn stream(seed: u64, tags: &[u64]) -> Rng {
    let mut state = mix(seed ^ 0x9e37_79b9_7f4a_7c15);
    for &t in tags {
        state = mix(state.wrapping_add(0x9e37_79b9_7f4a_7c15) ^ mix(t));
    }
    ChaCha8Rng::seed_from_u64(state)
}

pub fn seeded(seed: u64) -> Rng {
    ChaCha8Rng::seed_from_u64(seed)
}
