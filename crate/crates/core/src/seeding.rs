//! Counter-based seed derivation.
//!
//! All randomness in the crate flows from a single 64-bit seed. Substreams
//! are derived by mixing the root seed with fixed stream tags and indices,
//! so the value drawn for, say, outcome samples at `(x_index, omega_index)`
//! does not depend on evaluation order or thread scheduling.

use rand_chacha::ChaCha8Rng;
use rand_chacha::rand_core::SeedableRng;

/// Stream tags keep unrelated substreams disjoint. The values are arbitrary
/// but fixed: changing them changes every derived stream.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u64)]
pub enum Stream {
    WeightInit = 1,
    Shuffle = 2,
    TrainDropout = 3,
    ParamSample = 4,
    OutcomeSample = 5,
    DataGen = 6,
    Split = 7,
}

/// SplitMix64 finalizer; good avalanche behaviour for cheap key mixing.
fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Derive a child seed from `(seed, stream, index)`.
pub fn derive(seed: u64, stream: Stream, index: u64) -> u64 {
    mix(mix(seed ^ mix(stream as u64)) ^ index)
}

/// Derive a child seed keyed by two indices (e.g. `(x_index, omega_index)`).
pub fn derive2(seed: u64, stream: Stream, a: u64, b: u64) -> u64 {
    mix(derive(seed, stream, a) ^ mix(b))
}

/// Deterministic RNG for a derived seed.
pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}
