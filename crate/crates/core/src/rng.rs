//! Seed derivation for independent random streams.
//!
//! Every stream is keyed by `(seed, role, owner, index)` and mixed with the
//! SplitMix64 finaliser:
//!
//! ```text
//! mix(z) = z ^= z >> 30; z *= 0xBF58476D1CE4E5B9;
//!          z ^= z >> 27; z *= 0x94D049BB133111EB; z ^= z >> 31
//! h0 = mix(seed + 0x9E3779B97F4A7C15)
//! h1 = mix(h0 ^ role), h2 = mix(h1 ^ owner), h3 = mix(h2 ^ index)
//! ```
//!
//! with wrapping arithmetic. `h3` seeds a ChaCha8 generator. The scheme is
//! platform independent, so a client's stream never depends on how many
//! workers run the round.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type StreamRng = ChaCha8Rng;

const GOLDEN: u64 = 0x9E37_79B9_7F4A_7C15;

/// What a random stream is used for.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
#[repr(u64)]
pub enum Role {
    Task = 1,
    ClientData = 2,
    AdapterInit = 3,
    LocalTrain = 4,
    Target = 5,
    Shadow = 6,
    Evaluation = 7,
    Poison = 8,
}

pub fn mix64(mut z: u64) -> u64 {
    z ^= z >> 30;
    z = z.wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z ^= z >> 27;
    z = z.wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub fn derive_seed(seed: u64, role: Role, owner: u64, index: u64) -> u64 {
    let h0 = mix64(seed.wrapping_add(GOLDEN));
    let h1 = mix64(h0 ^ role as u64);
    let h2 = mix64(h1 ^ owner);
    mix64(h2 ^ index)
}

pub fn stream(seed: u64, role: Role, owner: u64, index: u64) -> StreamRng {
    StreamRng::seed_from_u64(derive_seed(seed, role, owner, index))
}
