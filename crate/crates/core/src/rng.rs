//! Seeded RNG streams.
//!
//! Every consumer of randomness in a run draws from its own ChaCha stream
//! derived from the master seed, so structurally different configurations
//! (number of uncertainty-set members, robustness mode) cannot shift each
//! other's draws. ChaCha output is stable across platforms and releases,
//! which is what makes result files bit-reproducible.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Purpose of a derived stream within one seeded run.
#[derive(Debug, Clone, Copy)]
pub enum Stream {
    PolicyInit = 1,
    CriticInit = 2,
    Acting = 3,
    Minibatch = 4,
    TargetNoise = 5,
    ImprovementSampling = 6,
    Eval = 7,
    DomainRandomization = 8,
    Data = 9,
}

/// splitmix64 finalizer; decorrelates nearby (seed, stream) pairs.
pub fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Independent stream `stream` of master seed `seed`.
pub fn stream_rng(seed: u64, stream: Stream) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(splitmix64(seed.wrapping_add(splitmix64(stream as u64))))
}
