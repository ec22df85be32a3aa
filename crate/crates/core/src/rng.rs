//! Seeded random streams.
//!
//! Every consumer of randomness draws from its own ChaCha stream derived from
//! the run seed, a purpose tag and an index (usually the epoch). Streams never
//! share state, so enabling one branch of training cannot shift the random
//! numbers seen by another, and a resumed run regenerates the same streams.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

/// Purpose tags for the independent streams used across the crate.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
#[repr(u64)]
pub enum Stream {
    ClassifierInit = 1,
    FlowInit = 2,
    PriorInit = 3,
    Shuffle = 4,
    Dequantize = 5,
    PriorNoise = 6,
    Select = 7,
    FlowShuffle = 8,
    FlowDequantize = 9,
    Data = 10,
    Jitter = 11,
    Projection = 12,
    Misc = 13,
}

pub fn stream(seed: u64, purpose: Stream, index: u64) -> Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(((purpose as u64) << 40) ^ index);
    rng
}
