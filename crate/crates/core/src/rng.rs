//! Seeded random streams.
//!
//! Every consumer draws from its own ChaCha stream derived from one root seed,
//! so enabling or disabling one source of randomness never shifts another.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Named stream identifiers.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u64)]
pub enum Stream {
    PairSampling = 1,
    Beta = 2,
    BatchElement = 3,
    Shuffle = 4,
    Features = 5,
    Game = 6,
    Perturbation = 7,
}

pub fn stream(seed: u64, which: Stream) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(which as u64);
    rng
}

/// A stream keyed by an extra index, used when several independent draws of
/// the same kind are needed (e.g. one per class).
pub fn indexed_stream(seed: u64, which: Stream, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ index.wrapping_mul(0x9E37_79B9_7F4A_7C15));
    rng.set_stream(which as u64);
    rng
}
