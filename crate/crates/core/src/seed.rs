//! Seed derivation for independent, reproducible random streams.
//!
//! Every stochastic decision in a run draws from a ChaCha8 stream keyed by
//! `(run seed, stream, entity, index)`, so results never depend on the order
//! in which threads happen to execute.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Purpose of a random stream.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
#[repr(u64)]
pub enum Stream {
    /// Model parameter initialisation.
    Init = 1,
    /// Per-epoch shuffling of a client's training samples.
    Shuffle = 2,
    /// Client selection for a communication round.
    Sampling = 3,
    /// Synthetic household generation.
    Synthetic = 4,
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Mixes the run seed with a stream tag, an entity id and an index.
pub fn derive(seed: u64, stream: Stream, entity: u64, index: u64) -> u64 {
    let mut h = splitmix64(seed);
    h = splitmix64(h ^ stream as u64);
    h = splitmix64(h ^ entity);
    splitmix64(h ^ index)
}

pub fn rng(seed: u64, stream: Stream, entity: u64, index: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive(seed, stream, entity, index))
}
