//! Keyed random streams.
//!
//! Every replicate and every patient draws from its own ChaCha8 stream so
//! that results do not depend on the order in which work is scheduled.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Generator keyed by `(seed, index)`.
pub fn substream(seed: u64, index: u64) -> ChaCha8Rng {
    let mut key = [0u8; 32];
    key[..8].copy_from_slice(&seed.to_le_bytes());
    key[8..16].copy_from_slice(&index.to_le_bytes());
    ChaCha8Rng::from_seed(key)
}

/// Stream `stream` of the generator keyed by `(seed, index)`.
pub fn patient_stream(seed: u64, index: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = substream(seed, index);
    rng.set_stream(stream);
    rng
}
