//! Seeded random streams.
//!
//! A stream is a ChaCha8 generator keyed by a base seed plus up to three tags
//! (purpose, index, sub-index). Distinct tag tuples give independent streams, so
//! work can be scheduled in any order without changing results.

use rand_chacha::rand_core::SeedableRng;

pub use rand::Rng;
pub use rand_chacha::ChaCha8Rng as Stream;

/// Stream purposes. Keeping them in one place avoids accidental reuse.
pub mod purpose {
    pub const CLASS_MEANS: u64 = 1;
    pub const SPEAKERS: u64 = 2;
    pub const UTTERANCE: u64 = 3;
    pub const PARTITION: u64 = 4;
    pub const INIT: u64 = 5;
    pub const SHUFFLE: u64 = 6;
    pub const TEACHER: u64 = 7;
    pub const RELABEL: u64 = 8;
    pub const DPSGD_NOISE: u64 = 9;
    pub const ATTACK: u64 = 10;
    pub const HELD_OUT: u64 = 11;
    pub const GRAD_CHECK: u64 = 12;
    pub const STUDENT: u64 = 13;
}

/// Build the stream for `(seed, purpose, a, b)`.
pub fn stream(seed: u64, purpose: u64, a: u64, b: u64) -> Stream {
    let mut key = [0u8; 32];
    for (chunk, word) in key.chunks_exact_mut(8).zip([seed, purpose, a, b]) {
        chunk.copy_from_slice(&word.to_le_bytes());
    }
    Stream::from_seed(key)
}

/// Derive a child seed from a stream, for APIs that take a plain `u64`.
pub fn derive_seed(seed: u64, purpose: u64, a: u64, b: u64) -> u64 {
    stream(seed, purpose, a, b).random()
}
