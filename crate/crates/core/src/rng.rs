//! Reproducible random streams.
//!
//! A [`SeedSequence`] turns a user seed into a ChaCha8 key with four rounds of
//! SplitMix64. Streams are ChaCha8 stream ids under that key, and
//! [`SeedSequence::child`] derives an unrelated key for a labelled sub-task
//! (a replicate, a worker block, a simulation stage). Any implementation of
//! SplitMix64 and ChaCha8 reproduces the same bits.

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub(crate) fn splitmix64(state: &mut u64) -> u64 {
    *state = state.wrapping_add(0x9E37_79B9_7F4A_7C15);
    let mut z = *state;
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SeedSequence {
    seed: u64,
}

impl SeedSequence {
    pub fn new(seed: u64) -> Self {
        Self { seed }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Independent sequence for the sub-task labelled `tag`.
    pub fn child(&self, tag: u64) -> SeedSequence {
        let mut s = self.seed;
        let a = splitmix64(&mut s);
        let mut t = tag ^ a;
        SeedSequence { seed: splitmix64(&mut t) ^ a.rotate_left(17) }
    }

    /// Generator for stream `stream` under this sequence's key.
    pub fn rng(&self, stream: u64) -> StreamRng {
        let mut state = self.seed;
        let mut key = [0u8; 32];
        for chunk in key.chunks_mut(8) {
            chunk.copy_from_slice(&splitmix64(&mut state).to_le_bytes());
        }
        let mut inner = ChaCha8Rng::from_seed(key);
        inner.set_stream(stream);
        StreamRng { inner, record: SeedRecord { seed: self.seed, stream } }
    }
}

/// Where a stream came from, so a draw can be replayed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SeedRecord {
    pub seed: u64,
    pub stream: u64,
}

#[derive(Debug, Clone)]
pub struct StreamRng {
    inner: ChaCha8Rng,
    record: SeedRecord,
}

impl StreamRng {
    /// Shorthand for stream 0 of `SeedSequence::new(seed)`.
    pub fn from_seed_u64(seed: u64) -> Self {
        SeedSequence::new(seed).rng(0)
    }

    pub fn record(&self) -> SeedRecord {
        self.record
    }
}

impl RngCore for StreamRng {
    fn next_u32(&mut self) -> u32 {
        self.inner.next_u32()
    }

    fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }

    fn fill_bytes(&mut self, dest: &mut [u8]) {
        self.inner.fill_bytes(dest)
    }
}
