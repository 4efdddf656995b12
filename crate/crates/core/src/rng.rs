//! Seeded, counter-based random streams.
//!
//! Every random draw in the crate comes from an [`RngStream`] keyed by the
//! run's master seed plus a [`StreamId`]. The key is expanded into a ChaCha8
//! seed, so a stream never depends on how many values other streams have
//! consumed, and folds or bags can be processed in any order or in parallel.

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// What a stream is used for. Distinct purposes never share draws.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Purpose {
    Generate,
    Split,
    Init,
    Shuffle,
    Sample,
    Augment,
    Bootstrap,
    Misc,
}

impl Purpose {
    fn tag(self) -> u64 {
        match self {
            Purpose::Generate => 1,
            Purpose::Split => 2,
            Purpose::Init => 3,
            Purpose::Shuffle => 4,
            Purpose::Sample => 5,
            Purpose::Augment => 6,
            Purpose::Bootstrap => 7,
            Purpose::Misc => 8,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct StreamId {
    pub purpose: Purpose,
    pub fold: u64,
    pub epoch: u64,
    pub item: u64,
}

impl StreamId {
    pub fn new(purpose: Purpose) -> Self {
        StreamId {
            purpose,
            fold: 0,
            epoch: 0,
            item: 0,
        }
    }

    pub fn fold(mut self, fold: u64) -> Self {
        self.fold = fold;
        self
    }

    pub fn epoch(mut self, epoch: u64) -> Self {
        self.epoch = epoch;
        self
    }

    pub fn item(mut self, item: u64) -> Self {
        self.item = item;
        self
    }
}

#[derive(Debug, Clone)]
pub struct RngStream {
    seed: u64,
    id: StreamId,
    rng: ChaCha8Rng,
}

impl RngStream {
    pub fn new(seed: u64, id: StreamId) -> Self {
        let mut key = [0u8; 32];
        let words = [seed, (id.purpose.tag() << 48) ^ id.fold, id.epoch, id.item];
        for (chunk, w) in key.chunks_exact_mut(8).zip(words) {
            chunk.copy_from_slice(&w.to_le_bytes());
        }
        RngStream {
            seed,
            id,
            rng: ChaCha8Rng::from_seed(key),
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn id(&self) -> StreamId {
        self.id
    }

    /// Uniform integer in `[0, n)`, sampled as `u64` so results do not
    /// depend on the platform's pointer width.
    pub fn below(&mut self, n: usize) -> usize {
        use rand::Rng;
        self.random_range(0..n as u64) as usize
    }
}

impl RngCore for RngStream {
    fn next_u32(&mut self) -> u32 {
        self.rng.next_u32()
    }

    fn next_u64(&mut self) -> u64 {
        self.rng.next_u64()
    }

    fn fill_bytes(&mut self, dst: &mut [u8]) {
        self.rng.fill_bytes(dst)
    }
}

/// FNV-1a; used to turn bag ids into stream items.
pub fn stable_hash(s: &str) -> u64 {
    s.bytes().fold(0xcbf2_9ce4_8422_2325, |h, b| {
        (h ^ u64::from(b)).wrapping_mul(0x0000_0100_0000_01b3)
    })
}
