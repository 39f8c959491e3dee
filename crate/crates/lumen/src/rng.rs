//! Seeded random streams.
//!
//! Every source of randomness in a run is a ChaCha8 stream derived from the
//! master seed plus a stable stream id. A stream's full state is
//! `(master_seed, stream_id, word_pos)`, which is what checkpoints persist,
//! so a restored stream continues bit-exactly where it left off.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Stable ids for the independent random streams of a run.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum StreamId {
    Init = 1,
    Noise = 2,
    PoolOc = 3,
    PoolDir = 4,
    Loader = 5,
}

#[derive(Clone, Debug)]
pub struct SeededStream {
    master_seed: u64,
    stream_id: u64,
    pub rng: ChaCha8Rng,
}

impl SeededStream {
    pub fn new(master_seed: u64, id: StreamId) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(master_seed);
        rng.set_stream(id as u64);
        SeededStream {
            master_seed,
            stream_id: id as u64,
            rng,
        }
    }

    pub fn word_pos(&self) -> u128 {
        self.rng.get_word_pos()
    }

    pub fn restore(master_seed: u64, id: StreamId, word_pos: u128) -> Self {
        let mut s = Self::new(master_seed, id);
        s.rng.set_word_pos(word_pos);
        s
    }

    pub fn master_seed(&self) -> u64 {
        self.master_seed
    }

    pub fn stream_id(&self) -> u64 {
        self.stream_id
    }
}

/// Derive a child seed for a keyed sub-task (scene seeds, appearance seeds).
/// Plain splitmix-style mixing; stable across platforms.
pub fn derive_seed(master: u64, salt: u64) -> u64 {
    let mut z = master
        .wrapping_add(0x9e3779b97f4a7c15u64.wrapping_mul(salt.wrapping_add(1)));
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d049bb133111eb);
    z ^ (z >> 31)
}
