//! Named random streams derived from one master seed.
//!
//! Every `(stream, step)` pair gets its own seed, so a run can resume from
//! any step, and disabling one noise source leaves the others unchanged.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Stream {
    Init = 1,
    Gumbel = 2,
    Augment = 3,
    Timestep = 4,
    Epsilon = 5,
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SeedStreams {
    master: u64,
}

impl SeedStreams {
    pub fn new(master: u64) -> Self {
        SeedStreams { master }
    }

    pub fn master(&self) -> u64 {
        self.master
    }

    pub fn seed(&self, stream: Stream, step: u64) -> u64 {
        splitmix64(splitmix64(self.master ^ splitmix64(stream as u64)) ^ step)
    }

    pub fn rng(&self, stream: Stream, step: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(self.seed(stream, step))
    }
}
