//! Seeded randomness.
//!
//! Every random draw in the crate comes from ChaCha8 (`rand_chacha::ChaCha8Rng`)
//! seeded with a 64-bit seed and a 64-bit stream id. Consumers never share a
//! stream: each one is identified by one of the [`Stream`] constants, so adding
//! draws to one consumer never perturbs another.
//!
//! Composite keys (episode seeds, per-cell rollout seeds) are folded into a
//! single `u64` with [`mix`], a SplitMix64 finalizer chain.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

/// Stream identifiers. The numeric values are part of the reproducibility contract.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u64)]
pub enum Stream {
    WeightInit = 1,
    EnvEpisode = 2,
    Shuffle = 3,
    Split = 4,
    GradCheck = 5,
    Jitter = 6,
    DatasetEpisodes = 7,
    Sweep = 8,
}

pub fn stream(seed: u64, which: Stream) -> Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(which as u64);
    rng
}

/// SplitMix64 output function.
pub fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Order-sensitive fold of several words into one seed.
pub fn mix(parts: &[u64]) -> u64 {
    parts
        .iter()
        .fold(0x5EED_A2C2_u64, |acc, &p| splitmix64(acc ^ splitmix64(p)))
}

/// FNV-1a over 32-bit words; used for trace fingerprints.
#[derive(Debug, Clone, Copy)]
pub struct Fnv(u64);

impl Default for Fnv {
    fn default() -> Self {
        Fnv(0xcbf2_9ce4_8422_2325)
    }
}

impl Fnv {
    pub fn word(&mut self, w: u32) {
        for b in w.to_le_bytes() {
            self.0 ^= b as u64;
            self.0 = self.0.wrapping_mul(0x0100_0000_01b3);
        }
    }

    pub fn floats(&mut self, xs: &[f32]) {
        for x in xs {
            self.word(x.to_bits());
        }
    }

    pub fn finish(&self) -> u64 {
        self.0
    }
}
