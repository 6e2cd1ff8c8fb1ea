//! Seeded random streams.
//!
//! Every stochastic component draws from its own ChaCha8 stream whose seed is
//! derived from a base seed and a stream tag, so adding a new consumer never
//! shifts the draws of an existing one.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type StreamRng = ChaCha8Rng;

/// SplitMix64 finalizer.
pub fn mix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Derives an independent seed for `tag` from `base`.
pub fn derive_seed(base: u64, tag: u64) -> u64 {
    mix64(mix64(base) ^ tag.wrapping_mul(0xd6e8_feb8_6659_fd93))
}

pub fn stream(base: u64, tag: u64) -> StreamRng {
    StreamRng::seed_from_u64(derive_seed(base, tag))
}

/// Stream tags. Kept in one place so no two consumers collide.
pub mod tags {
    pub const INIT: u64 = 1;
    pub const SHUFFLE: u64 = 2;
    pub const AUGMENT: u64 = 3;
    pub const CLASSIFIER: u64 = 4;
    pub const ARCH_SAMPLE: u64 = 5;
    pub const DATA: u64 = 6;
    pub const SPLIT: u64 = 7;
    pub const EVOLVE: u64 = 8;
    pub const BUDGET: u64 = 9;
    pub const STUDY: u64 = 10;
}

/// FNV-1a over a stream of 32-bit words; used for model fingerprints.
#[derive(Debug, Clone, Copy)]
pub struct Fnv64(u64);

impl Default for Fnv64 {
    fn default() -> Self {
        Fnv64(0xcbf2_9ce4_8422_2325)
    }
}

impl Fnv64 {
    pub fn write_u32(&mut self, v: u32) {
        for b in v.to_le_bytes() {
            self.0 ^= b as u64;
            self.0 = self.0.wrapping_mul(0x0000_0100_0000_01b3);
        }
    }

    pub fn write_f32s(&mut self, vs: &[f32]) {
        for v in vs {
            self.write_u32(v.to_bits());
        }
    }

    pub fn finish(&self) -> u64 {
        self.0
    }
}
