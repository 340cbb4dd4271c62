//! Counter-based seed derivation.
//!
//! Every random stream in an experiment is keyed by a master seed and a path of
//! integer labels (suite, block, realization, ...). Keys are derived by a
//! SplitMix64-style mixing chain, so a stream depends only on its path and never
//! on which thread or in which order it was requested.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Random stream type used throughout the crate.
pub type Stream = ChaCha8Rng;

const GOLDEN: u64 = 0x9E37_79B9_7F4A_7C15;

fn mix(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// A position in the seed tree.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct SeedKey(u64);

impl SeedKey {
    pub fn new(master: u64) -> Self {
        SeedKey(mix(master.wrapping_add(GOLDEN)))
    }

    /// Key of the `index`-th child of this node.
    pub fn child(self, index: u64) -> Self {
        SeedKey(mix(self.0 ^ mix(index.wrapping_add(1).wrapping_mul(GOLDEN))))
    }

    /// Child keyed by a string label (suite names, block names).
    pub fn named(self, label: &str) -> Self {
        // FNV-1a, stable across platforms and releases
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for b in label.bytes() {
            h ^= u64::from(b);
            h = h.wrapping_mul(0x0000_0100_0000_01B3);
        }
        self.child(h)
    }

    pub fn value(self) -> u64 {
        self.0
    }

    pub fn stream(self) -> Stream {
        Stream::seed_from_u64(self.0)
    }
}
