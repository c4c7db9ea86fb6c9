//! Hierarchical seeding.
//!
//! Every randomized stage draws from a stream derived from the single root
//! seed and a label path, e.g. `root.child("scene").child("route3")`. Streams
//! are counter-based (ChaCha) so results do not depend on draw interleaving
//! between components.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// A node in the seed tree. Cheap to copy; `rng()` materializes the stream.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SeedNode {
    state: u64,
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

impl SeedNode {
    pub fn new(root_seed: u64) -> Self {
        Self {
            state: splitmix64(root_seed),
        }
    }

    /// Derive a child stream from a label. Same label, same child.
    pub fn child(&self, label: &str) -> Self {
        let mut state = self.state;
        for b in label.as_bytes() {
            state = splitmix64(state ^ u64::from(*b));
        }
        Self { state }
    }

    /// Derive a child stream from an index (route number, epoch, ...).
    pub fn child_idx(&self, index: u64) -> Self {
        Self {
            state: splitmix64(self.state ^ index.wrapping_mul(0xd134_2543_de82_ef95)),
        }
    }

    /// Mixed state of this node; usable as a stable tag for provenance checks.
    pub fn state(&self) -> u64 {
        self.state
    }

    pub fn rng(&self) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(self.state)
    }
}
