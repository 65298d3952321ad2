//! Reproducible, path-addressed random streams.
//!
//! Every draw in a run comes from a stream identified by a master seed and a
//! path such as `(repetition, time, node, phase)`. The generator key is a hash
//! of the full path, so a stream's output does not depend on how many other
//! streams were consumed before it, or on which worker consumes it.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Concrete generator handed to model samplers and resamplers.
pub type StreamRng = ChaCha8Rng;

/// Tags for the phases that draw randomness inside one node at one time step.
pub mod phase {
    pub const LEAF: u64 = 1;
    pub const PERMUTATION: u64 = 2;
    pub const RESAMPLE: u64 = 3;
    pub const TEMPER: u64 = 4;
    pub const DATA: u64 = 0xDA7A;
    pub const BOOTSTRAP: u64 = 5;
}

#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct RngStream {
    seed: u64,
    path: Vec<u64>,
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

impl RngStream {
    pub fn new(seed: u64) -> Self {
        RngStream { seed, path: Vec::new() }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn path(&self) -> &[u64] {
        &self.path
    }

    /// Deterministic child stream; the same tag always yields the same child.
    pub fn split(&self, tag: u64) -> RngStream {
        let mut path = self.path.clone();
        path.push(tag);
        RngStream { seed: self.seed, path }
    }

    /// Fresh generator positioned at the start of this stream.
    pub fn rng(&self) -> StreamRng {
        let mut h = splitmix64(self.seed);
        for (depth, &tag) in self.path.iter().enumerate() {
            h = splitmix64(h ^ splitmix64(tag.wrapping_add((depth as u64 + 1) << 56)));
        }
        let mut key = [0u8; 32];
        for (i, chunk) in key.chunks_exact_mut(8).enumerate() {
            h = splitmix64(h.wrapping_add(i as u64));
            chunk.copy_from_slice(&h.to_le_bytes());
        }
        ChaCha8Rng::from_seed(key)
    }
}

/// Convenience for `split_stream(parent, tag)`.
pub fn split_stream(parent: &RngStream, tag: u64) -> RngStream {
    parent.split(tag)
}
