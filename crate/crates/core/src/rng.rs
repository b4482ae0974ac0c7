//! Reproducible random substreams.
//!
//! A [`StreamKey`] names one node of a tree of independent generators. A
//! child key is a pure function of its parent and an index, so work items
//! can be handed out in any order and on any number of threads while still
//! seeing exactly the same random numbers.

use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;

/// Generator type used throughout the crate.
pub type Rng = ChaCha12Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct StreamKey {
    key: u64,
}

impl StreamKey {
    pub fn new(seed: u64) -> Self {
        StreamKey {
            key: splitmix64(seed ^ 0x6a09_e667_f3bc_c908),
        }
    }

    /// Child stream number `index` under a named purpose.
    pub fn child(&self, purpose: Purpose, index: u64) -> Self {
        let tagged = splitmix64(self.key ^ splitmix64(purpose as u64 + 1));
        StreamKey {
            key: splitmix64(tagged ^ splitmix64(index.wrapping_add(0x9e37_79b9_7f4a_7c15))),
        }
    }

    pub fn rng(&self) -> Rng {
        let mut seed = [0u8; 32];
        let mut state = self.key;
        for chunk in seed.chunks_exact_mut(8) {
            state = splitmix64(state);
            chunk.copy_from_slice(&state.to_le_bytes());
        }
        Rng::from_seed(seed)
    }

    /// Raw 64-bit value, usable as a seed for a nested computation.
    pub fn value(&self) -> u64 {
        self.key
    }
}

/// Separates the uses of substreams so that, for instance, bootstrap
/// replicate 3 and SIMEX cell 3 never share random numbers.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u64)]
pub enum Purpose {
    SimexLevel = 1,
    SimexReplicate = 2,
    McReplicate = 3,
    Latent = 4,
    MeasurementError = 5,
    Simex = 6,
    Bootstrap = 7,
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng as _;

    #[test]
    fn same_key_same_numbers() {
        let draw = |seed| {
            let mut r = StreamKey::new(seed).rng();
            (0..8).map(|_| r.random::<u64>()).collect::<Vec<_>>()
        };
        assert_eq!(draw(7), draw(7));
        assert_ne!(draw(7), draw(8));
    }

    #[test]
    fn children_differ() {
        let root = StreamKey::new(1);
        let c0 = root.child(Purpose::SimexReplicate, 0);
        let c1 = root.child(Purpose::SimexReplicate, 1);
        let other = root.child(Purpose::Bootstrap, 0);
        assert_ne!(c0, c1);
        assert_ne!(c0, other);
        assert_ne!(c0.rng().random::<u64>(), c1.rng().random::<u64>());
    }
}
