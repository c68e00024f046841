//! Seeded random streams.
//!
//! Every random draw in a run flows from one `u64` seed. Components ask for a
//! stream by label (`"init"`, `"dropout"`, `"batches"`, ...) so adding draws to
//! one component never perturbs another.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SeedStream {
    seed: u64,
}

impl SeedStream {
    pub fn new(seed: u64) -> Self {
        Self { seed }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Child stream keyed by `label`.
    pub fn split(&self, label: &str) -> SeedStream {
        SeedStream {
            seed: splitmix64(self.seed ^ fnv1a(label.as_bytes())),
        }
    }

    /// Child stream keyed by an index, e.g. a repetition number.
    pub fn split_index(&self, index: u64) -> SeedStream {
        SeedStream {
            seed: splitmix64(self.seed.wrapping_add(index.wrapping_mul(0x9E37_79B9_7F4A_7C15))),
        }
    }

    pub fn rng(&self, label: &str) -> Rng {
        Rng::seed_from_u64(self.split(label).seed)
    }
}

fn fnv1a(bytes: &[u8]) -> u64 {
    let mut hash = 0xcbf2_9ce4_8422_2325u64;
    for &b in bytes {
        hash ^= u64::from(b);
        hash = hash.wrapping_mul(0x0100_0000_01b3);
    }
    hash
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}
