//! Deterministic random streams.
//!
//! Every stream is a ChaCha8 generator keyed by the master seed and a
//! purpose tag, with the replica index selecting the ChaCha stream. Streams
//! for different `(tag, replica)` pairs never overlap, so replicas can run
//! in any order on any number of workers and still reproduce bit for bit.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

/// Purpose tags keep independent consumers of the same replica apart.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u64)]
pub enum Purpose {
    Tree = 1,
    Walk = 2,
    Bridge = 3,
    Bootstrap = 4,
    Coupling = 5,
    Oracle = 6,
}

/// A generator seeded directly from a single `u64`.
pub fn seeded(seed: u64) -> Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// The stream for `(master, purpose, replica)`.
pub fn stream(master: u64, purpose: Purpose, replica: u64) -> Rng {
    let mut key = [0u8; 32];
    key[..8].copy_from_slice(&master.to_le_bytes());
    key[8..16].copy_from_slice(&(purpose as u64).to_le_bytes());
    let mut rng = ChaCha8Rng::from_seed(key);
    rng.set_stream(replica);
    rng
}
