//! Counter-based reproducible random number streams.
//!
//! Every stochastic component draws from a ChaCha stream keyed by a root seed
//! plus a small tuple of counters (replicate index, bootstrap index, patient
//! index, ...). Streams are therefore independent of execution order and of
//! the worker count.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Domain-separation tags for the independent stream families.
#[derive(Debug, Clone, Copy)]
pub enum StreamKind {
    SimulatePatient,
    BootstrapResample,
    StudyReplicate,
    Auxiliary,
}

impl StreamKind {
    fn tag(self) -> u64 {
        match self {
            StreamKind::SimulatePatient => 0x5349_4d50,
            StreamKind::BootstrapResample => 0x424f_4f54,
            StreamKind::StudyReplicate => 0x5245_504c,
            StreamKind::Auxiliary => 0x4155_5849,
        }
    }
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Derives a child seed from `(seed, kind, counters)`, for components that
/// take a seed rather than a generator.
pub fn derive_seed(seed: u64, kind: StreamKind, counters: &[u64]) -> u64 {
    let mut state = splitmix64(seed ^ kind.tag());
    for &c in counters {
        state = splitmix64(state ^ splitmix64(c.wrapping_add(0xa076_1d64_78bd_642f)));
    }
    splitmix64(state ^ 0x243f_6a88_85a3_08d3)
}

/// Derives a ChaCha generator from `(seed, kind, counters)`.
pub fn stream(seed: u64, kind: StreamKind, counters: &[u64]) -> ChaCha8Rng {
    let mut state = splitmix64(seed ^ kind.tag());
    for &c in counters {
        state = splitmix64(state ^ splitmix64(c.wrapping_add(0xa076_1d64_78bd_642f)));
    }
    let mut key = [0u8; 32];
    let mut word = state;
    for chunk in key.chunks_exact_mut(8) {
        word = splitmix64(word);
        chunk.copy_from_slice(&word.to_le_bytes());
    }
    ChaCha8Rng::from_seed(key)
}
