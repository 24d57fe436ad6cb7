//! Deterministic stream derivation.
//!
//! Every stochastic decision in the simulator (init, partitioning, client
//! participation, epoch draws, minibatch sampling, ...) pulls from its own
//! ChaCha8 stream keyed by `(master seed, purpose, client, round)`. Streams
//! never share state, so reordering one consumer — or skipping it entirely —
//! cannot perturb any other, which is what makes run-level determinism hold
//! even when the set of active clients changes between configurations.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Purpose tag folded into the stream key.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StreamKind {
    /// Model parameter initialization.
    Init,
    /// Synthetic dataset generation.
    Synthetic,
    /// Shard assignment across clients.
    Partition,
    /// Per-client labeled/unlabeled/test split.
    SemiSplit,
    /// Server-side sampling of active clients.
    Participation,
    /// Per-client, per-round local epoch draw.
    EpochDraw,
    /// Per-client, per-round minibatch sampling.
    Batch,
}

impl StreamKind {
    fn tag(self) -> u64 {
        match self {
            StreamKind::Init => 1,
            StreamKind::Synthetic => 2,
            StreamKind::Partition => 3,
            StreamKind::SemiSplit => 4,
            StreamKind::Participation => 5,
            StreamKind::EpochDraw => 6,
            StreamKind::Batch => 7,
        }
    }
}

/// splitmix64 finalizer; full-period bijective mixer.
fn mix(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Derives an independent ChaCha8 stream from the master seed and a
/// `(purpose, client, round)` label. Labels that differ in any component
/// yield unrelated streams; identical labels always yield the same stream.
pub fn derive_rng(master: u64, kind: StreamKind, client: u64, round: u64) -> ChaCha8Rng {
    // Absorb the label words sequentially (order-sensitive), then squeeze
    // four words for the 256-bit seed.
    let mut state = mix(master ^ 0x6a09_e667_f3bc_c908);
    for word in [kind.tag(), client, round] {
        state = mix(state
            .wrapping_add(mix(word))
            .wrapping_add(0x9e37_79b9_7f4a_7c15));
    }
    let mut seed = [0u8; 32];
    for chunk in seed.chunks_exact_mut(8) {
        state = state.wrapping_add(0x9e37_79b9_7f4a_7c15);
        chunk.copy_from_slice(&mix(state).to_le_bytes());
    }
    ChaCha8Rng::from_seed(seed)
}
