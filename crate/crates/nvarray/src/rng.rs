//! Counter-based derivation of independent RNG streams.
//!
//! Every stochastic stage draws from a stream derived from
//! `(master seed, stage id, item index)`, so per-site results do not depend
//! on execution order or the degree of parallelism.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub const STAGE_FABRICATION: u64 = 1;
pub const STAGE_IMAGING: u64 = 2;
pub const STAGE_HBT: u64 = 3;
pub const STAGE_COHERENCE: u64 = 4;

/// Derive the RNG stream for one item of one stage.
///
/// The triple is written directly into the ChaCha key, which mixes related
/// keys into unrelated keystreams.
pub fn stream(master_seed: u64, stage: u64, index: u64) -> ChaCha8Rng {
    let mut seed = [0u8; 32];
    seed[..8].copy_from_slice(&master_seed.to_le_bytes());
    seed[8..16].copy_from_slice(&stage.to_le_bytes());
    seed[16..24].copy_from_slice(&index.to_le_bytes());
    ChaCha8Rng::from_seed(seed)
}
