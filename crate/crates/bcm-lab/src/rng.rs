//! Counter-based rng derivation.
//!
//! Every random draw in the crate comes from a ChaCha8 stream keyed by
//! `(master seed, purpose tag, counters)`. A worker that needs the draws for
//! example `i` of iteration `k` reconstructs the stream from those counters
//! alone, so results are identical for any worker count and any evaluation
//! order.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Purpose tags keeping independent streams apart.
pub mod tag {
    /// Network weight initialization.
    pub const INIT: u64 = 1;
    /// Training-batch data draws.
    pub const DATA: u64 = 2;
    /// Per-example (n, n', z) draws inside a training step.
    pub const STEP: u64 = 3;
    /// Initial noise for sampling runs.
    pub const SAMPLE: u64 = 4;
    /// Fresh noise injected by the zigzag phase.
    pub const ZIGZAG: u64 = 5;
    /// Initial noise injected by inversion.
    pub const INVERT: u64 = 6;
    /// In-distribution noise for masked coordinates during inpainting.
    pub const INPAINT: u64 = 7;
    /// Random projections for sliced Wasserstein estimates.
    pub const PROJECTION: u64 = 8;
    /// Stand-alone dataset generation.
    pub const DATASET: u64 = 9;
}

/// Derive an independent rng stream from a master seed, a purpose tag and two
/// free counters (typically iteration and example index).
pub fn stream_rng(seed: u64, tag: u64, a: u64, b: u64) -> ChaCha8Rng {
    let mut key = [0u8; 32];
    key[0..8].copy_from_slice(&seed.to_le_bytes());
    key[8..16].copy_from_slice(&tag.to_le_bytes());
    key[16..24].copy_from_slice(&a.to_le_bytes());
    key[24..32].copy_from_slice(&b.to_le_bytes());
    ChaCha8Rng::from_seed(key)
}

/// Collapse `(seed, tag, i)` into a fresh sub-seed for per-item streams.
pub fn derive_seed(seed: u64, tag: u64, i: u64) -> u64 {
    use rand::Rng;
    stream_rng(seed, tag, i, u64::MAX).random()
}
