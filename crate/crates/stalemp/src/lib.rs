//! Staleness-aware historical-embedding message passing at desk scale.
//!
//! Mini-batch training over a cluster partition keeps historical embeddings of
//! out-of-batch neighbors in a cache and counteracts their staleness three ways:
//! a staleness-and-centrality penalty inside the out-of-batch attention softmax,
//! a staleness regularization loss against the previous epoch's final embeddings,
//! and staleness-augmented cache rows (an extra log(1+s) channel or a learned
//! additive projection). A full-batch oracle plus a layerwise error bound checks
//! how far the cached approximation drifts from exact embeddings.
//!
//! All numeric state is 64-bit; every public entry point is deterministic for a
//! fixed seed, independent of thread count (the `parallel` feature only changes
//! how row loops are scheduled, never reduction order).

pub mod checkpoint;
pub mod dataset;
pub mod error;
pub mod graph;
pub mod history;
pub mod kernels;
pub mod layer;
pub mod oracle;
pub mod par;
pub mod tape;
pub mod train;

pub use error::Error;

/// Derives an independent RNG seed for a named sub-stream of a run seed.
///
/// splitmix64-style mixing; streams for params / schedule / dropout / splits
/// stay decoupled so adding draws to one never perturbs another.
pub fn subseed(seed: u64, stream: u64, a: u64, b: u64) -> u64 {
    let mut z = seed
        .wrapping_add(0x9e37_79b9_7f4a_7c15u64.wrapping_mul(stream | 1))
        .wrapping_add(a.wrapping_mul(0xbf58_476d_1ce4_e5b9))
        .wrapping_add(b.wrapping_mul(0x94d0_49bb_1331_11eb));
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Named sub-streams of the run seed.
pub mod streams {
    pub const PARAMS: u64 = 1;
    pub const SCHEDULE: u64 = 2;
    pub const DROPOUT: u64 = 3;
    pub const VAL_SPLIT: u64 = 4;
    pub const DATASET: u64 = 5;
    pub const PARTITION: u64 = 6;
    pub const POWER_ITER: u64 = 7;
}
