//! Training-time study of whether small transformers learn directed-graph
//! connectivity (equivalently, transitive relations) from individual
//! `(start, goal) -> Y/N` examples.
//!
//! The crate covers the full experiment pipeline at desk scale:
//!
//! * [`graphs`] — grid and disconnected-chain graph generators, BFS
//!   reachability, and the vector-difference connectivity criterion for grids.
//! * [`dataset`] — vocabulary layout, train/test split construction, and
//!   token encoding of node pairs.
//! * [`numerics`] — a dense tensor tape with reverse-mode gradients, an
//!   adaptive-moment optimizer, and finite-difference verification.
//! * [`model`] — the two-token pre-LN transformer plus its analytic FLOP
//!   accounting formula.
//! * [`training`] — the seeded training loop emitting FLOP-indexed metric
//!   records.
//! * [`sweeps`] — preset experiment grids, the multi-seed runner with a run
//!   manifest, and cross-seed aggregation.
//! * [`reporting`] — deterministic SVG curve rendering and summary tables.

pub mod dataset;
pub mod digest;
pub mod graphs;
pub mod model;
pub mod numerics;
pub mod reporting;
pub mod sweeps;
pub mod training;

/// The one PRNG used everywhere: explicit seeds, no global randomness.
pub fn seeded_rng(seed: u64) -> rand_chacha::ChaCha8Rng {
    use rand::SeedableRng;
    rand_chacha::ChaCha8Rng::seed_from_u64(seed)
}
