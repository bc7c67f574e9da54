//! Seed-derived random substreams.
//!
//! All randomness in the crate flows through ChaCha8 streams keyed by a
//! 64-bit stream id packed from (domain, trial, worker). Distinct keys give
//! statistically independent streams from the same seed, so every trial and
//! every worker can draw in any order (or in parallel) without affecting
//! reproducibility.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Maximum worker index + 1 representable in a stream key.
pub const MAX_WORKERS: usize = 1 << 16;
/// Maximum trial index + 1 representable in a stream key.
pub const MAX_TRIALS: usize = 1 << 32;

/// Independent randomness domains. Keeping domains disjoint guarantees that
/// e.g. schedule draws never overlap with gradient-sample draws even when
/// both are keyed by the same (seed, trial).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Domain {
    /// Instance generation (local minimizers).
    Instance = 1,
    /// Worker-selection schedules.
    Schedule = 2,
    /// Stochastic gradient sampling.
    Sampler = 3,
    /// Monte Carlo probes for the empirical noise bound.
    NoiseProbe = 4,
}

/// Packs (domain, trial, worker) into the 64-bit ChaCha stream id:
/// bits 48..56 = domain, 16..48 = trial, 0..16 = worker.
pub fn stream_key(domain: Domain, trial: usize, worker: usize) -> u64 {
    debug_assert!(trial < MAX_TRIALS, "trial index {trial} overflows stream key");
    debug_assert!(worker < MAX_WORKERS, "worker index {worker} overflows stream key");
    ((domain as u64) << 48) | ((trial as u64) << 16) | worker as u64
}

/// A ChaCha8 generator seeded from `seed` and positioned on the substream
/// identified by (domain, trial, worker).
pub fn substream(seed: u64, domain: Domain, trial: usize, worker: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream_key(domain, trial, worker));
    rng
}
