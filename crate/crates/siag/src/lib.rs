//! Simulator and analysis toolkit for streaming incremental aggregated
//! gradient (sIAG) methods on a parameter-server model.
//!
//! A server keeps one gradient slot per worker and descends along the
//! average of the latest (possibly stale) reports. Workers evaluate
//! stochastic gradients of a synthetic least-squares objective on freshly
//! drawn samples. The crate provides the problem generator, the
//! worker-selection schedules, the server-side optimizers (sIAG,
//! exact-gradient IAG, and a non-aggregated SGD baseline), the
//! convergence-theory
//! constants with Monte Carlo checkers, and a deterministic experiment
//! harness.
//!
//! Everything is reproducible from explicit seeds: all randomness flows
//! through counter-based ChaCha substreams keyed by (domain, trial, worker),
//! so results are independent of scheduling and thread interleaving.

pub mod error;
pub mod harness;
pub mod optimizer;
pub mod output;
pub mod problem;
pub mod rng;
pub mod schedule;
pub mod theory;
pub mod vecops;

pub use error::SiagError;

/// Crate-wide result alias.
pub type Result<T> = std::result::Result<T, SiagError>;

/// Iterates diverging past this Euclidean norm abort the trial.
pub const DIVERGENCE_NORM: f64 = 1e9;
