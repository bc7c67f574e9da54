//! Worker-selection schedules and staleness certification.
//!
//! Three schemes decide which workers report at each iteration:
//!
//! * `cyclic` — round robin, worker `t mod n`; staleness is certified by `n`.
//! * `uniform_cover` — uniform random draws plus a forcing rule that
//!   activates any worker whose buffered gradient would otherwise grow older
//!   than `cover_t` iterations; certified by `cover_t`.
//! * `nonuniform` — per-worker staleness caps `T_i` (drawn once per config
//!   from `ti_range`, or pinned via `caps`), selection probability
//!   proportional to `1/T_i`, forcing at each worker's own cap; certified by
//!   `max_i T_i`.
//!
//! Staleness accounting: the buffer starts with stamp `-1` (the zero
//! initialization), and the *entering age* of worker `i` at iteration `t` is
//! `t - tau_i(t-1)` — the age of its slot when the iteration begins. The
//! observed staleness bound `T_observed` is the running maximum of entering
//! ages, which equals the largest gap between consecutive activations (for
//! the cyclic schedule it is exactly `n`). [`StalenessTracker::advance`]
//! returns the post-report ages `t - tau_i(t)` actually carried by the
//! aggregate at iteration `t`.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::rng::{self, Domain};
use crate::{Result, SiagError};

/// Workers reporting at one iteration: sorted, unique, nonempty.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ActiveSet {
    pub iter: usize,
    pub workers: Vec<usize>,
}

impl ActiveSet {
    pub fn new(iter: usize, workers: Vec<usize>, n: usize) -> Result<Self> {
        if workers.is_empty() {
            return Err(SiagError::InvalidConfig(format!("empty active set at iteration {iter}")));
        }
        for pair in workers.windows(2) {
            if pair[0] >= pair[1] {
                return Err(SiagError::InvalidConfig(format!(
                    "active set at iteration {iter} is not sorted/unique: {workers:?}"
                )));
            }
        }
        if *workers.last().unwrap() >= n {
            return Err(SiagError::InvalidConfig(format!(
                "active set at iteration {iter} references worker {} (n = {n})",
                workers.last().unwrap()
            )));
        }
        Ok(ActiveSet { iter, workers })
    }

    pub fn len(&self) -> usize {
        self.workers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.workers.is_empty()
    }
}

/// Tracks the last-report iteration `tau_i` of every worker and the maximum
/// staleness observed so far.
#[derive(Debug, Clone)]
pub struct StalenessTracker {
    tau: Vec<i64>,
    next_iter: usize,
    observed_global: i64,
    observed_per_worker: Vec<i64>,
}

impl StalenessTracker {
    pub fn new(n: usize) -> Self {
        StalenessTracker {
            tau: vec![-1; n],
            next_iter: 0,
            observed_global: 0,
            observed_per_worker: vec![0; n],
        }
    }

    /// Applies the active set of the next iteration. Records every worker's
    /// entering age, stamps the active workers with `t`, and returns the
    /// post-report ages `t - tau_i(t)`.
    pub fn advance(&mut self, active: &ActiveSet) -> Result<Vec<i64>> {
        if active.iter != self.next_iter {
            return Err(SiagError::BadReport(format!(
                "active set for iteration {} applied at iteration {}",
                active.iter, self.next_iter
            )));
        }
        let t = self.next_iter as i64;
        for (i, &tau) in self.tau.iter().enumerate() {
            let entering = t - tau;
            self.observed_per_worker[i] = self.observed_per_worker[i].max(entering);
            self.observed_global = self.observed_global.max(entering);
        }
        for &i in &active.workers {
            if i >= self.tau.len() {
                return Err(SiagError::InvalidConfig(format!(
                    "active worker {i} out of range (n = {})",
                    self.tau.len()
                )));
            }
            self.tau[i] = t;
        }
        self.next_iter += 1;
        Ok(self.tau.iter().map(|&tau| t - tau).collect())
    }

    /// Last-report iteration per worker; `-1` until the first activation.
    pub fn tau(&self) -> &[i64] {
        &self.tau
    }

    /// Running maximum of entering ages over all iterations and workers.
    pub fn observed_max(&self) -> i64 {
        self.observed_global
    }

    /// Running maximum of worker `i`'s entering age.
    pub fn observed_max_for(&self, worker: usize) -> i64 {
        self.observed_per_worker[worker]
    }

    /// Number of iterations processed so far.
    pub fn iterations(&self) -> usize {
        self.next_iter
    }
}

fn default_cover_t() -> usize {
    15
}

fn default_ti_range() -> [usize; 2] {
    [10, 20]
}

fn default_active_per_iter() -> usize {
    1
}

/// Which selection scheme to run.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScheduleKind {
    Cyclic,
    UniformCover,
    Nonuniform,
}

/// Serializable description of a schedule; everything a trial needs to
/// reproduce its activation sequence.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScheduleConfig {
    pub kind: ScheduleKind,
    pub n: usize,
    /// Staleness cap of the uniform_cover scheme.
    #[serde(default = "default_cover_t")]
    pub cover_t: usize,
    /// Inclusive range the nonuniform per-worker caps are drawn from.
    #[serde(default = "default_ti_range")]
    pub ti_range: [usize; 2],
    /// Pinned per-worker caps for the nonuniform scheme; overrides the
    /// draw from `ti_range`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub caps: Option<Vec<usize>>,
    /// Workers drawn at random per iteration (forcing can add more).
    #[serde(default = "default_active_per_iter")]
    pub active_per_iter: usize,
    pub seed: u64,
}

impl ScheduleConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n == 0 || self.n >= rng::MAX_WORKERS {
            return Err(SiagError::InvalidConfig(format!(
                "schedule.n must be in 1..{}, got {}",
                rng::MAX_WORKERS,
                self.n
            )));
        }
        if self.active_per_iter == 0 {
            return Err(SiagError::InvalidConfig("schedule.active_per_iter must be >= 1".into()));
        }
        match self.kind {
            ScheduleKind::Cyclic => {}
            ScheduleKind::UniformCover => {
                if self.cover_t == 0 {
                    return Err(SiagError::InvalidConfig("schedule.cover_t must be >= 1".into()));
                }
            }
            ScheduleKind::Nonuniform => {
                if let Some(caps) = &self.caps {
                    if caps.len() != self.n {
                        return Err(SiagError::DimensionMismatch {
                            expected: self.n,
                            got: caps.len(),
                        });
                    }
                    if caps.iter().any(|&c| c == 0) {
                        return Err(SiagError::InvalidConfig("per-worker caps must be >= 1".into()));
                    }
                } else if self.ti_range[0] == 0 || self.ti_range[0] > self.ti_range[1] {
                    return Err(SiagError::InvalidConfig(format!(
                        "schedule.ti_range must be a nonempty positive range, got {:?}",
                        self.ti_range
                    )));
                }
            }
        }
        Ok(())
    }

    /// Per-worker staleness caps of the nonuniform scheme. Pinned caps win;
    /// otherwise they are drawn once from a dedicated substream of the
    /// schedule seed, so every trial of an experiment sees the same caps.
    pub fn resolved_caps(&self) -> Result<Option<Vec<usize>>> {
        self.validate()?;
        if self.kind != ScheduleKind::Nonuniform {
            return Ok(None);
        }
        if let Some(caps) = &self.caps {
            return Ok(Some(caps.clone()));
        }
        let mut stream = rng::substream(self.seed, Domain::Schedule, 0, 1);
        let [lo, hi] = self.ti_range;
        Ok(Some((0..self.n).map(|_| stream.random_range(lo..=hi)).collect()))
    }

    /// The staleness bound this schedule certifies.
    pub fn certified_t(&self) -> Result<usize> {
        self.validate()?;
        Ok(match self.kind {
            ScheduleKind::Cyclic => self.n,
            ScheduleKind::UniformCover => self.cover_t,
            ScheduleKind::Nonuniform => {
                *self.resolved_caps()?.unwrap().iter().max().unwrap()
            }
        })
    }

    /// Builds the activation stream for one trial.
    pub fn stream(&self, trial: usize) -> Result<ScheduleStream> {
        self.validate()?;
        let rng = rng::substream(self.seed, Domain::Schedule, trial, 0);
        Ok(match self.kind {
            ScheduleKind::Cyclic => ScheduleStream::Cyclic(CyclicSchedule::new(self.n)),
            ScheduleKind::UniformCover => ScheduleStream::Random(RandomCoverSchedule::uniform(
                self.n,
                self.cover_t,
                self.active_per_iter,
                rng,
            )),
            ScheduleKind::Nonuniform => ScheduleStream::Random(RandomCoverSchedule::weighted(
                self.resolved_caps()?.unwrap(),
                self.active_per_iter,
                rng,
            )),
        })
    }
}

/// Round-robin activation: worker `t mod n` reports at iteration `t`.
#[derive(Debug, Clone)]
pub struct CyclicSchedule {
    n: usize,
    t: usize,
}

impl CyclicSchedule {
    pub fn new(n: usize) -> Self {
        CyclicSchedule { n, t: 0 }
    }

    pub fn next_active_set(&mut self) -> ActiveSet {
        let set = ActiveSet { iter: self.t, workers: vec![self.t % self.n] };
        self.t += 1;
        set
    }
}

/// Random selection with per-worker staleness caps: draws `active_per_iter`
/// distinct workers (uniformly, or weighted by `1/T_i`), then force-includes
/// every worker whose entering age has reached its cap. Generic over the
/// generator so tests can inject adversarial randomness.
#[derive(Debug, Clone)]
pub struct RandomCoverSchedule<R: Rng> {
    caps: Vec<usize>,
    weights: Vec<f64>,
    active_per_iter: usize,
    tau: Vec<i64>,
    t: usize,
    rng: R,
}

impl<R: Rng> RandomCoverSchedule<R> {
    /// Uniform draws, shared staleness cap `cover_t`.
    pub fn uniform(n: usize, cover_t: usize, active_per_iter: usize, rng: R) -> Self {
        Self::with_caps_and_weights(vec![cover_t; n], vec![1.0; n], active_per_iter, rng)
    }

    /// Per-worker caps with selection probability proportional to `1/T_i`,
    /// so workers certifying lower staleness report more often.
    pub fn weighted(caps: Vec<usize>, active_per_iter: usize, rng: R) -> Self {
        let weights = caps.iter().map(|&c| 1.0 / c as f64).collect();
        Self::with_caps_and_weights(caps, weights, active_per_iter, rng)
    }

    fn with_caps_and_weights(
        caps: Vec<usize>,
        weights: Vec<f64>,
        active_per_iter: usize,
        rng: R,
    ) -> Self {
        let n = caps.len();
        RandomCoverSchedule { caps, weights, active_per_iter, tau: vec![-1; n], t: 0, rng }
    }

    pub fn caps(&self) -> &[usize] {
        &self.caps
    }

    pub fn next_active_set(&mut self) -> ActiveSet {
        let n = self.caps.len();
        let t = self.t as i64;
        let mut selected = vec![false; n];

        // weighted draw without replacement
        let draws = self.active_per_iter.min(n);
        let mut candidates: Vec<usize> = (0..n).collect();
        let mut total: f64 = self.weights.iter().sum();
        for _ in 0..draws {
            let mut r = self.rng.random::<f64>() * total;
            let mut chosen = candidates.len() - 1;
            for (slot, &i) in candidates.iter().enumerate() {
                r -= self.weights[i];
                if r < 0.0 {
                    chosen = slot;
                    break;
                }
            }
            let worker = candidates.swap_remove(chosen);
            selected[worker] = true;
            total -= self.weights[worker];
        }

        // forcing rule: entering age t - tau (the zero-initialized buffer
        // carries stamp -1) may never exceed the worker's cap
        for i in 0..n {
            if t - self.tau[i] >= self.caps[i] as i64 {
                selected[i] = true;
            }
        }

        let workers: Vec<usize> = (0..n).filter(|&i| selected[i]).collect();
        for &i in &workers {
            self.tau[i] = t;
        }
        self.t += 1;
        ActiveSet { iter: self.t - 1, workers }
    }
}

/// A config-built activation stream.
#[derive(Debug, Clone)]
pub enum ScheduleStream {
    Cyclic(CyclicSchedule),
    Random(RandomCoverSchedule<ChaCha8Rng>),
}

impl ScheduleStream {
    pub fn next_active_set(&mut self) -> ActiveSet {
        match self {
            ScheduleStream::Cyclic(s) => s.next_active_set(),
            ScheduleStream::Random(s) => s.next_active_set(),
        }
    }
}
