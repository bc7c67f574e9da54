//! Synthetic streaming least-squares problem.
//!
//! Worker `i` owns the expected objective
//! `F_i(w) = E[ 0.5 * |A w - y|^2 ]` where each query draws a fresh design
//! matrix `A` (`p x d`, i.i.d. standard normal entries) and observations
//! `y = A w_i^* + noise_std * eps`, `eps ~ N(0, I_p)`. Local minimizers
//! `w_i^*` are drawn i.i.d. uniform on `[0, 1]^d`, so the global optimum of
//! `F = (1/n) sum_i F_i` is their mean and the expected gradient is the
//! closed form `grad F_i(w) = p (w - w_i^*)`, i.e. the expected objective is
//! `p`-strongly convex with `p`-Lipschitz expected gradients.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::rng::{self, Domain};
use crate::vecops;
use crate::{Result, SiagError};

/// Fewest Monte Carlo draws accepted by [`LsqInstance::empirical_noise_bound`].
pub const MIN_NOISE_SAMPLES: usize = 100;

/// Size and seed parameters of a synthetic problem.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProblemSpec {
    /// Number of workers.
    pub n: usize,
    /// Parameter dimension.
    pub d: usize,
    /// Samples per gradient query (rows of each design matrix).
    pub p: usize,
    /// Standard deviation of the observation noise added to `y`.
    pub noise_std: f64,
    /// Seed for instance generation and gradient sampling streams.
    pub master_seed: u64,
}

impl ProblemSpec {
    pub fn new(n: usize, d: usize, p: usize, noise_std: f64, master_seed: u64) -> Result<Self> {
        let spec = ProblemSpec { n, d, p, noise_std, master_seed };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if self.n == 0 {
            return Err(SiagError::InvalidConfig("problem.n must be >= 1".into()));
        }
        if self.n >= rng::MAX_WORKERS {
            return Err(SiagError::InvalidConfig(format!(
                "problem.n must be < {} to fit the stream key",
                rng::MAX_WORKERS
            )));
        }
        if self.d == 0 {
            return Err(SiagError::InvalidConfig("problem.d must be >= 1".into()));
        }
        if self.p == 0 {
            return Err(SiagError::InvalidConfig("problem.p must be >= 1".into()));
        }
        if !self.noise_std.is_finite() || self.noise_std < 0.0 {
            return Err(SiagError::InvalidConfig(format!(
                "problem.noise_std must be finite and >= 0, got {}",
                self.noise_std
            )));
        }
        Ok(())
    }
}

/// One stochastic gradient report.
#[derive(Debug, Clone, PartialEq)]
pub struct GradientSample {
    pub grad: Vec<f64>,
    /// Worker that produced the sample.
    pub worker: usize,
    /// Iteration at which the sample was computed.
    pub iter_stamp: usize,
}

/// A generated least-squares instance: the local minimizers, their mean, and
/// the strong-convexity/Lipschitz constants of the expected objective.
#[derive(Debug, Clone, PartialEq)]
pub struct LsqInstance {
    spec: ProblemSpec,
    w_star_local: Vec<Vec<f64>>,
    w_star: Vec<f64>,
    mu: f64,
    l: f64,
}

impl LsqInstance {
    /// Draws the local minimizers from the spec's instance stream. The same
    /// spec always yields a bit-identical instance.
    pub fn generate(spec: &ProblemSpec) -> Result<Self> {
        spec.validate()?;
        let mut stream = rng::substream(spec.master_seed, Domain::Instance, 0, 0);
        let w_star_local: Vec<Vec<f64>> = (0..spec.n)
            .map(|_| (0..spec.d).map(|_| stream.random::<f64>()).collect())
            .collect();
        Self::with_local_minimizers(spec.clone(), w_star_local)
    }

    /// Builds an instance around caller-supplied local minimizers.
    /// Used by tests that need hand-picked geometry.
    pub fn with_local_minimizers(spec: ProblemSpec, w_star_local: Vec<Vec<f64>>) -> Result<Self> {
        spec.validate()?;
        if w_star_local.len() != spec.n {
            return Err(SiagError::DimensionMismatch { expected: spec.n, got: w_star_local.len() });
        }
        for w in &w_star_local {
            if w.len() != spec.d {
                return Err(SiagError::DimensionMismatch { expected: spec.d, got: w.len() });
            }
        }
        // global optimum = mean of the local minimizers, accumulated
        // left-to-right per coordinate
        let mut w_star = vec![0.0; spec.d];
        for w in &w_star_local {
            vecops::add_assign(&mut w_star, w);
        }
        for v in &mut w_star {
            *v /= spec.n as f64;
        }
        let p = spec.p as f64;
        Ok(LsqInstance { spec, w_star_local, w_star, mu: p, l: p })
    }

    pub fn spec(&self) -> &ProblemSpec {
        &self.spec
    }

    pub fn n(&self) -> usize {
        self.spec.n
    }

    pub fn d(&self) -> usize {
        self.spec.d
    }

    /// Strong-convexity modulus of the expected objective (= `p`).
    pub fn mu(&self) -> f64 {
        self.mu
    }

    /// Lipschitz constant of the expected gradient (= `p`).
    pub fn lipschitz(&self) -> f64 {
        self.l
    }

    /// Global optimum, the mean of the local minimizers.
    pub fn w_star(&self) -> &[f64] {
        &self.w_star
    }

    pub fn w_star_local(&self, worker: usize) -> &[f64] {
        &self.w_star_local[worker]
    }

    /// Draws a fresh `(A, y)` pair for `worker` and returns the stochastic
    /// gradient `A^T (A w - y)` evaluated at `w`, stamped with `iter_stamp`.
    ///
    /// Draw order is pinned (design matrix row-major, then observation
    /// noise), so a given stream position always yields the same sample.
    pub fn sample_gradient(
        &self,
        worker: usize,
        w: &[f64],
        iter_stamp: usize,
        stream: &mut ChaCha8Rng,
    ) -> GradientSample {
        assert!(worker < self.spec.n, "worker {} out of range", worker);
        assert_eq!(w.len(), self.spec.d, "iterate has wrong dimension");
        let (p, d) = (self.spec.p, self.spec.d);
        let mut a = vec![0.0; p * d];
        for v in &mut a {
            *v = stream.sample(StandardNormal);
        }
        let w_loc = &self.w_star_local[worker];
        let mut y = vec![0.0; p];
        for (k, yk) in y.iter_mut().enumerate() {
            let noise: f64 = stream.sample(StandardNormal);
            *yk = vecops::dot(&a[k * d..(k + 1) * d], w_loc) + self.spec.noise_std * noise;
        }
        GradientSample { grad: lsq_gradient(&a, p, d, &y, w), worker, iter_stamp }
    }

    /// Expected gradient `p (w - w_i^*)` of worker `i`'s objective.
    pub fn exact_gradient(&self, worker: usize, w: &[f64]) -> Vec<f64> {
        assert!(worker < self.spec.n, "worker {} out of range", worker);
        assert_eq!(w.len(), self.spec.d, "iterate has wrong dimension");
        let p = self.spec.p as f64;
        w.iter().zip(&self.w_star_local[worker]).map(|(wj, oj)| p * (wj - oj)).collect()
    }

    /// Monte Carlo estimate of the smallest `sigma^2` such that
    /// `E |grad f_i(w) - grad F_i(w)|^2 <= sigma^2 (1 + |w - w^*|^2)`
    /// holds at `w` for every worker, using `samples` draws per worker from
    /// a dedicated probe stream.
    pub fn empirical_noise_bound(&self, w: &[f64], samples: usize) -> Result<f64> {
        if samples < MIN_NOISE_SAMPLES {
            return Err(SiagError::InsufficientData(format!(
                "noise bound needs at least {MIN_NOISE_SAMPLES} samples per worker, got {samples}"
            )));
        }
        if w.len() != self.spec.d {
            return Err(SiagError::DimensionMismatch { expected: self.spec.d, got: w.len() });
        }
        let denom = 1.0 + vecops::dist_sq(w, &self.w_star);
        let mut worst = 0.0f64;
        for worker in 0..self.spec.n {
            let mut stream = rng::substream(self.spec.master_seed, Domain::NoiseProbe, 0, worker);
            let mean_grad = self.exact_gradient(worker, w);
            let mut acc = 0.0;
            for s in 0..samples {
                let sample = self.sample_gradient(worker, w, s, &mut stream);
                acc += vecops::dist_sq(&sample.grad, &mean_grad);
            }
            worst = worst.max(acc / samples as f64 / denom);
        }
        Ok(worst)
    }
}

/// Sampling stream for `worker` in `trial` under an experiment-level seed.
/// Kept independent of the instance seed so the same data sequences can be
/// replayed against any method or schedule sharing the experiment seed.
pub fn sampler_stream(seed: u64, trial: usize, worker: usize) -> ChaCha8Rng {
    rng::substream(seed, Domain::Sampler, trial, worker)
}

/// Raw least-squares gradient `A^T (A w - y)` for a row-major `p x d`
/// design matrix. Exposed so tests can pin `A` and `y` by hand.
pub fn lsq_gradient(a: &[f64], p: usize, d: usize, y: &[f64], w: &[f64]) -> Vec<f64> {
    debug_assert_eq!(a.len(), p * d);
    debug_assert_eq!(y.len(), p);
    debug_assert_eq!(w.len(), d);
    let mut residual = vec![0.0; p];
    for k in 0..p {
        residual[k] = vecops::dot(&a[k * d..(k + 1) * d], w) - y[k];
    }
    let mut grad = vec![0.0; d];
    for k in 0..p {
        let r = residual[k];
        for (j, g) in grad.iter_mut().enumerate() {
            *g += a[k * d + j] * r;
        }
    }
    grad
}
