//! Closed-form constants of the convergence analysis and Monte Carlo
//! checkers for the inequalities they promise.
//!
//! The analysis predicts, for the inverse-time step rule
//! `eta_t = beta / (t + gamma)` with `beta > 4/mu` and a large-enough
//! offset `gamma`, that the expected squared distance to the optimum decays
//! like `delta1 sigma^2 / (n (gamma + t)) + delta2 / (gamma + t)^2`. The
//! proof leans on three intermediate bounds — on the aggregate's squared
//! norm, on its inner product with the error vector, and on the drift
//! between the current iterate and each worker's stale read point. Each
//! bound gets a checker here that compares a Monte Carlo estimate of its
//! left side against the closed-form right side, flagging a violation only
//! when the three-standard-error confidence bands fully separate.

use std::fmt;
use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::optimizer::StepSchedule;
use crate::{Result, SiagError};

/// Measured quantities of one problem/schedule pairing that the analysis
/// consumes: curvature, smoothness, the gradient-noise constant, the worker
/// count, and the certified staleness bound.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ProblemConstants {
    /// Strong-convexity modulus of the average objective.
    pub mu: f64,
    /// Smoothness (gradient Lipschitz) constant, `l >= mu`.
    pub l: f64,
    /// Gradient-noise constant: sampled gradients deviate from expected
    /// ones by at most `sigma2 * (1 + ||w - w*||^2)` in mean square.
    pub sigma2: f64,
    /// Number of workers.
    pub n: usize,
    /// Staleness bound certified by the schedule.
    pub t_bound: usize,
}

impl ProblemConstants {
    pub fn new(mu: f64, l: f64, sigma2: f64, n: usize, t_bound: usize) -> Result<Self> {
        let constants = ProblemConstants { mu, l, sigma2, n, t_bound };
        constants.validate()?;
        Ok(constants)
    }

    pub fn validate(&self) -> Result<()> {
        if !self.mu.is_finite() || self.mu <= 0.0 {
            return Err(SiagError::InvalidConfig(format!(
                "mu must be finite and positive, got {}",
                self.mu
            )));
        }
        if !self.l.is_finite() || self.l < self.mu {
            return Err(SiagError::InvalidConfig(format!(
                "l must be finite and at least mu = {}, got {}",
                self.mu, self.l
            )));
        }
        if !self.sigma2.is_finite() || self.sigma2 < 0.0 {
            return Err(SiagError::InvalidConfig(format!(
                "sigma2 must be finite and non-negative, got {}",
                self.sigma2
            )));
        }
        if self.n == 0 {
            return Err(SiagError::InvalidConfig("n must be at least 1".into()));
        }
        Ok(())
    }

    /// Aggregate-curvature constant `20 l^2 + 2 sigma2 / n`.
    pub fn c_l(&self) -> f64 {
        20.0 * self.l * self.l + 2.0 * self.sigma2 / self.n as f64
    }

    /// Staleness amplification `1 + 2T + (mu/2 + 5 l^2/mu) beta T`.
    pub fn rho_bar(&self, beta: f64) -> f64 {
        let t = self.t_bound as f64;
        1.0 + 2.0 * t + (self.mu / 2.0 + 5.0 * self.l * self.l / self.mu) * beta * t
    }
}

/// Derived constants of the convergence bound for one admissible
/// `(beta, gamma)` pair.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AnalysisConstants {
    pub problem: ProblemConstants,
    /// Step numerator; admissibility requires `beta > 4 / mu`.
    pub beta: f64,
    /// Step offset actually in force, `gamma >= gamma_lower`.
    pub gamma: f64,
    /// Smallest admissible offset for this `(problem, beta)`.
    pub gamma_lower: f64,
    pub c_l: f64,
    pub rho_bar: f64,
    /// Coefficient of the noise term `delta1 sigma2 / (n (gamma + t))`.
    pub delta1: f64,
    /// Coefficient of the burn-in term `delta2 / (gamma + t)^2`.
    pub delta2: f64,
    /// Initial gap `||w^0 - w*||^2` the bound is anchored to.
    pub e0: f64,
}

impl AnalysisConstants {
    /// Derives every constant and sets `gamma` to its lower bound
    /// `2T + max{16 c_l beta^2 rho_bar / (mu beta - 2),
    /// sqrt(8 c_l beta^2 rho_bar / (mu beta - 4))}`.
    pub fn derive(problem: ProblemConstants, beta: f64, e0: f64) -> Result<Self> {
        let lower = Self::gamma_lower(&problem, beta, e0)?;
        Self::assemble(problem, beta, lower, lower, e0)
    }

    /// Like [`AnalysisConstants::derive`] but with a caller-chosen offset,
    /// which must not undercut the derived lower bound.
    pub fn with_gamma(problem: ProblemConstants, beta: f64, gamma: f64, e0: f64) -> Result<Self> {
        let lower = Self::gamma_lower(&problem, beta, e0)?;
        if !gamma.is_finite() || gamma < lower * (1.0 - 1e-12) {
            return Err(SiagError::Inadmissible(format!(
                "gamma = {gamma} undercuts the derived lower bound {lower}"
            )));
        }
        Self::assemble(problem, beta, gamma, lower, e0)
    }

    fn gamma_lower(problem: &ProblemConstants, beta: f64, e0: f64) -> Result<f64> {
        problem.validate()?;
        if !beta.is_finite() || problem.mu * beta <= 4.0 {
            return Err(SiagError::Inadmissible(format!(
                "beta must exceed 4/mu = {} for the step offset to be well defined, got {beta}",
                4.0 / problem.mu
            )));
        }
        if !e0.is_finite() || e0 < 0.0 {
            return Err(SiagError::InvalidConfig(format!(
                "e0 must be finite and non-negative, got {e0}"
            )));
        }
        let c_l = problem.c_l();
        let rho_bar = problem.rho_bar(beta);
        let mu_beta = problem.mu * beta;
        let linear = 16.0 * c_l * beta * beta * rho_bar / (mu_beta - 2.0);
        let sqrt = (8.0 * c_l * beta * beta * rho_bar / (mu_beta - 4.0)).sqrt();
        let lower = 2.0 * problem.t_bound as f64 + linear.max(sqrt);
        if !lower.is_finite() {
            return Err(SiagError::InvalidConfig(format!(
                "gamma lower bound overflowed for beta = {beta}"
            )));
        }
        Ok(lower)
    }

    fn assemble(
        problem: ProblemConstants,
        beta: f64,
        gamma: f64,
        gamma_lower: f64,
        e0: f64,
    ) -> Result<Self> {
        let c_l = problem.c_l();
        let rho_bar = problem.rho_bar(beta);
        let delta1 = 32.0 * beta * beta * rho_bar / (problem.mu * beta - 2.0) + 1.0;
        let delta2 = gamma * gamma * e0;
        if !delta2.is_finite() {
            return Err(SiagError::InvalidConfig(format!(
                "delta2 overflowed for gamma = {gamma}, e0 = {e0}"
            )));
        }
        Ok(AnalysisConstants { problem, beta, gamma, gamma_lower, c_l, rho_bar, delta1, delta2, e0 })
    }

    /// Re-derives everything from `(problem, beta, gamma, e0)` and rejects
    /// hand-edited, inconsistent, or inadmissible field combinations.
    pub fn validate(&self) -> Result<()> {
        let rebuilt = Self::with_gamma(self.problem, self.beta, self.gamma, self.e0)?;
        let close = |a: f64, b: f64| (a - b).abs() <= 1e-9 * a.abs().max(b.abs()).max(1.0);
        if !(close(self.gamma_lower, rebuilt.gamma_lower)
            && close(self.c_l, rebuilt.c_l)
            && close(self.rho_bar, rebuilt.rho_bar)
            && close(self.delta1, rebuilt.delta1)
            && close(self.delta2, rebuilt.delta2))
        {
            return Err(SiagError::InvalidConfig(
                "analysis constants are inconsistent with (problem, beta, gamma, e0)".into(),
            ));
        }
        Ok(())
    }

    /// The step rule the constants certify.
    pub fn step_schedule(&self) -> StepSchedule {
        StepSchedule::InverseT { beta: self.beta, gamma: self.gamma }
    }

    /// Noise and burn-in terms of the bound at (possibly fractional) `t`.
    pub fn bound_terms(&self, t: f64) -> (f64, f64) {
        let denom = self.gamma + t;
        let noise = self.delta1 * self.problem.sigma2 / (self.problem.n as f64 * denom);
        let burn_in = self.delta2 / (denom * denom);
        (noise, burn_in)
    }

    /// Predicted ceiling on the expected squared gap at iteration `t`:
    /// `delta1 sigma2 / (n (gamma + t)) + delta2 / (gamma + t)^2`.
    pub fn bound(&self, t: f64) -> f64 {
        let (noise, burn_in) = self.bound_terms(t);
        noise + burn_in
    }
}

/// Monte Carlo estimate of the expected squared gap at one iteration.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GapEstimate {
    pub t: usize,
    pub mean: f64,
    pub stderr: f64,
    pub trials: usize,
}

/// Per-probe Monte Carlo estimates of the quantities the intermediate
/// bounds constrain, taken after the iteration's reports and before its
/// step. Each pair is `(mean, stderr)` over trials.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbeEstimate {
    pub t: usize,
    /// `||g^t / n||^2` — the scaled aggregate's squared norm.
    pub aggregate_norm_sq: (f64, f64),
    /// `<w^t - w*, g^t / n>` — alignment of the aggregate with the error.
    pub error_alignment: (f64, f64),
    /// `||w^t - w^{tau_i(t)}||^2` per worker — drift past each stale read.
    pub drift_sq: Vec<(f64, f64)>,
}

/// Everything a trajectory ensemble exposes to the checkers: the full mean
/// gap curve (index `s` holds the estimate of `E||w^s - w*||^2`) and the
/// probe measurements.
#[derive(Debug, Clone, PartialEq)]
pub struct TrajectoryEnsemble {
    pub gap_mean: Vec<f64>,
    pub gap_stderr: Vec<f64>,
    pub probes: Vec<ProbeEstimate>,
    pub trials: usize,
}

impl TrajectoryEnsemble {
    fn validate(&self) -> Result<()> {
        if self.gap_mean.len() != self.gap_stderr.len() {
            return Err(SiagError::InsufficientData(
                "gap mean and stderr curves differ in length".into(),
            ));
        }
        for probe in &self.probes {
            if probe.t >= self.gap_mean.len() {
                return Err(SiagError::InsufficientData(format!(
                    "probe at t = {} outside the recorded gap curve (len {})",
                    probe.t,
                    self.gap_mean.len()
                )));
            }
        }
        Ok(())
    }

    /// Largest mean gap over `s in [lo, hi]`, with the stderr at the argmax.
    fn window_max(&self, lo: usize, hi: usize) -> (f64, f64) {
        let mut best = (self.gap_mean[lo], self.gap_stderr[lo]);
        for s in lo..=hi {
            if self.gap_mean[s] > best.0 {
                best = (self.gap_mean[s], self.gap_stderr[s]);
            }
        }
        best
    }
}

/// One compared inequality instance. `margin` is oriented so that positive
/// means the inequality holds with room to spare; `stderr` is the standard
/// error of the estimated side (`lhs`).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CheckRow {
    pub t: usize,
    pub lhs: f64,
    pub rhs: f64,
    pub margin: f64,
    pub stderr: f64,
}

/// Result of checking one inequality across probes or a whole gap curve.
#[derive(Debug, Clone, PartialEq)]
pub struct CheckReport {
    pub name: &'static str,
    pub rows: Vec<CheckRow>,
    pub violations: usize,
    pub worst_margin: f64,
}

impl CheckReport {
    fn collect(name: &'static str, rows: Vec<CheckRow>, violated: Vec<bool>) -> Self {
        let violations = violated.iter().filter(|&&v| v).count();
        let worst_margin =
            rows.iter().map(|r| r.margin).fold(f64::INFINITY, f64::min);
        CheckReport { name, rows, violations, worst_margin }
    }

    pub fn passed(&self) -> bool {
        self.violations == 0
    }

    /// Writes the rows as CSV with header `t,lhs,rhs,margin,stderr`.
    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut wtr = csv::Writer::from_writer(writer);
        wtr.write_record(["t", "lhs", "rhs", "margin", "stderr"])?;
        for row in &self.rows {
            wtr.write_record([
                row.t.to_string(),
                row.lhs.to_string(),
                row.rhs.to_string(),
                row.margin.to_string(),
                row.stderr.to_string(),
            ])?;
        }
        wtr.flush()?;
        Ok(())
    }
}

impl fmt::Display for CheckReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.passed() {
            write!(
                f,
                "{}: OK over {} points (worst margin {:.3e})",
                self.name,
                self.rows.len(),
                self.worst_margin
            )
        } else {
            write!(
                f,
                "{}: {} of {} points violated (worst margin {:.3e})",
                self.name,
                self.violations,
                self.rows.len(),
                self.worst_margin
            )
        }
    }
}

/// Checks the convergence bound `mean_t <= bound(t)` across a gap curve.
/// A point counts as a violation only when even `mean - 3 stderr` exceeds
/// the bound. The constants are re-validated first so that inadmissible
/// `(beta, gamma)` pairs are rejected rather than silently evaluated.
pub fn check_convergence_bound(
    constants: &AnalysisConstants,
    curve: &[GapEstimate],
) -> Result<CheckReport> {
    constants.validate()?;
    let mut rows = Vec::with_capacity(curve.len());
    let mut violated = Vec::with_capacity(curve.len());
    for est in curve {
        let rhs = constants.bound(est.t as f64);
        rows.push(CheckRow {
            t: est.t,
            lhs: est.mean,
            rhs,
            margin: rhs - est.mean,
            stderr: est.stderr,
        });
        violated.push(est.mean - 3.0 * est.stderr > rhs);
    }
    Ok(CheckReport::collect("convergence bound", rows, violated))
}

/// Checks the aggregate-norm bound at every probe:
/// `E||g^t/n||^2 <= 2 sigma2/n + c_l * max_{s in [(t-T)+, t]} E_s`.
pub fn check_aggregate_norm_bound(
    ensemble: &TrajectoryEnsemble,
    constants: &ProblemConstants,
) -> Result<CheckReport> {
    ensemble.validate()?;
    constants.validate()?;
    let c_l = constants.c_l();
    let base = 2.0 * constants.sigma2 / constants.n as f64;
    let mut rows = Vec::new();
    let mut violated = Vec::new();
    for probe in &ensemble.probes {
        let lo = probe.t.saturating_sub(constants.t_bound);
        let (gap, gap_se) = ensemble.window_max(lo, probe.t);
        let rhs = base + c_l * gap;
        let rhs_se = c_l * gap_se;
        let (lhs, lhs_se) = probe.aggregate_norm_sq;
        rows.push(CheckRow { t: probe.t, lhs, rhs, margin: rhs - lhs, stderr: lhs_se });
        violated.push(lhs - 3.0 * lhs_se > rhs + 3.0 * rhs_se);
    }
    Ok(CheckReport::collect("aggregate-norm bound", rows, violated))
}

/// Checks the alignment lower bound at every probe:
/// `E<w^t - w*, g^t/n> >= (mu/4) E_t - [c_l T eta + (mu/4 + 5l^2/(2mu)) c_l
/// T^2 eta^2] Emax_t - [2 T eta + (mu/2 + 5l^2/mu) T^2 eta^2] sigma2/n`,
/// with `eta = eta_{t-T}` from the run's own step rule and `Emax_t` the
/// largest mean gap over `[(t-2T)+, t]`.
pub fn check_error_alignment_bound(
    ensemble: &TrajectoryEnsemble,
    constants: &ProblemConstants,
    steps: &StepSchedule,
) -> Result<CheckReport> {
    ensemble.validate()?;
    constants.validate()?;
    let c_l = constants.c_l();
    let t_bound = constants.t_bound;
    let tf = t_bound as f64;
    let l_sq = constants.l * constants.l;
    let mu = constants.mu;
    let mut rows = Vec::new();
    let mut violated = Vec::new();
    for probe in &ensemble.probes {
        let eta = steps.step_size_signed(probe.t as i64 - t_bound as i64);
        let coef_gap = c_l * tf * eta + (mu / 4.0 + 5.0 * l_sq / (2.0 * mu)) * c_l * tf * tf * eta * eta;
        let coef_noise = 2.0 * tf * eta + (mu / 2.0 + 5.0 * l_sq / mu) * tf * tf * eta * eta;
        let lo = probe.t.saturating_sub(2 * t_bound);
        let (emax, emax_se) = ensemble.window_max(lo, probe.t);
        let e_t = ensemble.gap_mean[probe.t];
        let e_t_se = ensemble.gap_stderr[probe.t];
        let rhs = mu / 4.0 * e_t
            - coef_gap * emax
            - coef_noise * constants.sigma2 / constants.n as f64;
        let rhs_se = mu / 4.0 * e_t_se + coef_gap * emax_se;
        let (lhs, lhs_se) = probe.error_alignment;
        rows.push(CheckRow { t: probe.t, lhs, rhs, margin: lhs - rhs, stderr: lhs_se });
        violated.push(lhs + 3.0 * lhs_se < rhs - 3.0 * rhs_se);
    }
    Ok(CheckReport::collect("error-alignment bound", rows, violated))
}

/// Checks the stale-read drift bound at every probe:
/// `E||w^t - w^{tau_i(t)}||^2 <= T^2 eta_{t-T}^2 (2 sigma2/n + c_l Emax_t)`
/// for every worker `i`; each report row carries the worst worker.
pub fn check_drift_bound(
    ensemble: &TrajectoryEnsemble,
    constants: &ProblemConstants,
    steps: &StepSchedule,
) -> Result<CheckReport> {
    ensemble.validate()?;
    constants.validate()?;
    let c_l = constants.c_l();
    let t_bound = constants.t_bound;
    let tf = t_bound as f64;
    let mut rows = Vec::new();
    let mut violated = Vec::new();
    for probe in &ensemble.probes {
        let eta = steps.step_size_signed(probe.t as i64 - t_bound as i64);
        let lo = probe.t.saturating_sub(2 * t_bound);
        let (emax, emax_se) = ensemble.window_max(lo, probe.t);
        let rhs = tf * tf * eta * eta * (2.0 * constants.sigma2 / constants.n as f64 + c_l * emax);
        let rhs_se = tf * tf * eta * eta * c_l * emax_se;
        let (lhs, lhs_se) = probe
            .drift_sq
            .iter()
            .copied()
            .max_by(|a, b| a.0.total_cmp(&b.0))
            .ok_or_else(|| {
                SiagError::InsufficientData(format!("probe at t = {} has no workers", probe.t))
            })?;
        rows.push(CheckRow { t: probe.t, lhs, rhs, margin: rhs - lhs, stderr: lhs_se });
        violated.push(lhs - 3.0 * lhs_se > rhs + 3.0 * rhs_se);
    }
    Ok(CheckReport::collect("stale-read drift bound", rows, violated))
}
