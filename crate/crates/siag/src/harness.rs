//! Experiment harness: replicated trials, Monte Carlo gap curves with
//! confidence bands, decay-slope fits, speedup tables, and probe ensembles
//! for the inequality checkers.
//!
//! A trial is a pure function of `(config, trial_index)`: the instance comes
//! from the problem seed, activation patterns from the schedule seed, and
//! data samples from per-`(trial, worker)` substreams of the experiment
//! seed. Trials run in parallel; aggregation uses fixed-topology pairwise
//! sums, so results are independent of execution order and reproducible bit
//! for bit.

use std::path::Path;
use std::time::Instant;

use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::optimizer::{Method, ServerState, SgdScaling, StepSchedule};
use crate::output;
use crate::problem::{sampler_stream, GradientSample, LsqInstance, ProblemSpec};
use crate::schedule::{ScheduleConfig, StalenessTracker};
use crate::theory::{GapEstimate, ProbeEstimate, TrajectoryEnsemble};
use crate::vecops;
use crate::{rng, Result, SiagError};

/// Default number of recorded points for the log-spaced grid.
pub const DEFAULT_RECORD_POINTS: usize = 200;

/// Which iterate indices get recorded. Both variants always include 0 and
/// the horizon.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum RecordGrid {
    /// Geometrically spaced indices from 1 to the horizon, plus 0.
    LogSpaced { points: usize },
    /// Every `stride` iterations.
    EveryK { stride: usize },
}

impl Default for RecordGrid {
    fn default() -> Self {
        RecordGrid::LogSpaced { points: DEFAULT_RECORD_POINTS }
    }
}

impl RecordGrid {
    pub fn validate(&self) -> Result<()> {
        match *self {
            RecordGrid::LogSpaced { points } if points < 2 => Err(SiagError::InvalidConfig(
                format!("log-spaced grid needs at least 2 points, got {points}"),
            )),
            RecordGrid::EveryK { stride } if stride == 0 => {
                Err(SiagError::InvalidConfig("record stride must be at least 1".into()))
            }
            _ => Ok(()),
        }
    }

    /// Sorted, deduplicated iterate indices in `[0, horizon]`.
    pub fn indices(&self, horizon: usize) -> Vec<usize> {
        if horizon == 0 {
            return vec![0];
        }
        let mut grid = vec![0];
        match *self {
            RecordGrid::LogSpaced { points } => {
                let span = (horizon as f64).ln();
                let steps = points - 1;
                for k in 0..steps {
                    let f = if steps == 1 { 1.0 } else { k as f64 / (steps - 1) as f64 };
                    grid.push((span * f).exp().round() as usize);
                }
            }
            RecordGrid::EveryK { stride } => {
                let mut t = stride;
                while t < horizon {
                    grid.push(t);
                    t += stride;
                }
            }
        }
        grid.push(horizon);
        grid.sort_unstable();
        grid.dedup();
        grid
    }
}

/// Complete, serializable description of one experiment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub problem: ProblemSpec,
    pub schedule: ScheduleConfig,
    pub method: Method,
    pub steps: StepSchedule,
    /// Number of optimization steps; the gap is recorded through index
    /// `horizon` inclusive. Zero is allowed and records only the start.
    pub horizon: usize,
    pub trials: usize,
    #[serde(default)]
    pub record: RecordGrid,
    /// Normalization of the SGD baseline's direction; ignored by the
    /// aggregated methods.
    #[serde(default)]
    pub sgd_scaling: SgdScaling,
    /// Experiment seed; drives the per-(trial, worker) data streams.
    pub seed: u64,
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        self.problem.validate()?;
        self.schedule.validate()?;
        self.steps.validate()?;
        self.record.validate()?;
        if self.schedule.n != self.problem.n {
            return Err(SiagError::InvalidConfig(format!(
                "schedule covers {} workers but the problem has {}",
                self.schedule.n, self.problem.n
            )));
        }
        if self.trials == 0 {
            return Err(SiagError::InvalidConfig("trials must be at least 1".into()));
        }
        if self.trials > rng::MAX_TRIALS {
            return Err(SiagError::InvalidConfig(format!(
                "trials must not exceed {}, got {}",
                rng::MAX_TRIALS,
                self.trials
            )));
        }
        if self.problem.n > rng::MAX_WORKERS {
            return Err(SiagError::InvalidConfig(format!(
                "worker count must not exceed {}, got {}",
                rng::MAX_WORKERS,
                self.problem.n
            )));
        }
        Ok(())
    }

    /// The recording grid this config produces.
    pub fn grid(&self) -> Vec<usize> {
        self.record.indices(self.horizon)
    }
}

/// Run facts that ride along with the curve.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunMetadata {
    /// Wall-clock duration; informational only and excluded from hashes.
    pub wall_ms: u64,
    /// Largest staleness any tracker observed across all trials.
    pub observed_max_staleness: i64,
    /// SHA-256 of the canonical JSON of the config.
    pub config_hash: String,
    /// SHA-256 of the curve's CSV bytes.
    pub curve_hash: String,
    /// Initial gap `||w^0 - w*||^2`.
    pub e0: f64,
}

/// A finished experiment: config, estimated gap curve, and metadata.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultSet {
    pub config: ExperimentConfig,
    pub curve: Vec<GapEstimate>,
    pub metadata: RunMetadata,
}

/// On-disk manifest: everything except the curve, which lives in the CSV.
#[derive(Debug, Clone, Serialize, Deserialize)]
struct Manifest {
    config: ExperimentConfig,
    metadata: RunMetadata,
}

impl ResultSet {
    /// Writes `<stem>.csv` (curve) and `<stem>.json` (manifest) into `dir`.
    pub fn save(&self, dir: &Path, stem: &str) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        output::write_atomic(
            &dir.join(format!("{stem}.csv")),
            &output::curve_csv_bytes(&self.curve)?,
        )?;
        let manifest = Manifest { config: self.config.clone(), metadata: self.metadata.clone() };
        output::write_json_atomic(&dir.join(format!("{stem}.json")), &manifest)
    }

    /// Reads a saved result back and verifies both content hashes.
    pub fn load(dir: &Path, stem: &str) -> Result<ResultSet> {
        let manifest: Manifest = output::read_json(&dir.join(format!("{stem}.json")))?;
        let curve = output::read_curve_csv(&dir.join(format!("{stem}.csv")))?;
        let set = ResultSet { config: manifest.config, curve, metadata: manifest.metadata };
        if output::content_hash(&set.config)? != set.metadata.config_hash {
            return Err(SiagError::InvalidConfig(
                "saved config does not match its recorded hash".into(),
            ));
        }
        let curve_hash = output::sha256_hex(&output::curve_csv_bytes(&set.curve)?);
        if curve_hash != set.metadata.curve_hash {
            return Err(SiagError::InvalidConfig(
                "saved curve does not match its recorded hash".into(),
            ));
        }
        Ok(set)
    }
}

struct TrialOutput {
    gaps: Vec<f64>,
    observed_staleness: i64,
}

/// Mean and standard error over trials, accumulated with fixed-topology
/// pairwise sums so the result never depends on trial execution order.
fn mean_stderr(values: &[f64]) -> (f64, f64) {
    let k = values.len() as f64;
    let mean = vecops::pairwise_sum(values) / k;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let sq: Vec<f64> = values.iter().map(|v| (v - mean) * (v - mean)).collect();
    let var = vecops::pairwise_sum(&sq) / (k - 1.0);
    (mean, (var / k).sqrt())
}

fn aggregate_curve(grid: &[usize], trials: &[TrialOutput]) -> Vec<GapEstimate> {
    let mut scratch = vec![0.0; trials.len()];
    grid.iter()
        .enumerate()
        .map(|(j, &t)| {
            for (slot, trial) in scratch.iter_mut().zip(trials) {
                *slot = trial.gaps[j];
            }
            let (mean, stderr) = mean_stderr(&scratch);
            GapEstimate { t, mean, stderr, trials: trials.len() }
        })
        .collect()
}

fn run_trial_inner(
    config: &ExperimentConfig,
    instance: &LsqInstance,
    trial: usize,
    grid: &[usize],
) -> Result<TrialOutput> {
    let n = config.problem.n;
    let d = config.problem.d;
    let mut schedule = config.schedule.stream(trial)?;
    let mut tracker = StalenessTracker::new(n);
    let mut state = ServerState::with_initial_iterate(config.method, n, vec![0.0; d]);
    state.set_trial(trial);
    let mut samplers: Vec<ChaCha8Rng> =
        (0..n).map(|worker| sampler_stream(config.seed, trial, worker)).collect();
    let mut gaps = Vec::with_capacity(grid.len());
    let mut next = 0;
    for t in 0..=config.horizon {
        if next < grid.len() && grid[next] == t {
            gaps.push(vecops::dist_sq(state.iterate(), instance.w_star()));
            next += 1;
        }
        if t == config.horizon {
            break;
        }
        let active = schedule.next_active_set();
        tracker.advance(&active)?;
        match config.method {
            Method::Siag => {
                let samples = draw_samples(instance, &active.workers, state.iterate(), t, &mut samplers);
                state.report_gradients(&active, &samples)?;
                state.siag_step(&config.steps)?;
            }
            Method::Iag => state.iag_step(instance, &active, &config.steps)?,
            Method::Sgd => {
                let samples = draw_samples(instance, &active.workers, state.iterate(), t, &mut samplers);
                state.sgd_step(&active, &samples, &config.steps, config.sgd_scaling)?;
            }
        }
    }
    Ok(TrialOutput { gaps, observed_staleness: tracker.observed_max() })
}

fn draw_samples(
    instance: &LsqInstance,
    workers: &[usize],
    w: &[f64],
    t: usize,
    samplers: &mut [ChaCha8Rng],
) -> Vec<GradientSample> {
    workers
        .iter()
        .map(|&worker| instance.sample_gradient(worker, w, t, &mut samplers[worker]))
        .collect()
}

/// Runs a single trial and returns the recorded `(t, ||w^t - w*||^2)`
/// trajectory. Deterministic per `(config, trial)`.
pub fn run_trial(config: &ExperimentConfig, trial: usize) -> Result<Vec<(usize, f64)>> {
    config.validate()?;
    let instance = LsqInstance::generate(&config.problem)?;
    let grid = config.grid();
    let output = run_trial_inner(config, &instance, trial, &grid)?;
    Ok(grid.into_iter().zip(output.gaps).collect())
}

/// Runs every trial (in parallel), averages the recorded gaps, and returns
/// the curve with standard errors plus run metadata. Fails if any trial
/// diverges; the error carries the lowest failing trial index.
pub fn run_experiment(config: &ExperimentConfig) -> Result<ResultSet> {
    config.validate()?;
    let start = Instant::now();
    let instance = LsqInstance::generate(&config.problem)?;
    let grid = config.grid();
    let outputs: Vec<Result<TrialOutput>> = (0..config.trials)
        .into_par_iter()
        .map(|trial| run_trial_inner(config, &instance, trial, &grid))
        .collect();
    let mut trials = Vec::with_capacity(outputs.len());
    for output in outputs {
        trials.push(output?);
    }
    let curve = aggregate_curve(&grid, &trials);
    let observed_max_staleness =
        trials.iter().map(|t| t.observed_staleness).max().unwrap_or(0);
    let metadata = RunMetadata {
        wall_ms: start.elapsed().as_millis() as u64,
        observed_max_staleness,
        config_hash: output::content_hash(config)?,
        curve_hash: output::sha256_hex(&output::curve_csv_bytes(&curve)?),
        e0: curve[0].mean,
    };
    Ok(ResultSet { config: config.clone(), curve, metadata })
}

/// Ordinary least-squares slope of `log(mean)` against `log(t)` over the
/// recorded points with `t_min <= t <= t_max` (and `t >= 1`).
pub fn slope_fit(curve: &[GapEstimate], t_min: usize, t_max: usize) -> Result<f64> {
    let mut points = Vec::new();
    for est in curve {
        if est.t < t_min.max(1) || est.t > t_max {
            continue;
        }
        if est.mean <= 0.0 {
            return Err(SiagError::InsufficientData(format!(
                "cannot fit a log slope: mean at t = {} is {}",
                est.t, est.mean
            )));
        }
        points.push(((est.t as f64).ln(), est.mean.ln()));
    }
    if points.len() < 5 {
        return Err(SiagError::InsufficientData(format!(
            "slope fit needs at least 5 recorded points in [{t_min}, {t_max}], got {}",
            points.len()
        )));
    }
    let k = points.len() as f64;
    let x_mean = points.iter().map(|p| p.0).sum::<f64>() / k;
    let y_mean = points.iter().map(|p| p.1).sum::<f64>() / k;
    let mut num = 0.0;
    let mut den = 0.0;
    for (x, y) in &points {
        num += (x - x_mean) * (y - y_mean);
        den += (x - x_mean) * (x - x_mean);
    }
    Ok(num / den)
}

/// Coefficient of determination of the same log-log fit, for judging how
/// close a curve is to a pure power law.
pub fn slope_fit_r2(curve: &[GapEstimate], t_min: usize, t_max: usize) -> Result<(f64, f64)> {
    let slope = slope_fit(curve, t_min, t_max)?;
    let points: Vec<(f64, f64)> = curve
        .iter()
        .filter(|e| e.t >= t_min.max(1) && e.t <= t_max)
        .map(|e| ((e.t as f64).ln(), e.mean.ln()))
        .collect();
    let k = points.len() as f64;
    let x_mean = points.iter().map(|p| p.0).sum::<f64>() / k;
    let y_mean = points.iter().map(|p| p.1).sum::<f64>() / k;
    let intercept = y_mean - slope * x_mean;
    let ss_res: f64 = points.iter().map(|(x, y)| (y - slope * x - intercept).powi(2)).sum();
    let ss_tot: f64 = points.iter().map(|(_, y)| (y - y_mean).powi(2)).sum();
    if ss_tot == 0.0 {
        return Ok((slope, 1.0));
    }
    Ok((slope, 1.0 - ss_res / ss_tot))
}

/// One line of a speedup table.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct SpeedupRow {
    pub n: usize,
    pub mean: f64,
    pub stderr: f64,
    /// `mean(n) / mean(n_min)`.
    pub ratio: f64,
    /// Ideal linear-speedup ratio `n_min / n`.
    pub ideal: f64,
}

/// Builds the gap ratios at `reference_t` across results that differ only
/// in worker count (and in the schedule fields that scale with it). Rows
/// come back sorted by `n`.
pub fn speedup_table(results: &[ResultSet], reference_t: usize) -> Result<Vec<SpeedupRow>> {
    if results.is_empty() {
        return Err(SiagError::InsufficientData("speedup table needs at least one result".into()));
    }
    let canon = |config: &ExperimentConfig| -> Result<serde_json::Value> {
        let mut c = config.clone();
        c.problem.n = 0;
        c.schedule.n = 0;
        c.schedule.active_per_iter = 0;
        c.schedule.caps = None;
        Ok(serde_json::to_value(&c)?)
    };
    let base = canon(&results[0].config)?;
    for result in &results[1..] {
        if canon(&result.config)? != base {
            return Err(SiagError::InvalidConfig(
                "speedup table inputs differ beyond the worker count".into(),
            ));
        }
    }
    let mut entries = Vec::with_capacity(results.len());
    for result in results {
        let est = result.curve.iter().find(|e| e.t == reference_t).ok_or_else(|| {
            SiagError::InsufficientData(format!(
                "reference t = {reference_t} is not on the recording grid"
            ))
        })?;
        entries.push((result.config.problem.n, est.mean, est.stderr));
    }
    entries.sort_by_key(|e| e.0);
    let (n_min, base_mean, _) = entries[0];
    Ok(entries
        .into_iter()
        .map(|(n, mean, stderr)| SpeedupRow {
            n,
            mean,
            stderr,
            ratio: mean / base_mean,
            ideal: n_min as f64 / n as f64,
        })
        .collect())
}

/// Average of the recorded means with `t_min <= t <= t_max`, with the
/// largest point stderr as a conservative error scale.
pub fn window_mean(curve: &[GapEstimate], t_min: usize, t_max: usize) -> Result<(f64, f64)> {
    let means: Vec<f64> =
        curve.iter().filter(|e| e.t >= t_min && e.t <= t_max).map(|e| e.mean).collect();
    if means.is_empty() {
        return Err(SiagError::InsufficientData(format!(
            "no recorded points in [{t_min}, {t_max}]"
        )));
    }
    let se = curve
        .iter()
        .filter(|e| e.t >= t_min && e.t <= t_max)
        .map(|e| e.stderr)
        .fold(0.0f64, f64::max);
    Ok((vecops::pairwise_sum(&means) / means.len() as f64, se))
}

/// Counts recorded points at `t >= start_t` that climb significantly (three
/// combined standard errors) above some earlier recorded point — a stable,
/// convergent run must not produce any.
pub fn envelope_violations(curve: &[GapEstimate], start_t: usize) -> usize {
    let mut floor = f64::INFINITY;
    let mut violations = 0;
    for est in curve.iter().filter(|e| e.t >= start_t) {
        if est.mean - 3.0 * est.stderr > floor {
            violations += 1;
        }
        floor = floor.min(est.mean + 3.0 * est.stderr);
    }
    violations
}

/// Conservative gradient-noise constant for an instance: the empirical
/// bound probed at the start iterate (origin) and at the optimum, whichever
/// is larger.
pub fn estimate_noise_constant(instance: &LsqInstance, samples: usize) -> Result<f64> {
    let origin = vec![0.0; instance.d()];
    let at_origin = instance.empirical_noise_bound(&origin, samples)?;
    let optimum = instance.w_star().to_vec();
    let at_optimum = instance.empirical_noise_bound(&optimum, samples)?;
    Ok(at_origin.max(at_optimum))
}

struct ProbeTrial {
    gaps: Vec<f64>,
    aggregate_norm_sq: Vec<f64>,
    alignment: Vec<f64>,
    drift_sq: Vec<Vec<f64>>,
    observed_staleness: i64,
}

fn run_probe_trial(
    config: &ExperimentConfig,
    instance: &LsqInstance,
    trial: usize,
    probes: &[usize],
    depth: usize,
) -> Result<ProbeTrial> {
    let n = config.problem.n;
    let d = config.problem.d;
    let w_star = instance.w_star();
    let mut schedule = config.schedule.stream(trial)?;
    let mut tracker = StalenessTracker::new(n);
    let mut state = ServerState::with_initial_iterate(config.method, n, vec![0.0; d]);
    state.set_trial(trial);
    let mut samplers: Vec<ChaCha8Rng> =
        (0..n).map(|worker| sampler_stream(config.seed, trial, worker)).collect();
    // ring of the last `depth` iterates, enough to look up any stale read
    // point the schedule certificate allows
    let mut ring: Vec<Vec<f64>> = vec![vec![0.0; d]; depth];
    let mut out = ProbeTrial {
        gaps: Vec::with_capacity(config.horizon + 1),
        aggregate_norm_sq: Vec::with_capacity(probes.len()),
        alignment: Vec::with_capacity(probes.len()),
        drift_sq: Vec::with_capacity(probes.len()),
        observed_staleness: 0,
    };
    let mut next_probe = 0;
    for t in 0..=config.horizon {
        out.gaps.push(vecops::dist_sq(state.iterate(), w_star));
        ring[t % depth].copy_from_slice(state.iterate());
        let active = schedule.next_active_set();
        tracker.advance(&active)?;
        match config.method {
            Method::Siag => {
                let samples = draw_samples(instance, &active.workers, state.iterate(), t, &mut samplers);
                state.report_gradients(&active, &samples)?;
            }
            Method::Iag => {
                let samples: Vec<GradientSample> = active
                    .workers
                    .iter()
                    .map(|&worker| GradientSample {
                        grad: instance.exact_gradient(worker, state.iterate()),
                        worker,
                        iter_stamp: t,
                    })
                    .collect();
                state.report_gradients(&active, &samples)?;
            }
            Method::Sgd => unreachable!("probe ensembles validate the method upfront"),
        }
        if next_probe < probes.len() && probes[next_probe] == t {
            let scale = 1.0 / n as f64;
            let aggregate: Vec<f64> =
                state.buffer().running_sum().iter().map(|v| v * scale).collect();
            out.aggregate_norm_sq.push(vecops::norm_sq(&aggregate));
            let mut inner = 0.0;
            for ((wj, sj), gj) in state.iterate().iter().zip(w_star).zip(&aggregate) {
                inner += (wj - sj) * gj;
            }
            out.alignment.push(inner);
            let drifts: Vec<f64> = tracker
                .tau()
                .iter()
                .map(|&tau| {
                    // a still-sentinel worker reads the start iterate; the
                    // ring always holds it because every schedule activates
                    // each worker within its certified bound
                    let s = tau.max(0) as usize;
                    debug_assert!(t - s < depth, "stale read at t = {t} outside the ring");
                    vecops::dist_sq(state.iterate(), &ring[s % depth])
                })
                .collect();
            out.drift_sq.push(drifts);
            next_probe += 1;
        }
        state.buffered_descend(&config.steps)?;
    }
    out.observed_staleness = tracker.observed_max();
    Ok(out)
}

/// Runs a probing ensemble for a buffered method: the full per-iteration
/// gap curve plus, at each probe iteration, the aggregate's squared norm,
/// its alignment with the error vector, and each worker's stale-read drift
/// — every quantity measured after the iteration's reports and before its
/// step, then averaged across trials.
pub fn run_probe_ensemble(
    config: &ExperimentConfig,
    probes: &[usize],
) -> Result<TrajectoryEnsemble> {
    config.validate()?;
    if config.method == Method::Sgd {
        return Err(SiagError::InvalidConfig(
            "probe ensembles need a buffered method; the sgd baseline keeps no aggregate".into(),
        ));
    }
    let mut probes = probes.to_vec();
    probes.sort_unstable();
    probes.dedup();
    if probes.is_empty() {
        return Err(SiagError::InvalidConfig("at least one probe iteration is required".into()));
    }
    if let Some(&last) = probes.last() {
        if last > config.horizon {
            return Err(SiagError::InvalidConfig(format!(
                "probe at t = {last} lies beyond the horizon {}",
                config.horizon
            )));
        }
    }
    let instance = LsqInstance::generate(&config.problem)?;
    let depth = config.schedule.certified_t()? + 1;
    let outputs: Vec<Result<ProbeTrial>> = (0..config.trials)
        .into_par_iter()
        .map(|trial| run_probe_trial(config, &instance, trial, &probes, depth))
        .collect();
    let mut trials = Vec::with_capacity(outputs.len());
    for output in outputs {
        trials.push(output?);
    }
    let mut scratch = vec![0.0; trials.len()];
    let mut collect = |extract: &dyn Fn(&ProbeTrial) -> f64| -> (f64, f64) {
        for (slot, trial) in scratch.iter_mut().zip(&trials) {
            *slot = extract(trial);
        }
        mean_stderr(&scratch)
    };
    let mut gap_mean = Vec::with_capacity(config.horizon + 1);
    let mut gap_stderr = Vec::with_capacity(config.horizon + 1);
    for idx in 0..=config.horizon {
        let (mean, stderr) = collect(&|trial: &ProbeTrial| trial.gaps[idx]);
        gap_mean.push(mean);
        gap_stderr.push(stderr);
    }
    let n = config.problem.n;
    let estimates = probes
        .iter()
        .enumerate()
        .map(|(j, &t)| ProbeEstimate {
            t,
            aggregate_norm_sq: collect(&|trial: &ProbeTrial| trial.aggregate_norm_sq[j]),
            error_alignment: collect(&|trial: &ProbeTrial| trial.alignment[j]),
            drift_sq: (0..n)
                .map(|worker| collect(&|trial: &ProbeTrial| trial.drift_sq[j][worker]))
                .collect(),
        })
        .collect();
    Ok(TrajectoryEnsemble {
        gap_mean,
        gap_stderr,
        probes: estimates,
        trials: trials.len(),
    })
}
