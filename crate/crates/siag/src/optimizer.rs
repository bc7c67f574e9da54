//! Server-side optimizers: the aggregated-gradient buffer, the step-size
//! rules, and the sIAG / IAG / SGD update steps.
//!
//! The server keeps one gradient slot per worker, zero-initialized with
//! stamp `-1`. At iteration `t` the active workers overwrite their slots and
//! the aggregate is maintained incrementally,
//! `g_t = g_{t-1} - sum(old slots) + sum(fresh reports)`,
//! which matches a full recompute to rounding error. sIAG and IAG both
//! descend along `(eta_t / n) * g_t`; IAG simply fills the slots with exact
//! expected gradients instead of stochastic reports. The SGD baseline
//! ignores the buffer and uses only the iteration's fresh reports.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::problem::{GradientSample, LsqInstance};
use crate::schedule::ActiveSet;
use crate::vecops;
use crate::{Result, SiagError, DIVERGENCE_NORM};

/// Which update rule a server is running.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Siag,
    Iag,
    Sgd,
}

impl Method {
    pub fn name(&self) -> &'static str {
        match self {
            Method::Siag => "siag",
            Method::Iag => "iag",
            Method::Sgd => "sgd",
        }
    }
}

/// How the SGD baseline normalizes its summed direction.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SgdScaling {
    /// Divide by `n`, matching the aggregated update's scaling.
    #[default]
    ByN,
    /// Divide by the number of active workers.
    ByActive,
}

/// Step-size rule `eta_t`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum StepSchedule {
    Constant { eta: f64 },
    /// `eta_t = beta / (t + gamma)`.
    InverseT { beta: f64, gamma: f64 },
}

impl StepSchedule {
    pub fn validate(&self) -> Result<()> {
        match *self {
            StepSchedule::Constant { eta } => {
                if !eta.is_finite() || eta <= 0.0 {
                    return Err(SiagError::InvalidConfig(format!(
                        "constant step must be finite and positive, got {eta}"
                    )));
                }
            }
            StepSchedule::InverseT { beta, gamma } => {
                if !beta.is_finite() || beta <= 0.0 {
                    return Err(SiagError::InvalidConfig(format!(
                        "steps.beta must be finite and positive, got {beta}"
                    )));
                }
                if !gamma.is_finite() || gamma <= 0.0 {
                    return Err(SiagError::InvalidConfig(format!(
                        "steps.gamma must be finite and positive, got {gamma}"
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn step_size(&self, t: usize) -> f64 {
        match *self {
            StepSchedule::Constant { eta } => eta,
            StepSchedule::InverseT { beta, gamma } => beta / (t as f64 + gamma),
        }
    }

    /// Step size at a signed index, used by the analysis terms `eta_{t-T}`
    /// which evaluate the rule slightly before iteration zero.
    pub fn step_size_signed(&self, t: i64) -> f64 {
        match *self {
            StepSchedule::Constant { eta } => eta,
            StepSchedule::InverseT { beta, gamma } => {
                debug_assert!(gamma + t as f64 > 0.0, "step index {t} under -gamma");
                beta / (t as f64 + gamma)
            }
        }
    }
}

/// Per-worker gradient slots plus the incrementally maintained aggregate.
#[derive(Debug, Clone, PartialEq)]
pub struct GradientBuffer {
    slots: Vec<Vec<f64>>,
    stamps: Vec<i64>,
    running_sum: Vec<f64>,
}

impl GradientBuffer {
    /// All slots zero, stamped `-1`.
    pub fn new(n: usize, d: usize) -> Self {
        GradientBuffer {
            slots: vec![vec![0.0; d]; n],
            stamps: vec![-1; n],
            running_sum: vec![0.0; d],
        }
    }

    pub fn n(&self) -> usize {
        self.slots.len()
    }

    pub fn d(&self) -> usize {
        self.running_sum.len()
    }

    pub fn slot(&self, worker: usize) -> &[f64] {
        &self.slots[worker]
    }

    pub fn stamps(&self) -> &[i64] {
        &self.stamps
    }

    /// The maintained aggregate `sum_i slots[i]`.
    pub fn running_sum(&self) -> &[f64] {
        &self.running_sum
    }

    /// Ground-truth aggregate, summed left-to-right over workers. The
    /// incremental `running_sum` must track this within rounding error.
    pub fn recompute_sum(&self) -> Vec<f64> {
        let mut sum = vec![0.0; self.d()];
        for slot in &self.slots {
            vecops::add_assign(&mut sum, slot);
        }
        sum
    }

    /// Validates and applies one iteration's reports: exactly one sample per
    /// active worker (in active-set order), stamped with the current
    /// iteration. Subtracts the old slots, then adds the fresh ones, both in
    /// ascending worker order.
    pub fn report(&mut self, active: &ActiveSet, samples: &[GradientSample], t: usize) -> Result<()> {
        if active.iter != t {
            return Err(SiagError::BadReport(format!(
                "active set for iteration {} reported at iteration {t}",
                active.iter
            )));
        }
        if samples.len() != active.workers.len() {
            return Err(SiagError::BadReport(format!(
                "{} samples for {} active workers",
                samples.len(),
                active.workers.len()
            )));
        }
        for (&worker, sample) in active.workers.iter().zip(samples) {
            if sample.worker != worker {
                return Err(SiagError::BadReport(format!(
                    "sample for worker {} where worker {worker} is active",
                    sample.worker
                )));
            }
            if sample.worker >= self.n() {
                return Err(SiagError::BadReport(format!(
                    "worker {} out of range (n = {})",
                    sample.worker,
                    self.n()
                )));
            }
            if sample.iter_stamp != t {
                return Err(SiagError::BadReport(format!(
                    "sample stamped {} reported at iteration {t}",
                    sample.iter_stamp
                )));
            }
            if sample.grad.len() != self.d() {
                return Err(SiagError::DimensionMismatch {
                    expected: self.d(),
                    got: sample.grad.len(),
                });
            }
        }
        for &worker in &active.workers {
            vecops::sub_assign(&mut self.running_sum, &self.slots[worker]);
        }
        for (&worker, sample) in active.workers.iter().zip(samples) {
            self.slots[worker].copy_from_slice(&sample.grad);
            self.stamps[worker] = t as i64;
            vecops::add_assign(&mut self.running_sum, &sample.grad);
        }
        Ok(())
    }
}

/// Server state: the iterate, the iteration counter, and the buffer.
#[derive(Debug, Clone, PartialEq)]
pub struct ServerState {
    method: Method,
    w: Vec<f64>,
    t: usize,
    buffer: GradientBuffer,
    /// Trial label carried into divergence diagnostics.
    trial: usize,
}

impl ServerState {
    /// Fresh state at `w = 0` with a zeroed buffer.
    pub fn new(method: Method, n: usize, d: usize) -> Self {
        ServerState { method, w: vec![0.0; d], t: 0, buffer: GradientBuffer::new(n, d), trial: 0 }
    }

    pub fn with_initial_iterate(method: Method, n: usize, w0: Vec<f64>) -> Self {
        let d = w0.len();
        ServerState { method, w: w0, t: 0, buffer: GradientBuffer::new(n, d), trial: 0 }
    }

    /// Labels divergence errors with the owning trial.
    pub fn set_trial(&mut self, trial: usize) {
        self.trial = trial;
    }

    pub fn method(&self) -> Method {
        self.method
    }

    pub fn iterate(&self) -> &[f64] {
        &self.w
    }

    pub fn iteration(&self) -> usize {
        self.t
    }

    pub fn buffer(&self) -> &GradientBuffer {
        &self.buffer
    }

    /// Stores this iteration's stochastic reports in the buffer.
    pub fn report_gradients(&mut self, active: &ActiveSet, samples: &[GradientSample]) -> Result<()> {
        self.buffer.report(active, samples, self.t)
    }

    /// sIAG update `w <- w - (eta_t / n) * running_sum`; call after
    /// [`ServerState::report_gradients`].
    pub fn siag_step(&mut self, steps: &StepSchedule) -> Result<()> {
        if self.method != Method::Siag {
            return Err(SiagError::BadReport(format!(
                "siag_step on a {} server",
                self.method.name()
            )));
        }
        self.aggregate_step(steps)
    }

    /// IAG update: refreshes the active slots with exact expected gradients
    /// at the current iterate, then applies the aggregated step.
    pub fn iag_step(
        &mut self,
        instance: &LsqInstance,
        active: &ActiveSet,
        steps: &StepSchedule,
    ) -> Result<()> {
        if self.method != Method::Iag {
            return Err(SiagError::BadReport(format!(
                "iag_step on a {} server",
                self.method.name()
            )));
        }
        let samples: Vec<GradientSample> = active
            .workers
            .iter()
            .map(|&worker| GradientSample {
                grad: instance.exact_gradient(worker, &self.w),
                worker,
                iter_stamp: self.t,
            })
            .collect();
        self.buffer.report(active, &samples, self.t)?;
        self.aggregate_step(steps)
    }

    /// Non-aggregated SGD baseline: descends along the sum of this
    /// iteration's fresh reports only; the buffer is not consulted.
    pub fn sgd_step(
        &mut self,
        active: &ActiveSet,
        samples: &[GradientSample],
        steps: &StepSchedule,
        scaling: SgdScaling,
    ) -> Result<()> {
        if self.method != Method::Sgd {
            return Err(SiagError::BadReport(format!(
                "sgd_step on a {} server",
                self.method.name()
            )));
        }
        if active.iter != self.t {
            return Err(SiagError::BadReport(format!(
                "active set for iteration {} stepped at iteration {}",
                active.iter, self.t
            )));
        }
        if samples.len() != active.workers.len() {
            return Err(SiagError::BadReport(format!(
                "{} samples for {} active workers",
                samples.len(),
                active.workers.len()
            )));
        }
        let mut direction = vec![0.0; self.w.len()];
        for (&worker, sample) in active.workers.iter().zip(samples) {
            if sample.worker != worker || sample.iter_stamp != self.t {
                return Err(SiagError::BadReport(format!(
                    "sgd sample (worker {}, stamp {}) does not match iteration {}",
                    sample.worker, sample.iter_stamp, self.t
                )));
            }
            if sample.grad.len() != self.w.len() {
                return Err(SiagError::DimensionMismatch {
                    expected: self.w.len(),
                    got: sample.grad.len(),
                });
            }
            vecops::add_assign(&mut direction, &sample.grad);
        }
        let denom = match scaling {
            SgdScaling::ByN => self.buffer.n() as f64,
            SgdScaling::ByActive => active.workers.len() as f64,
        };
        let scale = steps.step_size(self.t) / denom;
        for (wj, gj) in self.w.iter_mut().zip(&direction) {
            *wj -= scale * gj;
        }
        self.check_divergence()?;
        self.t += 1;
        Ok(())
    }

    /// Aggregated descent for either buffered method, used by probing
    /// drivers that need to measure between the report and the step.
    pub(crate) fn buffered_descend(&mut self, steps: &StepSchedule) -> Result<()> {
        if self.method == Method::Sgd {
            return Err(SiagError::BadReport("buffered descent on an sgd server".into()));
        }
        self.aggregate_step(steps)
    }

    fn aggregate_step(&mut self, steps: &StepSchedule) -> Result<()> {
        let scale = steps.step_size(self.t) / self.buffer.n() as f64;
        for (wj, gj) in self.w.iter_mut().zip(self.buffer.running_sum()) {
            *wj -= scale * gj;
        }
        self.check_divergence()?;
        self.t += 1;
        Ok(())
    }

    fn check_divergence(&self) -> Result<()> {
        let norm_sq = vecops::norm_sq(&self.w);
        if !norm_sq.is_finite() || norm_sq > DIVERGENCE_NORM * DIVERGENCE_NORM {
            return Err(SiagError::Divergence {
                trial: self.trial,
                iter: self.t,
                norm: norm_sq.sqrt(),
            });
        }
        Ok(())
    }

    /// Saves a resumable snapshot as long-form CSV with columns
    /// `record,worker,coord,value`. Records: `method`, `iter`, `w`,
    /// `running_sum`, `slot` (per worker), and `stamp` (per worker); the
    /// slots and stamps ride along because the incremental aggregate cannot
    /// be continued without them. Floats use the shortest round-tripping
    /// decimal form, so a load restores the state bit for bit. The file is
    /// written to a temporary sibling and renamed into place.
    pub fn save_checkpoint(&self, path: &Path) -> Result<()> {
        let mut wtr = csv::Writer::from_writer(Vec::new());
        wtr.write_record(["record", "worker", "coord", "value"])?;
        wtr.write_record(["method", "0", "0", self.method.name()])?;
        wtr.write_record(["iter", "0", "0", &self.t.to_string()])?;
        for (j, v) in self.w.iter().enumerate() {
            wtr.write_record(["w", "0", &j.to_string(), &v.to_string()])?;
        }
        for (j, v) in self.buffer.running_sum.iter().enumerate() {
            wtr.write_record(["running_sum", "0", &j.to_string(), &v.to_string()])?;
        }
        for (i, slot) in self.buffer.slots.iter().enumerate() {
            for (j, v) in slot.iter().enumerate() {
                wtr.write_record(["slot", &i.to_string(), &j.to_string(), &v.to_string()])?;
            }
        }
        for (i, s) in self.buffer.stamps.iter().enumerate() {
            wtr.write_record(["stamp", &i.to_string(), "0", &s.to_string()])?;
        }
        let bytes = wtr.into_inner().map_err(|e| SiagError::Io(e.into_error()))?;
        let tmp = path.with_extension("ckpt.tmp");
        std::fs::write(&tmp, bytes)?;
        std::fs::rename(&tmp, path)?;
        Ok(())
    }

    /// Restores a state saved by [`ServerState::save_checkpoint`]. The trial
    /// label is not part of the snapshot and resets to zero.
    pub fn load_checkpoint(path: &Path) -> Result<ServerState> {
        fn corrupt(detail: impl std::fmt::Display) -> SiagError {
            SiagError::InvalidConfig(format!("corrupt checkpoint: {detail}"))
        }
        let mut rdr = csv::Reader::from_path(path)?;
        let mut method = None;
        let mut iter_count = None;
        let mut w = Vec::new();
        let mut running_sum = Vec::new();
        let mut slots: Vec<(usize, usize, f64)> = Vec::new();
        let mut stamps = Vec::new();
        for row in rdr.records() {
            let row = row?;
            let field = |idx: usize| row.get(idx).ok_or_else(|| corrupt("short row"));
            let record = field(0)?;
            let worker: usize = field(1)?.parse().map_err(|e| corrupt(e))?;
            let coord: usize = field(2)?.parse().map_err(|e| corrupt(e))?;
            let value = field(3)?;
            match record {
                "method" => {
                    method = Some(match value {
                        "siag" => Method::Siag,
                        "iag" => Method::Iag,
                        "sgd" => Method::Sgd,
                        other => return Err(corrupt(format!("unknown method {other}"))),
                    });
                }
                "iter" => iter_count = Some(value.parse::<usize>().map_err(|e| corrupt(e))?),
                "w" => w.push((coord, value.parse::<f64>().map_err(|e| corrupt(e))?)),
                "running_sum" => {
                    running_sum.push((coord, value.parse::<f64>().map_err(|e| corrupt(e))?));
                }
                "slot" => {
                    slots.push((worker, coord, value.parse::<f64>().map_err(|e| corrupt(e))?));
                }
                "stamp" => stamps.push((worker, value.parse::<i64>().map_err(|e| corrupt(e))?)),
                other => return Err(corrupt(format!("unknown record {other}"))),
            }
        }
        let collect_dense = |mut rows: Vec<(usize, f64)>, name: &str| -> Result<Vec<f64>> {
            rows.sort_by_key(|&(coord, _)| coord);
            for (expected, &(coord, _)) in rows.iter().enumerate() {
                if coord != expected {
                    return Err(corrupt(format!("{name} coordinates not contiguous")));
                }
            }
            Ok(rows.into_iter().map(|(_, v)| v).collect())
        };
        let w = collect_dense(w, "w")?;
        let running_sum = collect_dense(running_sum, "running_sum")?;
        stamps.sort_by_key(|&(worker, _)| worker);
        let n = stamps.len();
        let d = w.len();
        if running_sum.len() != d {
            return Err(corrupt("running_sum dimension differs from w"));
        }
        let mut slot_vecs = vec![Vec::new(); n];
        for (worker, coord, value) in slots {
            if worker >= n {
                return Err(corrupt(format!("slot for unknown worker {worker}")));
            }
            slot_vecs[worker].push((coord, value));
        }
        let slots = slot_vecs
            .into_iter()
            .enumerate()
            .map(|(i, rows)| {
                let slot = collect_dense(rows, "slot")?;
                if slot.len() != d {
                    return Err(corrupt(format!("slot {i} dimension differs from w")));
                }
                Ok(slot)
            })
            .collect::<Result<Vec<_>>>()?;
        let stamps: Vec<i64> = stamps
            .iter()
            .enumerate()
            .map(|(expected, &(worker, stamp))| {
                if worker != expected {
                    return Err(corrupt("stamp workers not contiguous"));
                }
                Ok(stamp)
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(ServerState {
            method: method.ok_or_else(|| corrupt("missing method record"))?,
            w,
            t: iter_count.ok_or_else(|| corrupt("missing iter record"))?,
            buffer: GradientBuffer { slots, stamps, running_sum },
            trial: 0,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::problem::ProblemSpec;

    fn sample(worker: usize, t: usize, grad: Vec<f64>) -> GradientSample {
        GradientSample { grad, worker, iter_stamp: t }
    }

    fn set(iter: usize, workers: Vec<usize>, n: usize) -> ActiveSet {
        ActiveSet::new(iter, workers, n).unwrap()
    }

    #[test]
    fn running_sum_follows_hand_example() {
        // slots g0 = (1), g1 = (3): sum 4; replacing g0 with (5) gives 8
        let mut buffer = GradientBuffer::new(2, 1);
        buffer.report(&set(0, vec![0, 1], 2), &[sample(0, 0, vec![1.0]), sample(1, 0, vec![3.0])], 0).unwrap();
        assert_eq!(buffer.running_sum(), &[4.0]);
        buffer.report(&set(1, vec![0], 2), &[sample(0, 1, vec![5.0])], 1).unwrap();
        assert_eq!(buffer.running_sum(), &[8.0]);
        assert_eq!(buffer.stamps(), &[1, 0]);
        assert_eq!(buffer.recompute_sum(), vec![8.0]);
    }

    #[test]
    fn fresh_buffer_is_zeroed_with_sentinel_stamps() {
        let buffer = GradientBuffer::new(3, 2);
        assert_eq!(buffer.running_sum(), &[0.0, 0.0]);
        assert_eq!(buffer.stamps(), &[-1, -1, -1]);
        assert_eq!(buffer.recompute_sum(), vec![0.0, 0.0]);
    }

    #[test]
    fn report_rejects_contract_violations() {
        let mut buffer = GradientBuffer::new(2, 1);
        let active = set(0, vec![0], 2);
        // sample count mismatch
        assert!(buffer.report(&active, &[], 0).is_err());
        // wrong worker
        assert!(buffer.report(&active, &[sample(1, 0, vec![1.0])], 0).is_err());
        // stale stamp
        assert!(buffer.report(&active, &[sample(0, 3, vec![1.0])], 0).is_err());
        // wrong dimension
        assert!(buffer.report(&active, &[sample(0, 0, vec![1.0, 2.0])], 0).is_err());
        // wrong iteration
        assert!(buffer.report(&set(1, vec![0], 2), &[sample(0, 1, vec![1.0])], 0).is_err());
    }

    #[test]
    fn full_activation_contracts_by_one_minus_eta_p() {
        // d = 1, p = 2, minimizers {0, 0.5, 1.0} => w* = 0.5; at w = 2 the
        // exact slots are (4), (3), (2), so with eta = 0.1:
        // w' = 2 - (0.1/3) * 9 = 1.7 = w* + (1 - eta p)(w - w*)
        let spec = ProblemSpec::new(3, 1, 2, 0.0, 1).unwrap();
        let inst = crate::problem::LsqInstance::with_local_minimizers(
            spec,
            vec![vec![0.0], vec![0.5], vec![1.0]],
        )
        .unwrap();
        let mut state = ServerState::with_initial_iterate(Method::Iag, 3, vec![2.0]);
        let steps = StepSchedule::Constant { eta: 0.1 };
        state.iag_step(&inst, &set(0, vec![0, 1, 2], 3), &steps).unwrap();
        let expected: f64 = 2.0 - (0.1 / 3.0) * 9.0;
        assert_eq!(state.iterate()[0].to_bits(), expected.to_bits());
        assert!((state.iterate()[0] - 1.7).abs() < 1e-12);
    }

    #[test]
    fn optimum_is_a_fixed_point_of_exact_aggregation() {
        let spec = ProblemSpec::new(4, 3, 5, 0.0, 9).unwrap();
        let inst = crate::problem::LsqInstance::generate(&spec).unwrap();
        let w_star = inst.w_star().to_vec();
        let mut state = ServerState::with_initial_iterate(Method::Iag, 4, w_star.clone());
        let steps = StepSchedule::Constant { eta: 0.05 };
        for t in 0..10 {
            state.iag_step(&inst, &set(t, vec![0, 1, 2, 3], 4), &steps).unwrap();
        }
        let drift = vecops::dist_sq(state.iterate(), &w_star).sqrt();
        assert!(drift <= 1e-12, "drifted {drift} from the fixed point");
    }

    #[test]
    fn identical_objectives_and_shared_samples_keep_slots_equal() {
        // all workers share one objective and one sample per iteration: the
        // slots must stay identical and the aggregate must be n times the
        // shared gradient (the classic single-machine aggregated setup)
        let n = 4;
        let mut buffer = GradientBuffer::new(n, 2);
        let shared = vec![0.3, -0.7];
        let samples: Vec<GradientSample> =
            (0..n).map(|i| sample(i, 0, shared.clone())).collect();
        buffer.report(&set(0, (0..n).collect(), n), &samples, 0).unwrap();
        for i in 1..n {
            assert_eq!(buffer.slot(i), buffer.slot(0));
        }
        assert_eq!(buffer.running_sum(), &[4.0 * 0.3, 4.0 * -0.7]);
    }

    #[test]
    fn sgd_scaling_modes_match_hand_values() {
        let steps = StepSchedule::Constant { eta: 1.0 };
        let mut by_n = ServerState::new(Method::Sgd, 2, 1);
        by_n.sgd_step(&set(0, vec![0], 2), &[sample(0, 0, vec![3.0])], &steps, SgdScaling::ByN)
            .unwrap();
        assert_eq!(by_n.iterate(), &[-1.5]);

        let mut by_active = ServerState::new(Method::Sgd, 2, 1);
        by_active
            .sgd_step(&set(0, vec![0], 2), &[sample(0, 0, vec![3.0])], &steps, SgdScaling::ByActive)
            .unwrap();
        assert_eq!(by_active.iterate(), &[-3.0]);
        // the baseline never touches the buffer
        assert_eq!(by_active.buffer().running_sum(), &[0.0]);
        assert_eq!(by_active.buffer().stamps(), &[-1, -1]);
    }

    #[test]
    fn methods_reject_foreign_steps() {
        let steps = StepSchedule::Constant { eta: 0.1 };
        let mut sgd = ServerState::new(Method::Sgd, 1, 1);
        assert!(sgd.siag_step(&steps).is_err());
        let mut siag = ServerState::new(Method::Siag, 1, 1);
        assert!(siag
            .sgd_step(&set(0, vec![0], 1), &[sample(0, 0, vec![0.0])], &steps, SgdScaling::ByN)
            .is_err());
    }

    #[test]
    fn divergence_guard_trips_on_explosion_and_nan() {
        let steps = StepSchedule::Constant { eta: 1.0 };
        let mut state = ServerState::new(Method::Siag, 1, 1);
        state.set_trial(7);
        state
            .report_gradients(&set(0, vec![0], 1), &[sample(0, 0, vec![2e9])])
            .unwrap();
        match state.siag_step(&steps) {
            Err(SiagError::Divergence { trial, iter, norm }) => {
                assert_eq!((trial, iter), (7, 0));
                assert!(norm > 1e9);
            }
            other => panic!("expected divergence, got {other:?}"),
        }

        let mut nan_state = ServerState::new(Method::Siag, 1, 1);
        nan_state
            .report_gradients(&set(0, vec![0], 1), &[sample(0, 0, vec![f64::NAN])])
            .unwrap();
        assert!(matches!(nan_state.siag_step(&steps), Err(SiagError::Divergence { .. })));
    }

    #[test]
    fn inverse_t_steps_match_formula_and_signed_extension() {
        let steps = StepSchedule::InverseT { beta: 0.5, gamma: 100.0 };
        assert_eq!(steps.step_size(0), 0.005);
        assert_eq!(steps.step_size(100), 0.5 / 200.0);
        // eta_{t-T} for t < T evaluates before iteration zero
        assert_eq!(steps.step_size_signed(-5), 0.5 / 95.0);
        assert_eq!(StepSchedule::Constant { eta: 0.1 }.step_size_signed(-5), 0.1);
    }

    #[test]
    fn checkpoint_round_trips_bit_for_bit() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("state.csv");
        let steps = StepSchedule::InverseT { beta: 0.5, gamma: 37.0 };
        let mut state = ServerState::new(Method::Siag, 3, 2);
        state
            .report_gradients(
                &set(0, vec![0, 2], 3),
                &[sample(0, 0, vec![0.1, -0.25]), sample(2, 0, vec![1.0 / 3.0, 0.7])],
            )
            .unwrap();
        state.siag_step(&steps).unwrap();
        state
            .report_gradients(&set(1, vec![1], 3), &[sample(1, 1, vec![-1e-17, 2e8])])
            .unwrap();
        state.siag_step(&steps).unwrap();

        state.save_checkpoint(&path).unwrap();
        let restored = ServerState::load_checkpoint(&path).unwrap();
        assert_eq!(restored, state);
    }

    #[test]
    fn resumed_run_matches_uninterrupted_run_exactly() {
        let spec = ProblemSpec::new(3, 2, 4, 0.0, 42).unwrap();
        let inst = crate::problem::LsqInstance::generate(&spec).unwrap();
        let steps = StepSchedule::Constant { eta: 0.02 };
        let drive = |state: &mut ServerState, from: usize, to: usize| {
            for t in from..to {
                state.iag_step(&inst, &set(t, vec![t % 3], 3), &steps).unwrap();
            }
        };

        let mut straight = ServerState::new(Method::Iag, 3, 2);
        drive(&mut straight, 0, 100);

        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("state.csv");
        let mut first_half = ServerState::new(Method::Iag, 3, 2);
        drive(&mut first_half, 0, 50);
        first_half.save_checkpoint(&path).unwrap();
        let mut resumed = ServerState::load_checkpoint(&path).unwrap();
        drive(&mut resumed, 50, 100);

        for (a, b) in straight.iterate().iter().zip(resumed.iterate()) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
        assert_eq!(straight, resumed);
    }

    #[test]
    fn corrupt_checkpoints_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("state.csv");
        std::fs::write(&path, "record,worker,coord,value\nw,0,0,not-a-number\n").unwrap();
        assert!(ServerState::load_checkpoint(&path).is_err());
        std::fs::write(&path, "record,worker,coord,value\nmethod,0,0,siag\n").unwrap();
        // missing iter record
        assert!(ServerState::load_checkpoint(&path).is_err());
    }

    #[test]
    fn step_schedules_validate_inputs() {
        assert!(StepSchedule::Constant { eta: 0.0 }.validate().is_err());
        assert!(StepSchedule::Constant { eta: f64::NAN }.validate().is_err());
        assert!(StepSchedule::InverseT { beta: -1.0, gamma: 10.0 }.validate().is_err());
        assert!(StepSchedule::InverseT { beta: 1.0, gamma: 0.0 }.validate().is_err());
        assert!(StepSchedule::InverseT { beta: 1.0, gamma: 10.0 }.validate().is_ok());
    }

    mod properties {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #![proptest_config(ProptestConfig::with_cases(50))]

            /// The incremental aggregate tracks a full recompute.
            #[test]
            fn running_sum_matches_recompute(
                seed: u64,
                n in 1usize..8,
                d in 1usize..5,
                iters in 1usize..60,
            ) {
                use rand::{Rng, SeedableRng};
                let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
                let mut buffer = GradientBuffer::new(n, d);
                for t in 0..iters {
                    let workers: Vec<usize> =
                        (0..n).filter(|_| rng.random::<f64>() < 0.5).collect();
                    if workers.is_empty() {
                        continue;
                    }
                    let active = ActiveSet::new(t, workers.clone(), n).unwrap();
                    let samples: Vec<GradientSample> = workers
                        .iter()
                        .map(|&w| sample(
                            w,
                            t,
                            (0..d).map(|_| rng.random::<f64>() * 2.0 - 1.0).collect(),
                        ))
                        .collect();
                    buffer.report(&active, &samples, t).unwrap();
                    let recomputed = buffer.recompute_sum();
                    for (a, b) in buffer.running_sum().iter().zip(&recomputed) {
                        prop_assert!((a - b).abs() <= 1e-12);
                    }
                }
            }

            /// Step sizes are positive and non-increasing in t.
            #[test]
            fn steps_monotone(beta in 0.01f64..10.0, gamma in 1.0f64..1e4, t in 0usize..100_000) {
                let steps = StepSchedule::InverseT { beta, gamma };
                let now = steps.step_size(t);
                let next = steps.step_size(t + 1);
                prop_assert!(now > 0.0);
                prop_assert!(next <= now);
            }
        }
    }
}
