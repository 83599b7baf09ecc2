//! The full clock: LO phase accumulation on the base grid, scheduled
//! interrogation of every ensemble, frequency feedback, and the phase
//! corrections that make the cascade work at small Ramsey-time multipliers.
//!
//! Ensemble `j` (0-based) runs with Ramsey time `T_j = n^j * t1` and is
//! interrogated whenever `n^j` divides the step index, shortest Ramsey time
//! first. Two corrections keep the bookkeeping exact:
//!
//! * a measurement-time correction subtracted from the phase each ensemble
//!   sees, compensating feedback from the faster loops that the frequency
//!   servo has not absorbed yet — equivalent to subtracting every lower
//!   ensemble's estimates made inside the window;
//! * a final correction applied to the accumulated phase after the last step,
//!   which removes the transient left by feedback still in flight and lets a
//!   finite run measure the asymptotic offset.
//!
//! With both in place the mean frequency offset reduces to the per-window
//! estimation residuals of the last ensemble, which is also how the engine
//! computes it; the direct ledger route is kept alongside as a cross-check.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::ensemble::{
    estimate_conventional, estimate_conventional_gaussian, measure_adaptive_with_prior,
    measure_conventional, EnsembleSpec, MeasurementOutcome, MeasurementProtocol, PriorRule,
};
use crate::error::{ClockError, Result};
use crate::noise::NoiseModel;
use crate::posterior::{Kahan, PhaseGrid, Posterior};
use crate::rng::{trial_rng, TrialRng};

/// Full configuration of one simulated clock.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CascadeConfig {
    /// Ordered ensembles, shortest Ramsey time first.
    pub ensembles: Vec<EnsembleSpec>,
    /// Base Ramsey time T1 in seconds.
    pub t1: f64,
    /// Ramsey-time multiplier n; ensemble j runs at n^j * t1.
    pub multiplier: u32,
    /// Feedback gain per ensemble, in [0, 1]. A gain of 0 disables the
    /// frequency servo of that loop and leaves the LO unlocked by it.
    pub gains: Vec<f64>,
    /// Total number of base intervals l; the run spans tau = l * t1.
    pub steps: u64,
    pub noise: NoiseModel,
    pub seed: u64,
    pub trials: u64,
    /// Posterior grid resolution for adaptive ensembles.
    pub posterior_points: usize,
    /// Retain per-step phase/frequency traces in the result.
    pub keep_traces: bool,
    /// Retain one record per interrogation (raw phase, correction, outcome).
    pub keep_interrogation_log: bool,
}

impl CascadeConfig {
    /// Number of ensembles.
    pub fn num_ensembles(&self) -> usize {
        self.ensembles.len()
    }

    /// n^j, the interrogation period of ensemble j in base steps.
    pub fn period(&self, j: usize) -> u64 {
        (self.multiplier as u64).pow(j as u32)
    }

    /// Ramsey time of ensemble j.
    pub fn ramsey_time(&self, j: usize) -> f64 {
        self.period(j) as f64 * self.t1
    }

    /// Total run time tau = l * t1.
    pub fn tau(&self) -> f64 {
        self.steps as f64 * self.t1
    }

    pub fn validate(&self) -> Result<()> {
        let m = self.ensembles.len();
        if m < 1 {
            return Err(ClockError::config("cascade needs at least one ensemble"));
        }
        if m >= 2 && self.multiplier < 2 {
            return Err(ClockError::config(format!(
                "cascade.n must be >= 2 when running {m} ensembles, got {}",
                self.multiplier
            )));
        }
        if self.multiplier < 1 {
            return Err(ClockError::config("cascade.n must be >= 1"));
        }
        if !self.t1.is_finite() || self.t1 <= 0.0 {
            return Err(ClockError::config(format!("cascade.t1 must be finite and > 0, got {}", self.t1)));
        }
        if self.steps < 1 {
            return Err(ClockError::config("cascade.steps must be >= 1"));
        }
        let slowest = (self.multiplier as u64)
            .checked_pow(m as u32 - 1)
            .ok_or_else(|| ClockError::config("n^(m-1) overflows"))?;
        if !self.steps.is_multiple_of(slowest) {
            return Err(ClockError::config(format!(
                "cascade.steps = {} is not divisible by n^(m-1) = {slowest}; every ensemble must \
                 complete an integer number of cycles",
                self.steps
            )));
        }
        if self.gains.len() != m {
            return Err(ClockError::config(format!(
                "cascade.alpha needs one gain per ensemble ({m}), got {}",
                self.gains.len()
            )));
        }
        for (j, a) in self.gains.iter().enumerate() {
            if !a.is_finite() || !(0.0..=1.0).contains(a) {
                return Err(ClockError::config(format!("cascade.alpha[{j}] must lie in [0, 1], got {a}")));
            }
        }
        if self.posterior_points < 8 || !self.posterior_points.is_multiple_of(2) {
            return Err(ClockError::config("ensemble.posterior-grid must be an even number >= 8"));
        }
        for e in &self.ensembles {
            e.validate()?;
        }
        Ok(())
    }

    /// Prior variance fed to ensemble j's adaptive estimator: for the first
    /// ensemble the raw LO level `gamma * T_0`; for later ensembles the
    /// whitened level of the stage below, `T_j / (N_{j-1} T_{j-1})`.
    pub fn prior_variance(&self, j: usize) -> f64 {
        let t_j = self.ramsey_time(j);
        match self.ensembles[j].prior {
            PriorRule::GammaEff(g) => g * t_j,
            PriorRule::Auto => {
                if j == 0 {
                    self.noise.gamma * t_j
                } else {
                    let below = &self.ensembles[j - 1];
                    t_j / (below.n_atoms as f64 * self.ramsey_time(j - 1))
                }
            }
        }
    }
}

/// Per-ensemble feedback state and complete estimate history.
#[derive(Debug, Clone, Default)]
pub struct FeedbackLedger {
    /// estimates[j][s-1] is ensemble j's estimate at its s-th measurement,
    /// i.e. at step s * n^j.
    pub estimates: Vec<Vec<f64>>,
    /// Standing frequency correction per ensemble at the end of the run.
    pub delta_omega: Vec<f64>,
}

/// One interrogation, as recorded when `keep_interrogation_log` is set.
#[derive(Debug, Clone)]
pub struct InterrogationRecord {
    pub ensemble: usize,
    pub step: u64,
    pub raw_window_phase: f64,
    pub correction: f64,
    pub phase_seen: f64,
    pub estimate: f64,
    pub outcome: Option<MeasurementOutcome>,
}

/// Outcome of a single trial.
#[derive(Debug, Clone)]
pub struct ClockRunResult {
    /// Mean frequency offset over the run, from the residual form: the sum of
    /// the last ensemble's per-window estimation errors divided by tau.
    pub mean_frequency_offset: f64,
    /// The same quantity from the direct route: all accumulated phase minus
    /// the final correction, divided by tau. Agrees with
    /// `mean_frequency_offset` to 1e-9 relative on every trial.
    pub mean_frequency_offset_bookkeeping: f64,
    pub tau: f64,
    /// Last ensemble's per-measurement residuals (seen phase minus estimate).
    pub residuals: Vec<f64>,
    pub ledger: FeedbackLedger,
    /// Unlocked per-interval phase increments (with `keep_traces`).
    pub noise_increments: Option<Vec<f64>>,
    /// Locked LO frequency record, phase-per-interval / t1 (with `keep_traces`).
    pub locked_delta_omega: Option<Vec<f64>>,
    /// Cumulative LO phase after each step (with `keep_traces`).
    pub phase_trace: Option<Vec<f64>>,
    pub interrogations: Option<Vec<InterrogationRecord>>,
}

impl ClockRunResult {
    /// Effective per-interval frequency record of the locked LO.
    pub fn locked_frequency_trace(&self) -> Option<&[f64]> {
        self.locked_delta_omega.as_deref()
    }
}

/// The correction subtracted inside one window: estimates weighted by
/// `(1-a)^(M-s)` plus the gain-weighted tail of earlier estimates. The
/// coefficients telescope to exactly 1, so the closed form equals the plain
/// sum of the window's estimates; it is kept in this form because that is how
/// the feedback arithmetic composes, and the equality is what the identity
/// tests assert.
pub fn weighted_correction_sum(estimates: &[f64], alpha: f64) -> f64 {
    let mut acc = Kahan::default();
    let mut tail = 0.0f64; // sum of (1-a)^(M-s) over later measurements
    let mut pw = 1.0f64; // (1-a)^(M-s) for the current measurement
    for &e in estimates.iter().rev() {
        acc.add((pw + alpha * tail) * e);
        tail += pw;
        pw *= 1.0 - alpha;
    }
    acc.value()
}

/// Measurement-time phase correction for ensemble `j`'s `meas_index`-th
/// interrogation (1-based): sums the weighted window corrections of every
/// faster ensemble. Returns 0 for the first ensemble.
pub fn measurement_phase_correction(
    j: usize,
    meas_index: u64,
    estimates: &[Vec<f64>],
    gains: &[f64],
    multiplier: u32,
) -> f64 {
    let mut total = Kahan::default();
    for i in 0..j {
        let window_len = (multiplier as u64).pow((j - i) as u32);
        let start = ((meas_index - 1) * window_len) as usize;
        let slice = &estimates[i][start..start + window_len as usize];
        total.add(weighted_correction_sum(slice, gains[i]));
    }
    total.value()
}

/// Final phase correction applied after the last step: the weighted
/// correction over every ensemble's full estimate history.
pub fn final_phase_correction(estimates: &[Vec<f64>], gains: &[f64]) -> f64 {
    let mut total = Kahan::default();
    for (hist, &alpha) in estimates.iter().zip(gains) {
        total.add(weighted_correction_sum(hist, alpha));
    }
    total.value()
}

/// Reusable per-configuration state: validated config, cached Ramsey times
/// and adaptive priors. Read-only during trials, safe to share across
/// workers.
pub struct CascadeRunner {
    cfg: CascadeConfig,
    periods: Vec<u64>,
    ramsey: Vec<f64>,
    priors: Vec<Option<Arc<Posterior>>>,
}

impl CascadeRunner {
    pub fn new(cfg: CascadeConfig) -> Result<CascadeRunner> {
        cfg.validate()?;
        let m = cfg.num_ensembles();
        let grid = PhaseGrid::new(cfg.posterior_points);
        let mut priors = Vec::with_capacity(m);
        for j in 0..m {
            if cfg.ensembles[j].protocol == MeasurementProtocol::Adaptive {
                let var = cfg.prior_variance(j);
                if !var.is_finite() || var <= 0.0 {
                    return Err(ClockError::config(format!(
                        "ensemble {j}: adaptive prior variance must be > 0, got {var}; \
                         set ensemble.prior-gamma-eff for zero-noise runs"
                    )));
                }
                priors.push(Some(Arc::new(Posterior::gaussian(grid.clone(), var)?)));
            } else {
                priors.push(None);
            }
        }
        let periods = (0..m).map(|j| cfg.period(j)).collect();
        let ramsey = (0..m).map(|j| cfg.ramsey_time(j)).collect();
        Ok(CascadeRunner { cfg, periods, ramsey, priors })
    }

    pub fn config(&self) -> &CascadeConfig {
        &self.cfg
    }

    fn interrogate(
        &self,
        j: usize,
        phase_seen: f64,
        rng: &mut TrialRng,
        want_outcome: bool,
    ) -> Result<(f64, Option<MeasurementOutcome>)> {
        let spec = &self.cfg.ensembles[j];
        match spec.protocol {
            MeasurementProtocol::Conventional => {
                let out = measure_conventional(spec.n_atoms, phase_seen, rng);
                let est = estimate_conventional(&out, spec.n_atoms);
                Ok((est, want_outcome.then_some(out)))
            }
            MeasurementProtocol::ConventionalGaussian => {
                Ok((estimate_conventional_gaussian(spec.n_atoms, phase_seen, rng), None))
            }
            MeasurementProtocol::Adaptive => {
                let prior = self.priors[j].as_ref().expect("adaptive prior built in new()");
                let (est, out) = measure_adaptive_with_prior(
                    spec.n_atoms,
                    phase_seen,
                    prior,
                    spec.feedback_rounds,
                    rng,
                )?;
                Ok((est, want_outcome.then_some(out)))
            }
            MeasurementProtocol::Ideal => Ok((phase_seen, None)),
        }
    }

    /// Run one trial, fully deterministic in (config seed, trial_index).
    pub fn run_trial(&self, trial_index: u64) -> Result<ClockRunResult> {
        let cfg = &self.cfg;
        let m = cfg.num_ensembles();
        let mut rng = trial_rng(cfg.seed, trial_index);
        let trace = cfg.noise.generate(cfg.t1, cfg.steps as usize, &mut rng)?;

        let mut delta_omega = vec![0.0f64; m];
        let mut window = vec![Kahan::default(); m];
        let mut estimates: Vec<Vec<f64>> = (0..m)
            .map(|j| Vec::with_capacity((cfg.steps / self.periods[j]) as usize))
            .collect();
        let mut phi_sum = Kahan::default();
        let mut residual_sum = Kahan::default();
        let mut residuals = Vec::with_capacity((cfg.steps / self.periods[m - 1]) as usize);
        let mut locked = cfg.keep_traces.then(|| Vec::with_capacity(cfg.steps as usize));
        let mut cumulative = cfg.keep_traces.then(|| Vec::with_capacity(cfg.steps as usize));
        let mut log = cfg.keep_interrogation_log.then(Vec::new);

        for k in 1..=cfg.steps {
            let standing: f64 = delta_omega.iter().sum();
            let phi_k = trace.increments[(k - 1) as usize] + cfg.t1 * standing;
            phi_sum.add(phi_k);
            for w in window.iter_mut() {
                w.add(phi_k);
            }
            if let Some(t) = locked.as_mut() {
                t.push(phi_k / cfg.t1);
            }
            if let Some(t) = cumulative.as_mut() {
                t.push(phi_sum.value());
            }

            for j in 0..m {
                if k % self.periods[j] != 0 {
                    // Periods are nested powers of n; no slower ensemble can
                    // be due either.
                    break;
                }
                let meas_index = k / self.periods[j];
                let raw = window[j].take();
                let correction =
                    measurement_phase_correction(j, meas_index, &estimates, &cfg.gains, cfg.multiplier);
                let phase_seen = raw - correction;
                let (estimate, outcome) = self
                    .interrogate(j, phase_seen, &mut rng, cfg.keep_interrogation_log)
                    .map_err(|e| ClockError::TrialAborted {
                        trial: trial_index,
                        step: k,
                        ensemble: j,
                        source: Box::new(e),
                    })?;
                estimates[j].push(estimate);
                delta_omega[j] -= cfg.gains[j] * estimate / self.ramsey[j];
                if j == m - 1 {
                    let r = phase_seen - estimate;
                    residual_sum.add(r);
                    residuals.push(r);
                }
                if let Some(log) = log.as_mut() {
                    log.push(InterrogationRecord {
                        ensemble: j,
                        step: k,
                        raw_window_phase: raw,
                        correction,
                        phase_seen,
                        estimate,
                        outcome,
                    });
                }
            }
        }

        let final_correction = final_phase_correction(&estimates, &cfg.gains);
        let tau = cfg.tau();
        Ok(ClockRunResult {
            mean_frequency_offset: residual_sum.value() / tau,
            mean_frequency_offset_bookkeeping: (phi_sum.value() - final_correction) / tau,
            tau,
            residuals,
            ledger: FeedbackLedger { estimates, delta_omega },
            noise_increments: cfg.keep_traces.then_some(trace.increments),
            locked_delta_omega: locked,
            phase_trace: cumulative,
            interrogations: log,
        })
    }
}

/// One-shot convenience wrapper around [`CascadeRunner`].
pub fn run_trial(cfg: &CascadeConfig, trial_index: u64) -> Result<ClockRunResult> {
    CascadeRunner::new(cfg.clone())?.run_trial(trial_index)
}
