//! Trial aggregation: stability estimates, analytic predictions, and the
//! Ramsey-time break-down scan.

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::cascade::{CascadeConfig, CascadeRunner};
use crate::ensemble::{EnsembleSpec, MeasurementProtocol};
use crate::error::{ClockError, Result};
use crate::noise::NoiseModel;
use crate::rng::aux_rng;

/// Aggregation parameters. `omega` is the atomic transition frequency and
/// enters only as a normalization of sigma.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnalysisConfig {
    pub omega: f64,
    pub spectrum_segments: usize,
    pub breakdown_grid: Vec<f64>,
}

impl Default for AnalysisConfig {
    fn default() -> Self {
        AnalysisConfig { omega: 1.0, spectrum_segments: 8, breakdown_grid: Vec::new() }
    }
}

impl AnalysisConfig {
    pub fn validate(&self) -> Result<()> {
        if !self.omega.is_finite() || self.omega <= 0.0 {
            return Err(ClockError::config(format!("analysis.omega must be > 0, got {}", self.omega)));
        }
        if self.spectrum_segments < 1 {
            return Err(ClockError::config("analysis.segments must be >= 1"));
        }
        Ok(())
    }
}

/// Aggregated stability of a batch of trials.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StabilityReport {
    /// sigma_gamma(tau) = sqrt(mean((omega_bar / omega)^2)).
    pub sigma: f64,
    /// Nonparametric bootstrap standard error of sigma (1000 resamples).
    pub sigma_stderr: f64,
    /// Dimensionless figure of merit omega^2 sigma^2 tau / gamma.
    pub figure_of_merit: f64,
    pub abort_rate: f64,
    pub trials_completed: u64,
    pub trials_aborted: u64,
}

const BOOTSTRAP_RESAMPLES: usize = 1000;

/// RMS stability over completed trials. `offsets` are per-trial mean
/// frequency offsets; aborted trials are reported, not dropped silently.
pub fn stability(
    offsets: &[f64],
    aborted: u64,
    omega: f64,
    tau: f64,
    gamma: f64,
) -> Result<StabilityReport> {
    if offsets.len() < 2 {
        return Err(ClockError::EmptyReport);
    }
    let n = offsets.len();
    let mean_sq = offsets.iter().map(|w| (w / omega) * (w / omega)).sum::<f64>() / n as f64;
    let sigma = mean_sq.sqrt();

    // Bootstrap on a sorted copy so the standard error is invariant under
    // permutations of the trial list.
    let mut sorted: Vec<f64> = offsets.to_vec();
    sorted.sort_by(f64::total_cmp);
    let mut rng = aux_rng(0xb00 + n as u64, 0);
    let mut dev = 0.0f64;
    for _ in 0..BOOTSTRAP_RESAMPLES {
        let mut acc = 0.0;
        for _ in 0..n {
            let v = sorted[rng.random_range(0..n)] / omega;
            acc += v * v;
        }
        let s = (acc / n as f64).sqrt();
        dev += (s - sigma) * (s - sigma);
    }
    let stderr = (dev / BOOTSTRAP_RESAMPLES as f64).sqrt();

    let fom = if gamma > 0.0 { omega * omega * sigma * sigma * tau / gamma } else { f64::NAN };
    Ok(StabilityReport {
        sigma,
        sigma_stderr: stderr,
        figure_of_merit: fom,
        abort_rate: aborted as f64 / (aborted as f64 + n as f64),
        trials_completed: n as u64,
        trials_aborted: aborted,
    })
}

/// Closed-form stability prediction for m cascaded ensembles of N atoms:
/// sigma = sqrt((beta1/beta)^(m-1) * gamma / (omega^2 tau)) * (N beta1)^(-m/2),
/// with beta1 = gamma * T1_max and beta the per-stage phase-jump budget.
pub fn theory_stability(
    m: u32,
    n_atoms: u64,
    beta1: f64,
    beta: f64,
    gamma: f64,
    tau: f64,
    omega: f64,
) -> f64 {
    assert!(m >= 1, "need at least one ensemble");
    assert!(
        beta1 > 0.0 && beta > 0.0 && gamma > 0.0 && tau > 0.0 && omega > 0.0 && n_atoms > 0,
        "theory_stability arguments must be positive"
    );
    let ratio = (beta1 / beta).powi(m as i32 - 1);
    (ratio * gamma / (omega * omega * tau)).sqrt() * (n_atoms as f64 * beta1).powf(-(m as f64) / 2.0)
}

/// Minimum ensemble size needed to stretch the Ramsey time by a factor `a`
/// per stage when the protocol tolerates phase-jump variance `beta`.
pub fn min_atoms(a: f64, beta: f64) -> u64 {
    assert!(a >= 1.0 && beta > 0.0, "need a >= 1 and beta > 0");
    // Guard the integer boundary against representation error in a/beta.
    (a / beta - 1e-9).ceil() as u64
}

/// Break-down scan setup: single-ensemble clocks across a gamma*T grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BreakdownScan {
    pub protocol: MeasurementProtocol,
    pub noise: NoiseModel,
    pub n_atoms: u64,
    pub steps: u64,
    pub runs_per_point: u64,
    /// Ascending gamma*T values to scan.
    pub grid: Vec<f64>,
    pub gain: f64,
    pub feedback_rounds: u32,
    pub posterior_points: usize,
    pub omega: f64,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScanPoint {
    pub gamma_t: f64,
    pub sigma: f64,
    pub sigma_stderr: f64,
    pub aborts: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScanOutcome {
    pub curve: Vec<ScanPoint>,
    /// gamma*T at the best measured stability.
    pub beta_estimate: f64,
    /// Set when no clear break-down follows the optimum (post-optimum rise
    /// below 2x, or the optimum sits on the last grid point).
    pub low_confidence: bool,
}

/// Scan single-ensemble clocks over the Ramsey-time grid and locate the
/// break-down point as the gamma*T with the best measured stability.
pub fn breakdown_scan(scan: &BreakdownScan) -> Result<ScanOutcome> {
    if scan.grid.is_empty() {
        return Err(ClockError::config("scan.grid must not be empty"));
    }
    if scan.grid.windows(2).any(|w| w[0] >= w[1]) || scan.grid[0] <= 0.0 {
        return Err(ClockError::config("scan.grid must be ascending and positive"));
    }
    if scan.noise.gamma <= 0.0 {
        return Err(ClockError::config("scan needs gamma > 0"));
    }
    if scan.runs_per_point < 2 {
        return Err(ClockError::config("scan.runs must be >= 2"));
    }

    let runners: Vec<CascadeRunner> = scan
        .grid
        .iter()
        .map(|&gamma_t| {
            let mut ensemble = EnsembleSpec::new(scan.n_atoms, scan.protocol);
            ensemble.feedback_rounds = scan.feedback_rounds;
            CascadeRunner::new(CascadeConfig {
                ensembles: vec![ensemble],
                t1: gamma_t / scan.noise.gamma,
                multiplier: 1,
                gains: vec![scan.gain],
                steps: scan.steps,
                noise: scan.noise,
                seed: scan.seed,
                trials: scan.runs_per_point,
                posterior_points: scan.posterior_points,
                keep_traces: false,
                keep_interrogation_log: false,
            })
        })
        .collect::<Result<_>>()?;

    let runs = scan.runs_per_point;
    let jobs: Vec<(usize, u64)> = (0..runners.len())
        .flat_map(|p| (0..runs).map(move |r| (p, r)))
        .collect();
    let outcomes: Vec<(usize, Option<f64>)> = jobs
        .par_iter()
        .map(|&(p, r)| {
            // Disjoint trial index space per grid point keeps streams apart.
            let trial = p as u64 * runs + r;
            match runners[p].run_trial(trial) {
                Ok(res) => (p, Some(res.mean_frequency_offset)),
                Err(_) => (p, None),
            }
        })
        .collect();

    let mut curve = Vec::with_capacity(scan.grid.len());
    for (p, &gamma_t) in scan.grid.iter().enumerate() {
        let offsets: Vec<f64> = outcomes
            .iter()
            .filter(|(q, w)| *q == p && w.is_some())
            .map(|(_, w)| w.unwrap())
            .collect();
        let aborts = runs - offsets.len() as u64;
        let tau = scan.steps as f64 * gamma_t / scan.noise.gamma;
        match stability(&offsets, aborts, scan.omega, tau, scan.noise.gamma) {
            Ok(rep) => curve.push(ScanPoint {
                gamma_t,
                sigma: rep.sigma,
                sigma_stderr: rep.sigma_stderr,
                aborts,
            }),
            // A point where (almost) every run aborted is deep break-down.
            Err(ClockError::EmptyReport) => curve.push(ScanPoint {
                gamma_t,
                sigma: f64::INFINITY,
                sigma_stderr: f64::INFINITY,
                aborts,
            }),
            Err(e) => return Err(e),
        }
    }

    let best = curve
        .iter()
        .enumerate()
        .min_by(|a, b| a.1.sigma.total_cmp(&b.1.sigma))
        .map(|(i, _)| i)
        .expect("non-empty curve");
    let sigma_min = curve[best].sigma;
    let post_rise = curve[best + 1..]
        .iter()
        .map(|p| p.sigma / sigma_min)
        .fold(f64::NEG_INFINITY, f64::max);
    let low_confidence = best + 1 == curve.len() || post_rise.is_nan() || post_rise < 2.0;

    Ok(ScanOutcome { curve, beta_estimate: scan.grid[best], low_confidence })
}
