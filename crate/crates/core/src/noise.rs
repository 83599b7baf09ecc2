//! Local-oscillator noise synthesis.
//!
//! The unlocked LO is represented by its frequency fluctuation `delta_omega`
//! held piecewise-constant on the base Ramsey grid (one value per interval of
//! length `t1`), so a trace of `steps` phase increments fully describes a run.
//! White noise gives i.i.d. Gaussian increments of variance `gamma * t1`.
//! 1/f noise is synthesised in the frequency domain against the two-sided
//! target spectrum `S(f) = gamma^2 / |f|` between the low-frequency cutoff and
//! the Nyquist frequency of the grid, then integrated per interval.

use rand::Rng;
use rand_distr::StandardNormal;
use rustfft::num_complex::Complex64;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use crate::error::{ClockError, Result};
use crate::rng::TrialRng;

/// Spectral shape of the unlocked LO.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum NoiseKind {
    White,
    OneOverF,
}

/// Low-frequency cutoff rule for 1/f synthesis.
///
/// The 1/f spectrum is not integrable at f = 0, so a cutoff is unavoidable.
/// The default ties it to the run length, `f_min = 1 / (steps * t1)`, which
/// makes the break-down point inherit a weak logarithmic dependence on the
/// number of simulated steps.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FminPolicy {
    /// `f_min = 1 / (steps * t1)`, i.e. the lowest resolvable bin.
    InverseTotalTime,
    /// Explicit cutoff in Hz; bins below it carry no power.
    Fixed(f64),
}

/// Noise model of the unlocked LO.
///
/// `gamma` conventions: for white noise the phase accumulated over a time `T`
/// has variance `gamma * T` (rad^2/s). For 1/f noise `gamma` sets the spectrum
/// `S(f) = gamma^2 / f` (rad/s scale).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NoiseModel {
    pub kind: NoiseKind,
    pub gamma: f64,
    pub f_min_policy: FminPolicy,
}

impl NoiseModel {
    pub fn new(kind: NoiseKind, gamma: f64) -> Result<Self> {
        if !gamma.is_finite() || gamma < 0.0 {
            return Err(ClockError::config(format!(
                "noise.gamma must be finite and >= 0, got {gamma}"
            )));
        }
        Ok(NoiseModel {
            kind,
            gamma,
            f_min_policy: FminPolicy::InverseTotalTime,
        })
    }

    /// Synthesize the per-interval phase increments for one trial.
    pub fn generate(&self, t1: f64, steps: usize, rng: &mut TrialRng) -> Result<PhaseIncrementTrace> {
        match self.kind {
            NoiseKind::White => generate_white(self.gamma, t1, steps, rng),
            NoiseKind::OneOverF => generate_one_over_f_with_cutoff(self.gamma, t1, steps, self.f_min_policy, rng),
        }
    }
}

/// Phase increments of the unlocked LO on the base grid.
///
/// Entry `k` is the phase acquired over the interval `(t_k, t_{k+1}]` of
/// length `dt`; phases over longer Ramsey windows are sums of consecutive
/// entries.
#[derive(Debug, Clone, PartialEq)]
pub struct PhaseIncrementTrace {
    pub increments: Vec<f64>,
    pub dt: f64,
}

impl PhaseIncrementTrace {
    /// The underlying frequency-fluctuation samples, `increments / dt`.
    pub fn delta_omega(&self) -> Vec<f64> {
        self.increments.iter().map(|p| p / self.dt).collect()
    }
}

fn check_common(gamma: f64, t1: f64, steps: usize, min_steps: usize) -> Result<()> {
    if !gamma.is_finite() || gamma < 0.0 {
        return Err(ClockError::config(format!("gamma must be finite and >= 0, got {gamma}")));
    }
    if !t1.is_finite() || t1 <= 0.0 {
        return Err(ClockError::config(format!("t1 must be finite and > 0, got {t1}")));
    }
    if steps < min_steps {
        return Err(ClockError::config(format!(
            "step count must be >= {min_steps}, got {steps}"
        )));
    }
    Ok(())
}

/// White frequency noise: i.i.d. zero-mean Gaussian increments with variance
/// `gamma * t1`.
pub fn generate_white(gamma: f64, t1: f64, steps: usize, rng: &mut TrialRng) -> Result<PhaseIncrementTrace> {
    check_common(gamma, t1, steps, 1)?;
    if gamma == 0.0 {
        return Ok(PhaseIncrementTrace { increments: vec![0.0; steps], dt: t1 });
    }
    let sigma = (gamma * t1).sqrt();
    let increments = (0..steps)
        .map(|_| sigma * rng.sample::<f64, _>(StandardNormal))
        .collect();
    Ok(PhaseIncrementTrace { increments, dt: t1 })
}

/// 1/f frequency noise via frequency-domain synthesis.
///
/// Independent complex Gaussian coefficients with squared amplitude matching
/// the per-bin variance `2 * S(f_k) * df` of the two-sided target
/// `S(f) = gamma^2 / |f|`, mirrored to a conjugate-symmetric spectrum and
/// inverse-transformed to the time domain.
pub fn generate_one_over_f(gamma: f64, t1: f64, steps: usize, rng: &mut TrialRng) -> Result<PhaseIncrementTrace> {
    generate_one_over_f_with_cutoff(gamma, t1, steps, FminPolicy::InverseTotalTime, rng)
}

pub fn generate_one_over_f_with_cutoff(
    gamma: f64,
    t1: f64,
    steps: usize,
    policy: FminPolicy,
    rng: &mut TrialRng,
) -> Result<PhaseIncrementTrace> {
    check_common(gamma, t1, steps, 2)?;
    if gamma == 0.0 {
        return Ok(PhaseIncrementTrace { increments: vec![0.0; steps], dt: t1 });
    }

    let n = steps;
    let df = 1.0 / (n as f64 * t1);
    let f_min = match policy {
        FminPolicy::InverseTotalTime => df,
        FminPolicy::Fixed(f) => {
            if !f.is_finite() || f <= 0.0 {
                return Err(ClockError::config(format!("f_min must be finite and > 0, got {f}")));
            }
            f
        }
    };

    let mut spectrum = vec![Complex64::new(0.0, 0.0); n];
    let half = n / 2;
    for k in 1..half + 1 {
        let f_k = k as f64 * df;
        if f_k < f_min {
            continue;
        }
        // Per one-sided bin, the process variance is 2 * S(f_k) * df.
        let bin_var = 2.0 * gamma * gamma * df / f_k;
        if 2 * k == n {
            // Nyquist coefficient is real-valued.
            let g: f64 = rng.sample(StandardNormal);
            spectrum[k] = Complex64::new(n as f64 * bin_var.sqrt() * g, 0.0);
        } else {
            let g1: f64 = rng.sample(StandardNormal);
            let g2: f64 = rng.sample(StandardNormal);
            let c = 0.5 * n as f64 * bin_var.sqrt();
            spectrum[k] = Complex64::new(c * g1, c * g2);
            spectrum[n - k] = spectrum[k].conj();
        }
    }

    let mut planner = FftPlanner::new();
    let ifft = planner.plan_fft_inverse(n);
    ifft.process(&mut spectrum);

    let scale = t1 / n as f64; // 1/n for the unnormalized inverse, * t1 to integrate
    let increments = spectrum.iter().map(|z| z.re * scale).collect();
    Ok(PhaseIncrementTrace { increments, dt: t1 })
}

/// Integral of the two-sided target spectrum over the synthesized band,
/// i.e. the expected mean-square of the `delta_omega` series.
pub fn one_over_f_target_power(gamma: f64, t1: f64, steps: usize) -> f64 {
    let n = steps;
    let df = 1.0 / (n as f64 * t1);
    let mut total = 0.0;
    for k in 1..n / 2 + 1 {
        let f_k = k as f64 * df;
        total += 2.0 * gamma * gamma * df / f_k;
    }
    total
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::trial_rng;

    #[test]
    fn zero_strength_noise_is_identically_zero() {
        let mut rng = trial_rng(1, 0);
        let w = generate_white(0.0, 1.0, 100, &mut rng).unwrap();
        assert_eq!(w.increments, vec![0.0; 100]);
        let p = generate_one_over_f(0.0, 1.0, 128, &mut rng).unwrap();
        assert_eq!(p.increments, vec![0.0; 128]);
    }

    #[test]
    fn invalid_parameters_are_config_errors() {
        let mut rng = trial_rng(1, 0);
        assert!(generate_white(-1.0, 1.0, 10, &mut rng).is_err());
        assert!(generate_white(f64::NAN, 1.0, 10, &mut rng).is_err());
        assert!(generate_white(1.0, 0.0, 10, &mut rng).is_err());
        assert!(generate_white(1.0, 1.0, 0, &mut rng).is_err());
        assert!(generate_one_over_f(1.0, 1.0, 1, &mut rng).is_err());
        assert!(NoiseModel::new(NoiseKind::White, -0.5).is_err());
    }

    #[test]
    fn trace_length_matches_step_count() {
        let mut rng = trial_rng(3, 0);
        for l in [1usize, 7, 100] {
            let t = generate_white(0.3, 0.5, l, &mut rng).unwrap();
            assert_eq!(t.increments.len(), l);
        }
        for l in [2usize, 9, 100, 1024] {
            let t = generate_one_over_f(0.3, 0.5, l, &mut rng).unwrap();
            assert_eq!(t.increments.len(), l);
        }
    }

    #[test]
    fn identical_seed_gives_bit_identical_traces() {
        let a = generate_white(0.7, 0.1, 1000, &mut trial_rng(9, 4)).unwrap();
        let b = generate_white(0.7, 0.1, 1000, &mut trial_rng(9, 4)).unwrap();
        assert_eq!(a, b);
        let c = generate_one_over_f(0.7, 0.1, 1024, &mut trial_rng(9, 4)).unwrap();
        let d = generate_one_over_f(0.7, 0.1, 1024, &mut trial_rng(9, 4)).unwrap();
        assert_eq!(c, d);
    }

    // gamma*t1 = 0.1 over 1e5 samples: the sample variance follows a scaled
    // chi-square, so it must sit within 3 standard errors of 0.1 where
    // SE = var * sqrt(2/n).
    #[test]
    fn white_increment_variance_matches_gamma_t() {
        let n = 100_000usize;
        let trace = generate_white(1.0, 0.1, n, &mut trial_rng(11, 0)).unwrap();
        let var: f64 = trace.increments.iter().map(|x| x * x).sum::<f64>() / n as f64;
        let se = 0.1 * (2.0 / n as f64).sqrt();
        assert!(
            (var - 0.1).abs() < 3.0 * se,
            "sample variance {var} vs expected 0.1 (3SE = {:.2e})",
            3.0 * se
        );
    }

    // Independent increments: summing k consecutive increments multiplies the
    // variance by k.
    #[test]
    fn white_four_step_sums_have_additive_variance() {
        let n = 100_000usize;
        let trace = generate_white(1.0, 0.1, n, &mut trial_rng(12, 0)).unwrap();
        let sums: Vec<f64> = trace
            .increments
            .chunks_exact(4)
            .map(|c| c.iter().sum::<f64>())
            .collect();
        let var: f64 = sums.iter().map(|x| x * x).sum::<f64>() / sums.len() as f64;
        let se = 0.4 * (2.0 / sums.len() as f64).sqrt();
        assert!(
            (var - 0.4).abs() < 3.0 * se,
            "4-sum variance {var} vs expected 0.4 (3SE = {:.2e})",
            3.0 * se
        );
    }

    #[test]
    fn white_increments_are_uncorrelated_and_normal() {
        let n = 100_000usize;
        let trace = generate_white(1.0, 0.25, n, &mut trial_rng(13, 0)).unwrap();
        let x = &trace.increments;
        let var: f64 = x.iter().map(|v| v * v).sum::<f64>() / n as f64;

        // Lag-1..5 autocorrelations: SE = 1/sqrt(n), all must be within 3 SE.
        for lag in 1..=5 {
            let acov: f64 = x.windows(lag + 1).map(|w| w[0] * w[lag]).sum::<f64>() / (n - lag) as f64;
            let ac = acov / var;
            assert!(
                ac.abs() < 3.0 / (n as f64).sqrt(),
                "lag-{lag} autocorrelation {ac} exceeds 3 sigma"
            );
        }

        // Moment-based normality: skewness and excess kurtosis z-scores.
        let sd = var.sqrt();
        let skew: f64 = x.iter().map(|v| (v / sd).powi(3)).sum::<f64>() / n as f64;
        let kurt: f64 = x.iter().map(|v| (v / sd).powi(4)).sum::<f64>() / n as f64 - 3.0;
        assert!(skew.abs() < 3.0 * (6.0 / n as f64).sqrt(), "skewness {skew}");
        assert!(kurt.abs() < 3.0 * (24.0 / n as f64).sqrt(), "excess kurtosis {kurt}");
    }

    // Doubling gamma scales every spectral coefficient linearly, so with the
    // same seed every periodogram bin's power scales by exactly 4.
    #[test]
    fn one_over_f_power_scales_as_gamma_squared() {
        let a = generate_one_over_f(0.5, 0.2, 512, &mut trial_rng(21, 0)).unwrap();
        let b = generate_one_over_f(1.0, 0.2, 512, &mut trial_rng(21, 0)).unwrap();
        for (x, y) in a.increments.iter().zip(&b.increments) {
            assert!((y - 2.0 * x).abs() <= 1e-12 * x.abs().max(1.0), "{y} vs {}", 2.0 * x);
        }
    }

    // Parseval consistency: the mean square of the synthesized delta-omega
    // series equals the integral of the target spectrum over the synthesized
    // band within 5% when averaged over seeds.
    #[test]
    fn one_over_f_total_power_matches_target_spectrum() {
        let (gamma, t1, l) = (0.8, 0.1, 1 << 14);
        let target = one_over_f_target_power(gamma, t1, l);
        let mut acc = 0.0;
        let seeds = 50;
        for s in 0..seeds {
            let tr = generate_one_over_f(gamma, t1, l, &mut trial_rng(33, s)).unwrap();
            let dw = tr.delta_omega();
            acc += dw.iter().map(|v| v * v).sum::<f64>() / dw.len() as f64;
        }
        let mean = acc / seeds as f64;
        assert!(
            (mean / target - 1.0).abs() < 0.05,
            "mean power {mean} vs target {target}"
        );
    }

    // Log-log slope of the averaged periodogram over the central two decades
    // must be -1 +/- 0.1.
    #[test]
    fn one_over_f_periodogram_slope_is_minus_one() {
        let (gamma, t1, l) = (1.0, 1.0, 1usize << 16);
        let seeds = 50;
        let mut avg = vec![0.0f64; l / 2];

        let mut planner = FftPlanner::new();
        let fft = planner.plan_fft_forward(l);
        for s in 0..seeds {
            let tr = generate_one_over_f(gamma, t1, l, &mut trial_rng(55, s)).unwrap();
            let mut buf: Vec<Complex64> =
                tr.delta_omega().iter().map(|&v| Complex64::new(v, 0.0)).collect();
            fft.process(&mut buf);
            for (k, slot) in avg.iter_mut().enumerate().skip(1) {
                *slot += buf[k].norm_sqr() / (l as f64);
            }
        }

        // Central two decades: [f_nyq/1000, f_nyq/10] -> bins [l/2000, l/20].
        let lo = l / 2000;
        let hi = l / 20;
        let pts: Vec<(f64, f64)> = (lo..hi)
            .map(|k| ((k as f64).ln(), (avg[k] / seeds as f64).ln()))
            .collect();
        let n = pts.len() as f64;
        let mx = pts.iter().map(|p| p.0).sum::<f64>() / n;
        let my = pts.iter().map(|p| p.1).sum::<f64>() / n;
        let sxy: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
        let sxx: f64 = pts.iter().map(|p| (p.0 - mx) * (p.0 - mx)).sum();
        let slope = sxy / sxx;
        assert!(
            (slope + 1.0).abs() < 0.1,
            "periodogram log-log slope {slope}, expected -1 +/- 0.1"
        );
    }
}
