//! One Ramsey interrogation of an uncorrelated N-atom ensemble.
//!
//! Two estimation protocols are implemented. The conventional protocol
//! measures the collective imbalance in a single shot: the spin-down count is
//! binomial with p = (1 + sin(phi)) / 2 and the phase estimate is
//! `asin(2 J3 / N)` with `J3 = n_down - N/2`, usable for |phi| up to pi/2.
//! The adaptive protocol reads atoms out in batches, runs a gridded Bayes
//! update on the record after each batch, and rotates the remaining atoms by
//! the current posterior mean so later batches measure near zero phase; the
//! rotations extend the usable window to |phi| close to pi.

use std::sync::{Arc, OnceLock};

use rand::Rng;
use rand_distr::{Binomial, Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{ClockError, Result};
use crate::posterior::{PhaseGrid, Posterior};
use crate::rng::TrialRng;

/// How an ensemble turns its window phase into an estimate.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MeasurementProtocol {
    /// Single-shot projective readout, exact binomial statistics.
    Conventional,
    /// Conventional readout with the binomial replaced by its Gaussian
    /// approximation; used as a fast path in large-N break-down scans.
    ConventionalGaussian,
    /// Per-atom readout with Bayesian rotation feedback.
    Adaptive,
    /// Noiseless reference: the estimate equals the true phase. Useful as a
    /// baseline and in exactness tests of the feedback bookkeeping.
    Ideal,
}

/// Rule fixing the adaptive prior variance for a given Ramsey time.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PriorRule {
    /// First ensemble: `gamma * T`. Ensemble j >= 2: the whitened level of
    /// the previous stage, `T_j / (N_{j-1} T_{j-1})`.
    Auto,
    /// Explicit effective noise level; prior variance is `gamma_eff * T`.
    GammaEff(f64),
}

/// One atomic ensemble in the cascade.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EnsembleSpec {
    pub n_atoms: u64,
    pub protocol: MeasurementProtocol,
    /// Number of measure-then-rotate batches in the adaptive protocol.
    pub feedback_rounds: u32,
    pub prior: PriorRule,
}

impl EnsembleSpec {
    pub fn new(n_atoms: u64, protocol: MeasurementProtocol) -> EnsembleSpec {
        EnsembleSpec { n_atoms, protocol, feedback_rounds: 4, prior: PriorRule::Auto }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_atoms < 1 {
            return Err(ClockError::config("ensemble.atoms must be >= 1"));
        }
        if self.protocol == MeasurementProtocol::Adaptive {
            let r = self.feedback_rounds as u64;
            if r < 1 || r > self.n_atoms {
                return Err(ClockError::config(format!(
                    "ensemble.rounds must be in [1, atoms]; got {} for {} atoms",
                    self.feedback_rounds, self.n_atoms
                )));
            }
            if let PriorRule::GammaEff(g) = self.prior {
                if !g.is_finite() || g <= 0.0 {
                    return Err(ClockError::config(format!(
                        "ensemble.prior-gamma-eff must be finite and > 0, got {g}"
                    )));
                }
            }
        }
        Ok(())
    }
}

/// Raw result of one interrogation.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct MeasurementOutcome {
    /// Atoms detected spin down (s = 1).
    pub n_down: u64,
    /// Ordered per-atom bit record (adaptive protocol only).
    pub record: Vec<bool>,
    /// Intermediate rotation steps applied after each batch (adaptive only).
    pub rotations: Vec<f64>,
}

/// P(s | phi, rotation) for a single atom: the rotated Ramsey fringe
/// `cos^2(pi/4 - phi/2 + r/2)` for spin down, its complement for spin up.
pub fn outcome_probability(spin_down: bool, delta_phi: f64, rotation: f64) -> f64 {
    assert!(delta_phi.is_finite() && rotation.is_finite(), "non-finite phase input");
    let angle = std::f64::consts::FRAC_PI_4 - 0.5 * delta_phi + 0.5 * rotation;
    if spin_down {
        angle.cos().powi(2)
    } else {
        angle.sin().powi(2)
    }
}

/// Projective readout of all N atoms at once: n_down ~ Binomial(N, p) with
/// p = (1 + sin(phi)) / 2.
pub fn measure_conventional(n_atoms: u64, delta_phi: f64, rng: &mut TrialRng) -> MeasurementOutcome {
    let p = (0.5 * (1.0 + delta_phi.sin())).clamp(0.0, 1.0);
    let n_down = Binomial::new(n_atoms, p).expect("valid binomial").sample(rng);
    MeasurementOutcome { n_down, ..Default::default() }
}

/// Phase estimate from a conventional outcome: `asin(2 J3 / N)` with
/// `J3 = n_down - N/2`. Range is [-pi/2, pi/2] by construction.
pub fn estimate_conventional(outcome: &MeasurementOutcome, n_atoms: u64) -> f64 {
    estimate_from_down_count(outcome.n_down as f64, n_atoms)
}

fn estimate_from_down_count(n_down: f64, n_atoms: u64) -> f64 {
    let n = n_atoms as f64;
    let j3 = n_down - 0.5 * n;
    (2.0 * j3 / n).clamp(-1.0, 1.0).asin()
}

/// Gaussian fast path: J3 drawn from a normal with the exact binomial mean
/// and variance. Moment-matched to `measure_conventional` for large N.
pub fn estimate_conventional_gaussian(n_atoms: u64, delta_phi: f64, rng: &mut TrialRng) -> f64 {
    let n = n_atoms as f64;
    let (s, c) = delta_phi.sin_cos();
    let z: f64 = rng.sample(StandardNormal);
    let j3 = 0.5 * n * s + 0.5 * n.sqrt() * c.abs() * z;
    (2.0 * j3 / n).clamp(-1.0, 1.0).asin()
}

/// Batch sizes for the adaptive protocol: as equal as possible, with the
/// remainder assigned to the later batches.
pub fn batch_sizes(n_atoms: u64, rounds: u32) -> Vec<u64> {
    let r = rounds as u64;
    let base = n_atoms / r;
    let extra = n_atoms % r;
    (0..r).map(|k| if k < r - extra { base } else { base + 1 }).collect()
}

/// Batches larger than this are sampled as one binomial count instead of
/// per-atom bits; the ordered record is only kept below the threshold.
const RECORD_BITS_MAX_BATCH: u64 = 256;

static DEFAULT_GRID: OnceLock<Arc<PhaseGrid>> = OnceLock::new();

/// The default 4096-point posterior grid, shared process-wide.
pub fn default_grid() -> Arc<PhaseGrid> {
    DEFAULT_GRID.get_or_init(|| PhaseGrid::new(4096)).clone()
}

/// Adaptive interrogation with a zero-mean Gaussian prior of the given
/// variance on the default grid. Returns the total estimate (the sum of all
/// rotation steps, equivalently the final posterior mean) and the raw record.
pub fn measure_adaptive(
    n_atoms: u64,
    delta_phi: f64,
    prior_variance: f64,
    rounds: u32,
    rng: &mut TrialRng,
) -> Result<(f64, MeasurementOutcome)> {
    let prior = Posterior::gaussian(default_grid(), prior_variance)?;
    measure_adaptive_with_prior(n_atoms, delta_phi, &prior, rounds, rng)
}

/// Adaptive interrogation against a caller-supplied prior posterior. The
/// cascade engine reuses one prior per ensemble so the Gaussian is not
/// re-evaluated on every interrogation.
pub fn measure_adaptive_with_prior(
    n_atoms: u64,
    delta_phi: f64,
    prior: &Posterior,
    rounds: u32,
    rng: &mut TrialRng,
) -> Result<(f64, MeasurementOutcome)> {
    if rounds < 1 || rounds as u64 > n_atoms {
        return Err(ClockError::config(format!(
            "adaptive rounds must be in [1, atoms]; got {rounds} for {n_atoms} atoms"
        )));
    }
    let mut post = prior.clone();
    let mut rotation = 0.0f64;
    // Individual bits are only materialized for small batches; atoms within a
    // batch share one rotation, so the down-count is exactly binomial and
    // large batches can be drawn in a single shot.
    let keep_bits = n_atoms / rounds as u64 <= RECORD_BITS_MAX_BATCH;
    let mut record = Vec::with_capacity(if keep_bits { n_atoms as usize } else { 0 });
    let mut rotations = Vec::with_capacity(rounds as usize);
    let mut n_down_total = 0u64;

    for batch in batch_sizes(n_atoms, rounds) {
        let p_down = (0.5 * (1.0 + (delta_phi - rotation).sin())).clamp(0.0, 1.0);
        let down = if keep_bits {
            let mut d = 0u32;
            for _ in 0..batch {
                let s = rng.random::<f64>() < p_down;
                record.push(s);
                d += s as u32;
            }
            d
        } else {
            Binomial::new(batch, p_down).expect("valid binomial").sample(rng) as u32
        };
        n_down_total += down as u64;
        post.update_counts(down, batch as u32 - down, rotation)?;
        let step = post.mean() - rotation;
        rotations.push(step);
        rotation += step;
    }

    Ok((rotation, MeasurementOutcome { n_down: n_down_total, record, rotations }))
}

/// Recompute the adaptive estimate from a recorded (rotation, down, up)
/// group sequence. Replays the same grouped updates the live protocol
/// performs; oracle tests compare this against independent quadrature.
pub fn adaptive_estimate_for_record(
    groups: &[(f64, u32, u32)],
    prior: &Posterior,
) -> Result<f64> {
    let mut post = prior.clone();
    for &(rotation, down, up) in groups {
        post.update_counts(down, up, rotation)?;
    }
    Ok(post.mean())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::trial_rng;

    #[test]
    fn outcome_probability_reference_points() {
        // cos^2(pi/4) = 1/2
        assert!((outcome_probability(true, 0.0, 0.0) - 0.5).abs() < 1e-15);
        // cos^2(0) = 1
        assert!((outcome_probability(true, std::f64::consts::FRAC_PI_2, 0.0) - 1.0).abs() < 1e-15);
        // sin^2(pi/4 - pi/12) = sin^2(pi/6) = 1/4
        assert!((outcome_probability(false, std::f64::consts::FRAC_PI_6, 0.0) - 0.25).abs() < 1e-15);
    }

    #[test]
    fn outcome_probabilities_sum_to_one() {
        for k in 0..200 {
            let phi = -3.2 + 0.032 * k as f64;
            let r = 0.7 * (k as f64).sin();
            let total = outcome_probability(true, phi, r) + outcome_probability(false, phi, r);
            assert!((total - 1.0).abs() < 1e-14);
            assert!((0.0..=1.0).contains(&outcome_probability(true, phi, r)));
        }
    }

    #[test]
    fn conventional_saturates_at_quarter_fringe() {
        let mut rng = trial_rng(2, 0);
        for _ in 0..100 {
            let out = measure_conventional(50, std::f64::consts::FRAC_PI_2, &mut rng);
            assert_eq!(out.n_down, 50);
        }
    }

    #[test]
    fn conventional_estimate_reference_points() {
        let n = 10;
        assert_eq!(estimate_conventional(&MeasurementOutcome { n_down: 5, ..Default::default() }, n), 0.0);
        let full = estimate_conventional(&MeasurementOutcome { n_down: 10, ..Default::default() }, n);
        assert!((full - std::f64::consts::FRAC_PI_2).abs() < 1e-15);
        let three_of_four = estimate_conventional(&MeasurementOutcome { n_down: 3, ..Default::default() }, 4);
        assert!((three_of_four - std::f64::consts::FRAC_PI_6).abs() < 1e-15);
    }

    // At N = 1e4 and small phase, the mean of 2 J3 / N over many draws must
    // match sin(phi) to within 3 binomial standard errors.
    #[test]
    fn conventional_imbalance_is_unbiased_for_sin_phi() {
        let (n, phi, draws) = (10_000u64, 0.1f64, 10_000usize);
        let mut rng = trial_rng(5, 0);
        let mut acc = 0.0;
        for _ in 0..draws {
            let out = measure_conventional(n, phi, &mut rng);
            acc += 2.0 * (out.n_down as f64 - 0.5 * n as f64) / n as f64;
        }
        let mean = acc / draws as f64;
        let p = 0.5 * (1.0 + phi.sin());
        let se = 2.0 * (p * (1.0 - p) / n as f64).sqrt() / (draws as f64).sqrt();
        assert!((mean - phi.sin()).abs() < 3.0 * se, "mean {mean} vs sin {}", phi.sin());
    }

    #[test]
    fn gaussian_fast_path_matches_binomial_moments() {
        let (n, phi, draws) = (4096u64, 0.2f64, 20_000usize);
        let mut rng = trial_rng(6, 0);
        let (mut m1, mut m2) = (0.0, 0.0);
        for _ in 0..draws {
            let e = estimate_conventional_gaussian(n, phi, &mut rng);
            m1 += e;
            m2 += e * e;
        }
        m1 /= draws as f64;
        m2 = m2 / draws as f64 - m1 * m1;
        // Estimator error variance is 1/N to leading order.
        assert!((m1 - phi).abs() < 3.0 * (1.0 / n as f64 / draws as f64).sqrt() + 1e-3);
        assert!((m2 * n as f64 - 1.0).abs() < 0.1, "scaled variance {}", m2 * n as f64);
    }

    #[test]
    fn batch_sizes_put_remainder_last() {
        assert_eq!(batch_sizes(8, 4), vec![2, 2, 2, 2]);
        assert_eq!(batch_sizes(7, 4), vec![1, 2, 2, 2]);
        assert_eq!(batch_sizes(4, 4), vec![1, 1, 1, 1]);
        assert_eq!(batch_sizes(10, 3), vec![3, 3, 4]);
        assert_eq!(batch_sizes(5, 1), vec![5]);
    }

    #[test]
    fn adaptive_estimate_is_symmetric_at_zero_phase() {
        let mut rng = trial_rng(7, 0);
        let prior = Posterior::gaussian(default_grid(), 0.3).unwrap();
        let trials = 10_000;
        let mut acc = 0.0;
        let mut acc2 = 0.0;
        for _ in 0..trials {
            let (e, _) = measure_adaptive_with_prior(8, 0.0, &prior, 4, &mut rng).unwrap();
            acc += e;
            acc2 += e * e;
        }
        let mean = acc / trials as f64;
        let sd = (acc2 / trials as f64 - mean * mean).sqrt();
        let se = sd / (trials as f64).sqrt();
        assert!(mean.abs() < 3.0 * se, "mean {mean}, 3se {}", 3.0 * se);
    }

    #[test]
    fn adaptive_respects_degenerate_prior() {
        let mut rng = trial_rng(8, 0);
        let prior = Posterior::gaussian(default_grid(), 1e-18).unwrap();
        for phi in [2.0, -1.3, 0.4] {
            let (e, _) = measure_adaptive_with_prior(16, phi, &prior, 4, &mut rng).unwrap();
            assert!(e.abs() < 2.0 * default_grid().spacing, "estimate {e} for phi {phi}");
        }
    }

    #[test]
    fn adaptive_estimate_stays_inside_window() {
        let mut rng = trial_rng(9, 0);
        let prior = Posterior::gaussian(default_grid(), 0.5).unwrap();
        for k in 0..200 {
            let phi = -4.0 + 0.04 * k as f64;
            let (e, out) = measure_adaptive_with_prior(12, phi, &prior, 4, &mut rng).unwrap();
            assert!(e.abs() <= std::f64::consts::PI + default_grid().spacing);
            assert_eq!(out.record.len(), 12);
            assert_eq!(out.rotations.len(), 4);
            assert_eq!(out.n_down, out.record.iter().filter(|s| **s).count() as u64);
        }
    }

    // Flipping every bit and negating the rotations negates the estimate.
    #[test]
    fn record_estimator_symmetry() {
        let prior = Posterior::gaussian(default_grid(), 0.4).unwrap();
        let groups = [(0.0, 3u32, 1u32), (0.45, 2, 2), (-0.2, 0, 4)];
        let mirrored: Vec<(f64, u32, u32)> =
            groups.iter().map(|&(r, d, u)| (-r, u, d)).collect();
        let e = adaptive_estimate_for_record(&groups, &prior).unwrap();
        let em = adaptive_estimate_for_record(&mirrored, &prior).unwrap();
        assert!((e + em).abs() < 1e-12, "{e} vs {em}");
    }

    // The live protocol's running rotation sum must agree with a from-scratch
    // replay of its own record.
    #[test]
    fn live_estimate_matches_record_replay() {
        let prior = Posterior::gaussian(default_grid(), 0.3).unwrap();
        let mut rng = trial_rng(10, 0);
        for k in 0..50 {
            let phi = -1.5 + 0.06 * k as f64;
            let (e, out) = measure_adaptive_with_prior(11, phi, &prior, 4, &mut rng).unwrap();
            let sizes = batch_sizes(11, 4);
            let mut groups = Vec::new();
            let mut idx = 0usize;
            let mut rot = 0.0;
            for (b, step) in sizes.iter().zip(&out.rotations) {
                let bits = &out.record[idx..idx + *b as usize];
                let down = bits.iter().filter(|s| **s).count() as u32;
                groups.push((rot, down, *b as u32 - down));
                idx += *b as usize;
                rot += step;
            }
            let replay = adaptive_estimate_for_record(&groups, &prior).unwrap();
            assert!((e - replay).abs() < 1e-12, "{e} vs {replay}");
        }
    }

    #[test]
    fn spec_validation_rejects_bad_rounds() {
        let mut spec = EnsembleSpec::new(3, MeasurementProtocol::Adaptive);
        spec.feedback_rounds = 4;
        assert!(spec.validate().is_err());
        spec.feedback_rounds = 0;
        assert!(spec.validate().is_err());
        spec.feedback_rounds = 3;
        assert!(spec.validate().is_ok());
    }
}
