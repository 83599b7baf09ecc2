//! Exact bookkeeping identities of the cascade, checked on randomized
//! configurations. These are the properties that make the finite-run mean
//! frequency offset a faithful measurement: the measurement-time correction
//! must reduce each ensemble's seen phase to (window phase) - (lower-ensemble
//! window estimates), and the direct ledger route for the mean offset must
//! agree with the last-ensemble residual route.

use proptest::prelude::*;

use cascade_clock::cascade::{
    measurement_phase_correction, run_trial, weighted_correction_sum, CascadeConfig,
};
use cascade_clock::ensemble::{
    adaptive_estimate_for_record, default_grid, EnsembleSpec, MeasurementProtocol,
};
use cascade_clock::noise::{FminPolicy, NoiseKind, NoiseModel};
use cascade_clock::posterior::Posterior;

fn small_cascade() -> impl Strategy<Value = CascadeConfig> {
    (1usize..=4, 2u32..=10, 1u64..=4, 0u64..=u64::MAX, proptest::bool::ANY).prop_flat_map(
        |(m_raw, n, cycles, seed, adaptive)| {
            // Cap the slowest period so runs stay small: shrink m until
            // n^(m-1) <= 216.
            let mut m = m_raw;
            while m > 1 && (n as u64).pow(m as u32 - 1) > 216 {
                m -= 1;
            }
            let slowest = (n as u64).pow(m as u32 - 1);
            let steps = slowest * cycles;
            let gains = proptest::collection::vec(0.01f64..=1.0, m);
            (Just(m), Just(n), Just(steps), Just(seed), Just(adaptive), gains)
        },
    )
    .prop_map(|(m, n, steps, seed, adaptive, gains)| {
        let protocol = if adaptive {
            MeasurementProtocol::Adaptive
        } else {
            MeasurementProtocol::Conventional
        };
        let mut e = EnsembleSpec::new(16, protocol);
        e.feedback_rounds = 4;
        CascadeConfig {
            ensembles: vec![e; m],
            t1: 0.25,
            multiplier: n,
            gains,
            steps,
            noise: NoiseModel {
                kind: NoiseKind::White,
                gamma: 0.4,
                f_min_policy: FminPolicy::InverseTotalTime,
            },
            seed,
            trials: 1,
            posterior_points: 256,
            keep_traces: false,
            keep_interrogation_log: true,
        }
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    // The weighted closed-form correction telescopes to the plain sum of the
    // window's estimates for every gain in (0, 1].
    #[test]
    fn closed_form_equals_plain_sum(
        estimates in proptest::collection::vec(-1.5f64..1.5, 0..200),
        alpha in 0.001f64..=1.0,
    ) {
        let closed = weighted_correction_sum(&estimates, alpha);
        let plain: f64 = estimates.iter().sum();
        prop_assert!((closed - plain).abs() < 1e-12, "{closed} vs {plain}");
    }

    // Corrected-phase identity: every interrogation of ensemble j sees its
    // raw window phase minus the plain sums of all lower-ensemble estimates
    // inside the window, to 1e-12 absolute.
    #[test]
    fn corrected_phase_identity(cfg in small_cascade()) {
        let res = run_trial(&cfg, 0).unwrap();
        let log = res.interrogations.as_ref().unwrap();
        for rec in log {
            let j = rec.ensemble;
            let meas_index = rec.step / cfg.period(j);
            let mut expected = rec.raw_window_phase;
            for i in 0..j {
                let window = (cfg.multiplier as u64).pow((j - i) as u32) as usize;
                let start = (meas_index as usize - 1) * window;
                expected -= res.ledger.estimates[i][start..start + window].iter().sum::<f64>();
            }
            prop_assert!(
                (rec.phase_seen - expected).abs() < 1e-12,
                "ensemble {j} step {}: {} vs {expected}",
                rec.step,
                rec.phase_seen
            );
        }
    }

    // Mean-offset identity: the direct ledger route equals the residual
    // route to 1e-9 relative on every trial.
    #[test]
    fn mean_offset_routes_agree(cfg in small_cascade()) {
        let res = run_trial(&cfg, 1).unwrap();
        let a = res.mean_frequency_offset;
        let b = res.mean_frequency_offset_bookkeeping;
        let tol = 1e-9 * a.abs().max(b.abs()) + 1e-15;
        prop_assert!((a - b).abs() <= tol, "{a} vs {b}");
    }

    // Scheduling: ensemble j is interrogated exactly steps / n^j times.
    #[test]
    fn interrogation_counts(cfg in small_cascade()) {
        let res = run_trial(&cfg, 2).unwrap();
        for (j, hist) in res.ledger.estimates.iter().enumerate() {
            prop_assert_eq!(hist.len() as u64, cfg.steps / cfg.period(j));
        }
    }

    // Flipping all bits and negating all rotations negates the adaptive
    // record estimate exactly (up to quadrature round-off).
    #[test]
    fn adaptive_estimator_symmetry(
        groups in proptest::collection::vec((-1.2f64..1.2, 0u32..20, 0u32..20), 1..5),
        variance in 0.05f64..0.6,
    ) {
        let prior = Posterior::gaussian(default_grid(), variance).unwrap();
        let mirrored: Vec<(f64, u32, u32)> =
            groups.iter().map(|&(r, d, u)| (-r, u, d)).collect();
        let e = adaptive_estimate_for_record(&groups, &prior).unwrap();
        let em = adaptive_estimate_for_record(&mirrored, &prior).unwrap();
        prop_assert!((e + em).abs() < 1e-12, "{e} vs {em}");
    }

    // Posterior stays normalized and non-negative under arbitrary grouped
    // updates.
    #[test]
    fn posterior_normalization_under_random_updates(
        groups in proptest::collection::vec((-3.0f64..3.0, 0u32..120, 0u32..120), 1..8),
        variance in 0.05f64..0.6,
    ) {
        let mut post = Posterior::gaussian(default_grid(), variance).unwrap();
        for (r, d, u) in groups {
            if post.update_counts(d, u, r).is_err() {
                // A degenerate record is a legal outcome, not a failure.
                return Ok(());
            }
            prop_assert!((post.normalization() - 1.0).abs() < 1e-10);
            prop_assert!(post.weights().iter().all(|w| *w >= 0.0));
        }
    }
}

// The per-ensemble feedback recursion replayed by hand for a mixed
// conventional/adaptive cascade must reproduce the engine's ledger.
#[test]
fn delta_omega_recursion_replay() {
    let mut e = EnsembleSpec::new(24, MeasurementProtocol::Adaptive);
    e.feedback_rounds = 3;
    let cfg = CascadeConfig {
        ensembles: vec![EnsembleSpec::new(40, MeasurementProtocol::Conventional), e],
        t1: 0.2,
        multiplier: 3,
        gains: vec![0.15, 0.6],
        steps: 243,
        noise: NoiseModel { kind: NoiseKind::OneOverF, gamma: 0.5, f_min_policy: FminPolicy::InverseTotalTime },
        seed: 77,
        trials: 1,
        posterior_points: 512,
        keep_traces: false,
        keep_interrogation_log: false,
    };
    let res = run_trial(&cfg, 0).unwrap();
    for j in 0..2 {
        let alpha = cfg.gains[j];
        let t_j = cfg.ramsey_time(j);
        let mut dw = 0.0;
        for est in &res.ledger.estimates[j] {
            dw -= alpha * est / t_j;
        }
        assert!(
            (dw - res.ledger.delta_omega[j]).abs() < 1e-9 * dw.abs().max(1e-9),
            "ensemble {j}: {dw} vs {}",
            res.ledger.delta_omega[j]
        );
    }
}

// Correction dimensions: a first-ensemble window of a three-level cascade
// covers n^2 estimates of ensemble 0 and n of ensemble 1.
#[test]
fn correction_window_sizes() {
    let estimates = vec![
        (1..=32).map(|k| k as f64).collect::<Vec<_>>(),
        (1..=8).map(|k| -(k as f64)).collect::<Vec<_>>(),
        Vec::new(),
    ];
    let gains = [1.0, 1.0, 1.0];
    // Second measurement of ensemble 2 (index 2): window covers ensemble-0
    // estimates 17..=32 and ensemble-1 estimates 5..=8 (n = 4).
    let c = measurement_phase_correction(2, 2, &estimates, &gains, 4);
    let expect: f64 = (17..=32).sum::<i64>() as f64 - (5..=8).sum::<i64>() as f64;
    assert!((c - expect).abs() < 1e-12, "{c} vs {expect}");
}
