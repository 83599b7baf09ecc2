//! Welch-averaged frequency-noise spectrum.
//!
//! Input is a `delta_omega` record sampled at 1/t1; output is the two-sided
//! spectral density S(f) reported on the positive-frequency bins, the same
//! convention in which white noise of strength `gamma` sits at S = gamma and
//! the locked LO's plateau sits at 1/(N T). Estimates are rescaled so that
//! the discrete Parseval identity `sum_k c_k S(f_k) df = var(trace)` holds
//! exactly (c_k = 2 except at Nyquist), with the trace's global mean removed
//! beforehand.

use rustfft::num_complex::Complex64;
use rustfft::FftPlanner;

use crate::error::{ClockError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum WindowShape {
    Rectangular,
    Hann,
}

/// Welch estimate with the default Hann window.
pub fn spectrum(trace: &[f64], t1: f64, segments: usize) -> Result<(Vec<f64>, Vec<f64>)> {
    spectrum_with(trace, t1, segments, WindowShape::Hann)
}

/// Welch estimate: `segments` half-overlapping windowed periodograms,
/// averaged. Returns (frequencies, S estimates) for bins 1..=seg_len/2.
pub fn spectrum_with(
    trace: &[f64],
    t1: f64,
    segments: usize,
    window: WindowShape,
) -> Result<(Vec<f64>, Vec<f64>)> {
    if !t1.is_finite() || t1 <= 0.0 {
        return Err(ClockError::config(format!("t1 must be finite and > 0, got {t1}")));
    }
    if segments < 1 {
        return Err(ClockError::config("spectrum needs at least one segment"));
    }
    if trace.len() < 2 * segments {
        return Err(ClockError::TraceTooShort { len: trace.len(), min: 2 * segments });
    }
    let seg_len = 2 * trace.len() / (segments + 1);
    if seg_len < 8 {
        return Err(ClockError::TraceTooShort { len: trace.len(), min: 4 * (segments + 1) });
    }
    let hop = seg_len / 2;

    let mean = trace.iter().sum::<f64>() / trace.len() as f64;
    let coeff: Vec<f64> = (0..seg_len)
        .map(|i| match window {
            WindowShape::Rectangular => 1.0,
            WindowShape::Hann => {
                0.5 * (1.0 - (2.0 * std::f64::consts::PI * i as f64 / seg_len as f64).cos())
            }
        })
        .collect();
    let wss: f64 = coeff.iter().map(|w| w * w).sum();

    let mut planner = FftPlanner::new();
    let fft = planner.plan_fft_forward(seg_len);
    let half = seg_len / 2;
    let mut acc = vec![0.0f64; half];
    let mut buf = vec![Complex64::new(0.0, 0.0); seg_len];
    let mut count = 0usize;
    let mut start = 0usize;
    while start + seg_len <= trace.len() {
        for i in 0..seg_len {
            buf[i] = Complex64::new((trace[start + i] - mean) * coeff[i], 0.0);
        }
        fft.process(&mut buf);
        for k in 1..=half {
            acc[k - 1] += buf[k].norm_sqr();
        }
        count += 1;
        start += hop;
    }

    // Two-sided density: E|X_k|^2 = S(f_k) * wss / t1 for a stationary input.
    let scale = t1 / (wss * count as f64);
    let df = 1.0 / (seg_len as f64 * t1);
    let mut psd: Vec<f64> = acc.iter().map(|a| a * scale).collect();

    // Exact Parseval: rescale so the discrete two-sided integral reproduces
    // the trace variance; window leakage and overlap weighting otherwise
    // leave percent-level mismatches.
    let var = trace.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / trace.len() as f64;
    let total: f64 = psd
        .iter()
        .enumerate()
        .map(|(i, s)| if i + 1 == half && seg_len.is_multiple_of(2) { s * df } else { 2.0 * s * df })
        .sum();
    if total > 0.0 && var > 0.0 {
        let r = var / total;
        for s in psd.iter_mut() {
            *s *= r;
        }
    }

    let freqs = (1..=half).map(|k| k as f64 * df).collect();
    Ok((freqs, psd))
}

/// The discrete two-sided integral of a spectrum returned by [`spectrum`],
/// i.e. the variance it accounts for.
pub fn integrated_power(freqs: &[f64], psd: &[f64], t1: f64) -> f64 {
    if freqs.is_empty() {
        return 0.0;
    }
    let df = freqs[0];
    let nyquist = 0.5 / t1;
    psd.iter()
        .zip(freqs)
        .map(|(s, f)| if (f - nyquist).abs() < 0.25 * df { s * df } else { 2.0 * s * df })
        .sum()
}
