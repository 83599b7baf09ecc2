//! Gridded Bayesian posterior over the LO phase offset.
//!
//! The phase is only identifiable inside a single fringe, so the posterior
//! lives on a uniform grid of cell centers spanning [-pi, pi]. Weights are
//! densities normalized so that sum(weights) * spacing = 1. Updates multiply
//! in the per-atom outcome likelihood, grouped by the rotation that was in
//! effect when the atoms were read out; large groups are accumulated in the
//! log domain so records of up to ~1e5 bits cannot underflow.

use std::sync::Arc;

use crate::error::{ClockError, Result};

/// Per-bit predictive-mass floor below which an update is degenerate.
pub const DEGENERATE_MASS: f64 = 1e-30;

/// Largest per-outcome count handled by the linear-domain fast path.
const LINEAR_PATH_MAX_COUNT: u32 = 64;

/// Precomputed phase grid shared between posteriors.
///
/// `points` cell centers at `-pi + (i + 1/2) * spacing`, symmetric about zero.
#[derive(Debug)]
pub struct PhaseGrid {
    pub points: Vec<f64>,
    pub sin: Vec<f64>,
    pub cos: Vec<f64>,
    pub spacing: f64,
}

impl PhaseGrid {
    pub fn new(points: usize) -> Arc<PhaseGrid> {
        assert!(points >= 8 && points.is_multiple_of(2), "phase grid needs an even point count >= 8");
        let spacing = 2.0 * std::f64::consts::PI / points as f64;
        // Mirror the lower half so the grid is exactly symmetric about zero;
        // the estimator symmetry property relies on this being bit-exact.
        let mut centers = vec![0.0; points];
        let mut sin = vec![0.0; points];
        let mut cos = vec![0.0; points];
        for i in 0..points / 2 {
            let x = -std::f64::consts::PI + (i as f64 + 0.5) * spacing;
            centers[i] = x;
            centers[points - 1 - i] = -x;
            let (s, c) = x.sin_cos();
            sin[i] = s;
            sin[points - 1 - i] = -s;
            cos[i] = c;
            cos[points - 1 - i] = c;
        }
        Arc::new(PhaseGrid { points: centers, sin, cos, spacing })
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }
}

/// Normalized posterior density on a [`PhaseGrid`].
#[derive(Debug, Clone)]
pub struct Posterior {
    grid: Arc<PhaseGrid>,
    weights: Vec<f64>,
}

/// Compensated (Kahan) accumulator; the correction identities downstream are
/// checked at 1e-12 so plain summation over long grids is not good enough.
#[derive(Debug, Clone, Copy, Default)]
pub(crate) struct Kahan {
    sum: f64,
    carry: f64,
}

impl Kahan {
    pub fn add(&mut self, x: f64) {
        let y = x - self.carry;
        let t = self.sum + y;
        self.carry = (t - self.sum) - y;
        self.sum = t;
    }

    pub fn value(&self) -> f64 {
        self.sum
    }

    /// Read out the current sum and reset the accumulator.
    pub fn take(&mut self) -> f64 {
        let v = self.sum;
        *self = Kahan::default();
        v
    }
}

impl Posterior {
    /// Uniform density over the window.
    pub fn uniform(grid: Arc<PhaseGrid>) -> Posterior {
        let n = grid.len();
        let w = 1.0 / (n as f64 * grid.spacing);
        Posterior { grid, weights: vec![w; n] }
    }

    /// Zero-mean Gaussian prior of the given variance, truncated to the
    /// window. Built with a shifted exponent so arbitrarily small variances
    /// collapse onto the central cells instead of underflowing everywhere.
    pub fn gaussian(grid: Arc<PhaseGrid>, variance: f64) -> Result<Posterior> {
        if !variance.is_finite() || variance <= 0.0 {
            return Err(ClockError::config(format!(
                "prior variance must be finite and > 0, got {variance}"
            )));
        }
        let inv2v = 0.5 / variance;
        let mut logw: Vec<f64> = grid.points.iter().map(|p| -p * p * inv2v).collect();
        let max = logw.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for lw in logw.iter_mut() {
            *lw = (*lw - max).exp();
            sum += *lw;
        }
        let norm = 1.0 / (sum * grid.spacing);
        let weights = logw.into_iter().map(|w| w * norm).collect();
        Ok(Posterior { grid, weights })
    }

    pub fn grid(&self) -> &Arc<PhaseGrid> {
        &self.grid
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    /// sum(weights) * spacing; 1 within 1e-10 after every update.
    pub fn normalization(&self) -> f64 {
        let mut acc = Kahan::default();
        for w in &self.weights {
            acc.add(*w);
        }
        acc.value() * self.grid.spacing
    }

    /// Posterior mean of the phase.
    pub fn mean(&self) -> f64 {
        let mut acc = Kahan::default();
        for (w, p) in self.weights.iter().zip(&self.grid.points) {
            acc.add(w * p);
        }
        acc.value() * self.grid.spacing
    }

    /// Bayes update for a single atom read out under accumulated rotation
    /// `rotation`: spin down (`true`) has probability (1 + sin(phi - r)) / 2.
    pub fn update(&mut self, spin_down: bool, rotation: f64) -> Result<()> {
        if spin_down {
            self.update_counts(1, 0, rotation)
        } else {
            self.update_counts(0, 1, rotation)
        }
    }

    /// Grouped Bayes update: `down` spin-down and `up` spin-up outcomes, all
    /// observed under the same rotation. Errors when the record's predictive
    /// mass falls below [`DEGENERATE_MASS`] per bit.
    pub fn update_counts(&mut self, down: u32, up: u32, rotation: f64) -> Result<()> {
        let count = down + up;
        if count == 0 {
            return Ok(());
        }
        let (sin_r, cos_r) = rotation.sin_cos();
        let h = self.grid.spacing;

        let log_mass = if down.max(up) <= LINEAR_PATH_MAX_COUNT {
            let mut sum = Kahan::default();
            for i in 0..self.weights.len() {
                // sin(phi_i - rotation), clamped against rounding excursions
                let s = (self.grid.sin[i] * cos_r - self.grid.cos[i] * sin_r).clamp(-1.0, 1.0);
                let p_down = 0.5 * (1.0 + s);
                let like = p_down.powi(down as i32) * (1.0 - p_down).powi(up as i32);
                let w = self.weights[i] * like;
                self.weights[i] = w;
                sum.add(w);
            }
            let total = sum.value();
            if total <= 0.0 {
                f64::NEG_INFINITY
            } else {
                let norm = 1.0 / (total * h);
                for w in self.weights.iter_mut() {
                    *w *= norm;
                }
                (total * h).ln()
            }
        } else {
            // Log-domain accumulation for large groups.
            let mut max = f64::NEG_INFINITY;
            for i in 0..self.weights.len() {
                let s = (self.grid.sin[i] * cos_r - self.grid.cos[i] * sin_r).clamp(-1.0, 1.0);
                let mut lq = self.weights[i].ln();
                if down > 0 {
                    lq += down as f64 * (s.ln_1p() - std::f64::consts::LN_2);
                }
                if up > 0 {
                    lq += up as f64 * ((-s).ln_1p() - std::f64::consts::LN_2);
                }
                self.weights[i] = lq;
                if lq > max {
                    max = lq;
                }
            }
            if max == f64::NEG_INFINITY {
                for w in self.weights.iter_mut() {
                    *w = 0.0;
                }
                f64::NEG_INFINITY
            } else {
                let mut sum = Kahan::default();
                for w in self.weights.iter_mut() {
                    *w = (*w - max).exp();
                    sum.add(*w);
                }
                let total = sum.value();
                let norm = 1.0 / (total * h);
                for w in self.weights.iter_mut() {
                    *w *= norm;
                }
                max + (total * h).ln()
            }
        };

        if log_mass < count as f64 * DEGENERATE_MASS.ln() {
            return Err(ClockError::DegenerateUpdate { mass: log_mass.exp() });
        }
        Ok(())
    }
}
