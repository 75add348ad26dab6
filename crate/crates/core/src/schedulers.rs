//! Mappings from pseudo-time `τ ∈ [0, 1]` to log-SNR `γ`.
//!
//! `τ = 0` is clean data (`γ_max`) and `τ = 1` is pure noise (`γ_min`).

use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};

pub const GAMMA_MIN: f64 = -15.0;
pub const GAMMA_MAX: f64 = 15.0;

/// A differentiable, decreasing `γ(τ)`.
pub trait NoiseSchedule {
    fn gamma(&self, tau: f64) -> f64;

    /// `−dγ/dτ`, positive for a decreasing schedule.
    fn neg_dgamma_dtau(&self, tau: f64) -> f64;

    /// `d/dτ ln(1 + e^{−γ(τ)})`, the drift/diffusion rate of the VP
    /// process, equal to `(−dγ/dτ) · σ²(γ)`.
    fn log_snr_rate(&self, tau: f64) -> f64 {
        let gamma = self.gamma(tau);
        self.neg_dgamma_dtau(tau) * crate::diffusion::sigmoid(-gamma)
    }
}

/// Importance-sampling training schedule built from an EMA histogram of
/// loss magnitudes over equal-width `γ` bins.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdaptiveScheduler {
    weights: Vec<f64>,
    pub gamma_min: f64,
    pub gamma_max: f64,
    pub decay: f64,
    pub floor: f64,
}

impl Default for AdaptiveScheduler {
    fn default() -> Self {
        Self::new(100, GAMMA_MIN, GAMMA_MAX)
    }
}

impl AdaptiveScheduler {
    /// Uniform weights, EMA decay 0.99, floor 1e-8.
    pub fn new(n_bins: usize, gamma_min: f64, gamma_max: f64) -> Self {
        assert!(n_bins > 0 && gamma_min < gamma_max);
        Self { weights: vec![1.0; n_bins], gamma_min, gamma_max, decay: 0.99, floor: 1e-8 }
    }

    pub fn with_weights(weights: Vec<f64>, gamma_min: f64, gamma_max: f64) -> Result<Self> {
        if weights.is_empty() || weights.iter().any(|w| !(w.is_finite() && *w > 0.0)) {
            return Err(Error::InvalidArgument("bin weights must be positive and finite".into()));
        }
        let mut s = Self::new(weights.len(), gamma_min, gamma_max);
        s.weights = weights;
        Ok(s)
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn n_bins(&self) -> usize {
        self.weights.len()
    }

    pub fn bin_width(&self) -> f64 {
        (self.gamma_max - self.gamma_min) / self.weights.len() as f64
    }

    fn bin_lower(&self, b: usize) -> f64 {
        self.gamma_min + b as f64 * self.bin_width()
    }

    /// Bin index containing `gamma`, clamped to the edge bins.
    pub fn bin_of(&self, gamma: f64) -> usize {
        let b = ((gamma - self.gamma_min) / self.bin_width()).floor();
        (b.max(0.0) as usize).min(self.weights.len() - 1)
    }

    fn total(&self) -> f64 {
        self.weights.iter().sum()
    }

    /// Normalised density `p(γ)`, constant within each bin.
    pub fn density(&self, gamma: f64) -> f64 {
        self.weights[self.bin_of(gamma)] / (self.total() * self.bin_width())
    }

    /// Probability mass below `gamma`.
    pub fn cdf(&self, gamma: f64) -> f64 {
        if gamma <= self.gamma_min {
            return 0.0;
        }
        if gamma >= self.gamma_max {
            return 1.0;
        }
        let b = self.bin_of(gamma);
        let below: f64 = self.weights[..b].iter().sum();
        let frac = (gamma - self.bin_lower(b)) / self.bin_width();
        (below + frac * self.weights[b]) / self.total()
    }

    /// Quantile function from `γ_max` (τ = 0) down to `γ_min` (τ = 1), and
    /// the density at the returned `γ`.
    pub fn gamma_of_tau(&self, tau: f64) -> (f64, f64) {
        let n = self.weights.len();
        if tau <= 0.0 {
            return (self.gamma_max, self.density(self.gamma_max));
        }
        if tau >= 1.0 {
            return (self.gamma_min, self.density(self.gamma_min));
        }
        let total = self.total();
        let target = tau * total;
        let mut above = 0.0;
        for b in (0..n).rev() {
            let w = self.weights[b];
            if above + w >= target || b == 0 {
                let frac = ((target - above) / w).clamp(0.0, 1.0);
                let top = self.bin_lower(b) + self.bin_width();
                let gamma = (top - frac * self.bin_width()).clamp(self.gamma_min, self.gamma_max);
                return (gamma, w / (total * self.bin_width()));
            }
            above += w;
        }
        unreachable!("loop returns at b == 0")
    }

    /// EMA update of the bin containing `gamma`.
    pub fn update(&mut self, gamma: f64, observed_loss: f64) -> Result<()> {
        if !(observed_loss.is_finite() && observed_loss >= 0.0) {
            return Err(Error::InvalidArgument(format!("observed loss {observed_loss} must be finite and ≥ 0")));
        }
        let b = self.bin_of(gamma);
        let w = self.decay * self.weights[b] + (1.0 - self.decay) * observed_loss;
        self.weights[b] = w.max(self.floor);
        Ok(())
    }
}

impl NoiseSchedule for AdaptiveScheduler {
    fn gamma(&self, tau: f64) -> f64 {
        self.gamma_of_tau(tau).0
    }

    fn neg_dgamma_dtau(&self, tau: f64) -> f64 {
        1.0 / self.gamma_of_tau(tau).1
    }
}

/// Karras-style inference schedule in `σ = e^{−γ/2}`, truncated to
/// `[γ_min, γ_max]`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EdmSchedule {
    pub rho: f64,
    pub gamma_min: f64,
    pub gamma_max: f64,
}

impl Default for EdmSchedule {
    fn default() -> Self {
        Self { rho: 7.0, gamma_min: GAMMA_MIN, gamma_max: GAMMA_MAX }
    }
}

impl EdmSchedule {
    fn ends(&self) -> (f64, f64) {
        let inv = 1.0 / self.rho;
        let sigma_max = (-self.gamma_min / 2.0).exp();
        let sigma_min = (-self.gamma_max / 2.0).exp();
        (sigma_max.powf(inv), sigma_min.powf(inv))
    }

    fn base(&self, tau: f64) -> f64 {
        let (hi, lo) = self.ends();
        hi + (1.0 - tau) * (lo - hi)
    }

    /// Noise-to-signal ratio `σ/α` at `tau`.
    pub fn sigma(&self, tau: f64) -> f64 {
        self.base(tau).powf(self.rho)
    }

    /// `γ` at the `n` nodes `i = 0..n`, from `γ_min` to `γ_max`.
    pub fn gammas(&self, n: usize) -> Vec<f64> {
        match n {
            0 => vec![],
            1 => vec![self.gamma_min],
            _ => (0..n).map(|i| self.gamma(1.0 - i as f64 / (n - 1) as f64)).collect(),
        }
    }
}

impl NoiseSchedule for EdmSchedule {
    fn gamma(&self, tau: f64) -> f64 {
        if tau >= 1.0 {
            return self.gamma_min;
        }
        if tau <= 0.0 {
            return self.gamma_max;
        }
        (-2.0 * self.rho * self.base(tau).ln()).clamp(self.gamma_min, self.gamma_max)
    }

    fn neg_dgamma_dtau(&self, tau: f64) -> f64 {
        let (hi, lo) = self.ends();
        2.0 * self.rho * (hi - lo) / self.base(tau.clamp(0.0, 1.0))
    }
}

/// Sampling grid of `n_steps + 1` log-SNR values of the default schedule.
pub fn edm_gammas(n_points: usize) -> Vec<f64> {
    EdmSchedule::default().gammas(n_points)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn uniform_quantile_is_linear() {
        let s = AdaptiveScheduler::default();
        for i in 0..=100 {
            let tau = i as f64 / 100.0;
            let (g, p) = s.gamma_of_tau(tau);
            assert!((g - (15.0 - 30.0 * tau)).abs() < 1e-12, "tau={tau}: {g}");
            assert!((p - 1.0 / 30.0).abs() < 1e-15);
        }
        assert_eq!(s.gamma(0.5), 0.0);
    }

    #[test]
    fn single_bin_histogram() {
        let mut w = vec![1e-8; 100];
        w[49] = 1.0;
        w[50] = 1.0;
        // Bins 49 and 50 cover [-0.3, 0.3]; give all mass to [-0.15, 0.15]
        // by using 200 bins instead.
        let mut w2 = vec![1e-30; 200];
        w2[99] = 1.0;
        w2[100] = 1.0;
        let s = AdaptiveScheduler::with_weights(w2, -15.0, 15.0).unwrap();
        for tau in [0.1, 0.3, 0.5, 0.7, 0.9] {
            let g = s.gamma(tau);
            assert!((g - (0.15 - 0.3 * tau)).abs() < 1e-9, "tau={tau}: {g}");
        }
        let _ = w;
    }

    #[test]
    fn endpoints_for_any_weights() {
        let s = AdaptiveScheduler::with_weights((1..=100).map(f64::from).collect(), -15.0, 15.0).unwrap();
        assert_eq!(s.gamma(0.0), 15.0);
        assert_eq!(s.gamma(1.0), -15.0);
    }

    #[test]
    fn ema_update_touches_one_bin() {
        let mut s = AdaptiveScheduler::default();
        let before = s.weights().to_vec();
        s.update(0.1, 2.0).unwrap();
        let b = s.bin_of(0.1);
        assert!((s.weights()[b] - 1.01).abs() < 1e-15);
        for (i, (a, c)) in before.iter().zip(s.weights()).enumerate() {
            if i != b {
                assert_eq!(a.to_bits(), c.to_bits());
            }
        }
        s.update(99.0, 3.0).unwrap();
        assert!(s.weights()[99] != 1.0);
        assert!(s.update(0.0, -1.0).is_err());
    }

    #[test]
    fn edm_endpoints_and_midpoint() {
        let g = edm_gammas(20);
        assert_eq!(g[0], -15.0);
        assert_eq!(g[19], 15.0);
        // Closed form evaluated to 50 digits.
        assert!((g[10] - -6.254_438_176_780_643).abs() < 1e-12, "{}", g[10]);
        assert!(g.windows(2).all(|w| w[1] > w[0]));
    }

    #[test]
    fn edm_slope_matches_difference_quotient() {
        let s = EdmSchedule::default();
        for tau in [0.1, 0.5, 0.9] {
            let h = 1e-6;
            let fd = -(s.gamma(tau + h) - s.gamma(tau - h)) / (2.0 * h);
            assert!((fd - s.neg_dgamma_dtau(tau)).abs() / fd < 1e-7);
        }
    }
}
