//! Scalar special functions used by the differentiable primitives.

use libm::{erf as libm_erf, erfc};
use std::f64::consts::{FRAC_1_SQRT_2, PI};

/// `ln √(2π)`.
pub const LN_SQRT_2PI: f64 = 0.918_938_533_204_672_8;

const TAIL_START: f64 = -6.0;

pub fn erf(x: f64) -> f64 {
    libm_erf(x)
}

/// Standard normal density.
pub fn std_normal_pdf(u: f64) -> f64 {
    (-0.5 * u * u - LN_SQRT_2PI).exp()
}

/// Standard normal distribution function.
pub fn std_normal_cdf(u: f64) -> f64 {
    0.5 * erfc(-u * FRAC_1_SQRT_2)
}

/// `ln Φ(u)`, finite for every finite `u`.
pub fn log_std_normal_cdf(u: f64) -> f64 {
    if u > 0.0 {
        (-0.5 * erfc(u * FRAC_1_SQRT_2)).ln_1p()
    } else if u >= TAIL_START {
        (0.5 * erfc(-u * FRAC_1_SQRT_2)).ln()
    } else {
        // Φ(u) = φ(u) · R(-u) with R the Mills ratio.
        -0.5 * u * u - LN_SQRT_2PI - mills_denominator(-u).ln()
    }
}

/// `φ(u) / Φ(u)`, the derivative of `ln Φ(u)`.
pub fn normal_hazard(u: f64) -> f64 {
    if u >= TAIL_START {
        std_normal_pdf(u) / std_normal_cdf(u)
    } else {
        mills_denominator(-u)
    }
}

/// `1 / R(x)` for `x > 0`, where `R(x) = (1 - Φ(x)) / φ(x)`, via the
/// continued fraction `x + 1/(x + 2/(x + 3/(x + …)))` (modified Lentz).
fn mills_denominator(x: f64) -> f64 {
    const TINY: f64 = 1e-300;
    let mut f = x;
    let mut c = f;
    let mut d = 0.0;
    for j in 1..500 {
        let a = j as f64;
        d = x + a * d;
        if d.abs() < TINY {
            d = TINY;
        }
        d = 1.0 / d;
        c = x + a / c;
        if c.abs() < TINY {
            c = TINY;
        }
        let delta = c * d;
        f *= delta;
        if (delta - 1.0).abs() < 1e-16 {
            break;
        }
    }
    f
}

/// Derivative of `erf`.
pub fn erf_grad(x: f64) -> f64 {
    2.0 / PI.sqrt() * (-x * x).exp()
}

/// Exact GELU, `x Φ(x)`.
pub fn gelu(x: f64) -> f64 {
    x * std_normal_cdf(x)
}

pub fn gelu_grad(x: f64) -> f64 {
    std_normal_cdf(x) + x * std_normal_pdf(x)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn log_cdf_reference_points() {
        assert!((log_std_normal_cdf(0.0) + std::f64::consts::LN_2).abs() < 1e-15);
        // Reference values from 50-digit evaluation.
        let cases = [
            (-10.0, -53.231_285_150_512_47),
            (-2.0, -3.783_184_333_682_032),
            (-6.0, -20.736_768_949_974_706),
            (-5.9, -20.125_799_580_203_174),
            (-30.0, -454.321_243_956_343_2),
            (-40.0, -804.608_442_013_753_8),
            (3.0, -0.001_350_809_964_748_193_8),
        ];
        for (u, want) in cases {
            let got = log_std_normal_cdf(u);
            assert!(((got - want) / want).abs() < 1e-12, "u={u}: {got} vs {want}");
        }
        let got = log_std_normal_cdf(10.0);
        assert!(((got + 7.619_853_024_160_526e-24) / 7.6e-24).abs() < 1e-9);
    }

    #[test]
    fn hazard_is_continuous_across_tail_switch() {
        let a = normal_hazard(TAIL_START + 1e-9);
        let b = normal_hazard(TAIL_START - 1e-9);
        assert!((a - b).abs() / a < 1e-8);
    }

    #[test]
    fn log_cdf_monotone_and_nonpositive() {
        let mut prev = f64::NEG_INFINITY;
        for i in 0..4000 {
            let u = -45.0 + i as f64 * 0.02;
            let v = log_std_normal_cdf(u);
            assert!(v.is_finite() && v <= 0.0);
            assert!(v >= prev, "not monotone at {u}");
            prev = v;
        }
    }
}
