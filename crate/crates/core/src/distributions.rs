//! Gaussian and censored-Gaussian reconstruction likelihoods.
//!
//! The decoder predicts a latent Gaussian `ŷ ~ N(μ̂, s²)` with one learned
//! scale per channel; the physical value is `clip(ŷ, lower, upper)`.
//! Observations sitting exactly on a bound contribute a log-CDF
//! (classification) term, interior observations the usual Gaussian term.

use crate::autodiff::special::{log_std_normal_cdf, std_normal_cdf, std_normal_pdf, LN_SQRT_2PI};
use crate::autodiff::{Graph, Var};
use crate::error::{shape_err, Error, Result};
use crate::grid::Mask;
use crate::tensor::Tensor;

/// Clips `y` into `[lower, upper]`.
pub fn clip_to_bounds(y: f64, lower: f64, upper: f64) -> f64 {
    if y <= lower {
        lower
    } else if y >= upper {
        upper
    } else {
        y
    }
}

/// Per-element Gaussian negative log-likelihood.
pub fn gaussian_nll_point(x: f64, mu: f64, s: f64) -> f64 {
    let u = (x - mu) / s;
    0.5 * u * u + s.ln() + LN_SQRT_2PI
}

/// Per-element censored-Gaussian negative log-likelihood.
pub fn censored_nll_point(x: f64, mu: f64, s: f64, lower: f64, upper: f64) -> Result<f64> {
    if x == lower {
        Ok(-log_std_normal_cdf((lower - mu) / s))
    } else if x == upper {
        Ok(-log_std_normal_cdf((mu - upper) / s))
    } else if x > lower && x < upper {
        Ok(gaussian_nll_point(x, mu, s))
    } else {
        Err(Error::OutOfBounds(format!("{x} outside [{lower}, {upper}]")))
    }
}

/// Probability mass at a bound or density in the interior; zero outside.
pub fn censored_pdf(x: f64, mu: f64, s: f64, lower: f64, upper: f64) -> f64 {
    if x == lower {
        std_normal_cdf((lower - mu) / s)
    } else if x == upper {
        std_normal_cdf((mu - upper) / s)
    } else if x > lower && x < upper {
        std_normal_pdf((x - mu) / s) / s
    } else {
        0.0
    }
}

/// Number of valid observations in each likelihood branch.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct BranchCounts {
    pub lower: usize,
    pub upper: usize,
    pub interior: usize,
}

impl BranchCounts {
    pub fn total(&self) -> usize {
        self.lower + self.upper + self.interior
    }
}

/// Scale model shared by both likelihoods: `log_s` has shape `[K]`.
struct Prepared {
    u: Var,
    log_s_full: Var,
    shape: Vec<usize>,
}

fn prepare(g: &mut Graph, x: &Tensor, mu: Var, log_s: Var, mask: &Mask) -> Result<Prepared> {
    let shape = g.shape(mu).to_vec();
    if x.shape() != shape.as_slice() {
        return Err(shape_err("nll", format!("target {:?} vs mean {:?}", x.shape(), shape)));
    }
    let [_, k, h, w] = x.dims4()?;
    if g.shape(log_s) != [k] {
        return Err(shape_err("nll", format!("log-scale {:?} for {k} channels", g.shape(log_s))));
    }
    if (h, w) != (mask.height(), mask.width()) {
        return Err(shape_err("nll", "mask does not match grid"));
    }
    let xc = g.constant(x.clone());
    let d = g.sub(mu, xc)?;
    let ls = g.reshape(log_s, &[1, k, 1, 1])?;
    let log_s_full = g.broadcast(ls, &shape)?;
    let neg = g.neg(log_s_full);
    let inv_s = g.exp(neg);
    let u = g.mul(d, inv_s)?;
    Ok(Prepared { u, log_s_full, shape })
}

fn gaussian_terms(g: &mut Graph, p: &Prepared) -> Var {
    let sq = g.square(p.u);
    let half = g.scale(sq, 0.5);
    let t = g.add(half, p.log_s_full).expect("same shape");
    g.add_scalar(t, LN_SQRT_2PI)
}

fn masked_sum(g: &mut Graph, terms: Var, weights: Vec<f64>, shape: &[usize]) -> Result<Var> {
    let m = g.constant(Tensor::new(shape.to_vec(), weights)?);
    let prod = g.mul(terms, m)?;
    Ok(g.sum(prod))
}

fn valid_weights(shape: &[usize], mask: &Mask) -> Vec<f64> {
    let total: usize = shape.iter().product();
    let plane = mask.height() * mask.width();
    (0..total).map(|i| if mask.is_valid(i % plane) { 1.0 } else { 0.0 }).collect()
}

/// Summed Gaussian NLL over valid points of `x` (normalised units).
pub fn gaussian_nll(g: &mut Graph, x: &Tensor, mu: Var, log_s: Var, mask: &Mask) -> Result<Var> {
    let p = prepare(g, x, mu, log_s, mask)?;
    let terms = gaussian_terms(g, &p);
    let w = valid_weights(&p.shape, mask);
    masked_sum(g, terms, w, &p.shape)
}

/// Summed censored-Gaussian NLL over valid points. `bounds[k]` holds the
/// normalised `(lower, upper)` of channel `k`; bound membership is tested by
/// exact equality.
pub fn censored_nll(
    g: &mut Graph,
    x: &Tensor,
    mu: Var,
    log_s: Var,
    bounds: &[(f64, f64)],
    mask: &Mask,
) -> Result<(Var, BranchCounts)> {
    let p = prepare(g, x, mu, log_s, mask)?;
    let [_, k, h, w] = x.dims4()?;
    if bounds.len() != k {
        return Err(shape_err("censored_nll", format!("{} bounds for {k} channels", bounds.len())));
    }
    let plane = h * w;
    let total = x.len();
    let (mut wl, mut wu, mut wi) = (vec![0.0; total], vec![0.0; total], vec![0.0; total]);
    let mut counts = BranchCounts::default();
    for (i, &v) in x.data().iter().enumerate() {
        if !mask.is_valid(i % plane) {
            continue;
        }
        let (lo, hi) = bounds[(i / plane) % k];
        if !(lo < hi) {
            return Err(Error::InvalidArgument(format!("bounds [{lo}, {hi}] are not ordered")));
        }
        if v == lo {
            wl[i] = 1.0;
            counts.lower += 1;
        } else if v == hi {
            wu[i] = 1.0;
            counts.upper += 1;
        } else if v > lo && v < hi {
            wi[i] = 1.0;
            counts.interior += 1;
        } else {
            return Err(Error::OutOfBounds(format!("value {v} outside [{lo}, {hi}] at index {i}")));
        }
    }
    let gauss = gaussian_terms(g, &p);
    let mut loss = masked_sum(g, gauss, wi, &p.shape)?;
    if counts.lower > 0 {
        // x = lower, so (lower − μ̂)/s = −u.
        let neg_u = g.neg(p.u);
        let lc = g.log_std_normal_cdf(neg_u);
        let nl = g.neg(lc);
        let part = masked_sum(g, nl, wl, &p.shape)?;
        loss = g.add(loss, part)?;
    }
    if counts.upper > 0 {
        // x = upper, so (μ̂ − upper)/s = u.
        let lc = g.log_std_normal_cdf(p.u);
        let nl = g.neg(lc);
        let part = masked_sum(g, nl, wu, &p.shape)?;
        loss = g.add(loss, part)?;
    }
    Ok((loss, counts))
}
