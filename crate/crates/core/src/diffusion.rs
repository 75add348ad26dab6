//! Variance-preserving diffusion in log-SNR parameterisation with
//! v-prediction targets.

use crate::autodiff::{Graph, Var};
use crate::error::{shape_err, Error, Result};
use crate::grid::Mask;
use crate::schedulers::NoiseSchedule;
use crate::tensor::Tensor;
use rand::Rng;
use serde::{Deserialize, Serialize};

/// Logistic function, stable for large `|x|`.
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Signal and noise amplitudes `(α, σ)` with `α² = sigmoid(γ)`,
/// `σ² = sigmoid(−γ)`.
pub fn alpha_sigma(gamma: f64) -> (f64, f64) {
    (sigmoid(gamma).sqrt(), sigmoid(-gamma).sqrt())
}

/// One noised sample.
#[derive(Clone, Debug, PartialEq)]
pub struct DiffusionState {
    pub z_tau: Tensor,
    pub tau: f64,
    pub gamma: f64,
    pub alpha: f64,
    pub sigma: f64,
    pub eps: Tensor,
}

impl DiffusionState {
    pub fn new(z_x: &Tensor, tau: f64, gamma: f64, eps: Tensor) -> Result<Self> {
        let z_tau = forward_noise(z_x, &[gamma], &eps)?;
        let (alpha, sigma) = alpha_sigma(gamma);
        Ok(Self { z_tau, tau, gamma, alpha, sigma, eps })
    }
}

/// External loss weighting `w(γ)`.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Weighting {
    /// `w = 1`, the plain ELBO.
    Elbo,
    /// `w = exp(−γ/2)`.
    #[default]
    Sigmoid,
}

impl Weighting {
    pub fn weight(self, gamma: f64) -> f64 {
        match self {
            Self::Elbo => 1.0,
            Self::Sigmoid => (-gamma / 2.0).exp(),
        }
    }
}

fn per_sample<'a>(t: &Tensor, gammas: &'a [f64], op: &'static str) -> Result<(usize, &'a [f64])> {
    let n = *t.shape().first().ok_or_else(|| shape_err(op, "rank 0"))?;
    if gammas.len() == n {
        Ok((t.len() / n.max(1), gammas))
    } else if gammas.len() == 1 {
        Ok((t.len(), gammas))
    } else {
        Err(shape_err(op, format!("{} gammas for batch of {n}", gammas.len())))
    }
}

/// Applies `f(α, σ, a, b)` elementwise with per-sample `γ`.
fn combine(a: &Tensor, b: &Tensor, gammas: &[f64], op: &'static str, f: impl Fn(f64, f64, f64, f64) -> f64) -> Result<Tensor> {
    if a.shape() != b.shape() {
        return Err(shape_err(op, format!("{:?} vs {:?}", a.shape(), b.shape())));
    }
    let (per, gammas) = per_sample(a, gammas, op)?;
    let mut out = a.clone();
    for (i, (o, &bv)) in out.data_mut().iter_mut().zip(b.data()).enumerate() {
        let (al, si) = alpha_sigma(gammas[i / per.max(1)]);
        *o = f(al, si, *o, bv);
    }
    Ok(out)
}

/// `z_τ = α z_x + σ ε`; `gammas` holds one value per sample or one overall.
pub fn forward_noise(z_x: &Tensor, gammas: &[f64], eps: &Tensor) -> Result<Tensor> {
    combine(z_x, eps, gammas, "forward_noise", |a, s, z, e| a * z + s * e)
}

/// `v = α ε − σ z_x`.
pub fn v_target(z_x: &Tensor, eps: &Tensor, gammas: &[f64]) -> Result<Tensor> {
    combine(z_x, eps, gammas, "v_target", |a, s, z, e| a * e - s * z)
}

/// `D = α z_τ − σ v̂`.
pub fn denoised_from_v(z_tau: &Tensor, v_hat: &Tensor, gammas: &[f64]) -> Result<Tensor> {
    combine(z_tau, v_hat, gammas, "denoised_from_v", |a, s, z, v| a * z - s * v)
}

/// `v̂ = (α z_τ − D) / σ`, the inverse of [`denoised_from_v`].
pub fn v_from_denoised(z_tau: &Tensor, denoised: &Tensor, gammas: &[f64]) -> Result<Tensor> {
    combine(z_tau, denoised, gammas, "v_from_denoised", |a, s, z, d| (a * z - d) / s)
}

/// `½ Σ [σ₁² + (α₁ z)² − 1 − ln σ₁²]` over all entries of `z_x`.
pub fn prior_kl(z_x: &Tensor, gamma_min: f64) -> f64 {
    let a2 = sigmoid(gamma_min);
    // σ² − 1 − ln σ² = −α² + ln(1 + e^γ)
    let constant = -a2 + gamma_min.exp().ln_1p();
    0.5 * z_x.data().iter().map(|z| constant + a2 * z * z).sum::<f64>()
}

/// `τ_b = (b + u_b) / B` for independent uniforms `u_b`.
pub fn stratified_times(batch: usize, rng: &mut impl Rng) -> Vec<f64> {
    let u: Vec<f64> = (0..batch).map(|_| rng.random::<f64>()).collect();
    stratified_times_from(&u)
}

pub fn stratified_times_from(u: &[f64]) -> Vec<f64> {
    let b = u.len() as f64;
    u.iter().enumerate().map(|(i, &ui)| (i as f64 + ui) / b).collect()
}

/// A training mini-batch after noising.
#[derive(Clone, Debug)]
pub struct NoisedBatch {
    pub z_x: Tensor,
    pub eps: Tensor,
    pub z_tau: Tensor,
    pub taus: Vec<f64>,
    pub gammas: Vec<f64>,
    /// `−dγ/dτ` per sample.
    pub neg_slopes: Vec<f64>,
}

impl NoisedBatch {
    pub fn new(z_x: Tensor, eps: Tensor, taus: Vec<f64>, schedule: &impl NoiseSchedule) -> Result<Self> {
        let gammas: Vec<f64> = taus.iter().map(|&t| schedule.gamma(t)).collect();
        let neg_slopes = taus.iter().map(|&t| schedule.neg_dgamma_dtau(t)).collect();
        let z_tau = forward_noise(&z_x, &gammas, &eps)?;
        Ok(Self { z_x, eps, z_tau, taus, gammas, neg_slopes })
    }
}

/// Differentiable diffusion loss and the per-sample integrand
/// `w(γ) (e^{−γ} + 1)^{−1} ‖v − v̂‖²` that feeds the adaptive scheduler.
pub struct DiffusionLoss {
    pub loss: Var,
    pub integrands: Vec<f64>,
}

/// Batch mean of `w(γ) (−dγ/dτ) (e^{−γ} + 1)^{−1} ‖v − v̂‖²`, summed over
/// valid points of `mask` when given.
pub fn diffusion_loss(g: &mut Graph, batch: &NoisedBatch, v_hat: Var, weighting: Weighting, mask: Option<&Mask>) -> Result<DiffusionLoss> {
    let v = v_target(&batch.z_x, &batch.eps, &batch.gammas)?;
    if g.shape(v_hat) != v.shape() {
        return Err(shape_err("diffusion_loss", format!("prediction {:?} vs target {:?}", g.shape(v_hat), v.shape())));
    }
    let n = batch.gammas.len();
    let per = v.len() / n.max(1);
    let plane = v.shape()[2..].iter().product::<usize>().max(1);
    if let Some(m) = mask {
        if m.height() * m.width() != plane {
            return Err(shape_err("diffusion_loss", "mask does not match grid"));
        }
    }
    let valid = |i: usize| mask.is_none_or(|m| m.is_valid(i % plane));
    let coef: Vec<f64> = (0..n)
        .map(|b| weighting.weight(batch.gammas[b]) * sigmoid(batch.gammas[b]))
        .collect();
    let weights: Vec<f64> = (0..v.len())
        .map(|i| if valid(i) { coef[i / per] * batch.neg_slopes[i / per] / n as f64 } else { 0.0 })
        .collect();
    let vc = g.constant(v);
    let diff = g.sub(v_hat, vc)?;
    let sq = g.square(diff);
    let integrands = g
        .value(sq)
        .data()
        .chunks(per)
        .enumerate()
        .map(|(b, c)| coef[b] * c.iter().enumerate().filter(|(j, _)| valid(b * per + j)).map(|(_, x)| x).sum::<f64>())
        .collect();
    let w = g.constant(Tensor::new(g.shape(sq).to_vec(), weights)?);
    let weighted = g.mul(sq, w)?;
    let loss = g.sum(weighted);
    if !g.value(loss).item().is_finite() {
        return Err(Error::NonFinite(format!("diffusion loss {}", g.value(loss).item())));
    }
    Ok(DiffusionLoss { loss, integrands })
}

/// The same loss written on the denoised state:
/// batch mean of `w(γ) (−dγ/dτ) e^{γ} ‖z_x − D‖²` with `D = α z_τ − σ v̂`.
pub fn diffusion_loss_z_form(batch: &NoisedBatch, v_hat: &Tensor, weighting: Weighting) -> Result<f64> {
    let d = denoised_from_v(&batch.z_tau, v_hat, &batch.gammas)?;
    let n = batch.gammas.len();
    let per = d.len() / n.max(1);
    let mut total = 0.0;
    for (b, (zc, dc)) in batch.z_x.data().chunks(per).zip(d.data().chunks(per)).enumerate() {
        let gamma = batch.gammas[b];
        let sq: f64 = zc.iter().zip(dc).map(|(z, d)| (z - d) * (z - d)).sum();
        total += weighting.weight(gamma) * batch.neg_slopes[b] * gamma.exp() * sq;
    }
    Ok(total / n as f64)
}
