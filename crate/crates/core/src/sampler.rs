//! Probability-flow ODE sampling with a second-order Heun integrator.

use crate::diffusion::{alpha_sigma, denoised_from_v, v_from_denoised};
use crate::error::{Error, Result};
use crate::grid::{denormalize, normalized_batch, ChannelSpec, FieldBatch, Mask};
use crate::models::{Denoiser, LatentStats, MaskPyramid, Vae};
use crate::schedulers::{EdmSchedule, NoiseSchedule};
use crate::tensor::Tensor;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use std::cell::Cell;
use std::time::Instant;

/// Anything that predicts `v̂(z_τ, τ)`.
pub trait VelocityModel {
    fn predict_v(&self, z_tau: &Tensor, tau: f64, gamma: f64) -> Result<Tensor>;
}

/// Exact denoiser for unit-Gaussian data: `D = α z`, i.e. `v̂ = 0`.
#[derive(Clone, Copy, Debug, Default)]
pub struct UnitGaussianDenoiser;

impl VelocityModel for UnitGaussianDenoiser {
    fn predict_v(&self, z_tau: &Tensor, _tau: f64, _gamma: f64) -> Result<Tensor> {
        Ok(Tensor::zeros(z_tau.shape().to_vec()))
    }
}

/// Exact denoiser for `N(0, σ₀²)` data: `D = α σ₀² z / (α² σ₀² + σ²)`.
#[derive(Clone, Copy, Debug)]
pub struct GaussianDenoiser {
    pub sigma0: f64,
}

impl VelocityModel for GaussianDenoiser {
    fn predict_v(&self, z_tau: &Tensor, _tau: f64, gamma: f64) -> Result<Tensor> {
        let (a, s) = alpha_sigma(gamma);
        let s02 = self.sigma0 * self.sigma0;
        let d = z_tau.map(|z| a * s02 * z / (a * a * s02 + s * s));
        v_from_denoised(z_tau, &d, &[gamma])
    }
}

/// Trained network on a fixed grid.
pub struct NetworkModel<'a> {
    pub denoiser: &'a Denoiser,
    pub pyramid: MaskPyramid,
}

impl VelocityModel for NetworkModel<'_> {
    fn predict_v(&self, z_tau: &Tensor, tau: f64, _gamma: f64) -> Result<Tensor> {
        self.denoiser.predict(z_tau, tau, &self.pyramid)
    }
}

/// Wraps a model so its denoised estimate is clipped to per-channel bounds
/// (normalised units) before `v̂` is recomputed from it.
pub struct ClippedDenoiser<M> {
    pub inner: M,
    pub bounds: Vec<(f64, f64)>,
}

impl<M: VelocityModel> VelocityModel for ClippedDenoiser<M> {
    fn predict_v(&self, z_tau: &Tensor, tau: f64, gamma: f64) -> Result<Tensor> {
        let v = self.inner.predict_v(z_tau, tau, gamma)?;
        let mut d = denoised_from_v(z_tau, &v, &[gamma])?;
        clip_denoiser_mode(&mut d, &self.bounds)?;
        v_from_denoised(z_tau, &d, &[gamma])
    }
}

/// Clips channel `k` of a `[N, K, H, W]` tensor to `bounds[k]`.
pub fn clip_denoiser_mode(d: &mut Tensor, bounds: &[(f64, f64)]) -> Result<()> {
    let [_, k, h, w] = d.dims4()?;
    if bounds.len() != k {
        return Err(Error::InvalidArgument(format!("{} bounds for {k} channels", bounds.len())));
    }
    let plane = h * w;
    for (p, chunk) in d.data_mut().chunks_mut(plane).enumerate() {
        let (lo, hi) = bounds[p % k];
        for v in chunk {
            *v = v.max(lo).min(hi);
        }
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SamplerConfig {
    pub n_steps: usize,
    pub schedule: EdmSchedule,
    pub clip_denoiser: bool,
    pub seed: u64,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self { n_steps: 20, schedule: EdmSchedule::default(), clip_denoiser: false, seed: 0 }
    }
}

/// `s = −(z_τ + (α/σ) v̂)`.
pub fn score_from_v(z_tau: &Tensor, v_hat: &Tensor, gamma: f64) -> Result<Tensor> {
    if !(gamma < 40.0) {
        return Err(Error::InvalidArgument(format!("log-SNR {gamma} too large for a finite score")));
    }
    let (a, s) = alpha_sigma(gamma);
    let r = a / s;
    z_tau.zip_map(v_hat, |z, v| -(z + r * v))
}

/// Evaluation counter around a model.
struct Counted<'a, M: ?Sized> {
    model: &'a M,
    calls: Cell<usize>,
}

impl<M: VelocityModel + ?Sized> Counted<'_, M> {
    fn predict(&self, z: &Tensor, tau: f64, gamma: f64) -> Result<Tensor> {
        self.calls.set(self.calls.get() + 1);
        self.model.predict_v(z, tau, gamma)
    }
}

/// `dz/dτ = −½ L'(τ) z − ½ L'(τ) s(z, τ)` with `L = ln(1 + e^{−γ})`.
pub fn ode_rhs<M: VelocityModel + ?Sized>(z: &Tensor, tau: f64, schedule: &impl NoiseSchedule, model: &M) -> Result<Tensor> {
    let gamma = schedule.gamma(tau);
    let v = model.predict_v(z, tau, gamma)?;
    rhs_from_v(z, &v, tau, gamma, schedule)
}

fn rhs_from_v(z: &Tensor, v: &Tensor, tau: f64, gamma: f64, schedule: &impl NoiseSchedule) -> Result<Tensor> {
    let s = score_from_v(z, v, gamma)?;
    let lp = schedule.log_snr_rate(tau);
    z.zip_map(&s, |z, s| -0.5 * lp * z - 0.5 * lp * s)
}

/// Result of a sampling run.
#[derive(Clone, Debug)]
pub struct SampleOutput {
    /// Denoised estimate `D(z̃₀, τ = 0)`.
    pub denoised: Tensor,
    /// ODE state at `τ = 0` before the final denoising step.
    pub final_state: Tensor,
    pub evaluations: usize,
}

/// Integrates from `z1` at `τ = 1` to `τ = 0` in `n_steps` Heun steps on
/// the uniform `τ` grid, then emits the denoised estimate.
pub fn heun_sample_from<M: VelocityModel + ?Sized>(config: &SamplerConfig, model: &M, z1: Tensor) -> Result<SampleOutput> {
    if config.n_steps == 0 {
        return Err(Error::InvalidArgument("n_steps must be ≥ 1".into()));
    }
    let sched = &config.schedule;
    let m = Counted { model, calls: Cell::new(0) };
    let n = config.n_steps;
    let taus: Vec<f64> = (0..=n).map(|i| 1.0 - i as f64 / n as f64).collect();
    let mut z = z1;
    for i in 0..n {
        let (t0, t1) = (taus[i], taus[i + 1]);
        let h = t1 - t0;
        let g0 = sched.gamma(t0);
        let d1 = rhs_from_v(&z, &m.predict(&z, t0, g0)?, t0, g0, sched)?;
        let euler = z.zip_map(&d1, |z, d| z + h * d)?;
        let g1 = sched.gamma(t1);
        let d2 = rhs_from_v(&euler, &m.predict(&euler, t1, g1)?, t1, g1, sched)?;
        let next = z.zip_map(&d1, |z, a| z + 0.5 * h * a)?;
        z = next.zip_map(&d2, |z, b| z + 0.5 * h * b)?;
        if !z.all_finite() {
            return Err(Error::NonFinite(format!("sampler state after step {}", i + 1)));
        }
    }
    let g_last = sched.gamma(0.0);
    let v = m.predict(&z, 0.0, g_last)?;
    let denoised = denoised_from_v(&z, &v, &[g_last])?;
    if !denoised.all_finite() {
        return Err(Error::NonFinite("denoised output".into()));
    }
    Ok(SampleOutput { denoised, final_state: z, evaluations: m.calls.get() })
}

/// Draws `z₁ ~ N(0, I)` of `shape` from `rng` (zeroed outside `mask` when
/// given) and samples.
pub fn heun_sample<M: VelocityModel + ?Sized>(
    config: &SamplerConfig,
    model: &M,
    shape: &[usize],
    mask: Option<&Mask>,
    rng: &mut impl rand::Rng,
) -> Result<SampleOutput> {
    let n: usize = shape.iter().product();
    let mut z1 = Tensor::new(shape.to_vec(), (0..n).map(|_| StandardNormal.sample(rng)).collect())?;
    if let Some(m) = mask {
        crate::grid::apply_mask(&mut z1, m);
    }
    heun_sample_from(config, model, z1)
}

/// Route from diffusion space to data space.
pub enum Decoder<'a> {
    /// Latent diffusion: denormalise latents and decode.
    Latent { vae: &'a Vae, stats: &'a LatentStats },
    /// Diffusion directly on normalised data (`z_x = x`).
    Data,
}

/// Generated fields and timing.
#[derive(Clone, Debug)]
pub struct Generated {
    pub batch: FieldBatch,
    pub seconds_per_sample: f64,
    pub evaluations: usize,
}

/// Samples `n` fields in data units on `mask`. Bounded channels are clipped
/// when `clip_output` is set; land is always zeroed.
pub fn generate(
    denoiser: &Denoiser,
    decoder: Decoder<'_>,
    config: &SamplerConfig,
    mask: &Mask,
    specs: &[ChannelSpec],
    n: usize,
    clip_output: bool,
) -> Result<Generated> {
    if n == 0 {
        return Err(Error::InvalidArgument("n must be ≥ 1".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let start = Instant::now();
    let (normalized, evaluations) = match decoder {
        Decoder::Latent { vae, stats } => {
            let vpyr = vae.pyramid(mask)?;
            let lmask = vpyr.coarsest().clone();
            let model = NetworkModel { denoiser, pyramid: denoiser.pyramid(&lmask)? };
            let shape = [n, denoiser.channels(), lmask.height(), lmask.width()];
            let out = heun_sample(config, &model, &shape, Some(&lmask), &mut rng)?;
            let z = stats.denormalize(&out.denoised, &lmask)?;
            (vae.decode_mean(&z, &vpyr)?, out.evaluations)
        }
        Decoder::Data => {
            let model = NetworkModel { denoiser, pyramid: denoiser.pyramid(mask)? };
            let shape = [n, specs.len(), mask.height(), mask.width()];
            let out = if config.clip_denoiser {
                let bounds = specs.iter().map(ChannelSpec::normalized_bounds).collect();
                heun_sample(config, &ClippedDenoiser { inner: model, bounds }, &shape, Some(mask), &mut rng)?
            } else {
                heun_sample(config, &model, &shape, Some(mask), &mut rng)?
            };
            (out.denoised, out.evaluations)
        }
    };
    let batch = denormalize(&normalized_batch(normalized, mask.clone(), specs.to_vec())?, specs)?;
    let mut data = batch.into_data();
    if clip_output {
        crate::grid::clip_and_mask(&mut data, mask, specs);
    }
    let batch = FieldBatch::unclipped(data, mask.clone(), specs.to_vec())?;
    Ok(Generated { batch, seconds_per_sample: start.elapsed().as_secs_f64() / n as f64, evaluations })
}
