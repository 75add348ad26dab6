//! Masked convolutional networks: the β-VAE and the time-conditioned
//! v-prediction denoiser.

mod denoiser;
mod layers;
mod vae;

pub use denoiser::{Denoiser, DenoiserConfig, Space};
pub use layers::masked_conv;
pub use vae::{kl_divergence, Reconstruction, Vae, VaeConfig, VaeLoss};

use crate::error::{shape_err, Error, Result};
use crate::grid::Mask;
use crate::tensor::Tensor;
use serde::{Deserialize, Serialize};

/// Land masks at every resolution of a network, finest first.
#[derive(Clone, Debug, PartialEq)]
pub struct MaskPyramid {
    masks: Vec<Mask>,
    tensors: Vec<Tensor>,
}

impl MaskPyramid {
    /// `depth` successive 2×2 max-pool downsamplings of `mask`.
    pub fn new(mask: &Mask, depth: usize) -> Result<Self> {
        let mut masks = vec![mask.clone()];
        for _ in 0..depth {
            let next = masks.last().expect("non-empty").downsample()?;
            masks.push(next);
        }
        let tensors = masks.iter().map(Mask::to_tensor).collect();
        Ok(Self { masks, tensors })
    }

    pub fn depth(&self) -> usize {
        self.masks.len() - 1
    }

    pub fn mask(&self, level: usize) -> &Mask {
        &self.masks[level]
    }

    /// `[1, 1, h, w]` 0/1 tensor at `level`.
    pub fn tensor(&self, level: usize) -> &Tensor {
        &self.tensors[level]
    }

    pub fn coarsest(&self) -> &Mask {
        self.masks.last().expect("non-empty")
    }
}

/// Sinusoidal features of pseudo-time: `[sin(ω₀τ), cos(ω₀τ), sin(ω₁τ), …]`
/// with `ω_j = 1000 · 10000^{−j/(dim/2)}`.
pub fn time_embedding(tau: f64, dim: usize) -> Result<Vec<f64>> {
    if dim == 0 || dim % 2 != 0 {
        return Err(Error::InvalidArgument(format!("embedding dimension {dim} must be even and positive")));
    }
    let half = dim / 2;
    let mut out = Vec::with_capacity(dim);
    for j in 0..half {
        let omega = 1000.0 * (-(10000f64.ln()) * j as f64 / half as f64).exp();
        let (s, c) = (omega * tau).sin_cos();
        out.push(s);
        out.push(c);
    }
    Ok(out)
}

/// Stacked embeddings, `[N, dim]`.
pub fn time_embeddings(taus: &[f64], dim: usize) -> Result<Tensor> {
    let mut data = Vec::with_capacity(taus.len() * dim);
    for &t in taus {
        data.extend(time_embedding(t, dim)?);
    }
    Tensor::new([taus.len(), dim], data)
}

/// Per-channel statistics of encoded latents.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LatentStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl LatentStats {
    /// Mean and population standard deviation over valid points of
    /// `[N, C, h, w]` latents.
    pub fn fit(z: &Tensor, mask: &Mask) -> Result<Self> {
        let [n, c, h, w] = z.dims4()?;
        if mask.height() != h || mask.width() != w {
            return Err(shape_err("LatentStats::fit", "mask does not match latents"));
        }
        let count = (n * mask.count_valid()) as f64;
        if count == 0.0 {
            return Err(Error::Degenerate("no valid latent points".into()));
        }
        let plane = h * w;
        let values = |k: usize| {
            (0..n).flat_map(move |i| {
                let base = (i * c + k) * plane;
                (0..plane).filter(|&l| mask.is_valid(l)).map(move |l| base + l)
            })
        };
        let mut mean = Vec::with_capacity(c);
        let mut std = Vec::with_capacity(c);
        for k in 0..c {
            let m = values(k).map(|i| z.data()[i]).sum::<f64>() / count;
            let var = values(k).map(|i| (z.data()[i] - m).powi(2)).sum::<f64>() / count;
            if !(var.sqrt() > 1e-12) {
                return Err(Error::Degenerate(format!("latent channel {k} has zero variance")));
            }
            mean.push(m);
            std.push(var.sqrt());
        }
        Ok(Self { mean, std })
    }

    fn affine(&self, z: &Tensor, mask: &Mask, f: impl Fn(f64, f64, f64) -> f64) -> Result<Tensor> {
        let [_, c, h, w] = z.dims4()?;
        if c != self.mean.len() || mask.height() != h || mask.width() != w {
            return Err(shape_err("latent stats", format!("{:?} vs {} channels", z.shape(), self.mean.len())));
        }
        let plane = h * w;
        let mut out = z.clone();
        for (i, v) in out.data_mut().iter_mut().enumerate() {
            let k = (i / plane) % c;
            *v = if mask.is_valid(i % plane) { f(*v, self.mean[k], self.std[k]) } else { 0.0 };
        }
        Ok(out)
    }

    /// `(z − μ_c) / s_c` on valid points, zero elsewhere.
    pub fn normalize(&self, z: &Tensor, mask: &Mask) -> Result<Tensor> {
        self.affine(z, mask, |v, m, s| (v - m) / s)
    }

    pub fn denormalize(&self, z: &Tensor, mask: &Mask) -> Result<Tensor> {
        self.affine(z, mask, |v, m, s| v * s + m)
    }
}
