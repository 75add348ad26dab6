use super::layers::{Conv, ResBlock};
use super::MaskPyramid;
use crate::autodiff::{Bound, Graph, ParamId, ParamStore, Var};
use crate::distributions::{censored_nll, gaussian_nll, BranchCounts};
use crate::error::{shape_err, Error, Result};
use crate::tensor::Tensor;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct VaeConfig {
    pub latent_channels: usize,
    pub base_width: usize,
    /// Number of ×2 downsamplings.
    pub depth: usize,
    pub blocks_per_level: usize,
    pub beta: f64,
}

impl Default for VaeConfig {
    fn default() -> Self {
        Self { latent_channels: 8, base_width: 32, depth: 2, blocks_per_level: 2, beta: 1e-3 }
    }
}

/// Decoder likelihood.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Reconstruction {
    Gaussian,
    Censored,
}

/// Loss graph node plus per-sample diagnostics.
#[derive(Clone, Debug)]
pub struct VaeLoss {
    /// `(recon + β·kl) / N`.
    pub total: Var,
    pub recon: f64,
    pub kl: f64,
    pub counts: BranchCounts,
}

#[derive(Clone, Debug)]
struct Level {
    blocks: Vec<ResBlock>,
    /// Resolution change to the next level (down in the encoder, up in the
    /// decoder).
    resample: Option<Conv>,
}

/// Masked convolutional β-VAE with a learned per-channel output scale.
#[derive(Clone, Debug)]
pub struct Vae {
    config: VaeConfig,
    channels: usize,
    params: ParamStore,
    enc_in: Conv,
    enc: Vec<Level>,
    head_mu: Conv,
    head_log_sigma: Conv,
    dec_in: Conv,
    dec: Vec<Level>,
    dec_out: Conv,
    log_s: ParamId,
}

/// `½ Σ (μ² + σ² − 1 − 2 ln σ)` over valid latent points.
pub fn kl_divergence(g: &mut Graph, mu: Var, log_sigma: Var, latent_mask: Var) -> Result<Var> {
    let mu2 = g.square(mu);
    let two_ls = g.scale(log_sigma, 2.0);
    let var = g.exp(two_ls);
    let a = g.add(mu2, var)?;
    let b = g.sub(a, two_ls)?;
    let c = g.add_scalar(b, -1.0);
    let c = g.scale(c, 0.5);
    let masked = g.mul_broadcast(c, latent_mask)?;
    Ok(g.sum(masked))
}

impl Vae {
    pub fn new(config: VaeConfig, channels: usize, seed: u64) -> Result<Self> {
        if config.latent_channels == 0 || config.base_width == 0 || channels == 0 {
            return Err(Error::InvalidArgument("VAE widths must be positive".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut p = ParamStore::new();
        let width = |l: usize| config.base_width << l;
        let d = config.depth;
        let enc_in = Conv::new(&mut p, &mut rng, "enc.in", channels, width(0), 1, 1);
        let enc = (0..=d)
            .map(|l| Level {
                blocks: (0..config.blocks_per_level).map(|b| ResBlock::new(&mut p, &mut rng, &format!("enc.{l}.{b}"), width(l), None)).collect(),
                resample: (l < d).then(|| Conv::new(&mut p, &mut rng, &format!("enc.{l}.down"), width(l), width(l + 1), 2, 2)),
            })
            .collect();
        let head_mu = Conv::new(&mut p, &mut rng, "enc.mu", width(d), config.latent_channels, 1, 1);
        let head_log_sigma = Conv::new(&mut p, &mut rng, "enc.log_sigma", width(d), config.latent_channels, 1, 1);
        let dec_in = Conv::new(&mut p, &mut rng, "dec.in", config.latent_channels, width(d), 1, 1);
        let dec = (0..=d)
            .map(|l| Level {
                blocks: (0..config.blocks_per_level).map(|b| ResBlock::new(&mut p, &mut rng, &format!("dec.{l}.{b}"), width(l), None)).collect(),
                resample: (l > 0).then(|| Conv::new(&mut p, &mut rng, &format!("dec.{l}.up"), width(l), width(l - 1), 3, 1)),
            })
            .collect();
        let dec_out = Conv::new(&mut p, &mut rng, "dec.out", width(0), channels, 1, 1);
        let log_s = p.add("dec.log_scale", Tensor::zeros([channels]));
        Ok(Self { config, channels, params: p, enc_in, enc, head_mu, head_log_sigma, dec_in, dec, dec_out, log_s })
    }

    pub fn config(&self) -> &VaeConfig {
        &self.config
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    /// Learned per-channel log scale of the decoder likelihood.
    pub fn log_scale(&self) -> &Tensor {
        self.params.get(self.log_s)
    }

    pub fn log_scale_var(&self, p: &Bound) -> Var {
        p.var(self.log_s)
    }

    /// Mask pyramid for this network, checking the latent size.
    pub fn pyramid(&self, mask: &crate::grid::Mask) -> Result<MaskPyramid> {
        let pyr = MaskPyramid::new(mask, self.config.depth)?;
        let c = pyr.coarsest();
        if c.height() < 4 || c.width() < 4 {
            return Err(Error::InvalidArgument(format!(
                "latent grid {}x{} is smaller than 4x4",
                c.height(),
                c.width()
            )));
        }
        Ok(pyr)
    }

    /// Latent mean and log standard deviation, zero on latent land.
    pub fn encode(&self, g: &mut Graph, p: &Bound, x: Var, pyr: &MaskPyramid) -> Result<(Var, Var)> {
        if g.shape(x).get(1) != Some(&self.channels) {
            return Err(shape_err("encode", format!("input {:?} for {} channels", g.shape(x), self.channels)));
        }
        let masks: Vec<Var> = (0..=self.config.depth).map(|l| g.constant(pyr.tensor(l).clone())).collect();
        let mut h = self.enc_in.forward(g, p, x, masks[0])?;
        for (l, level) in self.enc.iter().enumerate() {
            for b in &level.blocks {
                h = b.forward(g, p, h, masks[l], None)?;
            }
            if let Some(down) = &level.resample {
                h = down.forward(g, p, h, masks[l])?;
                h = g.mul_broadcast(h, masks[l + 1])?;
            }
        }
        let h = g.relu(h);
        let m = masks[self.config.depth];
        let mu = self.head_mu.forward(g, p, h, m)?;
        let mu = g.mul_broadcast(mu, m)?;
        let ls = self.head_log_sigma.forward(g, p, h, m)?;
        let ls = g.mul_broadcast(ls, m)?;
        Ok((mu, ls))
    }

    /// Decoder mean at full resolution, zero on land.
    pub fn decode(&self, g: &mut Graph, p: &Bound, z: Var, pyr: &MaskPyramid) -> Result<Var> {
        if g.shape(z).get(1) != Some(&self.config.latent_channels) {
            return Err(shape_err("decode", format!("latent {:?}", g.shape(z))));
        }
        let masks: Vec<Var> = (0..=self.config.depth).map(|l| g.constant(pyr.tensor(l).clone())).collect();
        let d = self.config.depth;
        let mut h = self.dec_in.forward(g, p, z, masks[d])?;
        for l in (0..=d).rev() {
            let level = &self.dec[l];
            for b in &level.blocks {
                h = b.forward(g, p, h, masks[l], None)?;
            }
            if let Some(up) = &level.resample {
                h = g.upsample2x(h)?;
                h = up.forward(g, p, h, masks[l - 1])?;
                h = g.mul_broadcast(h, masks[l - 1])?;
            }
        }
        let h = g.relu(h);
        let out = self.dec_out.forward(g, p, h, masks[0])?;
        g.mul_broadcast(out, masks[0])
    }

    /// Negative ELBO with one reparameterised draw `z = μ + σ·η`.
    #[allow(clippy::too_many_arguments)]
    pub fn loss(
        &self,
        g: &mut Graph,
        p: &Bound,
        x: &Tensor,
        pyr: &MaskPyramid,
        eta: &Tensor,
        recon: Reconstruction,
        bounds: &[(f64, f64)],
    ) -> Result<VaeLoss> {
        let n = x.dims4()?[0] as f64;
        let xv = g.constant(x.clone());
        let (mu, ls) = self.encode(g, p, xv, pyr)?;
        if g.shape(mu) != eta.shape() {
            return Err(shape_err("vae loss", format!("noise {:?} vs latent {:?}", eta.shape(), g.shape(mu))));
        }
        let latent_mask = g.constant(pyr.tensor(self.config.depth).clone());
        let sigma = g.exp(ls);
        let e = g.constant(eta.clone());
        let noise = g.mul(sigma, e)?;
        let z = g.add(mu, noise)?;
        let z = g.mul_broadcast(z, latent_mask)?;
        let mu_dec = self.decode(g, p, z, pyr)?;
        let log_s = p.var(self.log_s);
        let (rec, counts) = match recon {
            Reconstruction::Gaussian => (gaussian_nll(g, x, mu_dec, log_s, pyr.mask(0))?, BranchCounts::default()),
            Reconstruction::Censored => censored_nll(g, x, mu_dec, log_s, bounds, pyr.mask(0))?,
        };
        let kl = kl_divergence(g, mu, ls, latent_mask)?;
        let weighted = g.scale(kl, self.config.beta);
        let sum = g.add(rec, weighted)?;
        let total = g.scale(sum, 1.0 / n);
        let (rv, kv) = (g.value(rec).item() / n, g.value(kl).item() / n);
        if !g.value(total).item().is_finite() {
            return Err(Error::NonFinite(format!("VAE loss (recon {rv}, kl {kv})")));
        }
        Ok(VaeLoss { total, recon: rv, kl: kv, counts })
    }

    /// Encoder mean of normalised inputs, evaluated in chunks without
    /// gradient tracking.
    pub fn encode_mean(&self, x: &Tensor, pyr: &MaskPyramid) -> Result<Tensor> {
        self.chunked(x, |g, p, v| Ok(self.encode(g, p, v, pyr)?.0))
    }

    pub fn decode_mean(&self, z: &Tensor, pyr: &MaskPyramid) -> Result<Tensor> {
        self.chunked(z, |g, p, v| self.decode(g, p, v, pyr))
    }

    fn chunked(&self, x: &Tensor, f: impl Fn(&mut Graph, &Bound, Var) -> Result<Var>) -> Result<Tensor> {
        let n = x.dims4()?[0];
        let mut parts = Vec::new();
        for start in (0..n).step_by(32) {
            let idx: Vec<usize> = (start..(start + 32).min(n)).collect();
            let mut g = Graph::new();
            let p = self.params.bind(&mut g, false);
            let v = g.constant(x.select(&idx)?);
            let out = f(&mut g, &p, v)?;
            parts.push(g.value(out).clone());
        }
        if parts.is_empty() {
            return Err(Error::InvalidArgument("empty batch".into()));
        }
        Tensor::stack(&parts)
    }
}
