use super::layers::{Conv, Linear, ResBlock};
use super::{time_embeddings, MaskPyramid};
use crate::autodiff::{Bound, Graph, ParamStore, Var};
use crate::error::{shape_err, Error, Result};
use crate::tensor::Tensor;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

/// Where the diffusion runs.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Space {
    #[default]
    Latent,
    Data,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DenoiserConfig {
    pub width: usize,
    pub depth: usize,
    pub blocks_per_level: usize,
    pub time_embed_dim: usize,
    pub space: Space,
}

impl Default for DenoiserConfig {
    fn default() -> Self {
        Self { width: 32, depth: 1, blocks_per_level: 2, time_embed_dim: 64, space: Space::Latent }
    }
}

#[derive(Clone, Debug)]
struct Stage {
    blocks: Vec<ResBlock>,
    down: Option<Conv>,
}

#[derive(Clone, Debug)]
struct UpStage {
    up: Conv,
    fuse: Conv,
    blocks: Vec<ResBlock>,
}

/// U-Net predicting `v̂` from `(z_τ, τ)`. The pseudo-time embedding goes
/// through a two-layer MLP and is added inside every residual block.
#[derive(Clone, Debug)]
pub struct Denoiser {
    config: DenoiserConfig,
    channels: usize,
    params: ParamStore,
    t1: Linear,
    t2: Linear,
    inp: Conv,
    down: Vec<Stage>,
    up: Vec<UpStage>,
    out: Conv,
}

impl Denoiser {
    pub fn new(config: DenoiserConfig, channels: usize, seed: u64) -> Result<Self> {
        if config.time_embed_dim == 0 || config.time_embed_dim % 2 != 0 {
            return Err(Error::InvalidArgument("time embedding dimension must be even".into()));
        }
        if config.width == 0 || channels == 0 {
            return Err(Error::InvalidArgument("denoiser widths must be positive".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut p = ParamStore::new();
        let e = config.time_embed_dim;
        let width = |l: usize| config.width << l;
        let d = config.depth;
        let blocks = |p: &mut ParamStore, rng: &mut ChaCha8Rng, name: String, ch: usize| -> Vec<ResBlock> {
            (0..config.blocks_per_level).map(|b| ResBlock::new(p, rng, &format!("{name}.{b}"), ch, Some(e))).collect()
        };
        let t1 = Linear::new(&mut p, &mut rng, "time.1", e, e);
        let t2 = Linear::new(&mut p, &mut rng, "time.2", e, e);
        let inp = Conv::new(&mut p, &mut rng, "in", channels, width(0), 1, 1);
        let mut down = Vec::new();
        for l in 0..=d {
            let bl = blocks(&mut p, &mut rng, format!("down.{l}"), width(l));
            let dn = (l < d).then(|| Conv::new(&mut p, &mut rng, &format!("down.{l}.down"), width(l), width(l + 1), 2, 2));
            down.push(Stage { blocks: bl, down: dn });
        }
        let mut up = Vec::new();
        for l in (0..d).rev() {
            let u = Conv::new(&mut p, &mut rng, &format!("up.{l}.up"), width(l + 1), width(l), 3, 1);
            let f = Conv::new(&mut p, &mut rng, &format!("up.{l}.fuse"), 2 * width(l), width(l), 1, 1);
            let bl = blocks(&mut p, &mut rng, format!("up.{l}"), width(l));
            up.push(UpStage { up: u, fuse: f, blocks: bl });
        }
        let out = Conv::new(&mut p, &mut rng, "out", width(0), channels, 1, 1);
        Ok(Self { config, channels, params: p, t1, t2, inp, down, up, out })
    }

    pub fn config(&self) -> &DenoiserConfig {
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

    pub fn pyramid(&self, mask: &crate::grid::Mask) -> Result<MaskPyramid> {
        MaskPyramid::new(mask, self.config.depth)
    }

    /// `v̂` with the shape of `z_tau`, zero on land.
    pub fn forward(&self, g: &mut Graph, p: &Bound, z_tau: Var, taus: &[f64], pyr: &MaskPyramid) -> Result<Var> {
        let shape = g.shape(z_tau).to_vec();
        if shape.len() != 4 || shape[1] != self.channels || shape[0] != taus.len() {
            return Err(shape_err("denoiser", format!("input {shape:?} with {} times", taus.len())));
        }
        if pyr.depth() != self.config.depth {
            return Err(shape_err("denoiser", "mask pyramid depth differs from network depth"));
        }
        let masks: Vec<Var> = (0..=self.config.depth).map(|l| g.constant(pyr.tensor(l).clone())).collect();
        let emb = g.constant(time_embeddings(taus, self.config.time_embed_dim)?);
        let t = self.t1.forward(g, p, emb)?;
        let t = g.gelu(t);
        let t = self.t2.forward(g, p, t)?;
        let t = g.gelu(t);

        let mut h = self.inp.forward(g, p, z_tau, masks[0])?;
        let mut skips = Vec::new();
        for (l, stage) in self.down.iter().enumerate() {
            for b in &stage.blocks {
                h = b.forward(g, p, h, masks[l], Some(t))?;
            }
            if let Some(dn) = &stage.down {
                skips.push(h);
                h = dn.forward(g, p, h, masks[l])?;
                h = g.mul_broadcast(h, masks[l + 1])?;
            }
        }
        for (i, stage) in self.up.iter().enumerate() {
            let l = self.config.depth - 1 - i;
            h = g.upsample2x(h)?;
            h = stage.up.forward(g, p, h, masks[l])?;
            let skip = skips.pop().expect("one skip per level");
            h = g.concat(&[h, skip], 1)?;
            h = stage.fuse.forward(g, p, h, masks[l])?;
            for b in &stage.blocks {
                h = b.forward(g, p, h, masks[l], Some(t))?;
            }
        }
        let h = g.gelu(h);
        let v = self.out.forward(g, p, h, masks[0])?;
        g.mul_broadcast(v, masks[0])
    }

    /// Gradient-free prediction over a batch sharing one `τ`.
    pub fn predict(&self, z_tau: &Tensor, tau: f64, pyr: &MaskPyramid) -> Result<Tensor> {
        let n = z_tau.dims4()?[0];
        let mut parts = Vec::new();
        for start in (0..n).step_by(32) {
            let idx: Vec<usize> = (start..(start + 32).min(n)).collect();
            let mut g = Graph::new();
            let p = self.params.bind(&mut g, false);
            let z = g.constant(z_tau.select(&idx)?);
            let v = self.forward(&mut g, &p, z, &vec![tau; idx.len()], pyr)?;
            parts.push(g.value(v).clone());
        }
        if parts.is_empty() {
            return Err(Error::InvalidArgument("empty batch".into()));
        }
        Tensor::stack(&parts)
    }
}
