//! Training drivers, checkpoint metadata and the reconstruct / generate
//! entry points that tie the modules together.

use crate::autodiff::{fingerprint, lr_at, Adam, AdamConfig, Checkpoint, Graph, ParamStore};
use crate::diffusion::{diffusion_loss, stratified_times, stratified_times_from, NoisedBatch, Weighting};
use crate::error::{Error, Result};
use crate::grid::{clip_and_mask, denormalize, normalize, normalized_batch, ChannelSpec, FieldBatch, Mask};
use crate::models::{Denoiser, DenoiserConfig, LatentStats, Reconstruction, Space, Vae, VaeConfig};
use crate::sampler::{generate, Decoder, Generated, SamplerConfig};
use crate::schedulers::AdaptiveScheduler;
use crate::tensor::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

/// Optimiser and loop settings shared by all training drivers.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub iterations: usize,
    pub batch_size: usize,
    pub warmup: usize,
    pub lr_min: f64,
    pub lr_max: f64,
    pub seed: u64,
    /// Validation interval; the checkpoint with the lowest validation loss
    /// is kept.
    pub eval_every: usize,
    /// Validation samples used per evaluation.
    pub valid_samples: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            iterations: 5000,
            batch_size: 16,
            warmup: 250,
            lr_min: 1e-6,
            lr_max: 2e-4,
            seed: 0,
            eval_every: 250,
            valid_samples: 64,
        }
    }
}

impl TrainConfig {
    fn validate(&self) -> Result<()> {
        if self.iterations == 0 || self.batch_size == 0 || self.eval_every == 0 || self.valid_samples == 0 {
            return Err(Error::InvalidArgument("iterations, batch size, eval interval and validation size must be ≥ 1".into()));
        }
        Ok(())
    }
}

/// One line of a training log.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LogRow {
    pub iteration: usize,
    pub lr: f64,
    pub loss: f64,
    pub recon: Option<f64>,
    pub kl: Option<f64>,
    /// Share of valid points on the lower / upper bound branch.
    pub lower_share: Option<f64>,
    pub upper_share: Option<f64>,
    pub valid_loss: Option<f64>,
}

/// Hex fingerprint of grid, mask and channel specs.
pub fn dataset_fingerprint(batch: &FieldBatch) -> String {
    let mask: String = batch.mask().cells().iter().map(|&v| if v { '1' } else { '0' }).collect();
    let json = serde_json::json!({
        "height": batch.height(),
        "width": batch.width(),
        "mask": mask,
        "channels": batch.channels(),
    });
    format!("{:016x}", fingerprint(json.to_string().as_bytes()))
}

/// Hex fingerprint of a checkpoint's full serialised content.
pub fn content_fingerprint(ckpt: &Checkpoint) -> Result<String> {
    let mut bytes = Vec::new();
    ckpt.write_to(&mut bytes)?;
    Ok(format!("{:016x}", fingerprint(&bytes)))
}

fn mask_tensor(mask: &Mask) -> Tensor {
    Tensor::new(
        [mask.height(), mask.width()],
        mask.cells().iter().map(|&v| if v { 1.0 } else { 0.0 }).collect(),
    )
    .expect("mask dims")
}

fn mask_from(ckpt: &Checkpoint) -> Result<Mask> {
    let t = ckpt.tensor("grid.mask").ok_or_else(|| Error::Format("checkpoint has no grid mask".into()))?;
    match t.shape() {
        [h, w] => Mask::new(*h, *w, t.data().iter().map(|&v| v > 0.5).collect()),
        s => Err(Error::Format(format!("grid mask of shape {s:?}"))),
    }
}

fn model_tensors(params: &ParamStore, extra: Vec<(String, Tensor)>) -> Vec<(String, Tensor)> {
    let mut t = params.to_named();
    t.extend(extra);
    t
}

fn normalized_data(batch: &FieldBatch, specs: &[ChannelSpec]) -> Result<Tensor> {
    if batch.channels() != specs {
        return Err(Error::InvalidArgument("batch specs differ from the training specs".into()));
    }
    Ok(normalize(batch, specs)?.into_data())
}

fn grads_of(g: &Graph, root: crate::autodiff::Var, vars: &[crate::autodiff::Var], params: &ParamStore) -> Result<Vec<Tensor>> {
    let mut grads = g.backward(root)?;
    Ok(vars.iter().zip(params.ids()).map(|(&v, id)| grads.take_or_zeros(v, params.get(id).shape())).collect())
}

fn normal_tensor(shape: &[usize], rng: &mut impl Rng) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| StandardNormal.sample(rng)).collect()).expect("shape")
}

fn batch_indices(n: usize, b: usize, rng: &mut impl Rng) -> Vec<usize> {
    (0..b).map(|_| rng.random_range(0..n)).collect()
}

fn non_finite_at(iteration: usize, e: Error) -> Error {
    match e {
        Error::NonFinite(m) => Error::NonFinite(format!("iteration {iteration}: {m}")),
        Error::NonFiniteGradient(m) => Error::NonFinite(format!("iteration {iteration}: gradient of `{m}`")),
        other => other,
    }
}

/// Serialised description of a trained VAE.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VaeMeta {
    pub vae: VaeConfig,
    pub reconstruction: Reconstruction,
    pub channels: Vec<ChannelSpec>,
    pub dataset: String,
    pub train: TrainConfig,
    pub best_valid_loss: f64,
}

#[derive(Clone, Debug)]
pub struct TrainedVae {
    pub vae: Vae,
    pub meta: VaeMeta,
    pub mask: Mask,
}

const VAE_KIND: &str = "vae";
const DIFFUSION_KIND: &str = "diffusion";

#[derive(Serialize, Deserialize)]
struct Tagged<T> {
    kind: String,
    #[serde(flatten)]
    meta: T,
}

fn parse_meta<T: for<'de> Deserialize<'de>>(ckpt: &Checkpoint, kind: &str) -> Result<T> {
    let tagged: Tagged<T> = serde_json::from_str(&ckpt.config).map_err(|e| Error::Format(format!("checkpoint config: {e}")))?;
    if tagged.kind != kind {
        return Err(Error::Format(format!("expected a {kind} checkpoint, found {}", tagged.kind)));
    }
    Ok(tagged.meta)
}

fn tag<T: Serialize>(kind: &str, meta: &T) -> Result<String> {
    serde_json::to_string(&Tagged { kind: kind.to_string(), meta }).map_err(|e| Error::Format(e.to_string()))
}

impl TrainedVae {
    pub fn to_checkpoint(&self) -> Result<Checkpoint> {
        Ok(Checkpoint {
            config: tag(VAE_KIND, &self.meta)?,
            tensors: model_tensors(self.vae.params(), vec![("grid.mask".into(), mask_tensor(&self.mask))]),
        })
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        let meta: VaeMeta = parse_meta(ckpt, VAE_KIND)?;
        let mut vae = Vae::new(meta.vae.clone(), meta.channels.len(), 0)?;
        vae.params_mut().load_named(&ckpt.tensors)?;
        Ok(Self { vae, meta, mask: mask_from(ckpt)? })
    }

    pub fn fingerprint(&self) -> Result<String> {
        content_fingerprint(&self.to_checkpoint()?)
    }

    /// Encoder means of a batch in data units.
    pub fn encode(&self, batch: &FieldBatch) -> Result<Tensor> {
        let x = normalized_data(batch, &self.meta.channels)?;
        self.vae.encode_mean(&x, &self.vae.pyramid(batch.mask())?)
    }

    /// Decoded encoder means in data units; bounded channels are clipped
    /// when `clip` is set.
    pub fn reconstruct(&self, batch: &FieldBatch, clip: bool) -> Result<FieldBatch> {
        let pyr = self.vae.pyramid(batch.mask())?;
        let z = self.encode(batch)?;
        let out = self.vae.decode_mean(&z, &pyr)?;
        let specs = &self.meta.channels;
        let mut data = denormalize(&normalized_batch(out, batch.mask().clone(), specs.clone())?, specs)?.into_data();
        if clip {
            clip_and_mask(&mut data, batch.mask(), specs);
        }
        FieldBatch::unclipped(data, batch.mask().clone(), specs.clone())
    }
}

/// Trains a VAE on data-unit batches whose specs carry the fitted
/// normalisation. Validation loss uses fixed noise; the best parameters are
/// returned.
pub fn train_vae(
    train: &FieldBatch,
    valid: &FieldBatch,
    config: &VaeConfig,
    recon: Reconstruction,
    tc: &TrainConfig,
    log: &mut dyn FnMut(&LogRow),
) -> Result<TrainedVae> {
    tc.validate()?;
    let specs = train.channels().to_vec();
    let x_train = normalized_data(train, &specs)?;
    let x_valid = normalized_data(valid, &specs)?;
    let bounds: Vec<(f64, f64)> = specs.iter().map(ChannelSpec::normalized_bounds).collect();
    let mut vae = Vae::new(config.clone(), specs.len(), tc.seed)?;
    let pyr = vae.pyramid(train.mask())?;
    let lm = pyr.coarsest();
    let latent_shape = |n: usize| [n, config.latent_channels, lm.height(), lm.width()];

    let nv = tc.valid_samples.min(valid.len());
    let valid_x = x_valid.select(&(0..nv).collect::<Vec<_>>())?;
    let valid_eta = normal_tensor(&latent_shape(nv), &mut ChaCha8Rng::seed_from_u64(tc.seed ^ 0x5eed));
    let evaluate = |vae: &Vae| -> Result<f64> {
        let mut total = 0.0;
        for start in (0..nv).step_by(32) {
            let idx: Vec<usize> = (start..(start + 32).min(nv)).collect();
            let mut g = Graph::new();
            let p = vae.params().bind(&mut g, false);
            let l = vae.loss(&mut g, &p, &valid_x.select(&idx)?, &pyr, &valid_eta.select(&idx)?, recon, &bounds)?;
            total += g.value(l.total).item() * idx.len() as f64;
        }
        Ok(total / nv as f64)
    };

    let mut rng = ChaCha8Rng::seed_from_u64(tc.seed);
    let mut adam = Adam::new(vae.params(), AdamConfig::default());
    let mut best = (f64::INFINITY, vae.params().clone());
    let valid_points = (train.mask().count_valid() * specs.len() * tc.batch_size) as f64;
    for it in 1..=tc.iterations {
        let idx = batch_indices(train.len(), tc.batch_size, &mut rng);
        let x = x_train.select(&idx)?;
        let eta = normal_tensor(&latent_shape(tc.batch_size), &mut rng);
        let mut g = Graph::new();
        let p = vae.params().bind(&mut g, true);
        let l = vae.loss(&mut g, &p, &x, &pyr, &eta, recon, &bounds).map_err(|e| non_finite_at(it, e))?;
        let grads = grads_of(&g, l.total, p.vars(), vae.params())?;
        let lr = lr_at(it - 1, tc.warmup, tc.iterations, tc.lr_min, tc.lr_max)?;
        adam.step(vae.params_mut(), &grads, lr).map_err(|e| non_finite_at(it, e))?;
        let mut row = LogRow {
            iteration: it,
            lr,
            loss: g.value(l.total).item(),
            recon: Some(l.recon),
            kl: Some(l.kl),
            ..Default::default()
        };
        if recon == Reconstruction::Censored {
            row.lower_share = Some(l.counts.lower as f64 / valid_points);
            row.upper_share = Some(l.counts.upper as f64 / valid_points);
        }
        if it % tc.eval_every == 0 || it == tc.iterations {
            let v = evaluate(&vae)?;
            row.valid_loss = Some(v);
            if v < best.0 {
                best = (v, vae.params().clone());
            }
        }
        log(&row);
    }
    *vae.params_mut() = best.1;
    let meta = VaeMeta {
        vae: config.clone(),
        reconstruction: recon,
        channels: specs,
        dataset: dataset_fingerprint(train),
        train: tc.clone(),
        best_valid_loss: best.0,
    };
    Ok(TrainedVae { vae, meta, mask: train.mask().clone() })
}

/// Serialised description of a trained denoiser.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DiffusionMeta {
    pub denoiser: DenoiserConfig,
    pub weighting: Weighting,
    pub channels: Vec<ChannelSpec>,
    pub dataset: String,
    /// Content fingerprint of the VAE checkpoint for latent models.
    pub vae: Option<String>,
    pub latent_stats: Option<LatentStats>,
    pub train: TrainConfig,
    pub best_valid_loss: f64,
}

#[derive(Clone, Debug)]
pub struct TrainedDiffusion {
    pub denoiser: Denoiser,
    pub scheduler: AdaptiveScheduler,
    pub meta: DiffusionMeta,
    /// Land mask at data resolution.
    pub mask: Mask,
}

impl TrainedDiffusion {
    pub fn to_checkpoint(&self) -> Result<Checkpoint> {
        let sched = Tensor::from_vec(self.scheduler.weights().to_vec());
        Ok(Checkpoint {
            config: tag(DIFFUSION_KIND, &self.meta)?,
            tensors: model_tensors(
                self.denoiser.params(),
                vec![("grid.mask".into(), mask_tensor(&self.mask)), ("scheduler.weights".into(), sched)],
            ),
        })
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        let meta: DiffusionMeta = parse_meta(ckpt, DIFFUSION_KIND)?;
        let channels = match meta.denoiser.space {
            Space::Data => meta.channels.len(),
            Space::Latent => meta
                .latent_stats
                .as_ref()
                .ok_or_else(|| Error::Format("latent model without latent statistics".into()))?
                .mean
                .len(),
        };
        let mut denoiser = Denoiser::new(meta.denoiser.clone(), channels, 0)?;
        denoiser.params_mut().load_named(&ckpt.tensors)?;
        let w = ckpt.tensor("scheduler.weights").ok_or_else(|| Error::Format("missing scheduler weights".into()))?;
        let scheduler = AdaptiveScheduler::with_weights(w.data().to_vec(), crate::schedulers::GAMMA_MIN, crate::schedulers::GAMMA_MAX)?;
        Ok(Self { denoiser, scheduler, meta, mask: mask_from(ckpt)? })
    }

    /// Samples `n` fields. Latent models need the VAE they were trained on.
    pub fn generate(&self, vae: Option<&TrainedVae>, sampler: &SamplerConfig, n: usize, clip_output: bool) -> Result<Generated> {
        let specs = &self.meta.channels;
        match (self.meta.denoiser.space, vae) {
            (Space::Data, _) => generate(&self.denoiser, Decoder::Data, sampler, &self.mask, specs, n, clip_output),
            (Space::Latent, Some(v)) => {
                let found = v.fingerprint()?;
                let expected = self.meta.vae.clone().unwrap_or_default();
                if found != expected {
                    return Err(Error::Fingerprint { expected, found });
                }
                let stats = self.meta.latent_stats.as_ref().ok_or_else(|| Error::Format("missing latent statistics".into()))?;
                generate(&self.denoiser, Decoder::Latent { vae: &v.vae, stats }, sampler, &self.mask, specs, n, clip_output)
            }
            (Space::Latent, None) => Err(Error::InvalidArgument("latent diffusion needs its VAE checkpoint".into())),
        }
    }
}

/// Trains a denoiser on normalised `[N, C, h, w]` tensors with land zeroed.
#[allow(clippy::too_many_arguments)]
pub fn train_denoiser(
    train: &Tensor,
    valid: &Tensor,
    mask: &Mask,
    config: &DenoiserConfig,
    weighting: Weighting,
    tc: &TrainConfig,
    log: &mut dyn FnMut(&LogRow),
) -> Result<(Denoiser, AdaptiveScheduler, f64)> {
    tc.validate()?;
    let [n, c, h, w] = train.dims4()?;
    let mut den = Denoiser::new(config.clone(), c, tc.seed)?;
    let pyr = den.pyramid(mask)?;
    let masked_noise = |b: usize, rng: &mut ChaCha8Rng| {
        let mut e = normal_tensor(&[b, c, h, w], rng);
        crate::grid::apply_mask(&mut e, mask);
        e
    };

    let nv = tc.valid_samples.min(valid.dims4()?[0]);
    let valid_x = valid.select(&(0..nv).collect::<Vec<_>>())?;
    let mut vrng = ChaCha8Rng::seed_from_u64(tc.seed ^ 0x5eed);
    let valid_eps = masked_noise(nv, &mut vrng);
    let valid_u: Vec<f64> = (0..nv).map(|_| vrng.random::<f64>()).collect();
    let valid_taus = stratified_times_from(&valid_u);
    let reference = AdaptiveScheduler::default();
    let evaluate = |den: &Denoiser| -> Result<f64> {
        let mut total = 0.0;
        for start in (0..nv).step_by(32) {
            let idx: Vec<usize> = (start..(start + 32).min(nv)).collect();
            let taus: Vec<f64> = idx.iter().map(|&i| valid_taus[i]).collect();
            let nb = NoisedBatch::new(valid_x.select(&idx)?, valid_eps.select(&idx)?, taus.clone(), &reference)?;
            let mut g = Graph::new();
            let p = den.params().bind(&mut g, false);
            let z = g.constant(nb.z_tau.clone());
            let v = den.forward(&mut g, &p, z, &taus, &pyr)?;
            let l = diffusion_loss(&mut g, &nb, v, weighting, Some(mask))?;
            total += g.value(l.loss).item() * idx.len() as f64;
        }
        Ok(total / nv as f64)
    };

    let mut sched = AdaptiveScheduler::default();
    let mut rng = ChaCha8Rng::seed_from_u64(tc.seed);
    let mut adam = Adam::new(den.params(), AdamConfig::default());
    let mut best = (f64::INFINITY, den.params().clone(), sched.clone());
    for it in 1..=tc.iterations {
        let idx = batch_indices(n, tc.batch_size, &mut rng);
        let eps = masked_noise(tc.batch_size, &mut rng);
        let taus = stratified_times(tc.batch_size, &mut rng);
        let nb = NoisedBatch::new(train.select(&idx)?, eps, taus.clone(), &sched)?;
        let mut g = Graph::new();
        let p = den.params().bind(&mut g, true);
        let z = g.constant(nb.z_tau.clone());
        let v = den.forward(&mut g, &p, z, &taus, &pyr)?;
        let l = diffusion_loss(&mut g, &nb, v, weighting, Some(mask)).map_err(|e| non_finite_at(it, e))?;
        let grads = grads_of(&g, l.loss, p.vars(), den.params())?;
        let lr = lr_at(it - 1, tc.warmup, tc.iterations, tc.lr_min, tc.lr_max)?;
        adam.step(den.params_mut(), &grads, lr).map_err(|e| non_finite_at(it, e))?;
        for (&gamma, &obs) in nb.gammas.iter().zip(&l.integrands) {
            sched.update(gamma, obs)?;
        }
        let mut row = LogRow { iteration: it, lr, loss: g.value(l.loss).item(), ..Default::default() };
        if it % tc.eval_every == 0 || it == tc.iterations {
            let v = evaluate(&den)?;
            row.valid_loss = Some(v);
            if v < best.0 {
                best = (v, den.params().clone(), sched.clone());
            }
        }
        log(&row);
    }
    *den.params_mut() = best.1;
    Ok((den, best.2, best.0))
}

/// Latent diffusion on the encoder means of `vae`, normalised per channel.
pub fn train_ldm(
    vae: &TrainedVae,
    train: &FieldBatch,
    valid: &FieldBatch,
    config: &DenoiserConfig,
    weighting: Weighting,
    tc: &TrainConfig,
    log: &mut dyn FnMut(&LogRow),
) -> Result<TrainedDiffusion> {
    let found = dataset_fingerprint(train);
    if found != vae.meta.dataset {
        return Err(Error::Fingerprint { expected: vae.meta.dataset.clone(), found });
    }
    let lmask = vae.vae.pyramid(train.mask())?.coarsest().clone();
    let zt = vae.encode(train)?;
    let stats = LatentStats::fit(&zt, &lmask)?;
    let zt = stats.normalize(&zt, &lmask)?;
    let zv = stats.normalize(&vae.encode(valid)?, &lmask)?;
    let config = DenoiserConfig { space: Space::Latent, ..config.clone() };
    let (denoiser, scheduler, best) = train_denoiser(&zt, &zv, &lmask, &config, weighting, tc, log)?;
    let meta = DiffusionMeta {
        denoiser: config,
        weighting,
        channels: train.channels().to_vec(),
        dataset: found,
        vae: Some(vae.fingerprint()?),
        latent_stats: Some(stats),
        train: tc.clone(),
        best_valid_loss: best,
    };
    Ok(TrainedDiffusion { denoiser, scheduler, meta, mask: train.mask().clone() })
}

/// Diffusion directly on normalised fields (`z_x = x`).
pub fn train_data_diffusion(
    train: &FieldBatch,
    valid: &FieldBatch,
    config: &DenoiserConfig,
    weighting: Weighting,
    tc: &TrainConfig,
    log: &mut dyn FnMut(&LogRow),
) -> Result<TrainedDiffusion> {
    let specs = train.channels().to_vec();
    let xt = normalized_data(train, &specs)?;
    let xv = normalized_data(valid, &specs)?;
    let config = DenoiserConfig { space: Space::Data, ..config.clone() };
    let (denoiser, scheduler, best) = train_denoiser(&xt, &xv, train.mask(), &config, weighting, tc, log)?;
    let meta = DiffusionMeta {
        denoiser: config,
        weighting,
        channels: specs,
        dataset: dataset_fingerprint(train),
        vae: None,
        latent_stats: None,
        train: tc.clone(),
        best_valid_loss: best,
    };
    Ok(TrainedDiffusion { denoiser, scheduler, meta, mask: train.mask().clone() })
}
