//! `censored-ldm`: data generation, training, sampling, reconstruction,
//! evaluation and spectra from the command line.
//!
//! Every command writes `<command>.json` next to its outputs holding the
//! fully resolved arguments; `--config <file>` replays such a file.
//! Relative output directories are placed under `$CENSORED_LDM_OUT` when
//! that variable is set.

use anyhow::{bail, Context, Result};
use censored_ldm::autodiff::Checkpoint;
use censored_ldm::diffusion::Weighting;
use censored_ldm::grid::{generate_splits, load_fgrd, save_fgrd, FieldBatch};
use censored_ldm::metrics::{evaluate_paired, evaluate_unpaired, radial_psd, Crop, VaeFeatures};
use censored_ldm::models::{DenoiserConfig, Reconstruction, Space, VaeConfig};
use censored_ldm::pipeline::{
    train_data_diffusion, train_ldm, train_vae, LogRow, TrainConfig, TrainedDiffusion, TrainedVae,
};
use censored_ldm::sampler::SamplerConfig;
use censored_ldm::schedulers::EdmSchedule;
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{de::DeserializeOwned, Deserialize, Serialize};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

const OUT_ENV: &str = "CENSORED_LDM_OUT";

#[derive(Parser)]
#[command(name = "censored-ldm", version, about = "Latent diffusion for bounded gridded fields")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Synthetic train/valid/test FGRD files.
    GenData(Replay<GenDataArgs>),
    /// Train a Gaussian or censored VAE.
    TrainVae(Replay<TrainVaeArgs>),
    /// Train a latent diffusion model on a VAE's latents.
    TrainLdm(Replay<TrainLdmArgs>),
    /// Train a diffusion model in data space.
    TrainDiff(Replay<TrainDiffArgs>),
    /// Generate samples from a trained diffusion model.
    Sample(Replay<SampleArgs>),
    /// Encode and decode a file with a trained VAE.
    Reconstruct(Replay<ReconstructArgs>),
    /// Paired or unpaired metrics between two FGRD files.
    Evaluate(Replay<EvaluateArgs>),
    /// Radially averaged power spectra.
    Spectrum(Replay<SpectrumArgs>),
}

#[derive(Args)]
struct Replay<T: Args> {
    /// Resolved-config JSON written by an earlier run; replaces all other
    /// arguments.
    #[arg(long)]
    config: Option<PathBuf>,
    #[command(flatten)]
    args: T,
}

impl<T: Args + DeserializeOwned> Replay<T> {
    fn resolve(self) -> Result<T> {
        match self.config {
            Some(p) => {
                let text = std::fs::read_to_string(&p).with_context(|| format!("reading {}", p.display()))?;
                serde_json::from_str(&text).with_context(|| format!("parsing {}", p.display()))
            }
            None => Ok(self.args),
        }
    }
}

fn out_dir(out: &Path) -> Result<PathBuf> {
    let dir = match std::env::var_os(OUT_ENV) {
        Some(root) if out.is_relative() => PathBuf::from(root).join(out),
        _ => out.to_path_buf(),
    };
    std::fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
    Ok(dir)
}

fn write_config<T: Serialize>(dir: &Path, command: &str, args: &T) -> Result<()> {
    let path = dir.join(format!("{command}.json"));
    std::fs::write(&path, serde_json::to_string_pretty(args)? + "\n").with_context(|| format!("writing {}", path.display()))
}

fn given<'a, T>(v: &'a Option<T>, flag: &str) -> Result<&'a T> {
    v.as_ref().with_context(|| format!("{flag} is required"))
}

fn load(path: &Path) -> Result<FieldBatch> {
    load_fgrd(path).with_context(|| format!("loading {}", path.display()))
}

fn load_ckpt(path: &Path) -> Result<Checkpoint> {
    Checkpoint::load(path).with_context(|| format!("loading {}", path.display()))
}

fn write_csv<R: Serialize>(path: &Path, rows: impl IntoIterator<Item = R>) -> Result<()> {
    let mut w = csv::Writer::from_path(path).with_context(|| format!("writing {}", path.display()))?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

#[derive(Args, Serialize, Deserialize)]
struct GenDataArgs {
    /// Training samples.
    #[arg(long, default_value_t = 2000, value_parser = clap::value_parser!(u64).range(1..))]
    n: u64,
    #[arg(long, default_value_t = 200, value_parser = clap::value_parser!(u64).range(2..))]
    n_valid: u64,
    #[arg(long, default_value_t = 500, value_parser = clap::value_parser!(u64).range(2..))]
    n_test: u64,
    /// Grid side length.
    #[arg(long, default_value_t = 32)]
    size: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value = "data")]
    out: PathBuf,
}

fn gen_data(a: GenDataArgs) -> Result<()> {
    let dir = out_dir(&a.out)?;
    let s = generate_splits(a.n as usize, a.n_valid as usize, a.n_test as usize, a.size, a.size, a.seed)?;
    for (name, b) in [("train", &s.train), ("valid", &s.valid), ("test", &s.test)] {
        save_fgrd(b, dir.join(format!("{name}.fgrd")))?;
    }
    write_config(&dir, "gen-data", &a)
}

#[derive(Args, Clone, Serialize, Deserialize)]
struct TrainArgs {
    #[arg(long, default_value_t = 5000)]
    iterations: usize,
    #[arg(long, default_value_t = 16)]
    batch_size: usize,
    #[arg(long, default_value_t = 250)]
    warmup: usize,
    #[arg(long, default_value_t = 1e-6)]
    lr_min: f64,
    #[arg(long, default_value_t = 2e-4)]
    lr_max: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 250)]
    eval_every: usize,
    #[arg(long, default_value_t = 64)]
    valid_samples: usize,
}

impl From<&TrainArgs> for TrainConfig {
    fn from(a: &TrainArgs) -> Self {
        TrainConfig {
            iterations: a.iterations,
            batch_size: a.batch_size,
            warmup: a.warmup,
            lr_min: a.lr_min,
            lr_max: a.lr_max,
            seed: a.seed,
            eval_every: a.eval_every,
            valid_samples: a.valid_samples,
        }
    }
}

#[derive(Clone, Copy, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
enum LossArg {
    Gaussian,
    Censored,
}

#[derive(Args, Serialize, Deserialize)]
struct TrainVaeArgs {
    /// Directory holding train.fgrd and valid.fgrd.
    #[arg(long, required_unless_present = "config")]
    data: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "censored")]
    loss: LossArg,
    #[arg(long, default_value_t = 1e-3)]
    beta: f64,
    #[arg(long, default_value_t = 8)]
    latent_channels: usize,
    #[arg(long, default_value_t = 32)]
    base_width: usize,
    #[arg(long, default_value_t = 2)]
    depth: usize,
    #[arg(long, default_value_t = 2)]
    blocks_per_level: usize,
    #[command(flatten)]
    train: TrainArgs,
    #[arg(long, default_value = "vae")]
    out: PathBuf,
}

fn progress(every: usize) -> impl FnMut(&LogRow) -> LogRow {
    move |r: &LogRow| {
        if let Some(v) = r.valid_loss {
            if r.iteration % every == 0 {
                eprintln!("iteration {:>6}  loss {:.4}  valid {:.4}", r.iteration, r.loss, v);
            }
        }
        r.clone()
    }
}

fn train_vae_cmd(a: TrainVaeArgs) -> Result<()> {
    let dir = out_dir(&a.out)?;
    let data = given(&a.data, "--data")?;
    let train = load(&data.join("train.fgrd"))?;
    let valid = load(&data.join("valid.fgrd"))?;
    let cfg = VaeConfig {
        latent_channels: a.latent_channels,
        base_width: a.base_width,
        depth: a.depth,
        blocks_per_level: a.blocks_per_level,
        beta: a.beta,
    };
    let recon = match a.loss {
        LossArg::Gaussian => Reconstruction::Gaussian,
        LossArg::Censored => Reconstruction::Censored,
    };
    let mut rows = Vec::new();
    let mut report = progress(1);
    let vae = train_vae(&train, &valid, &cfg, recon, &(&a.train).into(), &mut |r| rows.push(report(r)))?;
    vae.to_checkpoint()?.save(dir.join("vae.ckpt"))?;
    write_csv(&dir.join("vae_log.csv"), rows)?;
    write_config(&dir, "train-vae", &a)
}

#[derive(Clone, Copy, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
enum WeightingArg {
    Elbo,
    Sigmoid,
}

#[derive(Args, Clone, Serialize, Deserialize)]
struct DenoiserArgs {
    /// Directory holding train.fgrd and valid.fgrd.
    #[arg(long, required_unless_present = "config")]
    data: Option<PathBuf>,
    #[arg(long, default_value_t = 32)]
    width: usize,
    #[arg(long, default_value_t = 1)]
    levels: usize,
    #[arg(long, default_value_t = 2)]
    blocks_per_level: usize,
    #[arg(long, default_value_t = 64)]
    time_embed_dim: usize,
    #[arg(long, value_enum, default_value = "sigmoid")]
    weighting: WeightingArg,
    #[command(flatten)]
    train: TrainArgs,
}

impl DenoiserArgs {
    fn config(&self, space: Space) -> DenoiserConfig {
        DenoiserConfig {
            width: self.width,
            depth: self.levels,
            blocks_per_level: self.blocks_per_level,
            time_embed_dim: self.time_embed_dim,
            space,
        }
    }

    fn weighting(&self) -> Weighting {
        match self.weighting {
            WeightingArg::Elbo => Weighting::Elbo,
            WeightingArg::Sigmoid => Weighting::Sigmoid,
        }
    }
}

#[derive(Args, Serialize, Deserialize)]
struct TrainLdmArgs {
    /// VAE checkpoint whose latents are modelled.
    #[arg(long, required_unless_present = "config")]
    vae: Option<PathBuf>,
    #[command(flatten)]
    model: DenoiserArgs,
    #[arg(long, default_value = "ldm")]
    out: PathBuf,
}

#[derive(Clone, Copy, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
enum SpaceArg {
    Data,
    Latent,
}

#[derive(Args, Serialize, Deserialize)]
struct TrainDiffArgs {
    #[arg(long, value_enum, default_value = "data")]
    space: SpaceArg,
    /// VAE checkpoint, required with `--space latent`.
    #[arg(long)]
    vae: Option<PathBuf>,
    #[command(flatten)]
    model: DenoiserArgs,
    #[arg(long, default_value = "diff")]
    out: PathBuf,
}

fn train_diffusion_cmd(model: &DenoiserArgs, vae: Option<&Path>, out: &Path) -> Result<PathBuf> {
    let dir = out_dir(out)?;
    let data = given(&model.data, "--data")?;
    let train = load(&data.join("train.fgrd"))?;
    let valid = load(&data.join("valid.fgrd"))?;
    let tc: TrainConfig = (&model.train).into();
    let mut rows = Vec::new();
    let mut report = progress(1);
    let mut log = |r: &LogRow| rows.push(report(r));
    let trained = match vae {
        Some(p) => {
            let vae = TrainedVae::from_checkpoint(&load_ckpt(p)?)?;
            train_ldm(&vae, &train, &valid, &model.config(Space::Latent), model.weighting(), &tc, &mut log)?
        }
        None => train_data_diffusion(&train, &valid, &model.config(Space::Data), model.weighting(), &tc, &mut log)?,
    };
    trained.to_checkpoint()?.save(dir.join("model.ckpt"))?;
    write_csv(&dir.join("loss_log.csv"), rows)?;
    Ok(dir)
}

fn train_ldm_cmd(a: TrainLdmArgs) -> Result<()> {
    let dir = train_diffusion_cmd(&a.model, Some(given(&a.vae, "--vae")?), &a.out)?;
    write_config(&dir, "train-ldm", &a)
}

fn train_diff_cmd(a: TrainDiffArgs) -> Result<()> {
    let vae = match (a.space, &a.vae) {
        (SpaceArg::Data, _) => None,
        (SpaceArg::Latent, Some(v)) => Some(v.as_path()),
        (SpaceArg::Latent, None) => bail!("--space latent needs --vae"),
    };
    let dir = train_diffusion_cmd(&a.model, vae, &a.out)?;
    write_config(&dir, "train-diff", &a)
}

#[derive(Args, Serialize, Deserialize)]
struct SampleArgs {
    /// Diffusion checkpoint.
    #[arg(long, required_unless_present = "config")]
    model: Option<PathBuf>,
    /// VAE checkpoint for latent models.
    #[arg(long)]
    vae: Option<PathBuf>,
    #[arg(long, default_value_t = 16, value_parser = clap::value_parser!(u64).range(1..))]
    n: u64,
    #[arg(long, default_value_t = 20, value_parser = clap::value_parser!(u64).range(1..))]
    steps: u64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Clip the data-space denoiser output to the bounds at every step.
    #[arg(long)]
    clip_denoiser: bool,
    /// Clip generated fields to the bounds (always on for censored VAEs).
    #[arg(long)]
    clip_output: bool,
    #[arg(long, default_value = "samples")]
    out: PathBuf,
}

#[derive(Serialize)]
struct LatencyRow<'a> {
    model: &'a str,
    samples: usize,
    steps: usize,
    evaluations: usize,
    seconds_per_sample: f64,
}

fn sample_cmd(a: SampleArgs) -> Result<()> {
    let dir = out_dir(&a.out)?;
    let model = TrainedDiffusion::from_checkpoint(&load_ckpt(given(&a.model, "--model")?)?)?;
    let vae = a.vae.as_deref().map(|p| load_ckpt(p).and_then(|c| Ok(TrainedVae::from_checkpoint(&c)?))).transpose()?;
    let censored = vae.as_ref().is_some_and(|v| v.meta.reconstruction == Reconstruction::Censored);
    let cfg = SamplerConfig {
        n_steps: a.steps as usize,
        schedule: EdmSchedule::default(),
        clip_denoiser: a.clip_denoiser,
        seed: a.seed,
    };
    let out = model.generate(vae.as_ref(), &cfg, a.n as usize, a.clip_output || censored)?;
    save_fgrd(&out.batch, dir.join("samples.fgrd"))?;
    let kind = match model.meta.denoiser.space {
        Space::Latent => "latent",
        Space::Data => "data",
    };
    write_csv(
        &dir.join("latency.csv"),
        [LatencyRow {
            model: kind,
            samples: a.n as usize,
            steps: cfg.n_steps,
            evaluations: out.evaluations,
            seconds_per_sample: out.seconds_per_sample,
        }],
    )?;
    write_config(&dir, "sample", &a)
}

#[derive(Args, Serialize, Deserialize)]
struct ReconstructArgs {
    #[arg(long, required_unless_present = "config")]
    vae: Option<PathBuf>,
    #[arg(long, required_unless_present = "config")]
    input: Option<PathBuf>,
    /// Clip bounded channels (always on for censored VAEs).
    #[arg(long)]
    clip_output: bool,
    #[arg(long, default_value = "recon")]
    out: PathBuf,
}

fn reconstruct_cmd(a: ReconstructArgs) -> Result<()> {
    let dir = out_dir(&a.out)?;
    let vae = TrainedVae::from_checkpoint(&load_ckpt(given(&a.vae, "--vae")?)?)?;
    let input = load(given(&a.input, "--input")?)?;
    let clip = a.clip_output || vae.meta.reconstruction == Reconstruction::Censored;
    save_fgrd(&vae.reconstruct(&input, clip)?, dir.join("reconstruction.fgrd"))?;
    write_config(&dir, "reconstruct", &a)
}

#[derive(Args, Serialize, Deserialize)]
struct EvaluateArgs {
    /// Reference set.
    #[arg(long = "ref", required_unless_present = "config")]
    reference: Option<PathBuf>,
    /// Reconstructions (paired) or generated samples.
    #[arg(long, required_unless_present = "config")]
    gen: Option<PathBuf>,
    /// One-to-one comparison instead of distribution statistics.
    #[arg(long)]
    paired: bool,
    /// Independent β = 1 VAE used as the FAED feature extractor.
    #[arg(long)]
    feature_vae: Option<PathBuf>,
    #[arg(long, default_value = "eval")]
    out: PathBuf,
}

#[derive(Serialize)]
struct MetricRow {
    metric: String,
    channel: String,
    value: f64,
}

fn evaluate_cmd(a: EvaluateArgs) -> Result<()> {
    let dir = out_dir(&a.out)?;
    let reference = load(given(&a.reference, "--ref")?)?;
    let generated = load(given(&a.gen, "--gen")?)?;
    let report = if a.paired {
        evaluate_paired(&reference, &generated)?
    } else {
        let ckpt = a.feature_vae.as_deref().map(load_ckpt).transpose()?;
        let vae = ckpt.as_ref().map(TrainedVae::from_checkpoint).transpose()?;
        let encoder = vae.as_ref().map(|v| VaeFeatures { vae: &v.vae, specs: &v.meta.channels });
        let fp = ckpt.as_ref().map(|c| format!("{:016x}", c.fingerprint()));
        let (report, curve) = evaluate_unpaired(
            &reference,
            &generated,
            encoder.as_ref().zip(fp).map(|(e, f)| (e as &dyn censored_ldm::metrics::FeatureEncoder, f)),
        )?;
        write_csv(&dir.join("sie_curve.csv"), curve)?;
        report
    };
    let rows = report.rows().into_iter().map(|(metric, channel, value)| MetricRow { metric, channel, value });
    write_csv(&dir.join("metrics.csv"), rows)?;
    if let Some(fp) = &report.encoder_fingerprint {
        eprintln!("FAED feature encoder {fp}");
    }
    write_config(&dir, "evaluate", &a)
}

fn parse_crop(s: &str) -> Result<Crop, String> {
    let v: Vec<usize> = s.split(',').map(|p| p.trim().parse::<usize>().map_err(|e| format!("{p}: {e}"))).collect::<Result<_, _>>()?;
    match v[..] {
        [row, col, size] => Ok(Crop { row, col, size }),
        _ => Err("expected row,col,size".into()),
    }
}

#[derive(Args, Serialize, Deserialize)]
struct SpectrumArgs {
    /// FGRD inputs; one CSV is written per input.
    #[arg(long, required_unless_present = "config", num_args = 1..)]
    input: Vec<PathBuf>,
    #[arg(long, default_value_t = 0)]
    channel: usize,
    /// Square crop as `row,col,size`.
    #[arg(long, value_parser = parse_crop, required_unless_present = "config")]
    #[serde(with = "crop_serde")]
    crop: Option<Crop>,
    #[arg(long, default_value = "spectrum")]
    out: PathBuf,
}

mod crop_serde {
    use super::Crop;
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(c: &Option<Crop>, s: S) -> Result<S::Ok, S::Error> {
        match c {
            Some(c) => s.serialize_str(&format!("{},{},{}", c.row, c.col, c.size)),
            None => s.serialize_none(),
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Option<Crop>, D::Error> {
        Option::<String>::deserialize(d)?
            .map(|v| super::parse_crop(&v).map_err(serde::de::Error::custom))
            .transpose()
    }
}

#[derive(Serialize)]
struct SpectrumRow {
    wavenumber: usize,
    density: f64,
    coefficients: usize,
}

fn spectrum_cmd(a: SpectrumArgs) -> Result<()> {
    let dir = out_dir(&a.out)?;
    for (i, path) in a.input.iter().enumerate() {
        let ps = radial_psd(&load(path)?, a.channel, *given(&a.crop, "--crop")?)?;
        let stem = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
        let rows = (0..ps.wavenumbers.len()).map(|b| SpectrumRow {
            wavenumber: ps.wavenumbers[b],
            density: ps.density[b],
            coefficients: ps.counts[b],
        });
        write_csv(&dir.join(format!("spectrum_{i}_{stem}.csv")), rows)?;
    }
    write_config(&dir, "spectrum", &a)
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenData(r) => gen_data(r.resolve()?),
        Command::TrainVae(r) => train_vae_cmd(r.resolve()?),
        Command::TrainLdm(r) => train_ldm_cmd(r.resolve()?),
        Command::TrainDiff(r) => train_diff_cmd(r.resolve()?),
        Command::Sample(r) => sample_cmd(r.resolve()?),
        Command::Reconstruct(r) => reconstruct_cmd(r.resolve()?),
        Command::Evaluate(r) => evaluate_cmd(r.resolve()?),
        Command::Spectrum(r) => spectrum_cmd(r.resolve()?),
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
