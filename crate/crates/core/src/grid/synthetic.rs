//! Synthetic bounded fields: spectrally filtered Gaussian random fields
//! shaped into thickness-, concentration-, velocity- and damage-like
//! channels over a land mask made of random disks.

use super::{fit_normalization, ChannelSpec, DatasetSplits, FieldBatch, Mask, CHANNEL_NAMES};
use crate::error::{Error, Result};
use crate::fft::{fft2, signed_freq};
use crate::par;
use crate::tensor::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rustfft::num_complex::Complex64;

/// Knobs of the synthetic generator.
#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticConfig {
    /// Power-law exponent of the field spectrum, `P(k) ∝ k^exponent`.
    pub spectral_exponent: f64,
    /// Allowed land fraction of the grid.
    pub land_fraction: (f64, f64),
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self { spectral_exponent: -3.0, land_fraction: (0.05, 0.20) }
    }
}

pub fn default_channels() -> Vec<ChannelSpec> {
    let inf = f64::INFINITY;
    let bounds = [(0.0, inf), (0.0, 1.0), (-inf, inf), (-inf, inf), (0.0, 1.0)];
    CHANNEL_NAMES
        .iter()
        .zip(bounds)
        .map(|(n, (lo, hi))| ChannelSpec::new(*n, lo, hi).expect("ordered bounds"))
        .collect()
}

/// Land mask as a union of one to three disks.
fn land_mask(h: usize, w: usize, frac: (f64, f64), rng: &mut ChaCha8Rng) -> Result<Mask> {
    let side = h.min(w) as f64;
    for _ in 0..10_000 {
        let disks: Vec<(f64, f64, f64)> = (0..rng.random_range(1..=3))
            .map(|_| {
                (
                    rng.random_range(0.0..h as f64),
                    rng.random_range(0.0..w as f64),
                    rng.random_range(0.08..0.3) * side,
                )
            })
            .collect();
        let valid: Vec<bool> = (0..h * w)
            .map(|i| {
                let (y, x) = ((i / w) as f64 + 0.5, (i % w) as f64 + 0.5);
                !disks.iter().any(|&(cy, cx, r)| (y - cy).powi(2) + (x - cx).powi(2) <= r * r)
            })
            .collect();
        let land = 1.0 - valid.iter().filter(|&&v| v).count() as f64 / (h * w) as f64;
        if land >= frac.0 && land <= frac.1 {
            return Mask::new(h, w, valid);
        }
    }
    Err(Error::InvalidArgument(format!("no land mask with fraction in {frac:?} on {h}x{w}")))
}

/// Zero-mean, unit-variance field with power spectrum `∝ |k|^exponent`.
fn gaussian_random_field(h: usize, w: usize, exponent: f64, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let mut buf: Vec<Complex64> = (0..h * w)
        .map(|_| Complex64::new(rng.sample(StandardNormal), 0.0))
        .collect();
    fft2(&mut buf, h, w, false);
    for y in 0..h {
        let ky = signed_freq(y, h) as f64;
        for x in 0..w {
            let kx = signed_freq(x, w) as f64;
            let k2 = kx * kx + ky * ky;
            buf[y * w + x] *= if k2 == 0.0 { 0.0 } else { k2.powf(exponent / 4.0) };
        }
    }
    fft2(&mut buf, h, w, true);
    let re: Vec<f64> = buf.iter().map(|c| c.re).collect();
    let mean = re.iter().sum::<f64>() / re.len() as f64;
    let std = (re.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / re.len() as f64).sqrt();
    re.into_iter().map(|v| (v - mean) / std).collect()
}

fn sample_fields(h: usize, w: usize, cfg: &SyntheticConfig, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let plane = h * w;
    let g: Vec<Vec<f64>> = (0..5).map(|_| gaussian_random_field(h, w, cfg.spectral_exponent, rng)).collect();
    let shift: f64 = rng.random_range(-0.25..0.25);
    let mut out = vec![0.0; 5 * plane];
    for i in 0..plane {
        let y = (i / w) as f64 / (h.max(2) - 1) as f64;
        // Ice-rich at the top of the grid, open water at the bottom.
        let base = 0.3 + shift + (0.5 - y) + 0.6 * g[0][i];
        let vals = [
            base.max(0.0),
            (0.5 + 1.5 * base + 0.15 * g[1][i]).clamp(0.0, 1.0),
            0.1 * g[2][i],
            0.1 * g[3][i],
            (0.3 + 0.35 * g[4][i]).clamp(0.0, 1.0),
        ];
        for (c, v) in vals.into_iter().enumerate() {
            out[c * plane + i] = f64::from(v as f32);
        }
    }
    out
}

fn fields(n: usize, mask: &Mask, cfg: &SyntheticConfig, seed: u64) -> Result<FieldBatch> {
    let (h, w) = (mask.height(), mask.width());
    let samples = par::map_range(n, |i| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(i as u64 + 1);
        sample_fields(h, w, cfg, &mut rng)
    });
    let data = Tensor::new([n, 5, h, w], samples.concat())?;
    FieldBatch::new(data, mask.clone(), default_channels())
}

fn check_dims(h: usize, w: usize) -> Result<()> {
    if h < 16 || w < 16 {
        return Err(Error::InvalidArgument(format!("grid {h}x{w} is smaller than 16x16")));
    }
    Ok(())
}

/// `n` samples on an `h × w` grid; mask and fields both derive from `seed`.
pub fn generate_synthetic(n: usize, h: usize, w: usize, seed: u64) -> Result<FieldBatch> {
    generate_synthetic_with(&SyntheticConfig::default(), n, h, w, seed, seed)
}

pub fn generate_synthetic_with(
    cfg: &SyntheticConfig,
    n: usize,
    h: usize,
    w: usize,
    mask_seed: u64,
    field_seed: u64,
) -> Result<FieldBatch> {
    check_dims(h, w)?;
    let mut rng = ChaCha8Rng::seed_from_u64(mask_seed);
    let mask = land_mask(h, w, cfg.land_fraction, &mut rng)?;
    fields(n, &mask, cfg, field_seed)
}

/// Disjoint splits with a shared mask. Normalisation statistics are fitted
/// on the training split and attached to all three.
pub fn generate_splits(n_train: usize, n_valid: usize, n_test: usize, h: usize, w: usize, seed: u64) -> Result<DatasetSplits> {
    check_dims(h, w)?;
    let cfg = SyntheticConfig::default();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mask = land_mask(h, w, cfg.land_fraction, &mut rng)?;
    let stream = |k: u64| seed.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(k);
    let train = fields(n_train, &mask, &cfg, stream(1))?;
    let specs: Vec<ChannelSpec> = fit_normalization(&train)?
        .into_iter()
        .map(|mut s| {
            // Stored as f32 in FGRD; keep memory and disk identical.
            s.mean = f64::from(s.mean as f32);
            s.std = f64::from(s.std as f32);
            s.range = f64::from(s.range as f32);
            s
        })
        .collect();
    Ok(DatasetSplits {
        train: train.with_channels(specs.clone())?,
        valid: fields(n_valid, &mask, &cfg, stream(2))?.with_channels(specs.clone())?,
        test: fields(n_test, &mask, &cfg, stream(3))?.with_channels(specs)?,
    })
}
