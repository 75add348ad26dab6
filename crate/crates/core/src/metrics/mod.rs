//! Reconstruction and generation metrics on masked grids.

mod spectrum;
mod ssim;

pub use spectrum::{radial_psd, Crop, PowerSpectrum};
pub use ssim::{ssim, ssim_per_channel};

use crate::error::{shape_err, Error, Result};
use crate::grid::{FieldBatch, Mask};
use crate::models::Vae;
use crate::tensor::Tensor;
use serde::{Deserialize, Serialize};

/// Sea-ice extent threshold on channel 0, in data units.
pub const SIE_THRESHOLD: f64 = 0.01;

/// Checks that two batches share grid, mask and channel specs.
pub fn check_compatible(a: &FieldBatch, b: &FieldBatch) -> Result<()> {
    if a.mask() != b.mask() {
        return Err(Error::InvalidArgument("land masks differ".into()));
    }
    if a.channels() != b.channels() {
        return Err(Error::InvalidArgument("channel specs differ".into()));
    }
    if a.is_normalized() || b.is_normalized() {
        return Err(Error::InvalidArgument("metrics expect data units".into()));
    }
    Ok(())
}

fn check_paired(x: &FieldBatch, y: &FieldBatch) -> Result<()> {
    check_compatible(x, y)?;
    if x.data().shape() != y.data().shape() {
        return Err(shape_err("paired metric", format!("{:?} vs {:?}", x.data().shape(), y.data().shape())));
    }
    Ok(())
}

/// `√(mean over samples, channels and valid points of (x − y)² / σ_k²)`,
/// with the per-channel values alongside.
pub fn normalized_rmse_per_channel(x: &FieldBatch, y: &FieldBatch) -> Result<(f64, Vec<f64>)> {
    check_paired(x, y)?;
    let (k, plane) = (x.num_channels(), x.height() * x.width());
    let mut sums = vec![0.0; k];
    for (p, (xc, yc)) in x.data().data().chunks(plane).zip(y.data().data().chunks(plane)).enumerate() {
        let s2 = x.channels()[p % k].std.powi(2);
        sums[p % k] += xc
            .iter()
            .zip(yc)
            .zip(x.mask().cells())
            .filter(|(_, &ok)| ok)
            .map(|((a, b), _)| (a - b) * (a - b) / s2)
            .sum::<f64>();
    }
    let per = (x.len() * x.mask().count_valid()) as f64;
    if per == 0.0 {
        return Err(Error::Degenerate("no valid points".into()));
    }
    let total = (sums.iter().sum::<f64>() / (per * k as f64)).sqrt();
    Ok((total, sums.iter().map(|s| (s / per).sqrt()).collect()))
}

pub fn normalized_rmse(x: &FieldBatch, y: &FieldBatch) -> Result<f64> {
    Ok(normalized_rmse_per_channel(x, y)?.0)
}

fn extent(v: f64, threshold: f64) -> bool {
    v >= threshold
}

/// Fraction of valid points where the thresholded channel-0 extents agree,
/// averaged over samples.
pub fn acc_sie(x: &FieldBatch, y: &FieldBatch, threshold: f64) -> Result<f64> {
    check_paired(x, y)?;
    let (k, plane) = (x.num_channels(), x.height() * x.width());
    let valid = x.mask().count_valid() as f64;
    if valid == 0.0 || x.is_empty() {
        return Err(Error::Degenerate("no valid points".into()));
    }
    let mut acc = 0.0;
    for n in 0..x.len() {
        let off = n * k * plane;
        let xs = &x.data().data()[off..off + plane];
        let ys = &y.data().data()[off..off + plane];
        let agree = (0..plane)
            .filter(|&l| x.mask().is_valid(l) && extent(xs[l], threshold) == extent(ys[l], threshold))
            .count();
        acc += agree as f64 / valid;
    }
    Ok(acc / x.len() as f64)
}

/// Per-point frequency of channel 0 reaching `threshold` over a set.
pub fn coverage_probability(set: &FieldBatch, threshold: f64) -> Vec<f64> {
    let (k, plane) = (set.num_channels(), set.height() * set.width());
    let mut p = vec![0.0; plane];
    for n in 0..set.len() {
        let off = n * k * plane;
        for (l, v) in set.data().data()[off..off + plane].iter().enumerate() {
            if extent(*v, threshold) {
                p[l] += 1.0;
            }
        }
    }
    let n = set.len().max(1) as f64;
    p.iter_mut().for_each(|v| *v /= n);
    p
}

/// RMSE between per-point extent probabilities of two sets.
pub fn rmse_sie(a: &FieldBatch, b: &FieldBatch, threshold: f64) -> Result<f64> {
    check_compatible(a, b)?;
    if a.is_empty() || b.is_empty() {
        return Err(Error::InvalidArgument("empty set".into()));
    }
    let (pa, pb) = (coverage_probability(a, threshold), coverage_probability(b, threshold));
    let mask = a.mask();
    let valid = mask.count_valid() as f64;
    let s: f64 = (0..pa.len()).filter(|&l| mask.is_valid(l)).map(|l| (pa[l] - pb[l]).powi(2)).sum();
    Ok((s / valid).sqrt())
}

/// One 5 % bin of the extent reliability curve.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CurveBin {
    pub lower: f64,
    pub upper: f64,
    pub mean_reference: f64,
    pub mean_predicted: f64,
    pub count: usize,
}

/// Mean predicted extent probability per bin of reference probability.
/// Empty bins are kept with count 0 and NaN means.
pub fn sie_probability_curve(reference: &FieldBatch, predicted: &FieldBatch, threshold: f64, bin_width: f64) -> Result<Vec<CurveBin>> {
    check_compatible(reference, predicted)?;
    if !(bin_width > 0.0 && bin_width <= 1.0) {
        return Err(Error::InvalidArgument(format!("bin width {bin_width}")));
    }
    let n_bins = (1.0 / bin_width).round() as usize;
    let (pr, pp) = (coverage_probability(reference, threshold), coverage_probability(predicted, threshold));
    let mut sums = vec![(0.0, 0.0, 0usize); n_bins];
    for l in (0..pr.len()).filter(|&l| reference.mask().is_valid(l)) {
        let b = ((pr[l] / bin_width).floor() as usize).min(n_bins - 1);
        sums[b].0 += pr[l];
        sums[b].1 += pp[l];
        sums[b].2 += 1;
    }
    Ok(sums
        .into_iter()
        .enumerate()
        .map(|(b, (r, p, c))| CurveBin {
            lower: b as f64 * bin_width,
            upper: (b + 1) as f64 * bin_width,
            mean_reference: r / c as f64,
            mean_predicted: p / c as f64,
            count: c,
        })
        .collect())
}

/// Maps fields to latent features on a (possibly coarser) mask.
pub trait FeatureEncoder {
    fn features(&self, batch: &FieldBatch) -> Result<(Tensor, Mask)>;
}

/// Encoder mean of a β = 1 VAE, applied after its own normalisation.
pub struct VaeFeatures<'a> {
    pub vae: &'a Vae,
    pub specs: &'a [crate::grid::ChannelSpec],
}

impl FeatureEncoder for VaeFeatures<'_> {
    fn features(&self, batch: &FieldBatch) -> Result<(Tensor, Mask)> {
        let normalized = crate::grid::normalize(batch, self.specs)?;
        let pyr = self.vae.pyramid(batch.mask())?;
        let z = self.vae.encode_mean(normalized.data(), &pyr)?;
        Ok((z, pyr.coarsest().clone()))
    }
}

fn moments(z: &Tensor, mask: &Mask) -> Result<(Vec<f64>, Vec<f64>)> {
    let [n, c, h, w] = z.dims4()?;
    if n < 2 {
        return Err(Error::InvalidArgument("feature statistics need at least 2 samples".into()));
    }
    let plane = h * w;
    let coords: Vec<usize> = (0..c * plane).filter(|i| mask.is_valid(i % plane)).collect();
    let per = c * plane;
    let mut mean = Vec::with_capacity(coords.len());
    let mut std = Vec::with_capacity(coords.len());
    for &j in &coords {
        let m = (0..n).map(|i| z.data()[i * per + j]).sum::<f64>() / n as f64;
        let v = (0..n).map(|i| (z.data()[i * per + j] - m).powi(2)).sum::<f64>() / (n - 1) as f64;
        mean.push(m);
        std.push(v.sqrt());
    }
    Ok((mean, std))
}

/// `‖μ_A − μ_B‖² + ‖σ_A − σ_B‖²` over point-wise feature statistics.
pub fn faed_from_features(a: &Tensor, b: &Tensor, mask: &Mask) -> Result<f64> {
    if a.shape()[1..] != b.shape()[1..] {
        return Err(shape_err("faed", format!("{:?} vs {:?}", a.shape(), b.shape())));
    }
    let (ma, sa) = moments(a, mask)?;
    let (mb, sb) = moments(b, mask)?;
    let dm: f64 = ma.iter().zip(&mb).map(|(x, y)| (x - y).powi(2)).sum();
    let ds: f64 = sa.iter().zip(&sb).map(|(x, y)| (x - y).powi(2)).sum();
    Ok(dm + ds)
}

pub fn faed(a: &FieldBatch, b: &FieldBatch, encoder: &dyn FeatureEncoder) -> Result<f64> {
    check_compatible(a, b)?;
    let (fa, mask) = encoder.features(a)?;
    let (fb, _) = encoder.features(b)?;
    faed_from_features(&fa, &fb, &mask)
}

/// Scores of one evaluation run; absent entries were not computed.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub rmse: Option<f64>,
    pub ssim: Option<f64>,
    pub acc_sie: Option<f64>,
    pub faed: Option<f64>,
    pub rmse_sie: Option<f64>,
    /// `(channel name, rmse, ssim)`.
    pub per_channel: Vec<(String, f64, f64)>,
    /// Fingerprint of the feature-encoder checkpoint used for FAED.
    pub encoder_fingerprint: Option<String>,
}

impl MetricReport {
    /// `(metric, channel, value)` rows; `channel` is `all` for totals.
    pub fn rows(&self) -> Vec<(String, String, f64)> {
        let mut rows = Vec::new();
        for (name, v) in [
            ("rmse", self.rmse),
            ("ssim", self.ssim),
            ("acc_sie", self.acc_sie),
            ("faed", self.faed),
            ("rmse_sie", self.rmse_sie),
        ] {
            if let Some(v) = v {
                rows.push((name.to_string(), "all".to_string(), v));
            }
        }
        for (ch, r, s) in &self.per_channel {
            rows.push(("rmse".into(), ch.clone(), *r));
            rows.push(("ssim".into(), ch.clone(), *s));
        }
        rows
    }
}

/// One-to-one comparison of reconstructions with their references.
pub fn evaluate_paired(reference: &FieldBatch, candidate: &FieldBatch) -> Result<MetricReport> {
    let (rmse, rmse_k) = normalized_rmse_per_channel(reference, candidate)?;
    let (ssim, ssim_k) = ssim_per_channel(reference, candidate)?;
    let acc = acc_sie(reference, candidate, SIE_THRESHOLD)?;
    let per_channel = reference
        .channels()
        .iter()
        .zip(rmse_k.into_iter().zip(ssim_k))
        .map(|(c, (r, s))| (c.name.clone(), r, s))
        .collect();
    Ok(MetricReport { rmse: Some(rmse), ssim: Some(ssim), acc_sie: Some(acc), per_channel, ..Default::default() })
}

/// Distribution-level comparison of generated samples with a reference set.
pub fn evaluate_unpaired(
    reference: &FieldBatch,
    generated: &FieldBatch,
    encoder: Option<(&dyn FeatureEncoder, String)>,
) -> Result<(MetricReport, Vec<CurveBin>)> {
    let rmse_sie = rmse_sie(reference, generated, SIE_THRESHOLD)?;
    let curve = sie_probability_curve(reference, generated, SIE_THRESHOLD, 0.05)?;
    let (faed, fp) = match encoder {
        Some((enc, fp)) => (Some(faed(reference, generated, enc)?), Some(fp)),
        None => (None, None),
    };
    Ok((MetricReport { faed, rmse_sie: Some(rmse_sie), encoder_fingerprint: fp, ..Default::default() }, curve))
}
