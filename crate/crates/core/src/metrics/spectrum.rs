use crate::error::{Error, Result};
use crate::fft::{fft2, signed_freq};
use crate::grid::FieldBatch;
use rustfft::num_complex::Complex64;
use serde::{Deserialize, Serialize};

/// Square window `[row, row + size) × [col, col + size)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Crop {
    pub row: usize,
    pub col: usize,
    pub size: usize,
}

/// Radially averaged power spectrum over integer wavenumbers `1..=size/2`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PowerSpectrum {
    pub wavenumbers: Vec<usize>,
    /// Mean power per Fourier coefficient in each annulus, averaged over
    /// samples.
    pub density: Vec<f64>,
    /// Fourier coefficients per annulus.
    pub counts: Vec<usize>,
    /// Power of the corner coefficients with `|κ|` beyond the last annulus.
    pub residual: f64,
}

impl PowerSpectrum {
    /// Equals the mean crop variance (Parseval).
    pub fn total_power(&self) -> f64 {
        self.density.iter().zip(&self.counts).map(|(d, &c)| d * c as f64).sum::<f64>() + self.residual
    }
}

/// Mean-removed periodogram of `channel` on `crop`, normalised so that the
/// power of a sample sums to its population variance on the crop. The
/// annulus of coefficient `(κ_y, κ_x)` is `round(|κ|)`.
pub fn radial_psd(batch: &FieldBatch, channel: usize, crop: Crop) -> Result<PowerSpectrum> {
    let (h, w, k) = (batch.height(), batch.width(), batch.num_channels());
    let s = crop.size;
    if channel >= k {
        return Err(Error::InvalidArgument(format!("channel {channel} of {k}")));
    }
    if s < 2 || crop.row + s > h || crop.col + s > w {
        return Err(Error::InvalidArgument(format!("crop {crop:?} outside {h}x{w} grid")));
    }
    for r in crop.row..crop.row + s {
        for c in crop.col..crop.col + s {
            if !batch.mask().is_valid(r * w + c) {
                return Err(Error::InvalidArgument(format!("crop {crop:?} intersects land at ({r}, {c})")));
            }
        }
    }
    if batch.is_empty() {
        return Err(Error::InvalidArgument("empty batch".into()));
    }
    let n_bins = s / 2;
    let mut counts = vec![0usize; n_bins];
    let mut bin_of = vec![None; s * s];
    for i in 0..s {
        for j in 0..s {
            let (fy, fx) = (signed_freq(i, s) as f64, signed_freq(j, s) as f64);
            let b = (fy * fy + fx * fx).sqrt().round() as usize;
            if (1..=n_bins).contains(&b) {
                bin_of[i * s + j] = Some(b - 1);
                counts[b - 1] += 1;
            }
        }
    }
    let norm = (s * s) as f64;
    let per_sample = crate::par::map_range(batch.len(), |n| {
        let base = (n * k + channel) * h * w;
        let plane = &batch.data().data()[base..base + h * w];
        let mut buf: Vec<Complex64> = (0..s * s)
            .map(|i| Complex64::new(plane[(crop.row + i / s) * w + crop.col + i % s], 0.0))
            .collect();
        let mean = buf.iter().map(|c| c.re).sum::<f64>() / norm;
        buf.iter_mut().for_each(|c| c.re -= mean);
        fft2(&mut buf, s, s, false);
        let mut power = vec![0.0; n_bins];
        let mut residual = 0.0;
        for (i, c) in buf.iter().enumerate() {
            let p = c.norm_sqr() / (norm * norm);
            match bin_of[i] {
                Some(b) => power[b] += p,
                None => residual += p,
            }
        }
        (power, residual)
    });
    let mut density = vec![0.0; n_bins];
    let mut residual = 0.0;
    for (p, r) in &per_sample {
        for (d, v) in density.iter_mut().zip(p) {
            *d += v;
        }
        residual += r;
    }
    let n = batch.len() as f64;
    for (d, &c) in density.iter_mut().zip(&counts) {
        *d /= n * c as f64;
    }
    Ok(PowerSpectrum { wavenumbers: (1..=n_bins).collect(), density, counts, residual: residual / n })
}
