use super::check_paired;
use crate::error::{Error, Result};
use crate::grid::{FieldBatch, Mask};
use crate::par;

const HALF: usize = 3;
const MIN_POINTS: usize = 4;

/// SSIM of one window from population moments. The covariance uses the
/// same operations as the variances so identical inputs give exactly 1.
fn window_ssim(x: &[f64], y: &[f64], c1: f64, c2: f64) -> f64 {
    let m = x.len() as f64;
    let mx = x.iter().sum::<f64>() / m;
    let my = y.iter().sum::<f64>() / m;
    let (mut vx, mut vy, mut cxy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        let (dx, dy) = (a - mx, b - my);
        vx += dx * dx;
        vy += dy * dy;
        cxy += dx * dy;
    }
    let (vx, vy, cxy) = (vx / m, vy / m, cxy / m);
    (2.0 * mx * my + c1) * (2.0 * cxy + c2) / ((mx * mx + my * my + c1) * (vx + vy + c2))
}

/// Sum and count of per-point SSIM over one `h × w` plane.
fn plane_ssim(x: &[f64], y: &[f64], mask: &Mask, range: f64) -> (f64, usize) {
    let (h, w) = (mask.height(), mask.width());
    let c1 = (0.01 * range).powi(2);
    let c2 = (0.03 * range).powi(2);
    let mut sum = 0.0;
    let mut count = 0;
    let mut idx = Vec::with_capacity((2 * HALF + 1).pow(2));
    for r in 0..h {
        for c in 0..w {
            if !mask.is_valid(r * w + c) {
                continue;
            }
            idx.clear();
            for rr in r.saturating_sub(HALF)..(r + HALF + 1).min(h) {
                for cc in c.saturating_sub(HALF)..(c + HALF + 1).min(w) {
                    let l = rr * w + cc;
                    if mask.is_valid(l) {
                        idx.push(l);
                    }
                }
            }
            if idx.len() < MIN_POINTS {
                continue;
            }
            let xs: Vec<f64> = idx.iter().map(|&l| x[l]).collect();
            let ys: Vec<f64> = idx.iter().map(|&l| y[l]).collect();
            sum += window_ssim(&xs, &ys, c1, c2);
            count += 1;
        }
    }
    (sum, count)
}

/// Mean SSIM over samples, channels and valid points, with per-channel means.
/// Each point uses the valid part of its 7×7 window; windows with fewer than
/// four valid points are skipped. Stabilisers are `c₁ = (0.01 r_k)²`,
/// `c₂ = (0.03 r_k)²` with `r_k` the channel range.
pub fn ssim_per_channel(x: &FieldBatch, y: &FieldBatch) -> Result<(f64, Vec<f64>)> {
    check_paired(x, y)?;
    let (k, plane) = (x.num_channels(), x.height() * x.width());
    let parts = par::map_range(x.len() * k, |p| {
        let (xs, ys) = (&x.data().data()[p * plane..(p + 1) * plane], &y.data().data()[p * plane..(p + 1) * plane]);
        plane_ssim(xs, ys, x.mask(), x.channels()[p % k].range)
    });
    let mut per = vec![(0.0, 0usize); k];
    for (p, (s, c)) in parts.into_iter().enumerate() {
        per[p % k].0 += s;
        per[p % k].1 += c;
    }
    let (s, c) = per.iter().fold((0.0, 0), |(a, b), (s, c)| (a + s, b + c));
    if c == 0 {
        return Err(Error::Degenerate("no SSIM window has enough valid points".into()));
    }
    Ok((s / c as f64, per.iter().map(|(s, c)| s / *c as f64).collect()))
}

pub fn ssim(x: &FieldBatch, y: &FieldBatch) -> Result<f64> {
    Ok(ssim_per_channel(x, y)?.0)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identical_planes_give_one() {
        let mask = Mask::all_valid(9, 9);
        let x: Vec<f64> = (0..81).map(|i| (i as f64 * 0.7).sin() * 3.1 + 0.2).collect();
        let (s, c) = plane_ssim(&x, &x, &mask, 5.0);
        assert_eq!(s, c as f64);
    }

    #[test]
    fn anticorrelated_zero_mean_window() {
        let x: Vec<f64> = (0..49).map(|i| (i % 7) as f64 - 3.0).collect();
        let y: Vec<f64> = x.iter().map(|v| -v).collect();
        let v = window_ssim(&x, &y, 1e-4, 9e-4);
        // variance 4: (−8 + c₂) / (8 + c₂)
        assert!((v - (-8.0 + 9e-4) / (8.0 + 9e-4)).abs() < 1e-15, "{v}");
    }

    #[test]
    fn constant_fields() {
        let mask = Mask::all_valid(4, 4);
        let (r, c1) = (2.0, (0.01f64 * 2.0).powi(2));
        let (s, c) = plane_ssim(&[0.0; 16], &[r; 16], &mask, r);
        assert!((s / c as f64 - c1 / (r * r + c1)).abs() < 1e-18);
    }

    #[test]
    fn sparse_windows_are_skipped() {
        let mut valid = vec![false; 64];
        valid[0] = true;
        valid[63] = true;
        let mask = Mask::new(8, 8, valid).unwrap();
        assert_eq!(plane_ssim(&[1.0; 64], &[1.0; 64], &mask, 1.0).1, 0);
    }
}
