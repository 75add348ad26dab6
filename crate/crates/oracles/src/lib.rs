//! Brute-force and closed-form reference evaluations for the test suites.
//!
//! Nothing here depends on the library under test. Each routine takes the
//! slow, obvious route: series and continued fractions for the normal
//! distribution function, panel quadrature, direct DFTs and explicit loops
//! for the metrics. Grids are plain row-major `[n, c, h, w]` slices.

use std::f64::consts::PI;

/// A reference value with the method used and an error bound.
#[derive(Clone, Debug, PartialEq)]
pub struct OracleResult {
    pub value: f64,
    pub method: &'static str,
    /// Absolute error bound on `value`; always positive.
    pub error_bound: f64,
}

impl OracleResult {
    fn new(value: f64, method: &'static str, error_bound: f64) -> Self {
        Self { value, method, error_bound: error_bound.max(f64::MIN_POSITIVE) }
    }

    /// Whether `x` lies within `tol` of the value, widened by the bound.
    pub fn agrees(&self, x: f64, tol: f64) -> bool {
        (x - self.value).abs() <= tol + self.error_bound
    }
}

fn log_density(u: f64) -> f64 {
    -0.5 * u * u - 0.5 * (2.0 * PI).ln()
}

/// `Σ u^{2n+1} / (2n+1)!!`, so that `Φ(u) = ½ + φ(u)·S(u)`.
fn odd_series(u: f64) -> f64 {
    let (mut term, mut sum) = (u, u);
    let mut n = 1.0;
    while term.abs() > 1e-18 * sum.abs() {
        term *= u * u / (2.0 * n + 1.0);
        sum += term;
        n += 1.0;
    }
    sum
}

/// Mills ratio `(1 − Φ(x)) / φ(x)` for `x ≥ 2`, from the continued fraction
/// `1/(x + 1/(x + 2/(x + 3/(x + …))))` evaluated backwards from a deep tail.
fn mills_ratio(x: f64) -> f64 {
    let mut t = x;
    for k in (1..=4000).rev() {
        t = x + k as f64 / t;
    }
    1.0 / t
}

const SERIES_LIMIT: f64 = 3.0;

/// `ln Φ(u)` for `|u| ≤ 40`, relative error below 1e-12.
pub fn oracle_log_phi(u: f64) -> OracleResult {
    assert!(u.abs() <= 40.0, "oracle_log_phi defined on |u| ≤ 40");
    let (value, method) = if u < -SERIES_LIMIT {
        (log_density(u) + mills_ratio(-u).ln(), "mills continued fraction")
    } else if u > SERIES_LIMIT {
        ((-log_density(u).exp() * mills_ratio(u)).ln_1p(), "complement via mills continued fraction")
    } else {
        ((0.5 + log_density(u).exp() * odd_series(u)).ln(), "taylor series")
    };
    OracleResult::new(value, method, 1e-13 * value.abs())
}

/// `Φ(u)` from [`oracle_log_phi`].
pub fn oracle_phi(u: f64) -> f64 {
    oracle_log_phi(u).value.exp()
}

const GL_NODES: [f64; 5] = [0.0, -0.538_469_310_105_683_1, 0.538_469_310_105_683_1, -0.906_179_845_938_664, 0.906_179_845_938_664];
const GL_WEIGHTS: [f64; 5] = [
    0.568_888_888_888_888_9,
    0.478_628_670_499_366_5,
    0.478_628_670_499_366_5,
    0.236_926_885_056_189_1,
    0.236_926_885_056_189_1,
];

fn gauss_legendre(f: &dyn Fn(f64) -> f64, a: f64, b: f64) -> f64 {
    let (c, r) = (0.5 * (a + b), 0.5 * (b - a));
    GL_NODES.iter().zip(GL_WEIGHTS).map(|(x, w)| w * f(c + r * x)).sum::<f64>() * r
}

fn adapt(f: &dyn Fn(f64) -> f64, a: f64, b: f64, whole: f64, tol: f64, depth: usize) -> (f64, f64) {
    let m = 0.5 * (a + b);
    let (l, r) = (gauss_legendre(f, a, m), gauss_legendre(f, m, b));
    let err = (l + r - whole).abs();
    if err <= tol || depth == 0 {
        return (l + r, err);
    }
    let (li, le) = adapt(f, a, m, l, 0.5 * tol, depth - 1);
    let (ri, re) = adapt(f, m, b, r, 0.5 * tol, depth - 1);
    (li + ri, le + re)
}

/// Adaptive 5-point Gauss–Legendre quadrature of `f` on `[a, b]`. The end
/// points themselves are never evaluated.
pub fn integrate(f: &dyn Fn(f64) -> f64, a: f64, b: f64, tol: f64) -> OracleResult {
    assert!(a.is_finite() && b.is_finite() && a <= b, "finite ordered limits");
    if a == b {
        return OracleResult::new(0.0, "adaptive gauss-legendre", tol);
    }
    let panels = 64;
    let h = (b - a) / panels as f64;
    let (mut sum, mut err) = (0.0, 0.0);
    for i in 0..panels {
        let (lo, hi) = (a + i as f64 * h, a + (i + 1) as f64 * h);
        let (s, e) = adapt(f, lo, hi, gauss_legendre(f, lo, hi), tol / panels as f64, 40);
        sum += s;
        err += e;
    }
    OracleResult::new(sum, "adaptive gauss-legendre", err + 1e-15 * sum.abs())
}

/// Location, scale and bounds of a censored Gaussian.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CensoredParams {
    pub mu: f64,
    pub s: f64,
    pub lower: f64,
    pub upper: f64,
}

impl CensoredParams {
    /// Mass at each bound, `(Φ((l−μ)/s), Φ((μ−u)/s))`.
    pub fn bound_masses(&self) -> (f64, f64) {
        let lo = if self.lower.is_finite() { oracle_phi((self.lower - self.mu) / self.s) } else { 0.0 };
        let hi = if self.upper.is_finite() { oracle_phi((self.mu - self.upper) / self.s) } else { 0.0 };
        (lo, hi)
    }

    /// Finite integration range: the interior, cut at `μ ± 40s`.
    pub fn interior(&self) -> (f64, f64) {
        let reach = 40.0 * self.s;
        (self.lower.max(self.mu - reach), self.upper.min(self.mu + reach))
    }
}

/// Integral of the interior density of `density` plus the supplied bound
/// masses.
pub fn total_mass(density: &dyn Fn(f64) -> f64, p: CensoredParams, masses: (f64, f64)) -> OracleResult {
    let (a, b) = p.interior();
    let q = if a < b { integrate(density, a, b, 1e-13) } else { OracleResult::new(0.0, "", 1e-300) };
    OracleResult::new(q.value + masses.0 + masses.1, "quadrature plus bound masses", q.error_bound + 1e-14)
}

/// Normalisation of the censored Gaussian computed entirely by the oracle.
pub fn oracle_censored_normalization(p: CensoredParams) -> OracleResult {
    assert!(p.s.is_finite() && p.s > 0.0, "finite positive scale");
    let density = |x: f64| log_density((x - p.mu) / p.s).exp() / p.s;
    total_mass(&density, p, p.bound_masses())
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Probability-flow ODE for data `N(0, σ₀²)` under a variance-preserving
/// process: `z(γ) = z₀ √(α²σ₀² + σ²) / √(α₀²σ₀² + σ₀'²)` along a single
/// trajectory. Returns the state at `gamma_end` starting from `z_start`
/// at `gamma_start`.
pub fn oracle_gaussian_pf_ode(sigma0: f64, gamma_start: f64, gamma_end: f64, z_start: f64) -> OracleResult {
    assert!(sigma0 > 0.0, "σ₀ > 0");
    let spread = |g: f64| (sigmoid(g) * sigma0 * sigma0 + sigmoid(-g)).sqrt();
    let v = z_start * spread(gamma_end) / spread(gamma_start);
    OracleResult::new(v, "closed form", 1e-15 * v.abs())
}

/// Exponential moving average after `n` constant observations,
/// `c + (w₀ − c)·dⁿ`.
pub fn oracle_ema(w0: f64, c: f64, decay: f64, n: i32) -> OracleResult {
    let v = c + (w0 - c) * decay.powi(n);
    OracleResult::new(v, "geometric series", 1e-14 * (v.abs() + w0.abs()))
}

/// Mean and standard deviation with `ddof` degrees of freedom removed,
/// computed in two passes.
pub fn two_pass_mean_std(values: &[f64], ddof: usize) -> (f64, f64) {
    let n = values.len();
    assert!(n > ddof, "need more than {ddof} values");
    let mut mean = 0.0;
    for v in values {
        mean += v;
    }
    mean /= n as f64;
    let mut ss = 0.0;
    for v in values {
        ss += (v - mean) * (v - mean);
    }
    (mean, (ss / (n - ddof) as f64).sqrt())
}

/// Shape of a row-major `[n, c, h, w]` grid.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Dims {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
}

impl Dims {
    fn at(&self, n: usize, c: usize, r: usize, col: usize) -> usize {
        ((n * self.c + c) * self.h + r) * self.w + col
    }
}

/// `√(mean over valid values of (x−y)²/σ_c²)`.
pub fn normalized_rmse(x: &[f64], y: &[f64], d: Dims, mask: &[bool], stds: &[f64]) -> f64 {
    let (mut sum, mut count) = (0.0, 0usize);
    for n in 0..d.n {
        for c in 0..d.c {
            for r in 0..d.h {
                for col in 0..d.w {
                    if mask[r * d.w + col] {
                        let i = d.at(n, c, r, col);
                        sum += ((x[i] - y[i]) / stds[c]).powi(2);
                        count += 1;
                    }
                }
            }
        }
    }
    (sum / count as f64).sqrt()
}

/// Mean local SSIM over all 7×7 windows (clipped at the grid edge, land
/// removed) holding at least four valid points, pooled over samples and
/// channels.
pub fn ssim(x: &[f64], y: &[f64], d: Dims, mask: &[bool], ranges: &[f64]) -> f64 {
    let (mut total, mut windows) = (0.0, 0usize);
    for n in 0..d.n {
        for c in 0..d.c {
            let c1 = (0.01 * ranges[c]) * (0.01 * ranges[c]);
            let c2 = (0.03 * ranges[c]) * (0.03 * ranges[c]);
            for r in 0..d.h {
                for col in 0..d.w {
                    if !mask[r * d.w + col] {
                        continue;
                    }
                    let mut pts = vec![];
                    for rr in r as i64 - 3..=r as i64 + 3 {
                        for cc in col as i64 - 3..=col as i64 + 3 {
                            if rr >= 0 && cc >= 0 && (rr as usize) < d.h && (cc as usize) < d.w && mask[rr as usize * d.w + cc as usize] {
                                let i = d.at(n, c, rr as usize, cc as usize);
                                pts.push((x[i], y[i]));
                            }
                        }
                    }
                    if pts.len() < 4 {
                        continue;
                    }
                    let m = pts.len() as f64;
                    let mx = pts.iter().map(|p| p.0).sum::<f64>() / m;
                    let my = pts.iter().map(|p| p.1).sum::<f64>() / m;
                    let vx = pts.iter().map(|p| (p.0 - mx).powi(2)).sum::<f64>() / m;
                    let vy = pts.iter().map(|p| (p.1 - my).powi(2)).sum::<f64>() / m;
                    let cxy = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum::<f64>() / m;
                    total += (2.0 * mx * my + c1) * (2.0 * cxy + c2) / ((mx * mx + my * my + c1) * (vx + vy + c2));
                    windows += 1;
                }
            }
        }
    }
    total / windows as f64
}

/// Fraction of valid points whose channel-0 extents (`≥ threshold`) agree.
pub fn acc_sie(x: &[f64], y: &[f64], d: Dims, mask: &[bool], threshold: f64) -> f64 {
    let (mut agree, mut count) = (0usize, 0usize);
    for n in 0..d.n {
        for r in 0..d.h {
            for col in 0..d.w {
                if mask[r * d.w + col] {
                    let i = d.at(n, 0, r, col);
                    agree += usize::from((x[i] >= threshold) == (y[i] >= threshold));
                    count += 1;
                }
            }
        }
    }
    agree as f64 / count as f64
}

fn coverage(x: &[f64], d: Dims, threshold: f64) -> Vec<f64> {
    (0..d.h * d.w)
        .map(|l| (0..d.n).filter(|&n| x[d.at(n, 0, l / d.w, l % d.w)] >= threshold).count() as f64 / d.n as f64)
        .collect()
}

/// RMSE over valid points between the channel-0 extent frequencies of two
/// sets.
pub fn rmse_sie(a: &[f64], da: Dims, b: &[f64], db: Dims, mask: &[bool], threshold: f64) -> f64 {
    let (pa, pb) = (coverage(a, da, threshold), coverage(b, db, threshold));
    let valid: Vec<usize> = (0..mask.len()).filter(|&l| mask[l]).collect();
    (valid.iter().map(|&l| (pa[l] - pb[l]).powi(2)).sum::<f64>() / valid.len() as f64).sqrt()
}

/// Squared distance between per-coordinate means and sample standard
/// deviations of two feature sets over valid points.
pub fn faed(a: &[f64], da: Dims, b: &[f64], db: Dims, mask: &[bool]) -> f64 {
    let mut total = 0.0;
    for c in 0..da.c {
        for l in 0..da.h * da.w {
            if !mask[l] {
                continue;
            }
            let va: Vec<f64> = (0..da.n).map(|n| a[da.at(n, c, l / da.w, l % da.w)]).collect();
            let vb: Vec<f64> = (0..db.n).map(|n| b[db.at(n, c, l / db.w, l % db.w)]).collect();
            let (ma, sa) = two_pass_mean_std(&va, 1);
            let (mb, sb) = two_pass_mean_std(&vb, 1);
            total += (ma - mb).powi(2) + (sa - sb).powi(2);
        }
    }
    total
}

/// Radially averaged power spectrum of a square `s × s` plane by direct
/// DFT: mean-removed, `|X|²/s⁴`, annulus `round(|κ|)` for `1..=s/2`, mean
/// power per coefficient. Returns `(density, counts, total power)`.
pub fn radial_psd(plane: &[f64], s: usize) -> (Vec<f64>, Vec<usize>, f64) {
    let mean = plane.iter().sum::<f64>() / (s * s) as f64;
    let signed = |k: usize| if k <= s / 2 { k as f64 } else { k as f64 - s as f64 };
    let bins = s / 2;
    let (mut power, mut counts, mut total) = (vec![0.0; bins], vec![0usize; bins], 0.0);
    for ky in 0..s {
        for kx in 0..s {
            let (mut re, mut im) = (0.0, 0.0);
            for y in 0..s {
                for x in 0..s {
                    let phase = -2.0 * PI * ((ky * y) as f64 / s as f64 + (kx * x) as f64 / s as f64);
                    let v = plane[y * s + x] - mean;
                    re += v * phase.cos();
                    im += v * phase.sin();
                }
            }
            let p = (re * re + im * im) / ((s * s) as f64).powi(2);
            total += p;
            let b = (signed(ky).powi(2) + signed(kx).powi(2)).sqrt().round() as usize;
            if (1..=bins).contains(&b) {
                power[b - 1] += p;
                counts[b - 1] += 1;
            }
        }
    }
    let density = power.iter().zip(&counts).map(|(p, &c)| if c > 0 { p / c as f64 } else { 0.0 }).collect();
    (density, counts, total)
}
