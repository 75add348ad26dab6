//! Field containers, land masks, per-channel bounds and normalisation.

mod fgrd;
mod synthetic;

pub use fgrd::{load_fgrd, read_fgrd, save_fgrd, write_fgrd};
pub use synthetic::{default_channels, generate_splits, generate_synthetic, generate_synthetic_with, SyntheticConfig};

use crate::error::{shape_err, Error, Result};
use crate::tensor::Tensor;
use serde::{Deserialize, Serialize};

/// Canonical channel names of the five-variable layout.
pub const CHANNEL_NAMES: [&str; 5] = ["thickness", "concentration", "velocity_u", "velocity_v", "damage"];

/// Name, physical bounds and normalisation statistics of one channel, all in
/// data units. Infinite bounds mean "unbounded on that side".
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ChannelSpec {
    pub name: String,
    #[serde(with = "bound_serde")]
    pub lower: f64,
    #[serde(with = "bound_serde")]
    pub upper: f64,
    pub mean: f64,
    pub std: f64,
    /// Max minus min over the training split.
    pub range: f64,
}

impl ChannelSpec {
    /// Unfitted spec: zero mean, unit std and range.
    pub fn new(name: impl Into<String>, lower: f64, upper: f64) -> Result<Self> {
        if !(lower < upper) {
            return Err(Error::InvalidArgument(format!("bounds [{lower}, {upper}] are not ordered")));
        }
        Ok(Self { name: name.into(), lower, upper, mean: 0.0, std: 1.0, range: 1.0 })
    }

    pub fn is_bounded(&self) -> bool {
        self.lower.is_finite() || self.upper.is_finite()
    }

    pub fn normalize_value(&self, x: f64) -> f64 {
        (x - self.mean) / self.std
    }

    pub fn denormalize_value(&self, y: f64) -> f64 {
        y * self.std + self.mean
    }

    /// Bounds mapped through the same affine transform as the data.
    pub fn normalized_bounds(&self) -> (f64, f64) {
        let map = |b: f64| if b.is_finite() { self.normalize_value(b) } else { b };
        (map(self.lower), map(self.upper))
    }
}

/// JSON has no infinities; unbounded sides are written as `"inf"`/`"-inf"`.
mod bound_serde {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &f64, s: S) -> Result<S::Ok, S::Error> {
        if v.is_infinite() {
            s.serialize_str(if *v > 0.0 { "inf" } else { "-inf" })
        } else {
            s.serialize_f64(*v)
        }
    }

    #[derive(Deserialize)]
    #[serde(untagged)]
    enum Repr {
        Num(f64),
        Text(String),
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
        match Repr::deserialize(d)? {
            Repr::Num(v) => Ok(v),
            Repr::Text(t) if t == "inf" => Ok(f64::INFINITY),
            Repr::Text(t) if t == "-inf" => Ok(f64::NEG_INFINITY),
            Repr::Text(t) => Err(serde::de::Error::custom(format!("invalid bound `{t}`"))),
        }
    }
}

/// Binary validity grid, `true` for ocean.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct Mask {
    height: usize,
    width: usize,
    valid: Vec<bool>,
}

impl Mask {
    pub fn new(height: usize, width: usize, valid: Vec<bool>) -> Result<Self> {
        if valid.len() != height * width {
            return Err(shape_err("mask", format!("{height}x{width} needs {} cells, got {}", height * width, valid.len())));
        }
        Ok(Self { height, width, valid })
    }

    pub fn all_valid(height: usize, width: usize) -> Self {
        Self { height, width, valid: vec![true; height * width] }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn cells(&self) -> &[bool] {
        &self.valid
    }

    pub fn is_valid(&self, i: usize) -> bool {
        self.valid[i]
    }

    pub fn count_valid(&self) -> usize {
        self.valid.iter().filter(|&&v| v).count()
    }

    /// Mask as a `[1, 1, H, W]` tensor of zeros and ones.
    pub fn to_tensor(&self) -> Tensor {
        let data = self.valid.iter().map(|&v| if v { 1.0 } else { 0.0 }).collect();
        Tensor::new([1, 1, self.height, self.width], data).expect("mask shape")
    }

    /// 2×2 max pooling: a coarse cell is valid when any fine cell is.
    pub fn downsample(&self) -> Result<Self> {
        if self.height % 2 != 0 || self.width % 2 != 0 {
            return Err(shape_err("mask_downsample", format!("odd grid {}x{}", self.height, self.width)));
        }
        let fine: Vec<f64> = self.valid.iter().map(|&v| if v { 1.0 } else { 0.0 }).collect();
        let coarse = crate::autodiff::kernels::max_pool2(&fine, self.height, self.width);
        Self::new(self.height / 2, self.width / 2, coarse.into_iter().map(|v| v > 0.0).collect())
    }
}

/// `N` multichannel samples on a shared grid.
#[derive(Clone, Debug, PartialEq)]
pub struct FieldBatch {
    data: Tensor,
    mask: Mask,
    channels: Vec<ChannelSpec>,
    normalized: bool,
}

impl FieldBatch {
    /// Builds a batch in data units. Land values are zeroed and valid
    /// values must respect their channel bounds.
    pub fn new(data: Tensor, mask: Mask, channels: Vec<ChannelSpec>) -> Result<Self> {
        Self::build(data, mask, channels, false, true)
    }

    /// Like [`FieldBatch::new`] but only requires finite values, for model
    /// output that is not clipped to physical bounds.
    pub fn unclipped(data: Tensor, mask: Mask, channels: Vec<ChannelSpec>) -> Result<Self> {
        Self::build(data, mask, channels, false, false)
    }

    fn build(mut data: Tensor, mask: Mask, channels: Vec<ChannelSpec>, normalized: bool, strict: bool) -> Result<Self> {
        let [_, k, h, w] = data.dims4()?;
        if k != channels.len() {
            return Err(shape_err("field_batch", format!("{k} data channels, {} specs", channels.len())));
        }
        if (h, w) != (mask.height, mask.width) {
            return Err(shape_err("field_batch", format!("grid {h}x{w}, mask {}x{}", mask.height, mask.width)));
        }
        let plane = h * w;
        for (p, chunk) in data.data_mut().chunks_mut(plane).enumerate() {
            let spec = &channels[p % k];
            let (lo, hi) = if normalized { spec.normalized_bounds() } else { (spec.lower, spec.upper) };
            for (v, &ok) in chunk.iter_mut().zip(&mask.valid) {
                if !ok {
                    *v = 0.0;
                } else if !v.is_finite() {
                    return Err(Error::NonFinite(format!("{} value {v} (sample {})", spec.name, p / k)));
                } else if strict && !(*v >= lo && *v <= hi) {
                    return Err(Error::OutOfBounds(format!(
                        "{} value {v} outside [{lo}, {hi}] (sample {})",
                        spec.name,
                        p / k
                    )));
                }
            }
        }
        Ok(Self { data, mask, channels, normalized })
    }

    pub fn data(&self) -> &Tensor {
        &self.data
    }

    /// Whether every valid value lies inside its channel bounds.
    pub fn within_bounds(&self) -> bool {
        let plane = self.mask.height * self.mask.width;
        let k = self.channels.len();
        self.data.data().chunks(plane).enumerate().all(|(p, chunk)| {
            let spec = &self.channels[p % k];
            let (lo, hi) = if self.normalized { spec.normalized_bounds() } else { (spec.lower, spec.upper) };
            chunk.iter().zip(&self.mask.valid).all(|(v, &ok)| !ok || (*v >= lo && *v <= hi))
        })
    }

    pub fn into_data(self) -> Tensor {
        self.data
    }

    pub fn mask(&self) -> &Mask {
        &self.mask
    }

    pub fn channels(&self) -> &[ChannelSpec] {
        &self.channels
    }

    pub fn is_normalized(&self) -> bool {
        self.normalized
    }

    pub fn len(&self) -> usize {
        self.data.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn num_channels(&self) -> usize {
        self.channels.len()
    }

    pub fn height(&self) -> usize {
        self.mask.height
    }

    pub fn width(&self) -> usize {
        self.mask.width
    }

    /// Same data with different (e.g. fitted) specs attached.
    pub fn with_channels(self, channels: Vec<ChannelSpec>) -> Result<Self> {
        Self::build(self.data, self.mask, channels, self.normalized, false)
    }

    /// Samples at `indices`, in that order.
    pub fn select(&self, indices: &[usize]) -> Result<Self> {
        Ok(Self {
            data: self.data.select(indices)?,
            mask: self.mask.clone(),
            channels: self.channels.clone(),
            normalized: self.normalized,
        })
    }

    /// Value at sample `n`, channel `k`, cell `l`.
    pub fn at(&self, n: usize, k: usize, l: usize) -> f64 {
        let plane = self.mask.height * self.mask.width;
        self.data.data()[(n * self.channels.len() + k) * plane + l]
    }
}

/// Train/validation/test splits sharing one mask and one set of specs.
#[derive(Clone, Debug, PartialEq)]
pub struct DatasetSplits {
    pub train: FieldBatch,
    pub valid: FieldBatch,
    pub test: FieldBatch,
}

/// Per-channel mean, std and range over valid points of `train`.
pub fn fit_normalization(train: &FieldBatch) -> Result<Vec<ChannelSpec>> {
    if train.is_empty() {
        return Err(Error::Degenerate("empty training batch".into()));
    }
    if train.mask.count_valid() == 0 {
        return Err(Error::Degenerate("mask has no valid points".into()));
    }
    if train.normalized {
        return Err(Error::InvalidArgument("statistics must be fitted in data units".into()));
    }
    let k = train.num_channels();
    let plane = train.height() * train.width();
    let mut specs = train.channels.clone();
    for (c, spec) in specs.iter_mut().enumerate() {
        let values = || {
            train
                .data
                .data()
                .chunks(plane)
                .skip(c)
                .step_by(k)
                .flat_map(|p| p.iter().zip(&train.mask.valid).filter(|(_, &ok)| ok).map(|(&v, _)| v))
        };
        let count = values().count() as f64;
        let mean = values().sum::<f64>() / count;
        let var = values().map(|v| (v - mean) * (v - mean)).sum::<f64>() / count;
        let (lo, hi) = values().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), v| (a.min(v), b.max(v)));
        if !(var > 0.0) {
            return Err(Error::Degenerate(format!("channel `{}` has zero variance", spec.name)));
        }
        spec.mean = mean;
        spec.std = var.sqrt();
        spec.range = hi - lo;
    }
    Ok(specs)
}

fn check_specs(batch: &FieldBatch, specs: &[ChannelSpec]) -> Result<()> {
    if specs.len() != batch.num_channels() {
        return Err(shape_err("normalize", format!("{} specs for {} channels", specs.len(), batch.num_channels())));
    }
    Ok(())
}

/// Maps valid points to `(x − mean) / std`; land stays 0.
pub fn normalize(batch: &FieldBatch, specs: &[ChannelSpec]) -> Result<FieldBatch> {
    check_specs(batch, specs)?;
    if batch.normalized {
        return Err(Error::InvalidArgument("batch is already normalised".into()));
    }
    let data = map_channels(batch, specs, ChannelSpec::normalize_value)?;
    FieldBatch::build(data, batch.mask.clone(), specs.to_vec(), true, false)
}

/// Inverse of [`normalize`].
pub fn denormalize(batch: &FieldBatch, specs: &[ChannelSpec]) -> Result<FieldBatch> {
    check_specs(batch, specs)?;
    if !batch.normalized {
        return Err(Error::InvalidArgument("batch is not normalised".into()));
    }
    let data = map_channels(batch, specs, ChannelSpec::denormalize_value)?;
    FieldBatch::build(data, batch.mask.clone(), specs.to_vec(), false, false)
}

/// Wraps normalised values as a batch; only finiteness is checked.
pub fn normalized_batch(data: Tensor, mask: Mask, specs: Vec<ChannelSpec>) -> Result<FieldBatch> {
    FieldBatch::build(data, mask, specs, true, false)
}

fn map_channels(batch: &FieldBatch, specs: &[ChannelSpec], f: fn(&ChannelSpec, f64) -> f64) -> Result<Tensor> {
    let k = specs.len();
    let plane = batch.height() * batch.width();
    let mut out = batch.data.clone();
    for (p, chunk) in out.data_mut().chunks_mut(plane).enumerate() {
        let spec = &specs[p % k];
        for (v, &ok) in chunk.iter_mut().zip(&batch.mask.valid) {
            *v = if ok { f(spec, *v) } else { 0.0 };
        }
    }
    Ok(out)
}

/// Clips a data-unit tensor `[N, K, H, W]` into channel bounds and zeroes land.
pub fn clip_and_mask(data: &mut Tensor, mask: &Mask, specs: &[ChannelSpec]) {
    let k = specs.len();
    let plane = mask.height * mask.width;
    for (p, chunk) in data.data_mut().chunks_mut(plane).enumerate() {
        let spec = &specs[p % k];
        for (v, &ok) in chunk.iter_mut().zip(&mask.valid) {
            *v = if ok { v.max(spec.lower).min(spec.upper) } else { 0.0 };
        }
    }
}

/// Zeroes land points of a `[N, K, H, W]` tensor in place.
pub fn apply_mask(data: &mut Tensor, mask: &Mask) {
    let plane = mask.height * mask.width;
    for chunk in data.data_mut().chunks_mut(plane) {
        for (v, &ok) in chunk.iter_mut().zip(&mask.valid) {
            if !ok {
                *v = 0.0;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn unbounded(k: usize) -> Vec<ChannelSpec> {
        (0..k).map(|i| ChannelSpec::new(format!("c{i}"), f64::NEG_INFINITY, f64::INFINITY).unwrap()).collect()
    }

    #[test]
    fn two_valued_channel_stats() {
        let data = Tensor::new([2, 1, 1, 2], vec![0.0, 2.0, 2.0, 0.0]).unwrap();
        let b = FieldBatch::new(data, Mask::all_valid(1, 2), unbounded(1)).unwrap();
        let s = &fit_normalization(&b).unwrap()[0];
        assert_eq!((s.mean, s.std, s.range), (1.0, 1.0, 2.0));
    }

    #[test]
    fn constant_channel_is_degenerate() {
        let data = Tensor::full([3, 1, 2, 2], 4.0);
        let b = FieldBatch::new(data, Mask::all_valid(2, 2), unbounded(1)).unwrap();
        assert!(matches!(fit_normalization(&b), Err(Error::Degenerate(_))));
    }

    #[test]
    fn all_land_is_degenerate() {
        let mask = Mask::new(2, 2, vec![false; 4]).unwrap();
        let b = FieldBatch::new(Tensor::zeros([1, 1, 2, 2]), mask, unbounded(1)).unwrap();
        assert!(matches!(fit_normalization(&b), Err(Error::Degenerate(_))));
    }

    #[test]
    fn land_values_are_zeroed_and_ignored() {
        let mask = Mask::new(1, 3, vec![true, true, false]).unwrap();
        let a = FieldBatch::new(Tensor::new([1, 1, 1, 3], vec![1.0, 3.0, 0.0]).unwrap(), mask.clone(), unbounded(1)).unwrap();
        let b = FieldBatch::new(Tensor::new([1, 1, 1, 3], vec![1.0, 3.0, 99.0]).unwrap(), mask, unbounded(1)).unwrap();
        assert_eq!(a, b);
        assert_eq!(fit_normalization(&a).unwrap(), fit_normalization(&b).unwrap());
    }

    #[test]
    fn normalize_landmarks_and_roundtrip() {
        let mut spec = ChannelSpec::new("x", 0.0, f64::INFINITY).unwrap();
        spec.mean = 2.0;
        spec.std = 0.5;
        let data = Tensor::new([1, 1, 1, 3], vec![2.0, 2.5, 0.0]).unwrap();
        let b = FieldBatch::new(data.clone(), Mask::all_valid(1, 3), vec![spec.clone()]).unwrap();
        let n = normalize(&b, &[spec.clone()]).unwrap();
        assert_eq!(n.data().data(), &[0.0, 1.0, -4.0]);
        assert_eq!(n.data().data()[2], spec.normalized_bounds().0);
        let back = denormalize(&n, &[spec]).unwrap();
        assert!(back.data().max_abs_diff(&data) < 1e-12);
    }

    #[test]
    fn channel_count_mismatch() {
        let b = FieldBatch::new(Tensor::zeros([1, 2, 1, 1]), Mask::all_valid(1, 1), unbounded(2)).unwrap();
        assert!(normalize(&b, &unbounded(3)).is_err());
    }

    #[test]
    fn out_of_bounds_rejected() {
        let spec = ChannelSpec::new("c", 0.0, 1.0).unwrap();
        let r = FieldBatch::new(Tensor::full([1, 1, 1, 1], 1.5), Mask::all_valid(1, 1), vec![spec]);
        assert!(matches!(r, Err(Error::OutOfBounds(_))));
    }

    #[test]
    fn mask_downsample_cases() {
        let none = Mask::new(2, 2, vec![false; 4]).unwrap();
        assert_eq!(none.downsample().unwrap().count_valid(), 0);
        let one = Mask::new(2, 2, vec![false, false, true, false]).unwrap();
        assert_eq!(one.downsample().unwrap().cells(), &[true]);
        assert!(Mask::all_valid(3, 2).downsample().is_err());
    }

    #[test]
    fn specs_roundtrip_through_json() {
        let specs = default_channels();
        let json = serde_json::to_string(&specs).unwrap();
        let back: Vec<ChannelSpec> = serde_json::from_str(&json).unwrap();
        assert_eq!(specs, back);
    }
}
