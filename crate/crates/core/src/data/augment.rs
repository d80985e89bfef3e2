//! Stochastic two-view augmentation.
//!
//! Images go through random resized crop, color jitter, grayscale, Gaussian
//! blur and horizontal flip, are clamped to `[0, 1]`, then normalized per
//! channel. Abstract feature vectors get additive Gaussian noise and
//! coordinate dropout instead, since geometric ops have no meaning there.

use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{Dataset, Image};
use crate::error::{Error, Result};
use crate::rng::SeededRng;

/// Luma weights used by the grayscale conversion.
const LUMA: [f64; 3] = [0.299, 0.587, 0.114];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AugmentPolicy {
    /// Crop area as a fraction of the source area.
    pub crop_scale: [f64; 2],
    /// Crop width/height ratio range.
    pub crop_aspect: [f64; 2],
    pub brightness: f64,
    pub contrast: f64,
    pub saturation: f64,
    pub hue: f64,
    pub jitter_prob: f64,
    pub grayscale_prob: f64,
    pub blur_prob: f64,
    pub blur_sigma: [f64; 2],
    pub flip_prob: f64,
    /// Filled from the training split, never from the config file.
    #[serde(skip)]
    pub channel_mean: Vec<f64>,
    #[serde(skip)]
    pub channel_std: Vec<f64>,
}

impl Default for AugmentPolicy {
    fn default() -> Self {
        Self {
            crop_scale: [0.2, 1.0],
            crop_aspect: [3.0 / 4.0, 4.0 / 3.0],
            brightness: 0.4,
            contrast: 0.4,
            saturation: 0.4,
            hue: 0.1,
            jitter_prob: 0.8,
            grayscale_prob: 0.2,
            blur_prob: 0.5,
            blur_sigma: [0.1, 2.0],
            flip_prob: 0.5,
            channel_mean: Vec::new(),
            channel_std: Vec::new(),
        }
    }
}

impl AugmentPolicy {
    /// Every stochastic branch off, crop fixed to the full frame.
    pub fn identity(channels: usize) -> Self {
        Self {
            crop_scale: [1.0, 1.0],
            crop_aspect: [1.0, 1.0],
            jitter_prob: 0.0,
            grayscale_prob: 0.0,
            blur_prob: 0.0,
            flip_prob: 0.0,
            channel_mean: vec![0.0; channels],
            channel_std: vec![1.0; channels],
            ..Self::default()
        }
    }

    pub fn with_stats(mut self, normalizer: &Normalizer) -> Self {
        self.channel_mean = normalizer.mean.clone();
        self.channel_std = normalizer.std.clone();
        self
    }

    pub fn validate(&self) -> Result<()> {
        let probs = [self.jitter_prob, self.grayscale_prob, self.blur_prob, self.flip_prob];
        let bad = |m: String| Err(Error::ConfigInvalid(m));
        if probs.iter().any(|p| !(0.0..=1.0).contains(p)) {
            return bad(format!("augmentation probabilities must lie in [0, 1]: {probs:?}"));
        }
        for (name, r) in
            [("crop_scale", self.crop_scale), ("crop_aspect", self.crop_aspect), ("blur_sigma", self.blur_sigma)]
        {
            if !(r[0] > 0.0 && r[0] <= r[1] && r[1].is_finite()) {
                return bad(format!("{name} must be a non-empty positive range, got {r:?}"));
            }
        }
        if self.crop_scale[1] > 1.0 {
            return bad(format!("crop_scale upper bound above 1: {:?}", self.crop_scale));
        }
        for (name, s) in [("brightness", self.brightness), ("contrast", self.contrast), ("saturation", self.saturation)]
        {
            if !(0.0..=1.0).contains(&s) {
                return bad(format!("{name} strength must lie in [0, 1], got {s}"));
            }
        }
        if !(0.0..=0.5).contains(&self.hue) {
            return bad(format!("hue strength must lie in [0, 0.5], got {}", self.hue));
        }
        Ok(())
    }

    fn normalizer(&self) -> Normalizer {
        Normalizer { mean: self.channel_mean.clone(), std: self.channel_std.clone(), per_channel: true }
    }
}

/// Which branches fired in one [`augment_view_traced`] call.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct AugmentTrace {
    /// `(top, left, height, width)` of the crop window.
    pub crop: (usize, usize, usize, usize),
    pub jittered: bool,
    pub grayscale: bool,
    pub blurred: bool,
    pub flipped: bool,
}

/// `(x - mean) / std`, per channel or per flattened coordinate.
#[derive(Debug, Clone, PartialEq)]
pub struct Normalizer {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
    pub per_channel: bool,
}

impl Normalizer {
    fn from_sums(sum: Vec<f64>, sq: Vec<f64>, count: f64, per_channel: bool) -> Self {
        let mean: Vec<f64> = sum.iter().map(|s| s / count).collect();
        let std = sq
            .iter()
            .zip(&mean)
            .map(|(q, m)| {
                let var = (q / count - m * m).max(0.0);
                let s = var.sqrt();
                if s > 1e-12 {
                    s
                } else {
                    1.0
                }
            })
            .collect();
        Self { mean, std, per_channel }
    }

    /// Channel statistics over every pixel of `dataset`.
    pub fn per_channel(dataset: &Dataset) -> Result<Self> {
        let (_, _, c) = dataset.image_shape().ok_or(Error::EmptyInput)?;
        let mut sum = vec![0.0; c];
        let mut sq = vec![0.0; c];
        let mut count = 0.0;
        for it in &dataset.items {
            for px in it.image.as_slice().chunks_exact(c) {
                for (k, v) in px.iter().enumerate() {
                    sum[k] += v;
                    sq[k] += v * v;
                }
                count += 1.0;
            }
        }
        Ok(Self::from_sums(sum, sq, count, true))
    }

    /// Zero mean, unit variance for every flattened coordinate.
    pub fn per_coordinate(dataset: &Dataset) -> Result<Self> {
        let f = dataset.feature_len();
        if dataset.is_empty() {
            return Err(Error::EmptyInput);
        }
        let mut sum = vec![0.0; f];
        let mut sq = vec![0.0; f];
        for it in &dataset.items {
            for (k, v) in it.image.as_slice().iter().enumerate() {
                sum[k] += v;
                sq[k] += v * v;
            }
        }
        Ok(Self::from_sums(sum, sq, dataset.len() as f64, false))
    }

    pub fn apply(&self, image: &mut Image) -> Result<()> {
        let groups = if self.per_channel { image.channels() } else { image.len() };
        if self.mean.len() != groups || self.std.len() != groups {
            return Err(Error::DimensionMismatch { expected: groups, got: self.mean.len() });
        }
        for (i, v) in image.as_mut_slice().iter_mut().enumerate() {
            let g = i % groups;
            *v = (*v - self.mean[g]) / self.std[g];
        }
        Ok(())
    }
}

fn check_image(image: &Image) -> Result<()> {
    if let Some(v) = image.as_slice().iter().find(|v| !(0.0..=1.0).contains(*v)) {
        return Err(Error::InvalidImage(format!("pixel value {v} outside [0, 1]")));
    }
    Ok(())
}

/// One augmented, normalized view.
pub fn augment_view(image: &Image, policy: &AugmentPolicy, rng: &mut SeededRng) -> Result<Image> {
    augment_view_traced(image, policy, rng).map(|(img, _)| img)
}

/// Two independent views drawn from the same stream, first view first.
pub fn two_views(image: &Image, policy: &AugmentPolicy, rng: &mut SeededRng) -> Result<(Image, Image)> {
    let a = augment_view(image, policy, rng)?;
    let b = augment_view(image, policy, rng)?;
    Ok((a, b))
}

pub fn augment_view_traced(
    image: &Image,
    policy: &AugmentPolicy,
    rng: &mut SeededRng,
) -> Result<(Image, AugmentTrace)> {
    check_image(image)?;
    policy.validate()?;
    let mut trace = AugmentTrace::default();

    let (top, left, h, w) = crop_window(image.height(), image.width(), policy, rng);
    trace.crop = (top, left, h, w);
    let mut img = resized_crop(image, top, left, h, w);

    trace.jittered = rng.bernoulli(policy.jitter_prob);
    if trace.jittered {
        color_jitter(&mut img, policy, rng);
    }
    trace.grayscale = rng.bernoulli(policy.grayscale_prob);
    if trace.grayscale {
        grayscale(&mut img);
    }
    trace.blurred = rng.bernoulli(policy.blur_prob);
    if trace.blurred {
        let sigma = rng.uniform_range(policy.blur_sigma[0], policy.blur_sigma[1]);
        gaussian_blur(&mut img, sigma);
    }
    trace.flipped = rng.bernoulli(policy.flip_prob);
    if trace.flipped {
        hflip(&mut img);
    }
    img.as_mut_slice().iter_mut().for_each(|v| *v = v.clamp(0.0, 1.0));
    policy.normalizer().apply(&mut img)?;
    Ok((img, trace))
}

fn crop_window(
    height: usize,
    width: usize,
    policy: &AugmentPolicy,
    rng: &mut SeededRng,
) -> (usize, usize, usize, usize) {
    let area = (height * width) as f64;
    let (log_lo, log_hi) = (policy.crop_aspect[0].ln(), policy.crop_aspect[1].ln());
    for _ in 0..10 {
        let target = area * rng.uniform_range(policy.crop_scale[0], policy.crop_scale[1]);
        let aspect = rng.uniform_range(log_lo, log_hi).exp();
        let w = (target * aspect).sqrt().round() as usize;
        let h = (target / aspect).sqrt().round() as usize;
        if w > 0 && w <= width && h > 0 && h <= height {
            let top = rng.below(height - h + 1);
            let left = rng.below(width - w + 1);
            return (top, left, h, w);
        }
    }
    // center crop at the nearest admissible aspect ratio
    let ratio = width as f64 / height as f64;
    let (h, w) = if ratio < policy.crop_aspect[0] {
        (((width as f64 / policy.crop_aspect[0]).round() as usize).clamp(1, height), width)
    } else if ratio > policy.crop_aspect[1] {
        (height, ((height as f64 * policy.crop_aspect[1]).round() as usize).clamp(1, width))
    } else {
        (height, width)
    };
    ((height - h) / 2, (width - w) / 2, h, w)
}

/// Bilinear resize of the crop window back to the source size
/// (half-pixel centers, no antialiasing).
fn resized_crop(image: &Image, top: usize, left: usize, h: usize, w: usize) -> Image {
    let (oh, ow, c) = image.shape();
    let mut out = Image::new(oh, ow, c, vec![0.0; oh * ow * c]).expect("source shape is valid");
    let sy = h as f64 / oh as f64;
    let sx = w as f64 / ow as f64;
    for y in 0..oh {
        let fy = ((y as f64 + 0.5) * sy - 0.5).clamp(0.0, (h - 1) as f64);
        let y0 = fy.floor() as usize;
        let y1 = (y0 + 1).min(h - 1);
        let wy = fy - y0 as f64;
        for x in 0..ow {
            let fx = ((x as f64 + 0.5) * sx - 0.5).clamp(0.0, (w - 1) as f64);
            let x0 = fx.floor() as usize;
            let x1 = (x0 + 1).min(w - 1);
            let wx = fx - x0 as f64;
            for ch in 0..c {
                let p = |yy: usize, xx: usize| image.get(top + yy, left + xx, ch);
                let v = if wy == 0.0 && wx == 0.0 {
                    p(y0, x0)
                } else {
                    let a = p(y0, x0) * (1.0 - wx) + p(y0, x1) * wx;
                    let b = p(y1, x0) * (1.0 - wx) + p(y1, x1) * wx;
                    a * (1.0 - wy) + b * wy
                };
                out.set(y, x, ch, v);
            }
        }
    }
    out
}

fn luma(px: &[f64]) -> f64 {
    LUMA[0] * px[0] + LUMA[1] * px[1] + LUMA[2] * px[2]
}

fn grayscale(img: &mut Image) {
    if img.channels() != 3 {
        return;
    }
    for px in img.as_mut_slice().chunks_exact_mut(3) {
        let l = luma(px);
        px.fill(l);
    }
}

fn blend(img: &mut Image, factor: f64, other: impl Fn(usize, &[f64]) -> f64) {
    let c = img.channels();
    for (p, px) in img.as_mut_slice().chunks_exact_mut(c).enumerate() {
        let o = other(p, px);
        for v in px.iter_mut() {
            *v = (factor * *v + (1.0 - factor) * o).clamp(0.0, 1.0);
        }
    }
}

/// Brightness, contrast, saturation and hue adjustments in a random order,
/// each with a factor drawn from its strength range.
fn color_jitter(img: &mut Image, policy: &AugmentPolicy, rng: &mut SeededRng) {
    let order = rng.permutation(4);
    let factor = |rng: &mut SeededRng, s: f64| rng.uniform_range(1.0 - s, 1.0 + s);
    for op in order {
        match op {
            0 => {
                let b = factor(rng, policy.brightness);
                img.as_mut_slice().iter_mut().for_each(|v| *v = (*v * b).clamp(0.0, 1.0));
            }
            1 => {
                let f = factor(rng, policy.contrast);
                let mean = if img.channels() == 3 {
                    img.as_slice().chunks_exact(3).map(luma).sum::<f64>() / (img.len() / 3) as f64
                } else {
                    img.as_slice().iter().sum::<f64>() / img.len() as f64
                };
                blend(img, f, |_, _| mean);
            }
            2 => {
                let f = factor(rng, policy.saturation);
                if img.channels() == 3 {
                    blend(img, f, |_, px| luma(px));
                }
            }
            _ => {
                let shift = rng.uniform_range(-policy.hue, policy.hue);
                if img.channels() == 3 {
                    for px in img.as_mut_slice().chunks_exact_mut(3) {
                        let (h, s, v) = rgb_to_hsv(px[0], px[1], px[2]);
                        let (r, g, b) = hsv_to_rgb((h + shift).rem_euclid(1.0), s, v);
                        px.copy_from_slice(&[r, g, b]);
                    }
                }
            }
        }
    }
}

fn rgb_to_hsv(r: f64, g: f64, b: f64) -> (f64, f64, f64) {
    let max = r.max(g).max(b);
    let min = r.min(g).min(b);
    let delta = max - min;
    let s = if max > 0.0 { delta / max } else { 0.0 };
    let h = if delta == 0.0 {
        0.0
    } else if max == r {
        ((g - b) / delta).rem_euclid(6.0) / 6.0
    } else if max == g {
        ((b - r) / delta + 2.0) / 6.0
    } else {
        ((r - g) / delta + 4.0) / 6.0
    };
    (h, s, max)
}

fn hsv_to_rgb(h: f64, s: f64, v: f64) -> (f64, f64, f64) {
    let h6 = h * 6.0;
    let sector = (h6.floor() as i64).rem_euclid(6);
    let f = h6 - h6.floor();
    let p = v * (1.0 - s);
    let q = v * (1.0 - s * f);
    let t = v * (1.0 - s * (1.0 - f));
    match sector {
        0 => (v, t, p),
        1 => (q, v, p),
        2 => (p, v, t),
        3 => (p, q, v),
        4 => (t, p, v),
        _ => (v, p, q),
    }
}

/// Mirror index into `[0, n)` without repeating the edge sample.
fn reflect(i: isize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n as isize - 1);
    let m = i.rem_euclid(period);
    if m >= n as isize {
        (period - m) as usize
    } else {
        m as usize
    }
}

fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    let radius = (2.0 * sigma).ceil() as isize;
    let mut k: Vec<f64> = (-radius..=radius).map(|x| (-((x * x) as f64) / (2.0 * sigma * sigma)).exp()).collect();
    let s: f64 = k.iter().sum();
    k.iter_mut().for_each(|v| *v /= s);
    k
}

/// Separable Gaussian blur, kernel radius `⌈2σ⌉`, reflect padding.
fn gaussian_blur(img: &mut Image, sigma: f64) {
    let kernel = gaussian_kernel(sigma);
    let r = (kernel.len() / 2) as isize;
    let (h, w, c) = img.shape();
    let mut tmp = img.clone();
    for y in 0..h {
        for x in 0..w {
            for ch in 0..c {
                let v = kernel
                    .iter()
                    .enumerate()
                    .map(|(k, wt)| wt * img.get(y, reflect(x as isize + k as isize - r, w), ch))
                    .sum();
                tmp.set(y, x, ch, v);
            }
        }
    }
    for y in 0..h {
        for x in 0..w {
            for ch in 0..c {
                let v = kernel
                    .iter()
                    .enumerate()
                    .map(|(k, wt)| wt * tmp.get(reflect(y as isize + k as isize - r, h), x, ch))
                    .sum();
                img.set(y, x, ch, v);
            }
        }
    }
}

fn hflip(img: &mut Image) {
    let (h, w, c) = img.shape();
    for y in 0..h {
        for x in 0..w / 2 {
            for ch in 0..c {
                let a = img.get(y, x, ch);
                let b = img.get(y, w - 1 - x, ch);
                img.set(y, x, ch, b);
                img.set(y, w - 1 - x, ch, a);
            }
        }
    }
}

/// Two-view perturbation for feature vectors: additive Gaussian noise in
/// data space, clamp to `[0, 1]`, per-coordinate standardization, then
/// coordinate dropout to zero.
#[derive(Debug, Clone, PartialEq)]
pub struct VectorAugment {
    pub noise_sigma: f64,
    pub dropout_prob: f64,
    pub normalizer: Normalizer,
}

impl VectorAugment {
    pub fn view(&self, image: &Image, rng: &mut SeededRng) -> Result<Image> {
        check_image(image)?;
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) || !(0.0..=1.0).contains(&self.dropout_prob) {
            return Err(Error::ConfigInvalid(format!(
                "vector augmentation needs sigma >= 0 and dropout in [0, 1], got {} / {}",
                self.noise_sigma, self.dropout_prob
            )));
        }
        let mut out = image.clone();
        if self.noise_sigma > 0.0 {
            let noise = Normal::new(0.0, self.noise_sigma).expect("sigma checked");
            for v in out.as_mut_slice() {
                *v = (*v + noise.sample(rng)).clamp(0.0, 1.0);
            }
        }
        self.normalizer.apply(&mut out)?;
        for v in out.as_mut_slice() {
            if rng.bernoulli(self.dropout_prob) {
                *v = 0.0;
            }
        }
        Ok(out)
    }
}

/// The augmentation applied to training items, chosen by data modality.
#[derive(Debug, Clone, PartialEq)]
pub enum Augmenter {
    Image(AugmentPolicy),
    Vector(VectorAugment),
}

impl Augmenter {
    pub fn view(&self, image: &Image, rng: &mut SeededRng) -> Result<Image> {
        match self {
            Augmenter::Image(p) => augment_view(image, p, rng),
            Augmenter::Vector(v) => v.view(image, rng),
        }
    }

    pub fn two_views(&self, image: &Image, rng: &mut SeededRng) -> Result<(Image, Image)> {
        let a = self.view(image, rng)?;
        let b = self.view(image, rng)?;
        Ok((a, b))
    }

    /// Deterministic normalization used for evaluation.
    pub fn normalizer(&self) -> Normalizer {
        match self {
            Augmenter::Image(p) => p.normalizer(),
            Augmenter::Vector(v) => v.normalizer.clone(),
        }
    }
}
