//! Seeded image augmentations on planar `C × S × S` buffers in `[0, 1]`.
//!
//! Every random draw for a view comes from a stream keyed by
//! `(seed, step, index, view_id)`, so a view never depends on batch
//! composition, worker count, or the order in which views are produced.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AugmentationRecipe {
    /// Side of the square crop fed to the encoder.
    pub output_size: usize,
    pub crop_scale: (f64, f64),
    pub crop_ratio: (f64, f64),
    pub flip_p: f64,
    pub jitter_p: f64,
    pub brightness: f64,
    pub contrast: f64,
    pub saturation: f64,
    pub hue: f64,
    pub grayscale_p: f64,
    /// Blur probability for the first and second view.
    pub blur_p: [f64; 2],
    pub blur_sigma: (f64, f64),
    pub solarize_p: [f64; 2],
}

impl Default for AugmentationRecipe {
    fn default() -> Self {
        Self {
            output_size: 32,
            crop_scale: (0.2, 1.0),
            crop_ratio: (3.0 / 4.0, 4.0 / 3.0),
            flip_p: 0.5,
            jitter_p: 0.8,
            brightness: 0.4,
            contrast: 0.4,
            saturation: 0.2,
            hue: 0.1,
            grayscale_p: 0.2,
            blur_p: [1.0, 0.1],
            blur_sigma: (0.1, 2.0),
            solarize_p: [0.0, 0.2],
        }
    }
}

impl AugmentationRecipe {
    /// Full-image crop with every random transform disabled.
    pub fn identity(output_size: usize) -> Self {
        Self {
            output_size,
            crop_scale: (1.0, 1.0),
            crop_ratio: (1.0, 1.0),
            flip_p: 0.0,
            jitter_p: 0.0,
            grayscale_p: 0.0,
            blur_p: [0.0, 0.0],
            solarize_p: [0.0, 0.0],
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let probs = [
            ("data.recipe.flip_p", self.flip_p),
            ("data.recipe.jitter_p", self.jitter_p),
            ("data.recipe.grayscale_p", self.grayscale_p),
            ("data.recipe.blur_p", self.blur_p[0]),
            ("data.recipe.blur_p", self.blur_p[1]),
            ("data.recipe.solarize_p", self.solarize_p[0]),
            ("data.recipe.solarize_p", self.solarize_p[1]),
        ];
        for (field, p) in probs {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::config(
                    field,
                    format!("probability {p} outside [0, 1]"),
                ));
            }
        }
        let (lo, hi) = self.crop_scale;
        if !(lo > 0.0 && lo <= hi && hi <= 1.0) {
            return Err(Error::config(
                "data.recipe.crop_scale",
                "need 0 < lo <= hi <= 1",
            ));
        }
        let (lo, hi) = self.crop_ratio;
        if !(lo > 0.0 && lo <= hi) {
            return Err(Error::config("data.recipe.crop_ratio", "need 0 < lo <= hi"));
        }
        if !(self.blur_sigma.0 > 0.0 && self.blur_sigma.0 <= self.blur_sigma.1) {
            return Err(Error::config("data.recipe.blur_sigma", "need 0 < lo <= hi"));
        }
        if self.output_size == 0 {
            return Err(Error::config("data.recipe.output_size", "must be positive"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ViewPair {
    pub first: Vec<f32>,
    pub second: Vec<f32>,
}

/// SplitMix64 finalizer folded over the words.
pub(crate) fn mix(words: &[u64]) -> u64 {
    let mut h: u64 = 0x9e37_79b9_7f4a_7c15;
    for &w in words {
        let mut z = h ^ w.wrapping_add(0x9e37_79b9_7f4a_7c15);
        z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
        h = z ^ (z >> 31);
    }
    h
}

pub fn view_rng(seed: u64, step: u64, index: u64, view_id: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(mix(&[seed, step, index, view_id]))
}

fn check_sample(sample: &[f32], channels: usize, size: usize) -> Result<()> {
    if sample.len() != channels * size * size {
        return Err(Error::Data {
            sample: None,
            message: format!(
                "expected {} values for a {channels}x{size}x{size} image, got {}",
                channels * size * size,
                sample.len()
            ),
        });
    }
    if let Some(v) = sample.iter().find(|v| !v.is_finite()) {
        return Err(Error::Data {
            sample: None,
            message: format!("non-finite pixel value {v}"),
        });
    }
    Ok(())
}

/// Two independent draws of `recipe` for one sample.
pub fn make_view_pair(
    sample: &[f32],
    channels: usize,
    size: usize,
    recipe: &AugmentationRecipe,
    seed: u64,
    step: u64,
    index: u64,
) -> Result<ViewPair> {
    check_sample(sample, channels, size)?;
    let first = augment_view(
        sample,
        channels,
        size,
        recipe,
        &mut view_rng(seed, step, index, 1),
        0,
    );
    let second = augment_view(
        sample,
        channels,
        size,
        recipe,
        &mut view_rng(seed, step, index, 2),
        1,
    );
    Ok(ViewPair { first, second })
}

/// Deterministic evaluation view: the whole image resized to `out_size`.
pub fn eval_transform(
    sample: &[f32],
    channels: usize,
    size: usize,
    out_size: usize,
) -> Result<Vec<f32>> {
    check_sample(sample, channels, size)?;
    Ok(resized_crop(
        sample,
        channels,
        size,
        (0.0, 0.0, size as f64, size as f64),
        out_size,
    ))
}

fn augment_view(
    sample: &[f32],
    channels: usize,
    size: usize,
    r: &AugmentationRecipe,
    rng: &mut ChaCha8Rng,
    view: usize,
) -> Vec<f32> {
    let rect = sample_crop(size, r.crop_scale, r.crop_ratio, rng);
    let out = r.output_size;
    let mut img = resized_crop(sample, channels, size, rect, out);
    if rng.random::<f64>() < r.flip_p {
        hflip(&mut img, channels, out);
    }
    if channels == 3 {
        if rng.random::<f64>() < r.jitter_p {
            color_jitter(&mut img, out, r, rng);
        }
        if rng.random::<f64>() < r.grayscale_p {
            grayscale(&mut img, out);
        }
    }
    if rng.random::<f64>() < r.blur_p[view] {
        let sigma = rng.random_range(r.blur_sigma.0..=r.blur_sigma.1);
        gaussian_blur(&mut img, channels, out, sigma);
    }
    if rng.random::<f64>() < r.solarize_p[view] {
        img.iter_mut().for_each(|v| {
            if *v >= 0.5 {
                *v = 1.0 - *v;
            }
        });
    }
    img
}

/// `(x0, y0, w, h)` of a random crop with area fraction in `scale` and
/// aspect ratio in `ratio` (log-uniform); falls back to a centered crop.
fn sample_crop(
    size: usize,
    scale: (f64, f64),
    ratio: (f64, f64),
    rng: &mut ChaCha8Rng,
) -> (f64, f64, f64, f64) {
    let s = size as f64;
    let area = s * s;
    let (lr0, lr1) = (ratio.0.ln(), ratio.1.ln());
    for _ in 0..10 {
        let target = area
            * if scale.0 < scale.1 {
                rng.random_range(scale.0..=scale.1)
            } else {
                scale.0
            };
        let ar = if lr0 < lr1 {
            rng.random_range(lr0..=lr1).exp()
        } else {
            ratio.0
        };
        let w = (target * ar).sqrt().round();
        let h = (target / ar).sqrt().round();
        if w > 0.0 && h > 0.0 && w <= s && h <= s {
            let x0 = rng.random_range(0..=(s - w) as usize) as f64;
            let y0 = rng.random_range(0..=(s - h) as usize) as f64;
            return (x0, y0, w, h);
        }
    }
    let in_ratio = 1.0;
    let (w, h) = if in_ratio < ratio.0 {
        (s, (s / ratio.0).round())
    } else if in_ratio > ratio.1 {
        ((s * ratio.1).round(), s)
    } else {
        (s, s)
    };
    ((s - w) / 2.0, (s - h) / 2.0, w, h)
}

/// Bilinear resize of the crop rectangle to `out × out` (half-pixel centers).
fn resized_crop(
    src: &[f32],
    channels: usize,
    size: usize,
    rect: (f64, f64, f64, f64),
    out: usize,
) -> Vec<f32> {
    let (x0, y0, w, h) = rect;
    let sx = w / out as f64;
    let sy = h / out as f64;
    let plane = size * size;
    let mut dst = vec![0.0f32; channels * out * out];
    let max = (size - 1) as f64;
    for oy in 0..out {
        let fy = (y0 + (oy as f64 + 0.5) * sy - 0.5).clamp(0.0, max);
        let (y_lo, ty) = (fy.floor() as usize, fy - fy.floor());
        let y_hi = (y_lo + 1).min(size - 1);
        for ox in 0..out {
            let fx = (x0 + (ox as f64 + 0.5) * sx - 0.5).clamp(0.0, max);
            let (x_lo, tx) = (fx.floor() as usize, fx - fx.floor());
            let x_hi = (x_lo + 1).min(size - 1);
            for c in 0..channels {
                let p = &src[c * plane..(c + 1) * plane];
                let top =
                    p[y_lo * size + x_lo] as f64 * (1.0 - tx) + p[y_lo * size + x_hi] as f64 * tx;
                let bot =
                    p[y_hi * size + x_lo] as f64 * (1.0 - tx) + p[y_hi * size + x_hi] as f64 * tx;
                dst[c * out * out + oy * out + ox] = (top * (1.0 - ty) + bot * ty) as f32;
            }
        }
    }
    dst
}

fn hflip(img: &mut [f32], channels: usize, size: usize) {
    for c in 0..channels {
        for y in 0..size {
            let row = &mut img[c * size * size + y * size..c * size * size + (y + 1) * size];
            row.reverse();
        }
    }
}

fn luma(img: &[f32], size: usize, i: usize) -> f32 {
    let plane = size * size;
    0.299 * img[i] + 0.587 * img[plane + i] + 0.114 * img[2 * plane + i]
}

fn grayscale(img: &mut [f32], size: usize) {
    let plane = size * size;
    for i in 0..plane {
        let y = luma(img, size, i);
        img[i] = y;
        img[plane + i] = y;
        img[2 * plane + i] = y;
    }
}

fn blend(img: &mut [f32], other: impl Fn(usize) -> f32, factor: f32) {
    for (i, v) in img.iter_mut().enumerate() {
        *v = (factor * *v + (1.0 - factor) * other(i)).clamp(0.0, 1.0);
    }
}

fn color_jitter(img: &mut [f32], size: usize, r: &AugmentationRecipe, rng: &mut ChaCha8Rng) {
    let mut order = [0usize, 1, 2, 3];
    order.shuffle(rng);
    let factor = |strength: f64, rng: &mut ChaCha8Rng| -> f32 {
        if strength > 0.0 {
            rng.random_range((1.0 - strength).max(0.0)..=1.0 + strength) as f32
        } else {
            1.0
        }
    };
    let plane = size * size;
    for op in order {
        match op {
            0 => {
                let f = factor(r.brightness, rng);
                blend(img, |_| 0.0, f);
            }
            1 => {
                let f = factor(r.contrast, rng);
                let mean = (0..plane).map(|i| luma(img, size, i)).sum::<f32>() / plane as f32;
                blend(img, |_| mean, f);
            }
            2 => {
                let f = factor(r.saturation, rng);
                let gray: Vec<f32> = (0..plane).map(|i| luma(img, size, i)).collect();
                blend(img, |i| gray[i % plane], f);
            }
            _ => {
                if r.hue > 0.0 {
                    let shift = rng.random_range(-r.hue..=r.hue) as f32;
                    shift_hue(img, size, shift);
                }
            }
        }
    }
}

fn shift_hue(img: &mut [f32], size: usize, shift: f32) {
    let plane = size * size;
    for i in 0..plane {
        let (r, g, b) = (img[i], img[plane + i], img[2 * plane + i]);
        let max = r.max(g).max(b);
        let min = r.min(g).min(b);
        let delta = max - min;
        if delta <= 0.0 {
            continue;
        }
        let mut h = if max == r {
            ((g - b) / delta).rem_euclid(6.0)
        } else if max == g {
            (b - r) / delta + 2.0
        } else {
            (r - g) / delta + 4.0
        } / 6.0;
        h = (h + shift).rem_euclid(1.0);
        let s = delta / max;
        let v = max;
        let hh = h * 6.0;
        let sector = hh.floor();
        let f = hh - sector;
        let p = v * (1.0 - s);
        let q = v * (1.0 - s * f);
        let t = v * (1.0 - s * (1.0 - f));
        let (nr, ng, nb) = match sector as i32 % 6 {
            0 => (v, t, p),
            1 => (q, v, p),
            2 => (p, v, t),
            3 => (p, q, v),
            4 => (t, p, v),
            _ => (v, p, q),
        };
        img[i] = nr;
        img[plane + i] = ng;
        img[2 * plane + i] = nb;
    }
}

/// Separable Gaussian blur with radius `ceil(2σ)` capped at 10% of the image.
fn gaussian_blur(img: &mut [f32], channels: usize, size: usize, sigma: f64) {
    let radius = ((2.0 * sigma).ceil() as usize).clamp(1, (size / 10).max(1));
    let kernel: Vec<f64> = (0..=2 * radius)
        .map(|k| {
            let d = k as f64 - radius as f64;
            (-(d * d) / (2.0 * sigma * sigma)).exp()
        })
        .collect();
    let norm: f64 = kernel.iter().sum();
    let kernel: Vec<f64> = kernel.iter().map(|k| k / norm).collect();
    let plane = size * size;
    let mut tmp = vec![0.0f32; plane];
    let reflect = |i: isize| -> usize {
        let n = size as isize;
        let mut j = i;
        if j < 0 {
            j = -j - 1;
        }
        if j >= n {
            j = 2 * n - j - 1;
        }
        j.clamp(0, n - 1) as usize
    };
    for c in 0..channels {
        let p = &mut img[c * plane..(c + 1) * plane];
        for y in 0..size {
            for x in 0..size {
                let mut acc = 0.0;
                for (k, w) in kernel.iter().enumerate() {
                    acc +=
                        w * p[y * size + reflect(x as isize + k as isize - radius as isize)] as f64;
                }
                tmp[y * size + x] = acc as f32;
            }
        }
        for y in 0..size {
            for x in 0..size {
                let mut acc = 0.0;
                for (k, w) in kernel.iter().enumerate() {
                    acc += w * tmp[reflect(y as isize + k as isize - radius as isize) * size + x]
                        as f64;
                }
                p[y * size + x] = acc as f32;
            }
        }
    }
}
