//! Procedural class-conditional images for tests and offline runs.
//!
//! Class `k` fixes a pattern (stripes, grid or rings) and its spatial
//! frequency. Colours, orientation, phase, ring centre and pixel noise are
//! drawn per sample, so colour alone says nothing about the class.

use std::f32::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::augment::mix;
use super::{ImageDataset, Split};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SyntheticConfig {
    pub num_samples: usize,
    pub num_classes: usize,
    pub size: usize,
    pub seed: u64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self {
            num_samples: 2048,
            num_classes: 10,
            size: 32,
            seed: 0,
        }
    }
}

fn hsv_to_rgb(h: f32, s: f32, v: f32) -> [f32; 3] {
    let hh = h.rem_euclid(1.0) * 6.0;
    let f = hh - hh.floor();
    let p = v * (1.0 - s);
    let q = v * (1.0 - s * f);
    let t = v * (1.0 - s * (1.0 - f));
    match hh.floor() as i32 % 6 {
        0 => [v, t, p],
        1 => [q, v, p],
        2 => [p, v, t],
        3 => [p, q, v],
        4 => [t, p, v],
        _ => [v, p, q],
    }
}

/// Labels cycle through the classes, so every class is balanced to within one sample.
pub fn generate(cfg: &SyntheticConfig, split: Split) -> ImageDataset {
    let s = cfg.size;
    let plane = s * s;
    let k = cfg.num_classes.max(1);
    let split_word = match split {
        Split::Train => 1,
        Split::Test => 2,
    };
    let mut images = vec![0.0f32; cfg.num_samples * 3 * plane];
    let mut labels = Vec::with_capacity(cfg.num_samples);
    for (i, img) in images.chunks_mut(3 * plane).enumerate() {
        let label = i % k;
        labels.push(label as u32);
        let mut rng = ChaCha8Rng::seed_from_u64(mix(&[cfg.seed, split_word, i as u64]));
        let pattern = label % 3;
        let freq = 1.5 + (label / 3) as f32;
        let angle = rng.random::<f32>() * PI;
        let phase = rng.random::<f32>() * 2.0 * PI;
        let phase2 = rng.random::<f32>() * 2.0 * PI;
        let (cx, cy) = (
            0.3 + 0.4 * rng.random::<f32>(),
            0.3 + 0.4 * rng.random::<f32>(),
        );
        let hue = rng.random::<f32>();
        let fg = hsv_to_rgb(
            hue,
            0.4 + 0.5 * rng.random::<f32>(),
            0.6 + 0.4 * rng.random::<f32>(),
        );
        let bg = hsv_to_rgb(
            hue + 0.3 + 0.4 * rng.random::<f32>(),
            0.3,
            0.1 + 0.3 * rng.random::<f32>(),
        );
        let (ca, sa) = (angle.cos(), angle.sin());
        for y in 0..s {
            for x in 0..s {
                let (fx, fy) = (x as f32 / s as f32, y as f32 / s as f32);
                let u = fx * ca + fy * sa;
                let v = -fx * sa + fy * ca;
                let w = match pattern {
                    0 => (2.0 * PI * freq * u + phase).sin(),
                    1 => (2.0 * PI * freq * u + phase).sin() * (2.0 * PI * freq * v + phase2).sin(),
                    _ => {
                        let r = ((fx - cx).powi(2) + (fy - cy).powi(2)).sqrt();
                        (2.0 * PI * freq * r * 1.5 + phase).sin()
                    }
                };
                let w = 0.5 + 0.5 * w;
                for c in 0..3 {
                    let noise = 0.3 * (rng.random::<f32>() - 0.5);
                    img[c * plane + y * s + x] =
                        (w * fg[c] + (1.0 - w) * bg[c] + noise).clamp(0.0, 1.0);
                }
            }
        }
    }
    let (mean, std) = channel_stats(&images, 3, plane);
    ImageDataset {
        name: "synthetic".into(),
        split,
        images,
        labels,
        channels: 3,
        size: s,
        num_classes: k,
        mean,
        std,
    }
}

/// Per-channel mean and standard deviation of an `N × C × plane` buffer.
pub fn channel_stats(images: &[f32], channels: usize, plane: usize) -> (Vec<f32>, Vec<f32>) {
    let mut sum = vec![0.0f64; channels];
    let mut sq = vec![0.0f64; channels];
    let mut count = 0usize;
    for img in images.chunks(channels * plane) {
        for c in 0..channels {
            for &v in &img[c * plane..(c + 1) * plane] {
                sum[c] += v as f64;
                sq[c] += (v as f64) * (v as f64);
            }
        }
        count += plane;
    }
    let n = count.max(1) as f64;
    let mean: Vec<f32> = sum.iter().map(|s| (s / n) as f32).collect();
    let std: Vec<f32> = sum
        .iter()
        .zip(&sq)
        .map(|(s, q)| ((q / n - (s / n).powi(2)).max(0.0).sqrt() as f32).max(1e-3))
        .collect();
    (mean, std)
}
