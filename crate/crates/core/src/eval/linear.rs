//! Linear probe: softmax regression on frozen features, trained with SGD
//! with momentum and a cosine learning-rate decay.

use std::f64::consts::PI;

use ndarray::{Array1, Axis};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{softmax_rows, Mat};
use crate::config::LinearProbeConfig;
use crate::error::{Error, Result};

use super::FeatureBank;

/// Trained probe: features are standardized with the train statistics first.
#[derive(Clone, Debug)]
pub struct LinearProbe {
    pub mean: Array1<f64>,
    pub std: Array1<f64>,
    pub weight: Mat,
    pub bias: Array1<f64>,
}

impl LinearProbe {
    fn standardize(&self, x: &Mat) -> Mat {
        (x - &self.mean) / &self.std
    }

    pub fn logits(&self, x: &Mat) -> Mat {
        self.standardize(x).dot(&self.weight) + &self.bias
    }

    pub fn predict(&self, x: &Mat) -> Vec<u32> {
        self.logits(x)
            .rows()
            .into_iter()
            .map(|r| {
                let mut best = 0;
                for c in 1..r.len() {
                    if r[c] > r[best] {
                        best = c;
                    }
                }
                best as u32
            })
            .collect()
    }
}

pub fn train_probe(train: &FeatureBank, cfg: &LinearProbeConfig, seed: u64) -> Result<LinearProbe> {
    if train.is_empty() {
        return Err(Error::Input(
            "linear probe needs a non-empty train bank".into(),
        ));
    }
    let (n, d) = train.features.dim();
    let k = train.num_classes;
    let mean = train.features.mean_axis(Axis(0)).unwrap();
    let std = train.features.std_axis(Axis(0), 0.0).mapv(|s| s.max(1e-6));
    let mut probe = LinearProbe {
        mean,
        std,
        weight: Mat::zeros((d, k)),
        bias: Array1::zeros(k),
    };
    let x = probe.standardize(&train.features);
    let mut vw = Mat::zeros((d, k));
    let mut vb = Array1::<f64>::zeros(k);
    let batch = cfg.batch_size.min(n).max(1);
    let steps_per_epoch = n.div_ceil(batch);
    let total = (cfg.epochs * steps_per_epoch) as f64;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut idx: Vec<usize> = (0..n).collect();
    let mut step = 0usize;
    for epoch in 0..cfg.epochs {
        idx.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        for chunk in idx.chunks(batch) {
            let xb = x.select(Axis(0), chunk);
            let mut p = xb.dot(&probe.weight) + &probe.bias;
            softmax_rows(&mut p);
            for (r, &i) in chunk.iter().enumerate() {
                let y = train.labels[i] as usize;
                epoch_loss -= p[[r, y]].max(1e-300).ln();
                p[[r, y]] -= 1.0;
            }
            p /= chunk.len() as f64;
            let mut gw = xb.t().dot(&p);
            let gb = p.sum_axis(Axis(0));
            if cfg.weight_decay > 0.0 {
                gw.scaled_add(cfg.weight_decay, &probe.weight);
            }
            let lr = cfg.lr * 0.5 * (1.0 + (PI * step as f64 / total).cos());
            vw = &vw * cfg.momentum + &gw;
            vb = &vb * cfg.momentum + &gb;
            probe.weight.scaled_add(-lr, &vw);
            probe.bias.scaled_add(-lr, &vb);
            step += 1;
        }
        if !epoch_loss.is_finite()
            || probe
                .weight
                .iter()
                .chain(&probe.bias)
                .any(|v| !v.is_finite())
        {
            return Err(Error::numeric(format!(
                "linear probe loss diverged in epoch {epoch}"
            )));
        }
    }
    Ok(probe)
}

/// Test accuracy of a probe trained on `train`.
pub fn linear_probe(
    train: &FeatureBank,
    test: &FeatureBank,
    cfg: &LinearProbeConfig,
    seed: u64,
) -> Result<f64> {
    if test.is_empty() {
        return Err(Error::Input(
            "linear probe needs a non-empty test bank".into(),
        ));
    }
    if train.dim() != test.dim() {
        return Err(Error::shape(
            "linear probe feature dimension",
            train.dim(),
            test.dim(),
        ));
    }
    let probe = train_probe(train, cfg, seed)?;
    let preds = probe.predict(&test.features);
    let correct = preds
        .iter()
        .zip(&test.labels)
        .filter(|(p, l)| p == l)
        .count();
    Ok(correct as f64 / test.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::Split;

    #[test]
    fn separable_two_class() {
        let f = Mat::from_shape_fn((40, 3), |(i, j)| {
            let sign = if i % 2 == 0 { 1.0 } else { -1.0 };
            sign * (1.0 + j as f64) + 0.01 * i as f64
        });
        let labels: Vec<u32> = (0..40).map(|i| (i % 2) as u32).collect();
        let bank = FeatureBank::new(f, labels, 2, 1, Split::Train).unwrap();
        let cfg = LinearProbeConfig {
            epochs: 20,
            batch_size: 8,
            ..Default::default()
        };
        assert_eq!(linear_probe(&bank, &bank, &cfg, 0).unwrap(), 1.0);
    }

    #[test]
    fn divergence_is_numeric_error() {
        let f = Mat::from_shape_fn((8, 2), |(i, j)| (i * 3 + j) as f64);
        let bank = FeatureBank::new(f, vec![0, 1, 0, 1, 0, 1, 0, 1], 2, 1, Split::Train).unwrap();
        let cfg = LinearProbeConfig {
            epochs: 50,
            lr: 1e308,
            ..Default::default()
        };
        assert!(matches!(
            linear_probe(&bank, &bank, &cfg, 0),
            Err(Error::Numeric { .. })
        ));
    }
}
