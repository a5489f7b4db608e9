//! Frozen-feature evaluation: k-NN, linear probe, per-layer (multi-exit)
//! accuracy and representation geometry.

pub mod knn;
pub mod linear;
pub mod metrics;
pub mod report;

use ndarray::{s, Array2};
use serde::{Deserialize, Serialize};

use crate::autodiff::Mat;
use crate::config::EvalConfig;
use crate::data::{ImageDataset, Split};
use crate::error::{Error, Result};
use crate::params::ParamSet;
use crate::vit::{LayerFeatureStack, ViTEncoder};

pub use knn::knn_classify;
pub use linear::linear_probe;
pub use metrics::{
    alignment, negative_alignment, uniformity, LayerMetrics, MetricConfig, MetricsReport,
};

/// Features of one layer for one split.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureBank {
    pub features: Mat,
    pub labels: Vec<u32>,
    pub num_classes: usize,
    /// 1-based encoder layer.
    pub layer: usize,
    pub split: Split,
    pub normalized: bool,
}

impl FeatureBank {
    pub fn new(
        features: Mat,
        labels: Vec<u32>,
        num_classes: usize,
        layer: usize,
        split: Split,
    ) -> Result<Self> {
        if features.nrows() != labels.len() {
            return Err(Error::shape(
                "feature bank labels",
                features.nrows(),
                labels.len(),
            ));
        }
        if let Some((i, _)) = labels
            .iter()
            .enumerate()
            .find(|(_, &l)| l as usize >= num_classes)
        {
            return Err(Error::Data {
                sample: Some(i),
                message: format!("label out of range for {num_classes} classes"),
            });
        }
        if features.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric {
                what: "feature bank".into(),
                layer: Some(layer),
            });
        }
        Ok(Self {
            features,
            labels,
            num_classes,
            layer,
            split,
            normalized: false,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.features.ncols()
    }

    /// Copy with ℓ2-normalized rows.
    pub fn normalized(&self) -> FeatureBank {
        if self.normalized {
            return self.clone();
        }
        FeatureBank {
            features: l2_normalize(&self.features),
            normalized: true,
            ..self.clone()
        }
    }
}

pub fn l2_normalize(m: &Mat) -> Mat {
    let mut out = m.clone();
    for mut row in out.rows_mut() {
        let n = row.dot(&row).sqrt().max(1e-12);
        row /= n;
    }
    out
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EvalKind {
    Knn,
    Linear,
}

impl EvalKind {
    pub fn as_str(self) -> &'static str {
        match self {
            EvalKind::Knn => "knn",
            EvalKind::Linear => "linear",
        }
    }
}

/// Deterministic-view features of `indices` for every layer.
pub fn extract_stack(
    encoder: &ViTEncoder,
    params: &ParamSet,
    dataset: &ImageDataset,
    indices: &[usize],
    chunk: usize,
) -> Result<LayerFeatureStack> {
    let c = &encoder.config;
    let n = indices.len();
    let mut layers: Vec<Mat> = (0..c.num_layers)
        .map(|_| Array2::zeros((n, c.embed_dim)))
        .collect();
    for (k, part) in indices.chunks(chunk.max(1)).enumerate() {
        let batch = dataset.eval_batch(part, c.image_size)?;
        let stack = encoder.forward_all_layers(params, &batch)?;
        let start = k * chunk.max(1);
        for (dst, src) in layers.iter_mut().zip(stack.layers) {
            dst.slice_mut(s![start..start + part.len(), ..])
                .assign(&src);
        }
    }
    Ok(LayerFeatureStack { layers })
}

/// One bank per layer for the samples at `indices`.
pub fn layer_banks(
    encoder: &ViTEncoder,
    params: &ParamSet,
    dataset: &ImageDataset,
    indices: &[usize],
    chunk: usize,
) -> Result<Vec<FeatureBank>> {
    let stack = extract_stack(encoder, params, dataset, indices, chunk)?;
    let labels: Vec<u32> = indices.iter().map(|&i| dataset.labels[i]).collect();
    stack
        .layers
        .into_iter()
        .enumerate()
        .map(|(l, f)| {
            FeatureBank::new(f, labels.clone(), dataset.num_classes, l + 1, dataset.split)
        })
        .collect()
}

/// `0..n`, or a seeded subset of `cap` indices when `cap` is nonzero and smaller.
pub fn eval_indices(n: usize, cap: usize, seed: u64) -> Vec<usize> {
    if cap == 0 || cap >= n {
        return (0..n).collect();
    }
    use rand::seq::SliceRandom;
    use rand::SeedableRng;
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut rand_chacha::ChaCha8Rng::seed_from_u64(seed));
    idx.truncate(cap);
    idx.sort_unstable();
    idx
}

/// Accuracy of one evaluation kind on a pair of banks.
pub fn evaluate_bank(
    train: &FeatureBank,
    test: &FeatureBank,
    kind: EvalKind,
    cfg: &EvalConfig,
    seed: u64,
) -> Result<f64> {
    match kind {
        EvalKind::Knn => {
            let k = cfg.knn_k.min(train.len());
            knn_classify(train, test, k, cfg.knn_tau)
        }
        EvalKind::Linear => linear_probe(train, test, &cfg.linear, seed),
    }
}

/// Per-layer accuracies (length `L`, index `l − 1` for layer `l`).
pub fn multi_exit_from_banks(
    train: &[FeatureBank],
    test: &[FeatureBank],
    kind: EvalKind,
    cfg: &EvalConfig,
    seed: u64,
) -> Result<Vec<f64>> {
    if train.len() != test.len() {
        return Err(Error::shape(
            "multi-exit layer count",
            train.len(),
            test.len(),
        ));
    }
    train
        .iter()
        .zip(test)
        .map(|(a, b)| evaluate_bank(a, b, kind, cfg, seed))
        .collect()
}

/// Extracts features of both splits and evaluates every layer independently.
pub fn multi_exit_eval(
    encoder: &ViTEncoder,
    params: &ParamSet,
    train: &ImageDataset,
    test: &ImageDataset,
    kind: EvalKind,
    cfg: &EvalConfig,
    seed: u64,
) -> Result<Vec<f64>> {
    let tr = layer_banks(
        encoder,
        params,
        train,
        &eval_indices(train.len(), cfg.max_train, seed),
        cfg.feature_chunk,
    )?;
    let te = layer_banks(
        encoder,
        params,
        test,
        &eval_indices(test.len(), cfg.max_test, seed),
        cfg.feature_chunk,
    )?;
    multi_exit_from_banks(&tr, &te, kind, cfg, seed)
}
