//! Alignment, uniformity and negative alignment of ℓ2-normalized features.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::Mat;
use crate::config::{EvalConfig, PairSampling};
use crate::data::{AugmentationRecipe, ImageDataset};
use crate::error::{Error, Result};
use crate::exec;
use crate::params::ParamSet;
use crate::vit::ViTEncoder;

use super::{extract_stack, l2_normalize};

/// Step tag of the fixed augmentation pair used for positive-pair statistics.
pub const POSITIVE_PAIR_STEP: u64 = u64::MAX;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricConfig {
    pub gamma: f64,
    pub t: f64,
    pub pair_sampling: PairSampling,
}

impl Default for MetricConfig {
    fn default() -> Self {
        Self {
            gamma: 2.0,
            t: 2.0,
            pair_sampling: PairSampling::AllPairs,
        }
    }
}

impl MetricConfig {
    pub fn from_eval(cfg: &EvalConfig) -> Self {
        Self {
            gamma: cfg.gamma,
            t: cfg.t,
            pair_sampling: cfg.pair_sampling,
        }
    }

    pub fn validate(&self) -> Result<()> {
        check_gamma(self.gamma)?;
        if !(self.t > 0.0) {
            return Err(Error::config("eval.t", format!("{} is not > 0", self.t)));
        }
        Ok(())
    }
}

fn check_gamma(gamma: f64) -> Result<()> {
    if gamma > 0.0 && gamma.is_finite() {
        Ok(())
    } else {
        Err(Error::config("eval.gamma", format!("{gamma} is not > 0")))
    }
}

fn sq_dist(f: &Mat, g: &Mat, i: usize, j: usize) -> f64 {
    f.row(i)
        .iter()
        .zip(g.row(j))
        .map(|(a, b)| (a - b) * (a - b))
        .sum()
}

/// Mean of `‖x_i − y_i‖^γ` over row-aligned positive pairs.
pub fn alignment(x: &Mat, y: &Mat, gamma: f64) -> Result<f64> {
    check_gamma(gamma)?;
    if x.dim() != y.dim() {
        return Err(Error::shape(
            "alignment pairs",
            format!("{:?}", x.dim()),
            format!("{:?}", y.dim()),
        ));
    }
    if x.nrows() == 0 {
        return Err(Error::Input("alignment needs at least one pair".into()));
    }
    let s = exec::sum_range(x.nrows(), |i| sq_dist(x, y, i, i).powf(gamma / 2.0));
    Ok(s / x.nrows() as f64)
}

fn check_features(f: &Mat) -> Result<()> {
    if f.nrows() < 2 {
        return Err(Error::Input(format!(
            "need at least 2 feature rows, got {}",
            f.nrows()
        )));
    }
    Ok(())
}

/// `k` ordered pairs `(i, j)` with `i ≠ j`, drawn uniformly with replacement.
pub fn sample_pairs(m: usize, k: usize, seed: u64) -> Result<Vec<(usize, usize)>> {
    if m < 2 {
        return Err(Error::Input(format!(
            "need at least 2 feature rows, got {m}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok((0..k)
        .map(|_| {
            let i = rng.random_range(0..m);
            let mut j = rng.random_range(0..m - 1);
            if j >= i {
                j += 1;
            }
            (i, j)
        })
        .collect())
}

/// `log mean_{i≠j} exp(−t·‖f_i − f_j‖²)` over all ordered pairs.
pub fn uniformity(f: &Mat, t: f64) -> Result<f64> {
    check_features(f)?;
    if !(t > 0.0) {
        return Err(Error::config("eval.t", format!("{t} is not > 0")));
    }
    let m = f.nrows();
    // every exponent is <= 0 and the diagonal is excluded; shift by the
    // largest exponent so far-apart sets do not underflow
    let maxes = exec::map_range(m, |i| {
        (0..m)
            .filter(|&j| j != i)
            .map(|j| -t * sq_dist(f, f, i, j))
            .fold(f64::NEG_INFINITY, f64::max)
    });
    let shift = maxes.into_iter().fold(f64::NEG_INFINITY, f64::max);
    let s = exec::sum_range(m, |i| {
        (0..m)
            .filter(|&j| j != i)
            .map(|j| (-t * sq_dist(f, f, i, j) - shift).exp())
            .sum()
    });
    Ok(shift + (s / (m * (m - 1)) as f64).ln())
}

/// Uniformity estimated on explicit ordered pairs.
pub fn uniformity_pairs(f: &Mat, t: f64, pairs: &[(usize, usize)]) -> Result<f64> {
    if pairs.is_empty() {
        return Err(Error::Input("uniformity needs at least one pair".into()));
    }
    let e: Vec<f64> = pairs
        .iter()
        .map(|&(i, j)| -t * sq_dist(f, f, i, j))
        .collect();
    let shift = e.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let s: f64 = e.iter().map(|v| (v - shift).exp()).sum();
    Ok(shift + (s / pairs.len() as f64).ln())
}

/// Mean of `‖f_i − f_j‖^γ` over all ordered pairs of distinct samples.
pub fn negative_alignment(f: &Mat, gamma: f64) -> Result<f64> {
    check_gamma(gamma)?;
    check_features(f)?;
    let m = f.nrows();
    let s = exec::sum_range(m, |i| {
        (0..m)
            .filter(|&j| j != i)
            .map(|j| sq_dist(f, f, i, j).powf(gamma / 2.0))
            .sum()
    });
    Ok(s / (m * (m - 1)) as f64)
}

pub fn negative_alignment_pairs(f: &Mat, gamma: f64, pairs: &[(usize, usize)]) -> Result<f64> {
    check_gamma(gamma)?;
    if pairs.is_empty() {
        return Err(Error::Input(
            "negative alignment needs at least one pair".into(),
        ));
    }
    let s: f64 = pairs
        .iter()
        .map(|&(i, j)| sq_dist(f, f, i, j).powf(gamma / 2.0))
        .sum();
    Ok(s / pairs.len() as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerMetrics {
    pub layer: usize,
    pub alignment: f64,
    pub uniformity: f64,
    pub negative_alignment: f64,
    /// `negative_alignment − alignment`.
    pub d: f64,
}

/// Geometry of one layer: `pos_a`/`pos_b` are row-aligned positive pairs,
/// `data` are samples of the data distribution. Rows are normalized here.
pub fn layer_metrics(
    pos_a: &Mat,
    pos_b: &Mat,
    data: &Mat,
    layer: usize,
    cfg: &MetricConfig,
    seed: u64,
) -> Result<LayerMetrics> {
    cfg.validate()?;
    let a = l2_normalize(pos_a);
    let b = l2_normalize(pos_b);
    let f = l2_normalize(data);
    let ali = alignment(&a, &b, cfg.gamma)?;
    let (uni, neg) = match cfg.pair_sampling {
        PairSampling::AllPairs => (uniformity(&f, cfg.t)?, negative_alignment(&f, cfg.gamma)?),
        PairSampling::Subsample(k) => {
            let pairs = sample_pairs(f.nrows(), k, seed)?;
            (
                uniformity_pairs(&f, cfg.t, &pairs)?,
                negative_alignment_pairs(&f, cfg.gamma, &pairs)?,
            )
        }
    };
    for (what, v) in [
        ("alignment", ali),
        ("uniformity", uni),
        ("negative alignment", neg),
    ] {
        if !v.is_finite() {
            return Err(Error::Numeric {
                what: what.into(),
                layer: Some(layer),
            });
        }
    }
    Ok(LayerMetrics {
        layer,
        alignment: ali,
        uniformity: uni,
        negative_alignment: neg,
        d: neg - ali,
    })
}

/// Per-layer geometry on `indices`: positives are one seeded augmentation
/// pair per image, the data distribution uses the deterministic eval view.
pub fn geometry(
    encoder: &ViTEncoder,
    params: &ParamSet,
    dataset: &ImageDataset,
    indices: &[usize],
    recipe: &AugmentationRecipe,
    eval: &EvalConfig,
    seed: u64,
) -> Result<Vec<LayerMetrics>> {
    let cfg = MetricConfig::from_eval(eval);
    let chunk = eval.feature_chunk;
    let (va, vb) = dataset.view_batches(indices, recipe, seed, POSITIVE_PAIR_STEP)?;
    let fa = encoder.extract_features(params, &va, chunk)?;
    let fb = encoder.extract_features(params, &vb, chunk)?;
    let fd = extract_stack(encoder, params, dataset, indices, chunk)?;
    (0..encoder.config.num_layers)
        .map(|l| {
            layer_metrics(
                &fa.layers[l],
                &fb.layers[l],
                &fd.layers[l],
                l + 1,
                &cfg,
                seed,
            )
        })
        .collect()
}

/// Everything measured for one checkpoint.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub label: String,
    pub layers: Vec<LayerMetrics>,
    /// Per-layer k-NN accuracy.
    pub knn: Option<Vec<f64>>,
    /// Per-layer linear-probe accuracy.
    pub linear: Option<Vec<f64>>,
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn analytic_cases() {
        let same = Mat::from_shape_fn((5, 3), |(_, j)| if j == 0 { 1.0 } else { 0.0 });
        assert_eq!(uniformity(&same, 2.0).unwrap(), 0.0);
        assert_eq!(alignment(&same, &same, 2.0).unwrap(), 0.0);
        let anti = array![[1.0, 0.0], [-1.0, 0.0]];
        assert!((uniformity(&anti, 2.0).unwrap() + 8.0).abs() < 1e-9);
        assert!((negative_alignment(&anti, 2.0).unwrap() - 4.0).abs() < 1e-12);
        let x = array![[1.0, 0.0]];
        let y = array![[0.0, 1.0]];
        assert!((alignment(&x, &y, 2.0).unwrap() - 2.0).abs() < 1e-12);
    }

    #[test]
    fn far_apart_points_do_not_underflow() {
        let anti = array![[10.0, 0.0], [-10.0, 0.0]];
        assert!((uniformity(&anti, 2.0).unwrap() + 800.0).abs() < 1e-9);
    }

    #[test]
    fn errors() {
        let one = array![[1.0, 0.0]];
        assert!(matches!(uniformity(&one, 2.0), Err(Error::Input(_))));
        assert!(matches!(
            alignment(&one, &one, 0.0),
            Err(Error::Config { .. })
        ));
        assert!(matches!(
            negative_alignment(&one, -1.0),
            Err(Error::Config { .. })
        ));
    }

    #[test]
    fn degenerate_features_give_negative_d() {
        let f = Mat::from_elem((4, 2), 0.5);
        let a = array![[1.0, 0.0], [1.0, 0.0]];
        let b = array![[0.0, 1.0], [0.0, 1.0]];
        let m = layer_metrics(&a, &b, &f, 1, &MetricConfig::default(), 0).unwrap();
        assert_eq!(m.negative_alignment, 0.0);
        assert_eq!(m.d, -m.alignment);
    }

    #[test]
    fn sampled_pairs_are_distinct() {
        let p = sample_pairs(3, 200, 1).unwrap();
        assert!(p.iter().all(|(i, j)| i != j && *i < 3 && *j < 3));
    }
}
