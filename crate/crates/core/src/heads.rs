//! Per-layer projector and predictor MLPs.
//!
//! Projectors are 3-layer MLPs, predictors 2-layer MLPs. Hidden layers are
//! `Linear → BatchNorm → ReLU` without bias; the output layer carries a
//! non-affine batch normalization unless the framework is BYOL, in which case
//! it has a bias instead.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Mat, NormAxis, Var};
use crate::error::{Error, Result};
use crate::framework::Framework;
use crate::params::{name_rng, trunc_normal, ParamSet};

const BN_EPS: f64 = 1e-5;
const BN_MOMENTUM: f64 = 0.1;
const INIT_STD: f64 = 0.02;

/// Linear weights `(name, rows, cols)`, plain BN `(prefix, width)` and
/// output BN `(prefix, width, affine)`.
type Layout = (
    Vec<(String, usize, usize)>,
    Vec<(String, usize)>,
    Vec<(String, usize, bool)>,
);

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct HeadConfig {
    pub out_dim: usize,
    pub hidden_last_projector: usize,
    pub hidden_intermediate_projector: usize,
    pub hidden_predictor: usize,
    /// One predictor for every layer instead of one per layer.
    pub shared_predictor: bool,
}

impl Default for HeadConfig {
    fn default() -> Self {
        Self {
            out_dim: 64,
            hidden_last_projector: 256,
            hidden_intermediate_projector: 128,
            hidden_predictor: 256,
            shared_predictor: false,
        }
    }
}

impl HeadConfig {
    /// Widths used for the ImageNet-scale models.
    pub fn imagenet_preset() -> Self {
        Self {
            out_dim: 256,
            hidden_last_projector: 4096,
            hidden_intermediate_projector: 2048,
            hidden_predictor: 4096,
            shared_predictor: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (field, v) in [
            ("heads.out_dim", self.out_dim),
            ("heads.hidden_last_projector", self.hidden_last_projector),
            (
                "heads.hidden_intermediate_projector",
                self.hidden_intermediate_projector,
            ),
            ("heads.hidden_predictor", self.hidden_predictor),
        ] {
            if v == 0 {
                return Err(Error::config(field, "must be positive"));
            }
        }
        Ok(())
    }
}

/// Running-statistics update produced by a training-mode batch normalization.
#[derive(Clone, Debug)]
pub struct BnUpdate {
    pub prefix: String,
    pub mean: Vec<f64>,
    pub var_unbiased: Vec<f64>,
}

/// How batch normalization behaves during a forward pass.
pub enum BnMode<'a> {
    /// Batch statistics; updates are appended to the sink when present.
    Train(Option<&'a mut Vec<BnUpdate>>),
    /// Running statistics from the buffer set.
    Eval(&'a ParamSet),
}

/// Applies collected statistics to running-mean / running-variance buffers.
pub fn apply_bn_updates(buffers: &mut ParamSet, updates: &[BnUpdate]) -> Result<()> {
    for u in updates {
        let rm = buffers.get_mut(&format!("{}.running_mean", u.prefix))?;
        for (r, &m) in rm.iter_mut().zip(&u.mean) {
            *r = (1.0 - BN_MOMENTUM) * *r + BN_MOMENTUM * m;
        }
        let rv = buffers.get_mut(&format!("{}.running_var", u.prefix))?;
        for (r, &v) in rv.iter_mut().zip(&u.var_unbiased) {
            *r = (1.0 - BN_MOMENTUM) * *r + BN_MOMENTUM * v;
        }
    }
    Ok(())
}

/// The projector/predictor heads attached to a subset of encoder layers.
#[derive(Clone, Debug)]
pub struct HeadBank {
    pub config: HeadConfig,
    pub framework: Framework,
    pub num_layers: usize,
    pub embed_dim: usize,
    tapped: Vec<usize>,
    with_predictors: bool,
}

impl HeadBank {
    /// Student heads: every layer when `all_layers`, otherwise only the last.
    pub fn student(
        config: HeadConfig,
        framework: Framework,
        num_layers: usize,
        embed_dim: usize,
        all_layers: bool,
    ) -> Result<Self> {
        config.validate()?;
        let tapped = if all_layers {
            (1..=num_layers).collect()
        } else {
            vec![num_layers]
        };
        Ok(Self {
            config,
            framework,
            num_layers,
            embed_dim,
            tapped,
            with_predictors: framework.has_predictor(),
        })
    }

    /// Teacher heads: the last projector only.
    pub fn teacher(
        config: HeadConfig,
        framework: Framework,
        num_layers: usize,
        embed_dim: usize,
    ) -> Result<Self> {
        config.validate()?;
        Ok(Self {
            config,
            framework,
            num_layers,
            embed_dim,
            tapped: vec![num_layers],
            with_predictors: false,
        })
    }

    pub fn tapped_layers(&self) -> &[usize] {
        &self.tapped
    }

    pub fn has_predictors(&self) -> bool {
        self.with_predictors
    }

    pub fn bn_on_output(&self) -> bool {
        self.framework.bn_on_output()
    }

    fn check_layer(&self, layer: usize) -> Result<()> {
        if self.tapped.contains(&layer) {
            Ok(())
        } else {
            Err(Error::Index {
                what: "head layer".into(),
                index: layer,
                valid: format!("{:?}", self.tapped),
            })
        }
    }

    pub fn projector_prefix(layer: usize) -> String {
        format!("heads.projector.{layer}")
    }

    pub fn predictor_prefix(&self, layer: usize) -> String {
        if self.config.shared_predictor {
            "heads.predictor.shared".into()
        } else {
            format!("heads.predictor.{layer}")
        }
    }

    pub fn projector_hidden(&self, layer: usize) -> usize {
        if layer == self.num_layers {
            self.config.hidden_last_projector
        } else {
            self.config.hidden_intermediate_projector
        }
    }

    /// `(name, rows, cols)` of every linear weight, plus BN prefixes with
    /// their width and whether they are affine.
    fn layout(&self) -> Layout {
        let mut weights = Vec::new();
        let mut biases = Vec::new();
        let mut bns = Vec::new();
        let out = self.config.out_dim;
        let bn_out = self.bn_on_output();
        for &l in &self.tapped {
            let p = Self::projector_prefix(l);
            let h = self.projector_hidden(l);
            weights.push((format!("{p}.fc1.weight"), self.embed_dim, h));
            bns.push((format!("{p}.bn1"), h, true));
            weights.push((format!("{p}.fc2.weight"), h, h));
            bns.push((format!("{p}.bn2"), h, true));
            weights.push((format!("{p}.fc3.weight"), h, out));
            if bn_out {
                bns.push((format!("{p}.bn3"), out, false));
            } else {
                biases.push((format!("{p}.fc3.bias"), out));
            }
        }
        if self.with_predictors {
            let mut prefixes: Vec<String> = self
                .tapped
                .iter()
                .map(|&l| self.predictor_prefix(l))
                .collect();
            prefixes.dedup();
            let h = self.config.hidden_predictor;
            for p in prefixes {
                weights.push((format!("{p}.fc1.weight"), out, h));
                bns.push((format!("{p}.bn1"), h, true));
                weights.push((format!("{p}.fc2.weight"), h, out));
                if bn_out {
                    bns.push((format!("{p}.bn2"), out, false));
                } else {
                    biases.push((format!("{p}.fc2.bias"), out));
                }
            }
        }
        (weights, biases, bns)
    }

    pub fn init_params(&self, seed: u64) -> ParamSet {
        let (weights, biases, bns) = self.layout();
        let mut p = ParamSet::new();
        for (name, r, c) in weights {
            let m = trunc_normal(r, c, INIT_STD, &mut name_rng(seed, &name));
            p.insert(name, m);
        }
        for (name, c) in biases {
            p.insert(name, Mat::zeros((1, c)));
        }
        for (prefix, c, affine) in bns {
            if affine {
                p.insert(format!("{prefix}.gamma"), Mat::ones((1, c)));
                p.insert(format!("{prefix}.beta"), Mat::zeros((1, c)));
            }
        }
        p
    }

    /// Running statistics for every batch normalization.
    pub fn init_buffers(&self) -> ParamSet {
        let (_, _, bns) = self.layout();
        let mut b = ParamSet::new();
        for (prefix, c, _) in bns {
            b.insert(format!("{prefix}.running_mean"), Mat::zeros((1, c)));
            b.insert(format!("{prefix}.running_var"), Mat::ones((1, c)));
        }
        b
    }

    fn batch_norm(
        g: &mut Graph,
        params: &ParamSet,
        x: Var,
        prefix: &str,
        affine: bool,
        trainable: bool,
        mode: &mut BnMode<'_>,
    ) -> Result<Var> {
        let h = match mode {
            BnMode::Train(sink) => {
                if let Some(sink) = sink.as_deref_mut() {
                    let xv = g.value(x);
                    let n = xv.nrows() as f64;
                    let mean: Vec<f64> = xv.mean_axis(ndarray::Axis(0)).unwrap().to_vec();
                    let var_unbiased = xv
                        .columns()
                        .into_iter()
                        .zip(&mean)
                        .map(|(c, &m)| {
                            c.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / (n - 1.0).max(1.0)
                        })
                        .collect();
                    sink.push(BnUpdate {
                        prefix: prefix.to_string(),
                        mean,
                        var_unbiased,
                    });
                }
                g.standardize(x, NormAxis::Cols, BN_EPS)
            }
            BnMode::Eval(buffers) => {
                let rm = buffers.get(&format!("{prefix}.running_mean"))?;
                let rv = buffers.get(&format!("{prefix}.running_var"))?;
                let shift = g.constant(-rm);
                let inv = g.constant(rv.mapv(|v| 1.0 / (v + BN_EPS).sqrt()));
                let h = g.add_row(x, shift);
                g.mul_row(h, inv)
            }
        };
        if !affine {
            return Ok(h);
        }
        let gamma = g.param(
            &format!("{prefix}.gamma"),
            params.get(&format!("{prefix}.gamma"))?,
            trainable,
        );
        let beta = g.param(
            &format!("{prefix}.beta"),
            params.get(&format!("{prefix}.beta"))?,
            trainable,
        );
        let h = g.mul_row(h, gamma);
        Ok(g.add_row(h, beta))
    }

    fn weight(g: &mut Graph, params: &ParamSet, name: &str, trainable: bool) -> Result<Var> {
        Ok(g.param(name, params.get(name)?, trainable))
    }

    #[allow(clippy::too_many_arguments)]
    fn output_layer(
        &self,
        g: &mut Graph,
        params: &ParamSet,
        h: Var,
        prefix: &str,
        fc: &str,
        bn: &str,
        trainable: bool,
        mode: &mut BnMode<'_>,
    ) -> Result<Var> {
        let w = Self::weight(g, params, &format!("{prefix}.{fc}.weight"), trainable)?;
        let y = g.matmul(h, w);
        if self.bn_on_output() {
            Self::batch_norm(
                g,
                params,
                y,
                &format!("{prefix}.{bn}"),
                false,
                trainable,
                mode,
            )
        } else {
            let b = Self::weight(g, params, &format!("{prefix}.{fc}.bias"), trainable)?;
            Ok(g.add_row(y, b))
        }
    }

    /// Projector of `layer` (1-based) applied to `N × D` features.
    pub fn project(
        &self,
        g: &mut Graph,
        params: &ParamSet,
        layer: usize,
        features: Var,
        trainable: bool,
        mut mode: BnMode<'_>,
    ) -> Result<Var> {
        self.check_layer(layer)?;
        let (_, d) = g.value(features).dim();
        if d != self.embed_dim {
            return Err(Error::shape("projector input", self.embed_dim, d));
        }
        let p = Self::projector_prefix(layer);
        let mut h = features;
        for (fc, bn) in [("fc1", "bn1"), ("fc2", "bn2")] {
            let w = Self::weight(g, params, &format!("{p}.{fc}.weight"), trainable)?;
            h = g.matmul(h, w);
            h = Self::batch_norm(
                g,
                params,
                h,
                &format!("{p}.{bn}"),
                true,
                trainable,
                &mut mode,
            )?;
            h = g.relu(h);
        }
        self.output_layer(g, params, h, &p, "fc3", "bn3", trainable, &mut mode)
    }

    /// Predictor of `layer` applied to `N × out_dim` projections.
    pub fn predict(
        &self,
        g: &mut Graph,
        params: &ParamSet,
        layer: usize,
        projected: Var,
        trainable: bool,
        mut mode: BnMode<'_>,
    ) -> Result<Var> {
        if !self.framework.has_predictor() {
            return Err(Error::Unsupported {
                framework: self.framework.to_string(),
                operation: "predictor heads".into(),
            });
        }
        if !self.with_predictors {
            return Err(Error::Structure(
                "this head bank holds no predictors".into(),
            ));
        }
        self.check_layer(layer)?;
        let (_, d) = g.value(projected).dim();
        if d != self.config.out_dim {
            return Err(Error::shape("predictor input", self.config.out_dim, d));
        }
        let p = self.predictor_prefix(layer);
        let w = Self::weight(g, params, &format!("{p}.fc1.weight"), trainable)?;
        let h = g.matmul(projected, w);
        let h = Self::batch_norm(
            g,
            params,
            h,
            &format!("{p}.bn1"),
            true,
            trainable,
            &mut mode,
        )?;
        let h = g.relu(h);
        self.output_layer(g, params, h, &p, "fc2", "bn2", trainable, &mut mode)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(rows: usize, cols: usize, seed: u64) -> Mat {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Mat::from_shape_fn((rows, cols), |_| rng.random_range(-1.0..1.0))
    }

    fn imagenet_bank(framework: Framework) -> HeadBank {
        HeadBank::student(HeadConfig::imagenet_preset(), framework, 12, 384, true).unwrap()
    }

    #[test]
    fn imagenet_widths() {
        let bank = imagenet_bank(Framework::Mocov3);
        let p = bank.init_params(0);
        assert_eq!(p.get("heads.projector.12.fc3.weight").unwrap().ncols(), 256);
        assert_eq!(
            p.get("heads.projector.12.fc1.weight").unwrap().ncols(),
            4096
        );
        assert_eq!(p.get("heads.projector.3.fc1.weight").unwrap().ncols(), 2048);
        assert_eq!(p.get("heads.predictor.3.fc1.weight").unwrap().ncols(), 4096);
        assert_eq!(
            p.get("heads.predictor.3.fc2.weight").unwrap().dim(),
            (4096, 256)
        );
    }

    #[test]
    fn byol_has_no_output_batch_norm() {
        let bank = HeadBank::student(HeadConfig::default(), Framework::Byol, 3, 16, true).unwrap();
        let b = bank.init_buffers();
        assert!(!b.contains("heads.predictor.2.bn2.running_mean"));
        assert!(!b.contains("heads.projector.3.bn3.running_mean"));
        assert!(bank.init_params(0).contains("heads.predictor.2.fc2.bias"));
        let moco =
            HeadBank::student(HeadConfig::default(), Framework::Mocov3, 3, 16, true).unwrap();
        assert!(moco
            .init_buffers()
            .contains("heads.predictor.2.bn2.running_mean"));
        assert!(!moco.init_params(0).contains("heads.predictor.2.fc2.bias"));
    }

    #[test]
    fn output_shapes_and_identical_rows() {
        let cfg = HeadConfig {
            out_dim: 8,
            hidden_last_projector: 12,
            hidden_intermediate_projector: 6,
            hidden_predictor: 10,
            shared_predictor: false,
        };
        let bank = HeadBank::student(cfg, Framework::Mocov3, 2, 16, true).unwrap();
        let params = bank.init_params(1);
        let mut x = random(4, 16, 2);
        let r0 = x.row(0).to_owned();
        x.row_mut(3).assign(&r0);
        let mut g = Graph::new();
        let xv = g.constant(x);
        let h = bank
            .project(&mut g, &params, 1, xv, true, BnMode::Train(None))
            .unwrap();
        assert_eq!(g.value(h).dim(), (4, 8));
        assert_eq!(g.value(h).row(0), g.value(h).row(3));
        let q = bank
            .predict(&mut g, &params, 1, h, true, BnMode::Train(None))
            .unwrap();
        assert_eq!(g.value(q).dim(), (4, 8));
    }

    #[test]
    fn layer_out_of_range_and_teacher_restrictions() {
        let bank =
            HeadBank::student(HeadConfig::default(), Framework::Mocov3, 3, 16, true).unwrap();
        let params = bank.init_params(0);
        let mut g = Graph::new();
        let x = g.constant(random(4, 16, 0));
        assert!(matches!(
            bank.project(&mut g, &params, 4, x, true, BnMode::Train(None)),
            Err(Error::Index { .. })
        ));
        assert!(matches!(
            bank.project(&mut g, &params, 0, x, true, BnMode::Train(None)),
            Err(Error::Index { .. })
        ));
        let teacher = HeadBank::teacher(HeadConfig::default(), Framework::Mocov3, 3, 16).unwrap();
        let tp = teacher.init_params(0);
        assert!(teacher
            .project(&mut g, &tp, 3, x, false, BnMode::Train(None))
            .is_ok());
        assert!(matches!(
            teacher.project(&mut g, &tp, 2, x, false, BnMode::Train(None)),
            Err(Error::Index { .. })
        ));
        assert!(tp.names().all(|n| n.starts_with("heads.projector.3.")));
    }

    #[test]
    fn simclr_has_no_predictor() {
        let bank =
            HeadBank::student(HeadConfig::default(), Framework::Simclr, 3, 16, true).unwrap();
        assert!(bank
            .init_params(0)
            .names()
            .all(|n| !n.contains("predictor")));
        let mut g = Graph::new();
        let x = g.constant(random(4, 64, 0));
        assert!(matches!(
            bank.predict(&mut g, &ParamSet::new(), 3, x, true, BnMode::Train(None)),
            Err(Error::Unsupported { .. })
        ));
    }

    #[test]
    fn shared_predictor_switch() {
        let cfg = HeadConfig {
            shared_predictor: true,
            ..HeadConfig::default()
        };
        let bank = HeadBank::student(cfg, Framework::Byol, 4, 16, true).unwrap();
        let p = bank.init_params(0);
        assert!(p.contains("heads.predictor.shared.fc1.weight"));
        assert!(!p.contains("heads.predictor.1.fc1.weight"));
    }

    #[test]
    fn running_statistics_update() {
        let bank =
            HeadBank::student(HeadConfig::default(), Framework::Mocov3, 2, 16, false).unwrap();
        let params = bank.init_params(0);
        let mut buffers = bank.init_buffers();
        let mut updates = Vec::new();
        let mut g = Graph::new();
        let x = g.constant(random(8, 16, 3));
        bank.project(
            &mut g,
            &params,
            2,
            x,
            true,
            BnMode::Train(Some(&mut updates)),
        )
        .unwrap();
        assert_eq!(updates.len(), 3);
        let before = buffers.clone();
        apply_bn_updates(&mut buffers, &updates).unwrap();
        assert_ne!(before, buffers);
        let y = bank
            .project(&mut g, &params, 2, x, false, BnMode::Eval(&buffers))
            .unwrap();
        assert!(g.value(y).iter().all(|v| v.is_finite()));
    }

    #[test]
    fn predictor_gradient_matches_finite_differences() {
        let cfg = HeadConfig {
            out_dim: 4,
            hidden_last_projector: 6,
            hidden_intermediate_projector: 6,
            hidden_predictor: 5,
            shared_predictor: false,
        };
        let bank = HeadBank::student(cfg, Framework::Mocov3, 2, 8, false).unwrap();
        let params = bank.init_params(4);
        let input = random(6, 4, 5);
        let probe = random(6, 4, 6);
        let eval = |p: &ParamSet| -> (f64, Option<Mat>) {
            let mut g = Graph::new();
            let x = g.constant(input.clone());
            let q = bank
                .predict(&mut g, p, 2, x, true, BnMode::Train(None))
                .unwrap();
            let w = g.constant(probe.clone());
            let y = g.mul(q, w);
            let s = g.sum_all(y);
            let grads = g.backward(s);
            let wv = g.bound_params()["heads.predictor.2.fc1.weight"];
            (g.scalar(s), grads.get(wv).cloned())
        };
        let (_, analytic) = eval(&params);
        let analytic = analytic.unwrap();
        let h = 1e-6;
        for idx in 0..analytic.len() {
            let mut plus = params.clone();
            plus.get_mut("heads.predictor.2.fc1.weight")
                .unwrap()
                .as_slice_mut()
                .unwrap()[idx] += h;
            let mut minus = params.clone();
            minus
                .get_mut("heads.predictor.2.fc1.weight")
                .unwrap()
                .as_slice_mut()
                .unwrap()[idx] -= h;
            let numeric = (eval(&plus).0 - eval(&minus).0) / (2.0 * h);
            let a = analytic.as_slice().unwrap()[idx];
            assert!(
                (a - numeric).abs() <= 1e-3 * a.abs().max(numeric.abs()) + 1e-8,
                "{idx}: {a} vs {numeric}"
            );
        }
    }
}
