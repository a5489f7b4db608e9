//! Adam with decoupled weight decay.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::autodiff::Mat;
use crate::error::{Error, Result};
use crate::params::ParamSet;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.1,
        }
    }
}

impl AdamWConfig {
    pub fn validate(&self) -> Result<()> {
        for (field, v) in [("optim.beta1", self.beta1), ("optim.beta2", self.beta2)] {
            if !(0.0..1.0).contains(&v) {
                return Err(Error::config(field, "must lie in [0, 1)"));
            }
        }
        if !(self.eps > 0.0) {
            return Err(Error::config("optim.eps", "must be > 0"));
        }
        if !(self.weight_decay >= 0.0) {
            return Err(Error::config("optim.weight_decay", "must be >= 0"));
        }
        Ok(())
    }
}

/// First/second moment estimates keyed by parameter name.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct AdamW {
    pub config: AdamWConfig,
    /// Number of updates taken per parameter (a parameter without a
    /// gradient on some step keeps its own count).
    pub steps: BTreeMap<String, u64>,
    pub exp_avg: ParamSet,
    pub exp_avg_sq: ParamSet,
}

impl AdamW {
    pub fn new(config: AdamWConfig) -> Self {
        Self {
            config,
            ..Self::default()
        }
    }

    /// One update of every parameter in `grads` at learning rate `lr`.
    /// Parameters absent from `grads` are left untouched.
    pub fn step(
        &mut self,
        params: &mut ParamSet,
        grads: &BTreeMap<String, Mat>,
        lr: f64,
    ) -> Result<()> {
        let c = &self.config;
        for (name, g) in grads {
            let p = params.get_mut(name)?;
            if p.dim() != g.dim() {
                return Err(Error::Shape {
                    context: format!("gradient of {name}"),
                    expected: format!("{:?}", p.dim()),
                    actual: format!("{:?}", g.dim()),
                });
            }
            if !self.exp_avg.contains(name) {
                self.exp_avg.insert(name.clone(), Mat::zeros(p.dim()));
                self.exp_avg_sq.insert(name.clone(), Mat::zeros(p.dim()));
            }
            let t = self.steps.entry(name.clone()).or_insert(0);
            *t += 1;
            let bc1 = 1.0 - c.beta1.powi(*t as i32);
            let bc2 = 1.0 - c.beta2.powi(*t as i32);
            let m = self.exp_avg.get_mut(name)?;
            let v = self.exp_avg_sq.get_mut(name)?;
            let decay = 1.0 - lr * c.weight_decay;
            ndarray::Zip::from(p)
                .and(m)
                .and(v)
                .and(g)
                .for_each(|p, m, v, &g| {
                    *p *= decay;
                    *m = c.beta1 * *m + (1.0 - c.beta1) * g;
                    *v = c.beta2 * *v + (1.0 - c.beta2) * g * g;
                    let denom = (*v / bc2).sqrt() + c.eps;
                    *p -= lr * (*m / bc1) / denom;
                });
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn first_step_moves_by_lr() {
        let mut p = ParamSet::new();
        p.insert("w", array![[1.0, -2.0]]);
        let mut opt = AdamW::new(AdamWConfig {
            weight_decay: 0.0,
            ..Default::default()
        });
        let grads = BTreeMap::from([("w".to_string(), array![[0.5, -3.0]])]);
        opt.step(&mut p, &grads, 0.1).unwrap();
        let w = p.get("w").unwrap();
        assert!((w[[0, 0]] - 0.9).abs() < 1e-6);
        assert!((w[[0, 1]] + 1.9).abs() < 1e-6);
        assert_eq!(opt.steps["w"], 1);
    }

    #[test]
    fn decoupled_decay_with_zero_gradient() {
        let mut p = ParamSet::new();
        p.insert("w", array![[2.0]]);
        let mut opt = AdamW::new(AdamWConfig::default());
        let grads = BTreeMap::from([("w".to_string(), array![[0.0]])]);
        opt.step(&mut p, &grads, 0.5).unwrap();
        assert!((p.get("w").unwrap()[[0, 0]] - 2.0 * (1.0 - 0.05)).abs() < 1e-12);
    }

    #[test]
    fn missing_gradient_leaves_parameter() {
        let mut p = ParamSet::new();
        p.insert("a", array![[1.0]]);
        p.insert("b", array![[1.0]]);
        let mut opt = AdamW::new(AdamWConfig::default());
        let grads = BTreeMap::from([("a".to_string(), array![[1.0]])]);
        opt.step(&mut p, &grads, 0.1).unwrap();
        assert_eq!(p.get("b").unwrap()[[0, 0]], 1.0);
        assert!(!opt.exp_avg.contains("b"));
    }

    #[test]
    fn unknown_parameter_is_structural_error() {
        let mut p = ParamSet::new();
        let mut opt = AdamW::new(AdamWConfig::default());
        let grads = BTreeMap::from([("x".to_string(), array![[1.0]])]);
        assert!(matches!(
            opt.step(&mut p, &grads, 0.1),
            Err(Error::Structure(_))
        ));
    }
}
