//! Experiment configuration: TOML files, dotted-path overrides, validation.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::cifar::CifarKind;
use crate::data::synthetic::SyntheticConfig;
use crate::data::AugmentationRecipe;
use crate::error::{Error, Result};
use crate::framework::Framework;
use crate::heads::HeadConfig;
use crate::losses::LossConfig;
use crate::optim::AdamWConfig;
use crate::vit::EncoderConfig;

pub const RESOLVED_CONFIG_FILE: &str = "resolved_config.toml";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScheduleConfig {
    pub epochs: usize,
    /// Fraction of total steps spent in linear warmup.
    pub warmup_fraction: f64,
    /// Base learning rate per `lr_batch_reference` samples; the applied rate
    /// is `lr · batch_size / lr_batch_reference`.
    pub lr: f64,
    pub lr_batch_reference: usize,
    pub ema_base: f64,
    pub ema_final: f64,
    /// Write a checkpoint every this many epochs (0: final checkpoint only).
    pub checkpoint_every: usize,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        Self {
            epochs: 50,
            warmup_fraction: 0.1,
            lr: 1.5e-4,
            lr_batch_reference: 256,
            ema_base: 0.99,
            ema_final: 1.0,
            checkpoint_every: 10,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    /// `synthetic`, `cifar10` or `cifar100`.
    pub dataset: String,
    pub cache_dir: PathBuf,
    /// Train on a seeded subset of this many images (0: whole split).
    pub subset: usize,
    pub batch_size: usize,
    pub recipe: AugmentationRecipe,
    pub synthetic: SyntheticConfig,
    pub synthetic_test_samples: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            dataset: "synthetic".into(),
            cache_dir: PathBuf::from("data"),
            subset: 0,
            batch_size: 256,
            recipe: AugmentationRecipe::default(),
            synthetic: SyntheticConfig::default(),
            synthetic_test_samples: 512,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LinearProbeConfig {
    pub epochs: usize,
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
}

impl Default for LinearProbeConfig {
    fn default() -> Self {
        Self {
            epochs: 100,
            lr: 0.1,
            momentum: 0.9,
            weight_decay: 0.0,
            batch_size: 256,
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind", content = "pairs")]
pub enum PairSampling {
    #[default]
    AllPairs,
    /// This many random ordered pairs `i ≠ j`.
    Subsample(usize),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub knn_k: usize,
    pub knn_tau: f64,
    pub gamma: f64,
    pub t: f64,
    pub pair_sampling: PairSampling,
    pub linear: LinearProbeConfig,
    /// Cap on train / test images used for evaluation (0: all).
    pub max_train: usize,
    pub max_test: usize,
    /// Test images used for the geometry metrics.
    pub metric_samples: usize,
    pub feature_chunk: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            knn_k: 20,
            knn_tau: 0.07,
            gamma: 2.0,
            t: 2.0,
            pair_sampling: PairSampling::AllPairs,
            linear: LinearProbeConfig::default(),
            max_train: 0,
            max_test: 0,
            metric_samples: 1024,
            feature_chunk: 256,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub framework: Framework,
    pub sdssl_enabled: bool,
    pub seed: u64,
    pub output_dir: PathBuf,
    pub encoder: EncoderConfig,
    pub heads: HeadConfig,
    pub loss: LossConfig,
    pub schedule: ScheduleConfig,
    pub optim: AdamWConfig,
    pub data: DataConfig,
    pub eval: EvalConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            framework: Framework::Mocov3,
            sdssl_enabled: true,
            seed: 0,
            output_dir: PathBuf::from("runs/default"),
            encoder: EncoderConfig::default(),
            heads: HeadConfig::default(),
            loss: LossConfig::default(),
            schedule: ScheduleConfig::default(),
            optim: AdamWConfig::default(),
            data: DataConfig::default(),
            eval: EvalConfig::default(),
        }
    }
}

impl ExperimentConfig {
    /// Parses a config file, applies `overrides` (`dotted.path=value`) and validates.
    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let mut table = match path {
            Some(p) => {
                let text = fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
                text.parse::<toml::Table>()
                    .map_err(|e| Error::Schema(vec![format!("{}: {e}", p.display())]))?
            }
            None => toml::Table::new(),
        };
        for o in overrides {
            apply_override(&mut table, o)?;
        }
        Self::from_table(table)
    }

    pub fn from_table(table: toml::Table) -> Result<Self> {
        let reference =
            toml::Table::try_from(ExperimentConfig::default()).expect("default config serializes");
        let mut problems = Vec::new();
        unknown_keys(&table, &reference, "", &mut problems);
        if !problems.is_empty() {
            return Err(Error::Schema(problems));
        }
        let cfg: ExperimentConfig = toml::Value::Table(table)
            .try_into()
            .map_err(|e: toml::de::Error| Error::Schema(vec![e.message().to_string()]))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Every value problem at once, as a schema error.
    pub fn validate(&self) -> Result<()> {
        let mut problems = Vec::new();
        let mut check = |r: Result<()>| {
            if let Err(e) = r {
                problems.push(e.to_string());
            }
        };
        check(self.encoder.validate());
        check(self.heads.validate());
        check(self.loss.validate(self.framework));
        check(self.optim.validate());
        check(self.data.recipe.validate());
        let s = &self.schedule;
        if s.epochs == 0 {
            check(Err(Error::config("schedule.epochs", "must be positive")));
        }
        if !(0.0..1.0).contains(&s.warmup_fraction) {
            check(Err(Error::config(
                "schedule.warmup_fraction",
                "must lie in [0, 1)",
            )));
        }
        if !(s.lr > 0.0) || s.lr_batch_reference == 0 {
            check(Err(Error::config(
                "schedule.lr",
                "must be > 0 with a positive lr_batch_reference",
            )));
        }
        if !(0.0..1.0).contains(&s.ema_base) || !(s.ema_final > s.ema_base && s.ema_final <= 1.0) {
            check(Err(Error::config(
                "schedule.ema_base",
                "need 0 <= ema_base < ema_final <= 1",
            )));
        }
        let d = &self.data;
        if d.dataset != "synthetic" {
            check(CifarKind::parse(&d.dataset).map(|_| ()));
        }
        if d.batch_size < 2 {
            check(Err(Error::config("data.batch_size", "must be at least 2")));
        }
        if d.recipe.output_size != self.encoder.image_size {
            check(Err(Error::config(
                "data.recipe.output_size",
                format!(
                    "{} differs from encoder.image_size {}",
                    d.recipe.output_size, self.encoder.image_size
                ),
            )));
        }
        if d.dataset == "synthetic"
            && (d.synthetic.num_classes < 2 || d.synthetic_test_samples == 0)
        {
            check(Err(Error::config(
                "data.synthetic",
                "need >= 2 classes and a non-empty test split",
            )));
        }
        let e = &self.eval;
        if e.knn_k == 0 || !(e.knn_tau > 0.0) {
            check(Err(Error::config(
                "eval.knn_k",
                "k and knn_tau must be positive",
            )));
        }
        if !(e.gamma > 0.0) {
            check(Err(Error::config("eval.gamma", "must be > 0")));
        }
        if !(e.t > 0.0) {
            check(Err(Error::config("eval.t", "must be > 0")));
        }
        if e.linear.epochs == 0 || !(e.linear.lr > 0.0) || e.linear.batch_size == 0 {
            check(Err(Error::config(
                "eval.linear",
                "epochs, lr and batch_size must be positive",
            )));
        }
        if !(0.0..1.0).contains(&e.linear.momentum) {
            check(Err(Error::config(
                "eval.linear.momentum",
                "must lie in [0, 1)",
            )));
        }
        if e.metric_samples < 2 || e.feature_chunk == 0 {
            check(Err(Error::config(
                "eval.metric_samples",
                "need >= 2 samples and a positive feature_chunk",
            )));
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::Schema(problems))
        }
    }

    /// Learning rate after batch-size scaling.
    pub fn effective_lr(&self) -> f64 {
        self.schedule.lr * self.data.batch_size as f64 / self.schedule.lr_batch_reference as f64
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    /// Writes the fully resolved config (every default filled in) into `dir`.
    pub fn write_resolved(&self, dir: &Path) -> Result<PathBuf> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let path = dir.join(RESOLVED_CONFIG_FILE);
        fs::write(&path, self.to_toml()).map_err(|e| Error::io(&path, e))?;
        Ok(path)
    }
}

fn unknown_keys(table: &toml::Table, reference: &toml::Table, prefix: &str, out: &mut Vec<String>) {
    for (k, v) in table {
        let path = if prefix.is_empty() {
            k.clone()
        } else {
            format!("{prefix}.{k}")
        };
        match reference.get(k) {
            None => out.push(format!("unknown key `{path}`")),
            Some(toml::Value::Table(r)) => {
                if let toml::Value::Table(t) = v {
                    // tagged enums carry variant-specific keys
                    if !r.contains_key("kind") {
                        unknown_keys(t, r, &path, out);
                    }
                }
            }
            Some(_) => {}
        }
    }
}

/// Sets `dotted.path=value` in `table`. The value is parsed as a TOML value
/// and taken as a bare string when that fails.
pub fn apply_override(table: &mut toml::Table, arg: &str) -> Result<()> {
    let (path, raw) = arg.split_once('=').ok_or_else(|| {
        Error::Schema(vec![format!(
            "override `{arg}` is not of the form key=value"
        )])
    })?;
    let path = path.trim();
    let raw = raw.trim();
    if path.is_empty() || path.split('.').any(str::is_empty) {
        return Err(Error::Schema(vec![format!(
            "override `{arg}` has an empty key"
        )]));
    }
    let value = format!("v = {raw}")
        .parse::<toml::Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()));
    let mut keys: Vec<&str> = path.split('.').collect();
    let last = keys.pop().unwrap();
    let mut cur = table;
    for k in keys {
        let entry = cur
            .entry(k.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        cur = match entry {
            toml::Value::Table(t) => t,
            _ => {
                return Err(Error::Schema(vec![format!(
                    "override `{path}`: `{k}` is not a table"
                )]))
            }
        };
    }
    cur.insert(last.to_string(), value);
    Ok(())
}
