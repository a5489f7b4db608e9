//! Dataset loading and checkpoint evaluation as used by the command line.

use std::path::{Path, PathBuf};

use crate::config::ExperimentConfig;
use crate::data::cifar::{self, CifarKind};
use crate::data::synthetic::{self, SyntheticConfig};
use crate::data::{ImageDataset, Split};
use crate::error::{Error, Result};
use crate::eval::metrics::geometry;
use crate::eval::report::{write_accuracy, write_report, AccuracyReport};
use crate::eval::{
    eval_indices, evaluate_bank, layer_banks, multi_exit_eval, EvalKind, MetricsReport,
};
use crate::train::TrainerState;

/// Train and test splits named by `config.data`, with the train subset applied.
pub fn load_datasets(config: &ExperimentConfig) -> Result<(ImageDataset, ImageDataset)> {
    let d = &config.data;
    let (train, test) = if d.dataset == "synthetic" {
        let test_cfg = SyntheticConfig {
            num_samples: d.synthetic_test_samples,
            ..d.synthetic.clone()
        };
        (
            synthetic::generate(&d.synthetic, Split::Train),
            synthetic::generate(&test_cfg, Split::Test),
        )
    } else {
        let kind = CifarKind::parse(&d.dataset)?;
        let [tr, te] = cifar::verify(kind, &d.cache_dir)?;
        (cifar::load(&tr)?, cifar::load(&te)?)
    };
    let train = if d.subset > 0 {
        train.random_subset(d.subset, config.seed)?
    } else {
        train
    };
    if train.len() < d.batch_size {
        return Err(Error::config(
            "data.batch_size",
            format!(
                "{} exceeds the {} training samples",
                d.batch_size,
                train.len()
            ),
        ));
    }
    Ok((train, test))
}

/// What `eval` computes.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum EvalTarget {
    /// Final-layer accuracy.
    Final(EvalKind),
    /// Accuracy at every layer.
    MultiExit(EvalKind),
    /// Per-layer alignment, uniformity, negative alignment and D.
    Metrics,
}

/// Evaluates the student encoder of `state` and writes the report files into `out_dir`.
pub fn evaluate_checkpoint(
    state: &TrainerState,
    train: &ImageDataset,
    test: &ImageDataset,
    target: EvalTarget,
    label: &str,
    out_dir: &Path,
) -> Result<Vec<PathBuf>> {
    let cfg = &state.config;
    let ec = &cfg.eval;
    let seed = cfg.seed;
    let enc = &state.encoder;
    let params = &state.student;
    match target {
        EvalTarget::Final(kind) => {
            let l = enc.config.num_layers;
            let tr = layer_banks(
                enc,
                params,
                train,
                &eval_indices(train.len(), ec.max_train, seed),
                ec.feature_chunk,
            )?;
            let te = layer_banks(
                enc,
                params,
                test,
                &eval_indices(test.len(), ec.max_test, seed),
                ec.feature_chunk,
            )?;
            let acc = evaluate_bank(&tr[l - 1], &te[l - 1], kind, ec, seed)?;
            let report = AccuracyReport {
                label: label.into(),
                kind,
                layers: vec![l],
                accuracy: vec![acc],
            };
            log::info!("{} accuracy at layer {l}: {acc:.4}", kind.as_str());
            write_accuracy(&report, kind.as_str(), out_dir)
        }
        EvalTarget::MultiExit(kind) => {
            let acc = multi_exit_eval(enc, params, train, test, kind, ec, seed)?;
            let report = AccuracyReport::multi_exit(label, kind, acc);
            write_accuracy(&report, &format!("multiexit_{}", kind.as_str()), out_dir)
        }
        EvalTarget::Metrics => {
            let idx = eval_indices(test.len(), ec.metric_samples, seed);
            let layers = geometry(enc, params, test, &idx, &cfg.data.recipe, ec, seed)?;
            let report = MetricsReport {
                label: label.into(),
                layers,
                knn: None,
                linear: None,
            };
            write_report(&report, out_dir)
        }
    }
}
