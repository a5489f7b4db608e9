//! Ablation matrix: variants of one config trained with a shared seed and
//! compared by per-layer k-NN accuracy.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::config::ExperimentConfig;
use crate::data::ImageDataset;
use crate::error::{Error, Result};
use crate::eval::report::{write_charts, write_json};
use crate::eval::{multi_exit_eval, EvalKind, MetricsReport};
use crate::losses::{AlphaSchedule, DistillView};
use crate::train::{self, csv_error};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    /// Plain framework, no self-distillation.
    Baseline,
    /// Full self-distillation.
    Sd,
    /// Constant α = alpha_max from the first step.
    NoAnneal,
    /// Predictor loss switched off (β = 0).
    NoPred,
    /// Baseline plus the predictor loss: α = 0, β = 1.
    PredOnly,
    /// Intermediate layers distill the same view.
    SameView,
}

pub const SUITE: [Variant; 4] = [
    Variant::NoAnneal,
    Variant::NoPred,
    Variant::PredOnly,
    Variant::SameView,
];

impl Variant {
    pub fn as_str(self) -> &'static str {
        match self {
            Variant::Baseline => "baseline",
            Variant::Sd => "sd",
            Variant::NoAnneal => "no_anneal",
            Variant::NoPred => "no_pred",
            Variant::PredOnly => "pred_only",
            Variant::SameView => "same_view",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        [
            Variant::Baseline,
            Variant::Sd,
            Variant::NoAnneal,
            Variant::NoPred,
            Variant::PredOnly,
            Variant::SameView,
        ]
        .into_iter()
        .find(|v| v.as_str() == s)
        .ok_or_else(|| {
            Error::config(
                "suite",
                format!("unknown variant `{s}` (expected baseline, sd, no_anneal, no_pred, pred_only or same_view)"),
            )
        })
    }

    /// `base` with this variant's switches applied.
    pub fn apply(self, base: &ExperimentConfig) -> ExperimentConfig {
        let mut c = base.clone();
        c.sdssl_enabled = self != Variant::Baseline;
        match self {
            Variant::Baseline | Variant::Sd => {}
            Variant::NoAnneal => c.loss.alpha_schedule = AlphaSchedule::Constant,
            Variant::NoPred => c.loss.beta = 0.0,
            Variant::PredOnly => {
                c.loss.alpha_max = 0.0;
                c.loss.beta = 1.0;
            }
            Variant::SameView => c.loss.distill_view = DistillView::SameView,
        }
        c
    }

    /// Run this variant is compared against, and the expected sign of the
    /// final-layer k-NN difference.
    pub fn reference(self) -> Option<(Variant, i8)> {
        match self {
            Variant::Baseline => None,
            Variant::Sd => Some((Variant::Baseline, 1)),
            Variant::PredOnly => Some((Variant::Baseline, 1)),
            Variant::NoAnneal | Variant::NoPred | Variant::SameView => Some((Variant::Sd, -1)),
        }
    }
}

/// Requested variants plus every reference they need, in a fixed order.
pub fn expand_suite(requested: &[Variant]) -> Vec<Variant> {
    let mut all: Vec<Variant> = requested.to_vec();
    for v in requested {
        let mut r = v.reference();
        while let Some((p, _)) = r {
            all.push(p);
            r = p.reference();
        }
    }
    all.sort();
    all.dedup();
    all
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub variant: Variant,
    /// k-NN accuracy per layer.
    pub knn: Vec<f64>,
    pub final_knn: f64,
    pub reference: Option<Variant>,
    /// `final_knn` minus the reference's.
    pub delta: Option<f64>,
    /// Layer-averaged accuracy minus the reference's.
    pub delta_mean: Option<f64>,
    pub expected_sign: Option<i8>,
    /// Recorded only; never gated.
    pub sign_agrees: Option<bool>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub framework: String,
    pub seed: u64,
    pub rows: Vec<AblationRow>,
}

impl AblationReport {
    pub fn row(&self, v: Variant) -> Option<&AblationRow> {
        self.rows.iter().find(|r| r.variant == v)
    }

    pub fn markdown(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(
            s,
            "| variant | k-NN | delta | reference | expected sign | agrees |"
        );
        let _ = writeln!(s, "|---|---|---|---|---|---|");
        for r in &self.rows {
            let opt = |v: Option<String>| v.unwrap_or_else(|| "-".into());
            let _ = writeln!(
                s,
                "| {} | {:.2} | {} | {} | {} | {} |",
                r.variant.as_str(),
                100.0 * r.final_knn,
                opt(r.delta.map(|d| format!("{:+.2}", 100.0 * d))),
                opt(r.reference.map(|v| v.as_str().to_string())),
                opt(r.expected_sign.map(|e| if e > 0 {
                    "+".to_string()
                } else {
                    "-".to_string()
                })),
                opt(r.sign_agrees.map(|b| if b {
                    "yes".to_string()
                } else {
                    "no".to_string()
                })),
            );
        }
        s
    }
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len().max(1) as f64
}

/// Deltas of every row against its reference.
pub fn compare(framework: &str, seed: u64, results: Vec<(Variant, Vec<f64>)>) -> AblationReport {
    let find = |v: Variant| {
        results
            .iter()
            .find(|(w, _)| *w == v)
            .map(|(_, a)| a.clone())
    };
    let rows = results
        .iter()
        .map(|(v, knn)| {
            let final_knn = *knn.last().unwrap_or(&f64::NAN);
            let reference = v.reference().filter(|(r, _)| find(*r).is_some());
            let ref_acc = reference.and_then(|(r, _)| find(r));
            let delta = ref_acc
                .as_ref()
                .map(|a| final_knn - a.last().copied().unwrap_or(f64::NAN));
            let delta_mean = ref_acc.as_ref().map(|a| mean(knn) - mean(a));
            let expected_sign = reference.map(|(_, s)| s);
            let sign_agrees = delta
                .zip(expected_sign)
                .map(|(d, e)| d != 0.0 && (d > 0.0) == (e > 0));
            AblationRow {
                variant: *v,
                knn: knn.clone(),
                final_knn,
                reference: reference.map(|(r, _)| r),
                delta,
                delta_mean,
                expected_sign,
                sign_agrees,
            }
        })
        .collect();
    AblationReport {
        framework: framework.into(),
        seed,
        rows,
    }
}

fn write_csv(report: &AblationReport, path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_error(path, e))?;
    let header = [
        "variant",
        "final_knn",
        "reference",
        "delta",
        "delta_mean",
        "expected_sign",
        "sign_agrees",
    ];
    w.write_record(header).map_err(|e| csv_error(path, e))?;
    let opt = |v: Option<String>| v.unwrap_or_default();
    for r in &report.rows {
        w.write_record([
            r.variant.as_str().to_string(),
            r.final_knn.to_string(),
            opt(r.reference.map(|v| v.as_str().to_string())),
            opt(r.delta.map(|d| d.to_string())),
            opt(r.delta_mean.map(|d| d.to_string())),
            opt(r.expected_sign.map(|e| e.to_string())),
            opt(r.sign_agrees.map(|b| b.to_string())),
        ])
        .map_err(|e| csv_error(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub struct AblationOutcome {
    pub report: AblationReport,
    pub files: Vec<PathBuf>,
}

/// Trains every variant of `requested` (plus references) from `base` with
/// the same seed, evaluates per-layer k-NN and writes `ablation.{csv,json,md}`
/// and a k-NN chart into `out_dir`. Each run lives in `out_dir/<variant>`.
pub fn run_ablation(
    base: &ExperimentConfig,
    requested: &[Variant],
    train_set: &ImageDataset,
    test_set: &ImageDataset,
    out_dir: &Path,
) -> Result<AblationOutcome> {
    if requested.is_empty() {
        return Err(Error::config("suite", "no variants requested"));
    }
    let mut results = Vec::new();
    for v in expand_suite(requested) {
        let cfg = v.apply(base);
        let dir = out_dir.join(v.as_str());
        log::info!("ablation variant {}", v.as_str());
        let run = train::run(&cfg, train_set, &dir, None)?;
        let knn = multi_exit_eval(
            &run.state.encoder,
            &run.state.student,
            train_set,
            test_set,
            EvalKind::Knn,
            &cfg.eval,
            cfg.seed,
        )?;
        results.push((v, knn));
    }
    let report = compare(base.framework.as_str(), base.seed, results);
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let mut files = vec![
        out_dir.join("ablation.csv"),
        out_dir.join("ablation.json"),
        out_dir.join("ablation.md"),
    ];
    write_csv(&report, &files[0])?;
    write_json(&report, &files[1])?;
    fs::write(&files[2], report.markdown()).map_err(|e| Error::io(&files[2], e))?;
    let series: Vec<MetricsReport> = report
        .rows
        .iter()
        .map(|r| MetricsReport {
            label: r.variant.as_str().into(),
            knn: Some(r.knn.clone()),
            ..Default::default()
        })
        .collect();
    files.extend(write_charts(&series, out_dir)?);
    Ok(AblationOutcome { report, files })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn variants_switch_the_right_knobs() {
        let base = ExperimentConfig::default();
        assert!(!Variant::Baseline.apply(&base).sdssl_enabled);
        let na = Variant::NoAnneal.apply(&base);
        assert_eq!(na.loss.alpha_schedule, AlphaSchedule::Constant);
        assert!(na.sdssl_enabled);
        assert_eq!(Variant::NoPred.apply(&base).loss.beta, 0.0);
        let po = Variant::PredOnly.apply(&base);
        assert_eq!((po.loss.alpha_max, po.loss.beta), (0.0, 1.0));
        assert_eq!(
            Variant::SameView.apply(&base).loss.distill_view,
            DistillView::SameView
        );
        for v in SUITE {
            assert_eq!(Variant::parse(v.as_str()).unwrap(), v);
        }
        assert!(Variant::parse("nope").is_err());
    }

    #[test]
    fn suite_pulls_in_references() {
        assert_eq!(
            expand_suite(&[Variant::NoPred]),
            vec![Variant::Baseline, Variant::Sd, Variant::NoPred]
        );
        assert_eq!(
            expand_suite(&[Variant::PredOnly]),
            vec![Variant::Baseline, Variant::PredOnly]
        );
    }

    #[test]
    fn deltas_and_sign_agreement() {
        let r = compare(
            "mocov3",
            0,
            vec![
                (Variant::Baseline, vec![0.2, 0.4]),
                (Variant::Sd, vec![0.3, 0.5]),
                (Variant::NoAnneal, vec![0.3, 0.45]),
                (Variant::NoPred, vec![0.3, 0.6]),
            ],
        );
        let na = r.row(Variant::NoAnneal).unwrap();
        assert!((na.delta.unwrap() + 0.05).abs() < 1e-12);
        assert_eq!(na.sign_agrees, Some(true));
        assert_eq!(r.row(Variant::NoPred).unwrap().sign_agrees, Some(false));
        assert_eq!(r.row(Variant::Baseline).unwrap().delta, None);
        assert!(r
            .markdown()
            .contains("| no_anneal | 45.00 | -5.00 | sd | - | yes |"));
    }
}
