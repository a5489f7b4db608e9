//! Student/teacher training: one step per minibatch, EMA teacher, run loop.

use std::collections::BTreeMap;
use std::fs::{self, File, OpenOptions};
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Mat, Var};
use crate::checkpoint;
use crate::config::ExperimentConfig;
use crate::data::{epoch_iterator, ImageDataset};
use crate::error::{Error, Result};
use crate::framework::Framework;
use crate::heads::{apply_bn_updates, BnMode, BnUpdate, HeadBank};
use crate::losses::{
    isd_graph, layer_sum_graph, ntxent_symmetric, same_view_targets, ssl_pair, total_loss_graph,
    LossBundle,
};
use crate::optim::AdamW;
use crate::params::ParamSet;
use crate::schedules::{alpha_at, ema_momentum_at, lr_at, ScheduleState};
use crate::vit::{ImageBatch, ViTEncoder};

/// Graph scope of teacher parameters.
pub const TEACHER_SCOPE: &str = "teacher/";
pub const METRICS_FILE: &str = "metrics.csv";
pub const FINAL_CHECKPOINT: &str = "final.ckpt";
pub const VERSION_FILE: &str = "VERSION";
pub const METRICS_HEADER: [&str; 9] = [
    "step",
    "loss_total",
    "loss_ssl",
    "loss_isd",
    "loss_pred",
    "alpha",
    "lr",
    "ema_m",
    "ms_per_step",
];

#[derive(Clone, Debug)]
pub struct TrainerState {
    pub config: ExperimentConfig,
    pub encoder: ViTEncoder,
    pub student_heads: HeadBank,
    pub teacher_heads: Option<HeadBank>,
    /// Encoder, every projector and every predictor.
    pub student: ParamSet,
    /// Batch-normalization running statistics of the student heads.
    pub buffers: ParamSet,
    /// Encoder and last projector; absent for SimCLR.
    pub teacher: Option<ParamSet>,
    pub optimizer: AdamW,
    pub schedule: ScheduleState,
}

impl TrainerState {
    pub fn new(config: ExperimentConfig, total_steps: usize) -> Result<Self> {
        config.validate()?;
        let fw = config.framework;
        let enc = &config.encoder;
        let encoder = ViTEncoder::new(enc.clone())?;
        let student_heads = HeadBank::student(
            config.heads.clone(),
            fw,
            enc.num_layers,
            enc.embed_dim,
            config.sdssl_enabled,
        )?;
        let mut student = encoder.init_params(config.seed);
        student.extend(student_heads.init_params(config.seed));
        let buffers = student_heads.init_buffers();
        let (teacher_heads, teacher) = if fw.has_teacher() {
            let th = HeadBank::teacher(config.heads.clone(), fw, enc.num_layers, enc.embed_dim)?;
            let mut t = student.with_prefix("encoder.");
            t.extend(
                student.with_prefix(&format!("{}.", HeadBank::projector_prefix(enc.num_layers))),
            );
            (Some(th), Some(t))
        } else {
            (None, None)
        };
        let warmup_steps = ((config.schedule.warmup_fraction * total_steps as f64).round()
            as usize)
            .min(total_steps.saturating_sub(1));
        let schedule = ScheduleState {
            step: 0,
            total_steps,
            warmup_steps,
            alpha_max: config.loss.alpha_max,
            alpha_schedule: config.loss.alpha_schedule,
            base_lr: config.effective_lr(),
            ema_base: config.schedule.ema_base,
            ema_final: config.schedule.ema_final,
        };
        schedule.validate()?;
        Ok(Self {
            optimizer: AdamW::new(config.optim.clone()),
            config,
            encoder,
            student_heads,
            teacher_heads,
            student,
            buffers,
            teacher,
            schedule,
        })
    }

    pub fn framework(&self) -> Framework {
        self.config.framework
    }

    pub fn step(&self) -> usize {
        self.schedule.step
    }

    /// Student parameters the optimizer may update.
    pub fn trainable_names(&self) -> Vec<String> {
        let frozen = ViTEncoder::frozen_param_names();
        self.student
            .names()
            .filter(|n| !frozen.contains(n))
            .map(str::to_owned)
            .collect()
    }

    /// Loss weights `(α, β)` in effect at the current step.
    pub fn loss_weights(&self) -> (f64, f64) {
        if self.config.sdssl_enabled {
            (alpha_at(&self.schedule), self.config.loss.beta)
        } else {
            (0.0, 0.0)
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub losses: LossBundle,
    pub alpha: f64,
    pub lr: f64,
    pub ema_m: f64,
    pub ms: f64,
}

impl StepRecord {
    pub fn csv_row(&self) -> [String; 9] {
        [
            self.step.to_string(),
            self.losses.total.to_string(),
            self.losses.ssl.to_string(),
            self.losses.isd.to_string(),
            self.losses.pred.to_string(),
            self.alpha.to_string(),
            self.lr.to_string(),
            self.ema_m.to_string(),
            format!("{:.3}", self.ms),
        ]
    }
}

/// Graph nodes of one forward pass over both views.
struct Forward {
    ssl: Var,
    isd: Option<(Var, Vec<Var>)>,
    pred: Option<(Var, Vec<Var>)>,
}

impl Forward {
    fn bundle(&self, g: &Graph, total: Var) -> LossBundle {
        let scalars = |vs: &[Var]| vs.iter().map(|&v| g.scalar(v)).collect::<Vec<_>>();
        LossBundle {
            ssl: g.scalar(self.ssl),
            isd: self.isd.as_ref().map_or(0.0, |(v, _)| g.scalar(*v)),
            pred: self.pred.as_ref().map_or(0.0, |(v, _)| g.scalar(*v)),
            total: g.scalar(total),
            per_layer_isd: self.isd.as_ref().map_or(vec![], |(_, p)| scalars(p)),
            per_layer_pred: self.pred.as_ref().map_or(vec![], |(_, p)| scalars(p)),
        }
    }
}

fn check_views(a: &ImageBatch, b: &ImageBatch) -> Result<()> {
    if a.source_indices != b.source_indices {
        return Err(Error::Input(
            "the two views must come from the same source indices".into(),
        ));
    }
    if a.len() < 2 {
        return Err(Error::Input(
            "a training batch needs at least 2 samples".into(),
        ));
    }
    Ok(())
}

/// Sums matching per-view nodes.
fn add_views(g: &mut Graph, a: &[Var], b: &[Var]) -> Vec<Var> {
    a.iter().zip(b).map(|(&x, &y)| g.add(x, y)).collect()
}

/// Builds every loss term for the two views. Teacher parameters are bound
/// under [`TEACHER_SCOPE`]; `track_teacher` makes them gradient leaves so
/// that stop-gradient placement can be inspected.
fn forward(
    state: &TrainerState,
    g: &mut Graph,
    views: [&ImageBatch; 2],
    mut bn: Option<&mut Vec<BnUpdate>>,
    track_teacher: bool,
) -> Result<Forward> {
    let cfg = &state.config;
    let fw = cfg.framework;
    let tau = cfg.loss.temperature;
    let num_layers = cfg.encoder.num_layers;
    let heads = &state.student_heads;

    // per view: projector outputs h and final student outputs q per tapped layer
    let mut h: [Vec<Var>; 2] = [vec![], vec![]];
    let mut q: [Vec<Var>; 2] = [vec![], vec![]];
    for v in 0..2 {
        let feats = state
            .encoder
            .forward_layers(g, &state.student, views[v], true)?;
        for &l in heads.tapped_layers() {
            let hl = heads.project(
                g,
                &state.student,
                l,
                feats[l - 1],
                true,
                BnMode::Train(bn.as_deref_mut()),
            )?;
            let ql = if fw.has_predictor() {
                heads.predict(
                    g,
                    &state.student,
                    l,
                    hl,
                    true,
                    BnMode::Train(bn.as_deref_mut()),
                )?
            } else {
                hl
            };
            h[v].push(hl);
            q[v].push(ql);
        }
    }
    let last = h[0].len() - 1;

    let z: [Var; 2] = match (&state.teacher, &state.teacher_heads) {
        (Some(tp), Some(th)) => {
            g.set_scope(TEACHER_SCOPE);
            let mut z = [h[0][last]; 2];
            for v in 0..2 {
                let feats = state
                    .encoder
                    .forward_layers(g, tp, views[v], track_teacher)?;
                let zt = th.project(
                    g,
                    tp,
                    num_layers,
                    feats[num_layers - 1],
                    track_teacher,
                    BnMode::Train(None),
                )?;
                z[v] = g.detach(zt);
            }
            g.set_scope("");
            z
        }
        _ => [g.detach(h[0][last]), g.detach(h[1][last])],
    };

    let ssl = if fw.has_teacher() {
        let a = ssl_pair(g, fw, q[0][last], z[1], tau);
        let b = ssl_pair(g, fw, q[1][last], z[0], tau);
        g.add(a, b)
    } else {
        ntxent_symmetric(g, h[0][last], h[1][last], tau)
    };

    if !cfg.sdssl_enabled {
        return Ok(Forward {
            ssl,
            isd: None,
            pred: None,
        });
    }

    let own = [g.detach(h[0][last]), g.detach(h[1][last])];
    let targets = [
        same_view_targets(cfg.loss.distill_view, 0, own, z),
        same_view_targets(cfg.loss.distill_view, 1, own, z),
    ];

    let (i0, p0) = isd_graph(g, fw, &q[0][..last], targets[0], tau)?;
    let (i1, p1) = isd_graph(g, fw, &q[1][..last], targets[1], tau)?;
    let isd_total = g.add(i0, i1);
    let isd = Some((isd_total, add_views(g, &p0, &p1)));

    let pred = if fw.has_predictor() {
        let mut per_view = Vec::with_capacity(2);
        for v in 0..2 {
            let mut preds = Vec::with_capacity(num_layers);
            for (k, &l) in heads.tapped_layers().iter().enumerate() {
                let hd = g.detach(h[v][k]);
                preds.push(heads.predict(g, &state.student, l, hd, true, BnMode::Train(None))?);
            }
            per_view.push(layer_sum_graph(g, fw, &preds, targets[v], tau));
        }
        let total = g.add(per_view[0].0, per_view[1].0);
        Some((total, add_views(g, &per_view[0].1, &per_view[1].1)))
    } else {
        None
    };
    Ok(Forward { ssl, isd, pred })
}

fn check_finite(losses: &LossBundle, step: usize) -> Result<()> {
    for (name, v) in [
        ("total", losses.total),
        ("ssl", losses.ssl),
        ("isd", losses.isd),
        ("pred", losses.pred),
    ] {
        if !v.is_finite() {
            return Err(Error::numeric(format!(
                "loss component `{name}` is {v} at step {step}"
            )));
        }
    }
    Ok(())
}

/// One optimization step on a pair of views of the same source images.
pub fn train_step(
    state: &mut TrainerState,
    views: (&ImageBatch, &ImageBatch),
) -> Result<StepRecord> {
    let start = Instant::now();
    check_views(views.0, views.1)?;
    let step = state.schedule.step;
    if step >= state.schedule.total_steps {
        return Err(Error::config(
            "schedule.epochs",
            format!("step {step} is past the end of the schedule"),
        ));
    }
    let (alpha, beta) = state.loss_weights();
    let lr = lr_at(&state.schedule);
    let ema_m = ema_momentum_at(&state.schedule);

    let mut g = Graph::new();
    let mut bn = Vec::new();
    let f = forward(state, &mut g, [views.0, views.1], Some(&mut bn), false)?;
    let total = total_loss_graph(
        &mut g,
        f.ssl,
        f.isd.as_ref().map(|p| p.0),
        f.pred.as_ref().map(|p| p.0),
        alpha,
        beta,
        state.framework(),
    );
    let losses = f.bundle(&g, total);
    check_finite(&losses, step)?;

    let grads = g.backward(total);
    let mut named = BTreeMap::new();
    for (name, &var) in g.bound_params() {
        if name.starts_with(TEACHER_SCOPE) {
            continue;
        }
        if let Some(gr) = grads.get(var) {
            if gr.iter().any(|x| !x.is_finite()) {
                return Err(Error::numeric(format!("gradient of {name} at step {step}")));
            }
            named.insert(name.clone(), gr.clone());
        }
    }
    state.optimizer.step(&mut state.student, &named, lr)?;
    apply_bn_updates(&mut state.buffers, &bn)?;
    if let Some(t) = state.teacher.as_mut() {
        ema_update(t, &state.student, ema_m)?;
    }
    state.schedule.step += 1;
    Ok(StepRecord {
        step,
        losses,
        alpha,
        lr,
        ema_m,
        ms: start.elapsed().as_secs_f64() * 1e3,
    })
}

/// Loss components at the current parameters, without updating anything.
pub fn evaluate_losses(
    state: &TrainerState,
    views: (&ImageBatch, &ImageBatch),
) -> Result<LossBundle> {
    check_views(views.0, views.1)?;
    let (alpha, beta) = state.loss_weights();
    let mut g = Graph::new();
    let f = forward(state, &mut g, [views.0, views.1], None, false)?;
    let total = total_loss_graph(
        &mut g,
        f.ssl,
        f.isd.as_ref().map(|p| p.0),
        f.pred.as_ref().map(|p| p.0),
        alpha,
        beta,
        state.framework(),
    );
    Ok(f.bundle(&g, total))
}

/// Coefficients of the loss components for [`gradient_report`].
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ComponentWeights {
    pub ssl: f64,
    pub isd: f64,
    pub pred: f64,
}

#[derive(Clone, Debug)]
pub struct GradientReport {
    pub losses: LossBundle,
    /// Gradient of every student parameter (zeros where none flows).
    pub student: BTreeMap<String, Mat>,
    /// Gradient of every teacher parameter, with teacher parameters bound
    /// as differentiable leaves.
    pub teacher: BTreeMap<String, Mat>,
}

/// Gradients of `Σ wᵢ·componentᵢ` with respect to student and teacher parameters.
pub fn gradient_report(
    state: &TrainerState,
    views: (&ImageBatch, &ImageBatch),
    weights: ComponentWeights,
) -> Result<GradientReport> {
    check_views(views.0, views.1)?;
    let mut g = Graph::new();
    let f = forward(state, &mut g, [views.0, views.1], None, true)?;
    let mut terms = vec![(f.ssl, weights.ssl)];
    if let Some((v, _)) = &f.isd {
        terms.push((*v, weights.isd));
    }
    if let Some((v, _)) = &f.pred {
        terms.push((*v, weights.pred));
    }
    let total = g.weighted_sum(&terms);
    let losses = f.bundle(&g, total);
    let grads = g.backward(total);
    let bound = g.bound_params();
    let collect = |params: &ParamSet, scope: &str| -> BTreeMap<String, Mat> {
        params
            .iter()
            .map(|(name, value)| {
                let gr = bound
                    .get(&format!("{scope}{name}"))
                    .and_then(|&v| grads.get(v))
                    .cloned()
                    .unwrap_or_else(|| Mat::zeros(value.raw_dim()));
                (name.to_string(), gr)
            })
            .collect()
    };
    Ok(GradientReport {
        losses,
        student: collect(&state.student, ""),
        teacher: state
            .teacher
            .as_ref()
            .map(|t| collect(t, TEACHER_SCOPE))
            .unwrap_or_default(),
    })
}

/// `θ_t ← m·θ_t + (1 − m)·θ_s` over every entry of `teacher`. Frozen encoder
/// parameters are identical in both trees and left as they are.
pub fn ema_update(teacher: &mut ParamSet, student: &ParamSet, m: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&m) {
        return Err(Error::config(
            "schedule.ema",
            format!("momentum {m} outside [0, 1]"),
        ));
    }
    for (name, t) in teacher.iter() {
        let s = student.get(name)?;
        if s.dim() != t.dim() {
            return Err(Error::Structure(format!(
                "{name}: teacher {:?} vs student {:?}",
                t.dim(),
                s.dim()
            )));
        }
    }
    let frozen = ViTEncoder::frozen_param_names();
    for (name, t) in teacher.iter_mut() {
        if frozen.contains(&name) {
            continue;
        }
        let s = student.get(name)?;
        ndarray::Zip::from(t)
            .and(s)
            .for_each(|t, &s| *t = m * *t + (1.0 - m) * s);
    }
    Ok(())
}

#[derive(Debug)]
pub struct RunOutcome {
    pub state: TrainerState,
    pub records: Vec<StepRecord>,
    pub checkpoint: PathBuf,
}

pub fn steps_per_epoch(config: &ExperimentConfig, num_samples: usize) -> Result<usize> {
    let spe = num_samples / config.data.batch_size;
    if spe == 0 {
        return Err(Error::config(
            "data.batch_size",
            format!(
                "{} exceeds the {num_samples} training images",
                config.data.batch_size
            ),
        ));
    }
    Ok(spe)
}

fn open_metrics(path: &Path, fresh: bool) -> Result<csv::Writer<File>> {
    let exists = path.exists();
    let file = if fresh {
        File::create(path)
    } else {
        OpenOptions::new().create(true).append(true).open(path)
    }
    .map_err(|e| Error::io(path, e))?;
    let mut w = csv::WriterBuilder::new()
        .has_headers(false)
        .from_writer(file);
    if fresh || !exists {
        w.write_record(METRICS_HEADER)
            .map_err(|e| csv_error(path, e))?;
    }
    Ok(w)
}

pub(crate) fn csv_error(path: &Path, e: csv::Error) -> Error {
    Error::io(path, std::io::Error::other(e.to_string()))
}

pub fn write_version_stamp(dir: &Path) -> Result<()> {
    let path = dir.join(VERSION_FILE);
    let text = format!(
        "sdssl {}\ncheckpoint-format {}\n",
        env!("CARGO_PKG_VERSION"),
        checkpoint::FORMAT_VERSION
    );
    fs::write(&path, text).map_err(|e| Error::io(&path, e))
}

/// Trains on `train` until the schedule ends, writing the resolved config,
/// metrics, periodic checkpoints and the final checkpoint into `out_dir`.
/// A `resume` state continues from its step with the same data order.
pub fn run(
    config: &ExperimentConfig,
    train: &ImageDataset,
    out_dir: &Path,
    resume: Option<TrainerState>,
) -> Result<RunOutcome> {
    config.validate()?;
    let spe = steps_per_epoch(config, train.len())?;
    let total = spe * config.schedule.epochs;
    let mut state = match resume {
        Some(s) => {
            if s.schedule.total_steps != total || s.config.encoder != config.encoder {
                return Err(Error::Format {
                    found: Some(checkpoint::FORMAT_VERSION),
                    expected: checkpoint::FORMAT_VERSION,
                    message: "checkpoint was written for a different schedule or encoder".into(),
                });
            }
            s
        }
        None => TrainerState::new(config.clone(), total)?,
    };
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    config.write_resolved(out_dir)?;
    write_version_stamp(out_dir)?;
    let metrics_path = out_dir.join(METRICS_FILE);
    let mut metrics = open_metrics(&metrics_path, state.step() == 0)?;

    let seed = config.seed;
    let recipe = &config.data.recipe;
    let mut records = Vec::new();
    let mut order: Option<(usize, Vec<Vec<usize>>)> = None;
    while state.step() < total {
        let step = state.step();
        let epoch = step / spe;
        if order.as_ref().is_none_or(|(e, _)| *e != epoch) {
            order = Some((
                epoch,
                epoch_iterator(train.len(), config.data.batch_size, seed, epoch as u64),
            ));
        }
        let batch = &order.as_ref().unwrap().1[step % spe];
        let (a, b) = train.view_batches(batch, recipe, seed, step as u64)?;
        let rec = match train_step(&mut state, (&a, &b)) {
            Ok(r) => r,
            Err(e) => {
                metrics.flush().map_err(|io| Error::io(&metrics_path, io))?;
                if let Some(last) = records.last() {
                    log::error!("aborting after step {:?}: {e}", last);
                }
                return Err(e);
            }
        };
        metrics
            .write_record(rec.csv_row())
            .map_err(|e| csv_error(&metrics_path, e))?;
        records.push(rec);
        if (step + 1) % spe == 0 {
            metrics.flush().map_err(|e| Error::io(&metrics_path, e))?;
            let done = (step + 1) / spe;
            let last = records.last().unwrap();
            log::info!(
                "epoch {done}/{} loss {:.4} (ssl {:.4} isd {:.4} pred {:.4}) alpha {:.3} lr {:.2e}",
                config.schedule.epochs,
                last.losses.total,
                last.losses.ssl,
                last.losses.isd,
                last.losses.pred,
                last.alpha,
                last.lr
            );
            let every = config.schedule.checkpoint_every;
            if every > 0 && done % every == 0 && done < config.schedule.epochs {
                checkpoint::save_checkpoint(
                    &state,
                    &out_dir.join(format!("epoch_{done:04}.ckpt")),
                )?;
            }
        }
    }
    metrics.flush().map_err(|e| Error::io(&metrics_path, e))?;
    let path = out_dir.join(FINAL_CHECKPOINT);
    checkpoint::save_checkpoint(&state, &path)?;
    Ok(RunOutcome {
        state,
        records,
        checkpoint: path,
    })
}
