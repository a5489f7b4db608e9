//! Acceptance suite. Prints one `[PASS]` / `[FAIL]` line per criterion and
//! exits non-zero if any criterion fails.
//!
//! The CIFAR-10 directional check trains 6 models for 50 epochs and only
//! runs with `SDSSL_ACCEPTANCE_CIFAR=1` and a fetched CIFAR-10 cache under
//! `SDSSL_CACHE_DIR` (default `data`).

mod common;

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::time::{Duration, Instant};

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use sdssl::ablate::{run_ablation, Variant};
use sdssl::autodiff::Mat;
use sdssl::config::ExperimentConfig;
use sdssl::data::Split;
use sdssl::eval::metrics::{geometry, LayerMetrics};
use sdssl::eval::{
    alignment, eval_indices, knn_classify, linear_probe, multi_exit_eval, negative_alignment,
    uniformity, EvalKind, FeatureBank,
};
use sdssl::experiment::load_datasets;
use sdssl::framework::Framework;
use sdssl::losses::{byol_loss, infonce_loss, isd_loss, pred_loss, stacked_loss, AlphaSchedule};
use sdssl::params::ParamSet;
use sdssl::schedules::{alpha_at, lr_at, ScheduleState};
use sdssl::train::{
    self, ema_update, evaluate_losses, gradient_report, train_step, ComponentWeights, TrainerState,
};
use sdssl::vit::PATCH_WEIGHT;

use common::{tiny_config, views};

type Outcome = Result<String, String>;

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn within_budget(elapsed: Duration, budget: Duration) -> Result<(), String> {
    ensure(elapsed <= budget, || {
        format!("took {elapsed:.2?}, budget {budget:.0?}")
    })
}

fn random(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Mat {
    Mat::from_shape_fn((rows, cols), |_| rng.sample(StandardNormal))
}

fn unit_rows(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Mat {
    let mut m = random(rows, cols, rng);
    for mut r in m.rows_mut() {
        let n = r.dot(&r).sqrt();
        r /= n;
    }
    m
}

fn loss_oracles() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let tau = 0.2;
    let mut worst: f64 = 0.0;
    for _ in 0..5 {
        let q = random(4, 8, &mut rng);
        let z = random(4, 8, &mut rng);
        let norm = |v: ndarray::ArrayView1<f64>| v.dot(&v).sqrt();
        let mut ce = 0.0;
        for i in 0..4 {
            let logits: Vec<f64> = (0..4)
                .map(|j| q.row(i).dot(&z.row(j)) / (norm(q.row(i)) * norm(z.row(j))) / tau)
                .collect();
            let denom: f64 = logits.iter().map(|l| l.exp()).sum();
            ce -= (logits[i].exp() / denom).ln();
        }
        let expected = 2.0 * tau * ce / 4.0;
        let got = infonce_loss(&q, &z, tau, &[0, 1, 2, 3]).map_err(|e| e.to_string())?;
        worst = worst.max((got - expected).abs());
    }
    ensure(worst < 1e-5, || format!("infonce off by {worst:e}"))?;
    let a = ndarray::array![[1.0, 0.0, 0.0], [0.0, 3.0, 0.0]];
    let orth = ndarray::array![[0.0, 2.0, 0.0], [0.0, 0.0, 1.0]];
    for (z, want) in [(a.clone(), 0.0), (orth, 2.0), (-&a, 4.0)] {
        let got = byol_loss(&a, &z).map_err(|e| e.to_string())?;
        ensure((got - want).abs() < 1e-6, || {
            format!("byol gave {got}, want {want}")
        })?;
    }
    within_budget(start.elapsed(), Duration::from_secs(1))?;
    Ok(format!("infonce max error {worst:.1e}; byol 0/2/4"))
}

fn formulation_equivalence() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let (n, d, layers, tau) = (6, 8, 4, 0.2);
    let mut worst: f64 = 0.0;
    for fw in Framework::ALL {
        let q: Vec<Mat> = (0..layers).map(|_| random(n, d, &mut rng)).collect();
        let z = random(n, d, &mut rng);
        let stacked = stacked_loss(fw, &q[..layers - 1], &z, tau).map_err(|e| e.to_string())?;
        let (isd, per) = isd_loss(fw, &q[..layers - 1], &z, tau).map_err(|e| e.to_string())?;
        let explicit = per.iter().sum::<f64>() / per.len() as f64;
        worst = worst.max((stacked - isd).abs()).max((isd - explicit).abs());
        if fw.has_predictor() {
            let all = stacked_loss(fw, &q, &z, tau).map_err(|e| e.to_string())?;
            let (pred, per) = pred_loss(fw, &q, &z, tau).map_err(|e| e.to_string())?;
            worst = worst
                .max((layers as f64 * all - pred).abs())
                .max((per.iter().sum::<f64>() - pred).abs());
        }
    }
    ensure(worst < 1e-6, || {
        format!("stacked and per-layer forms differ by {worst:e}")
    })?;
    within_budget(start.elapsed(), Duration::from_secs(1))?;
    Ok(format!(
        "max difference {worst:.1e} over simclr, byol, mocov3"
    ))
}

fn max_abs(m: &Mat) -> f64 {
    m.iter().fold(0.0, |a, v| a.max(v.abs()))
}

/// `ssl + α·isd`. The predictor term reads the backbone only through
/// stop-gradients, so it is constant for the backbone gradient (checked
/// exactly above) but would leak into a plain finite difference.
fn backbone_objective(
    state: &TrainerState,
    v: &(sdssl::vit::ImageBatch, sdssl::vit::ImageBatch),
    alpha: f64,
) -> f64 {
    let l = evaluate_losses(state, (&v.0, &v.1)).unwrap();
    l.ssl + alpha * l.isd
}

fn gradient_isolation() -> Outcome {
    let start = Instant::now();
    let mut checked = 0;
    let mut worst_rel: f64 = 0.0;
    for fw in [Framework::Mocov3, Framework::Byol] {
        let mut c = tiny_config(fw);
        c.loss.alpha_schedule = AlphaSchedule::Constant;
        let alpha = c.loss.alpha_max;
        let beta = c.loss.beta;
        let mut state = TrainerState::new(c.clone(), 10).map_err(|e| e.to_string())?;
        let v = views(&c, 0);
        let full = gradient_report(
            &state,
            (&v.0, &v.1),
            ComponentWeights {
                ssl: 1.0,
                isd: alpha,
                pred: beta,
            },
        )
        .map_err(|e| e.to_string())?;
        for (name, g) in &full.teacher {
            ensure(max_abs(g) == 0.0, || {
                format!("{fw}: teacher gradient on {name}")
            })?;
        }
        let pred = gradient_report(
            &state,
            (&v.0, &v.1),
            ComponentWeights {
                ssl: 0.0,
                isd: 0.0,
                pred: 1.0,
            },
        )
        .map_err(|e| e.to_string())?;
        let mut predictor_norm = 0.0;
        for (name, g) in &pred.student {
            if name.starts_with("encoder.") || name.starts_with("heads.projector.") {
                ensure(max_abs(g) == 0.0, || {
                    format!("{fw}: pred loss reaches {name}")
                })?;
            } else if name.starts_with("heads.predictor.") {
                predictor_norm += max_abs(g);
            }
        }
        ensure(predictor_norm > 0.0, || {
            format!("{fw}: predictors get no gradient from the pred loss")
        })?;

        // central differences on the largest gradient entry of every backbone tensor
        let names: Vec<String> = full
            .student
            .keys()
            .filter(|n| {
                n.starts_with("encoder.") && n.as_str() != PATCH_WEIGHT && !n.contains("patch_proj")
            })
            .cloned()
            .collect();
        let h = 1e-5;
        for name in names {
            let g = &full.student[&name];
            let (idx, &an) = g
                .indexed_iter()
                .max_by(|a, b| a.1.abs().total_cmp(&b.1.abs()))
                .expect("non-empty tensor");
            if an.abs() < 1e-7 {
                continue;
            }
            let orig = state.student.get(&name).unwrap()[idx];
            state.student.get_mut(&name).unwrap()[idx] = orig + h;
            let up = backbone_objective(&state, &v, alpha);
            state.student.get_mut(&name).unwrap()[idx] = orig - h;
            let down = backbone_objective(&state, &v, alpha);
            state.student.get_mut(&name).unwrap()[idx] = orig;
            let fd = (up - down) / (2.0 * h);
            let rel = (fd - an).abs() / an.abs();
            worst_rel = worst_rel.max(rel);
            ensure(rel <= 1e-3, || {
                format!("{fw}: {name}{idx:?} analytic {an:e} vs numeric {fd:e}")
            })?;
            checked += 1;
        }
    }
    within_budget(start.elapsed(), Duration::from_secs(30))?;
    Ok(format!("teacher and pred isolation exact; {checked} backbone entries, worst rel. error {worst_rel:.1e}"))
}

fn baseline_recovery() -> Outcome {
    for fw in Framework::ALL {
        let mut sd = tiny_config(fw);
        sd.loss.alpha_max = 0.0;
        sd.loss.beta = 0.0;
        let mut base = sd.clone();
        base.sdssl_enabled = false;
        let mut a = TrainerState::new(sd.clone(), 10).map_err(|e| e.to_string())?;
        let mut b = TrainerState::new(base, 10).map_err(|e| e.to_string())?;
        for step in 0..10 {
            let v = views(&sd, step);
            let ra = train_step(&mut a, (&v.0, &v.1)).map_err(|e| e.to_string())?;
            let rb = train_step(&mut b, (&v.0, &v.1)).map_err(|e| e.to_string())?;
            ensure(ra.losses.ssl.to_bits() == rb.losses.ssl.to_bits(), || {
                format!("{fw}: ssl loss differs at step {step}")
            })?;
            for (name, pb) in b.student.iter() {
                let pa = a.student.get(name).map_err(|e| e.to_string())?;
                let same = pa
                    .iter()
                    .zip(pb.iter())
                    .all(|(x, y)| x.to_bits() == y.to_bits());
                ensure(same, || format!("{fw}: {name} differs after step {step}"))?;
            }
            if let (Some(ta), Some(tb)) = (&a.teacher, &b.teacher) {
                ensure(ta == tb, || {
                    format!("{fw}: teacher differs after step {step}")
                })?;
            }
        }
    }
    Ok("10 steps bit-identical for simclr, byol, mocov3".into())
}

fn schedules() -> Outcome {
    let t = 1000;
    let s = ScheduleState {
        step: 0,
        total_steps: t,
        warmup_steps: 100,
        alpha_max: 0.6,
        alpha_schedule: AlphaSchedule::Cosine,
        base_lr: 1.5e-4,
        ema_base: 0.99,
        ema_final: 1.0,
    };
    for (step, want) in [(0, 0.0), (t / 2, 0.3), (t, 0.6)] {
        let got = alpha_at(&s.at(step));
        ensure((got - want).abs() <= 1e-12, || {
            format!("alpha({step}) = {got}, want {want}")
        })?;
    }
    let w = s.warmup_steps;
    let at_w = lr_at(&s.at(w));
    ensure((at_w - s.base_lr).abs() <= 1e-15, || {
        format!("lr at warmup end {at_w}")
    })?;
    let jump_in = at_w - lr_at(&s.at(w - 1));
    let jump_out = at_w - lr_at(&s.at(w + 1));
    let slope = s.base_lr / w as f64;
    ensure(
        jump_in > 0.0 && jump_in <= slope * (1.0 + 1e-9) && jump_out.abs() <= slope,
        || format!("lr jumps by {jump_in:e} / {jump_out:e} around the warmup boundary"),
    )?;
    let mut teacher = ParamSet::new();
    teacher.insert("w", Mat::from_elem((3, 3), 1.0));
    let mut student = ParamSet::new();
    student.insert("w", Mat::from_elem((3, 3), -2.0));
    for (m, want) in [(0.0, -2.0), (0.5, -0.5), (1.0, 1.0)] {
        let mut t = teacher.clone();
        ema_update(&mut t, &student, m).map_err(|e| e.to_string())?;
        let err = t
            .get("w")
            .unwrap()
            .iter()
            .fold(0.0f64, |a, v| a.max((v - want).abs()));
        ensure(err <= 1e-7, || format!("ema m={m} off by {err:e}"))?;
    }
    Ok("alpha endpoints, lr continuity, ema m in {0, 0.5, 1}".into())
}

fn sq(a: ndarray::ArrayView1<f64>, b: ndarray::ArrayView1<f64>) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn metric_oracles() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let m = 64;
    let (gamma, t) = (2.0, 2.0);
    let x = unit_rows(m, 16, &mut rng);
    let y = unit_rows(m, 16, &mut rng);
    let mut ali = 0.0;
    for i in 0..m {
        ali += sq(x.row(i), y.row(i)).powf(gamma / 2.0);
    }
    ali /= m as f64;
    let (mut kern, mut neg, mut pairs) = (0.0, 0.0, 0.0);
    for i in 0..m {
        for j in 0..m {
            if i != j {
                let d = sq(x.row(i), x.row(j));
                kern += (-t * d).exp();
                neg += d.powf(gamma / 2.0);
                pairs += 1.0;
            }
        }
    }
    let uni = (kern / pairs).ln();
    neg /= pairs;
    let e = |r: sdssl::Result<f64>| r.map_err(|e| e.to_string());
    let errs = [
        (e(alignment(&x, &y, gamma))? - ali).abs(),
        (e(uniformity(&x, t))? - uni).abs(),
        (e(negative_alignment(&x, gamma))? - neg).abs(),
    ];
    let worst = errs.iter().copied().fold(0.0, f64::max);
    ensure(worst < 1e-6, || format!("oracle errors {errs:?}"))?;

    let same = Mat::from_shape_fn((5, 3), |(_, j)| if j == 1 { 1.0 } else { 0.0 });
    let u0 = e(uniformity(&same, 2.0))?;
    ensure(u0.abs() <= 1e-9, || {
        format!("identical set gives L_uni {u0}")
    })?;
    let anti = ndarray::array![[0.0, 1.0], [0.0, -1.0]];
    let u = e(uniformity(&anti, 2.0))?;
    ensure((u + 8.0).abs() <= 1e-9, || {
        format!("antipodal pair gives L_uni {u}")
    })?;

    // two antipodal clusters of sizes 3 and 2: cross pairs at distance 2
    let clusters = ndarray::array![[1.0, 0.0], [1.0, 0.0], [1.0, 0.0], [-1.0, 0.0], [-1.0, 0.0]];
    let cross = 2.0 * 3.0 * 2.0;
    let want = cross * 4.0 / 20.0;
    let got = e(negative_alignment(&clusters, 2.0))?;
    ensure((got - want).abs() <= 1e-9, || {
        format!("cluster L_ali_n {got}, want {want}")
    })?;
    Ok(format!(
        "M={m} max oracle error {worst:.1e}; analytic cases exact"
    ))
}

fn bank(features: Mat, labels: Vec<u32>, k: usize, split: Split) -> FeatureBank {
    FeatureBank::new(features, labels, k, 1, split).unwrap()
}

fn clusters(n: usize, k: usize, d: usize, spread: f64, rng: &mut ChaCha8Rng) -> (Mat, Vec<u32>) {
    let centers = random(k, d, rng) * 10.0;
    let labels: Vec<u32> = (0..n).map(|i| (i % k) as u32).collect();
    let f = Array2::from_shape_fn((n, d), |(i, j)| {
        centers[[i % k, j]] + spread * rng.sample::<f64, _>(StandardNormal)
    });
    (f, labels)
}

fn evaluation_sanity() -> Outcome {
    let cfg = ExperimentConfig::default().eval;
    let mut rng = ChaCha8Rng::seed_from_u64(14);
    let (tr, trl) = clusters(200, 4, 8, 0.5, &mut rng);
    let (te, tel) = clusters(100, 4, 8, 0.5, &mut ChaCha8Rng::seed_from_u64(14));
    let (train, test) = (
        bank(tr, trl, 4, Split::Train),
        bank(te, tel, 4, Split::Test),
    );
    let knn = knn_classify(&train, &test, 5, cfg.knn_tau).map_err(|e| e.to_string())?;
    let lin = linear_probe(&train, &test, &cfg.linear, 0).map_err(|e| e.to_string())?;
    ensure(knn == 1.0 && lin == 1.0, || {
        format!("separable clusters: k-NN {knn}, linear {lin}")
    })?;

    let k = 10;
    let mut knn_acc = Vec::new();
    let mut lin_acc = Vec::new();
    for seed in 0..3u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(100 + seed);
        let (tr, mut trl) = clusters(4000, k, 16, 1.0, &mut rng);
        let (te, mut tel) = clusters(4000, k, 16, 1.0, &mut rng);
        trl.shuffle(&mut rng);
        tel.shuffle(&mut rng);
        let (train, test) = (
            bank(tr, trl, k, Split::Train),
            bank(te, tel, k, Split::Test),
        );
        knn_acc
            .push(knn_classify(&train, &test, cfg.knn_k, cfg.knn_tau).map_err(|e| e.to_string())?);
        lin_acc.push(linear_probe(&train, &test, &cfg.linear, seed).map_err(|e| e.to_string())?);
    }
    for (what, accs) in [("k-NN", &knn_acc), ("linear", &lin_acc)] {
        ensure(accs.iter().all(|a| (a - 0.1).abs() <= 0.03), || {
            format!("{what} on shuffled labels: {accs:?}, chance 0.1")
        })?;
    }
    Ok(format!(
        "separable 1.0/1.0; shuffled k-NN {knn_acc:.3?}, linear {lin_acc:.3?}"
    ))
}

fn ablation_harness() -> Outcome {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let mut c = tiny_config(Framework::Mocov3);
    c.data.synthetic.num_samples = 64;
    c.data.synthetic.num_classes = 4;
    c.data.synthetic_test_samples = 32;
    c.data.batch_size = 16;
    c.schedule.epochs = 4;
    let (train_set, test_set) = load_datasets(&c).map_err(|e| e.to_string())?;
    let out = run_ablation(
        &c,
        &[Variant::NoAnneal, Variant::NoPred],
        &train_set,
        &test_set,
        dir.path(),
    )
    .map_err(|e| e.to_string())?;
    let mut parts = Vec::new();
    for v in [Variant::NoAnneal, Variant::NoPred] {
        let row = out
            .report
            .row(v)
            .ok_or_else(|| format!("no row for {}", v.as_str()))?;
        ensure(row.reference == Some(Variant::Sd), || {
            format!("{} compared to {:?}", v.as_str(), row.reference)
        })?;
        let delta = row
            .delta
            .ok_or_else(|| format!("no delta for {}", v.as_str()))?;
        ensure(delta.is_finite(), || {
            format!("{} delta {delta}", v.as_str())
        })?;
        parts.push(format!(
            "{} {:+.1}pp (sign agreement {})",
            v.as_str(),
            100.0 * delta,
            row.sign_agrees
                .map_or("n/a", |b| if b { "yes" } else { "no" })
        ));
    }
    for f in ["ablation.csv", "ablation.json", "ablation.md"] {
        ensure(dir.path().join(f).exists(), || format!("{f} missing"))?;
    }
    Ok(parts.join(", "))
}

struct DeskRun {
    knn: Vec<f64>,
    geometry: Vec<LayerMetrics>,
}

fn desk_run(
    seed: u64,
    sd: bool,
    cache: &std::path::Path,
    root: &std::path::Path,
) -> Result<DeskRun, String> {
    let mut c = ExperimentConfig::default();
    c.seed = seed;
    c.sdssl_enabled = sd;
    c.data.dataset = "cifar10".into();
    c.data.cache_dir = cache.to_path_buf();
    c.data.subset = 10_000;
    c.schedule.epochs = 50;
    c.schedule.checkpoint_every = 0;
    let (train_set, test_set) = load_datasets(&c).map_err(|e| e.to_string())?;
    let out = train::run(
        &c,
        &train_set,
        &root.join(format!("seed{seed}_sd{sd}")),
        None,
    )
    .map_err(|e| e.to_string())?;
    let s = &out.state;
    let knn = multi_exit_eval(
        &s.encoder,
        &s.student,
        &train_set,
        &test_set,
        EvalKind::Knn,
        &c.eval,
        seed,
    )
    .map_err(|e| e.to_string())?;
    let idx = eval_indices(test_set.len(), c.eval.metric_samples, seed);
    let geometry = geometry(
        &s.encoder,
        &s.student,
        &test_set,
        &idx,
        &c.data.recipe,
        &c.eval,
        seed,
    )
    .map_err(|e| e.to_string())?;
    Ok(DeskRun { knn, geometry })
}

fn desk_scale_directional() -> Outcome {
    let cache =
        std::env::var_os("SDSSL_CACHE_DIR").map_or_else(|| PathBuf::from("data"), PathBuf::from);
    let root = tempfile::tempdir().map_err(|e| e.to_string())?;
    let (mut final_ok, mut mid_wins, mut d_wins) = (true, 0, 0);
    let mut notes = Vec::new();
    for seed in 0..3 {
        let base = desk_run(seed, false, &cache, root.path())?;
        let sd = desk_run(seed, true, &cache, root.path())?;
        let l = base.knn.len();
        final_ok &= base.knn[l - 1] > 0.3 && sd.knn[l - 1] > 0.3;
        let mid = |k: &[f64]| k[1..l - 1].iter().sum::<f64>() / (l - 2) as f64;
        if mid(&sd.knn) > mid(&base.knn) {
            mid_wins += 1;
        }
        let layers_ahead = sd
            .geometry
            .iter()
            .zip(&base.geometry)
            .filter(|(a, b)| a.d > b.d)
            .count();
        if layers_ahead * 2 > l {
            d_wins += 1;
        }
        notes.push(format!(
            "seed {seed}: final {:.3}/{:.3}, mid {:.3}/{:.3}, D ahead at {layers_ahead}/{l}",
            base.knn[l - 1],
            sd.knn[l - 1],
            mid(&base.knn),
            mid(&sd.knn)
        ));
    }
    let detail = notes.join("; ");
    ensure(final_ok, || {
        format!("(a) final-layer k-NN <= 30%: {detail}")
    })?;
    ensure(mid_wins >= 2, || {
        format!("(b) SD ahead on layers 2..L-1 in {mid_wins}/3 seeds: {detail}")
    })?;
    ensure(d_wins >= 2, || {
        format!("(c) SD D ahead at most layers in {d_wins}/3 seeds: {detail}")
    })?;
    Ok(detail)
}

type Criterion = (&'static str, fn() -> Outcome);

fn main() {
    let criteria: Vec<Criterion> = vec![
        ("loss oracles", loss_oracles),
        ("formulation equivalence", formulation_equivalence),
        ("gradient isolation", gradient_isolation),
        ("baseline recovery", baseline_recovery),
        ("schedules", schedules),
        ("metric oracles", metric_oracles),
        ("evaluation sanity", evaluation_sanity),
        (
            "desk-scale directional check (CIFAR-10)",
            desk_scale_directional,
        ),
        ("ablation harness", ablation_harness),
    ];
    let run_cifar = std::env::var("SDSSL_ACCEPTANCE_CIFAR").is_ok_and(|v| v == "1");
    let filter: Vec<String> = std::env::args()
        .skip(1)
        .filter(|a| !a.starts_with('-'))
        .collect();
    let mut failed = 0;
    for (name, f) in criteria {
        if !filter.is_empty() && !filter.iter().any(|p| name.contains(p.as_str())) {
            continue;
        }
        if name.contains("CIFAR") && !run_cifar {
            println!("[NOT RUN] {name}: needs SDSSL_ACCEPTANCE_CIFAR=1 and a cifar10 cache (sdssl dataset-fetch --name cifar10)");
            continue;
        }
        let start = Instant::now();
        let result = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|p| {
            Err(p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panicked".into()))
        });
        let secs = start.elapsed().as_secs_f64();
        match result {
            Ok(detail) => println!("[PASS] {name} ({secs:.2}s): {detail}"),
            Err(why) => {
                failed += 1;
                println!("[FAIL] {name} ({secs:.2}s): {why}");
            }
        }
    }
    if failed > 0 {
        println!("{failed} acceptance criteria failed");
        std::process::exit(1);
    }
}
