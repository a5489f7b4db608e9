mod common;

use std::fs;

use common::{tiny_config, train_set};
use sdssl::checkpoint::load_checkpoint;
use sdssl::config::ExperimentConfig;
use sdssl::exec;
use sdssl::framework::Framework;
use sdssl::train::run;

fn metrics_rows(dir: &std::path::Path) -> Vec<Vec<String>> {
    let mut r = csv::Reader::from_path(dir.join("metrics.csv")).unwrap();
    assert_eq!(
        r.headers().unwrap().iter().collect::<Vec<_>>(),
        [
            "step",
            "loss_total",
            "loss_ssl",
            "loss_isd",
            "loss_pred",
            "alpha",
            "lr",
            "ema_m",
            "ms_per_step"
        ]
    );
    // drop the timing column
    r.records()
        .map(|rec| {
            let rec = rec.unwrap();
            rec.iter().take(8).map(String::from).collect()
        })
        .collect()
}

#[test]
fn resumed_run_matches_uninterrupted() {
    let mut c = tiny_config(Framework::Byol);
    c.schedule.epochs = 4;
    c.schedule.checkpoint_every = 2;
    let ds = train_set(&c);
    let tmp = tempfile::tempdir().unwrap();
    let full = run(&c, &ds, &tmp.path().join("full"), None).unwrap();

    let mid = load_checkpoint(&tmp.path().join("full/epoch_0002.ckpt")).unwrap();
    let half = full.records.len() / 2;
    assert_eq!(mid.step(), half);
    let resumed = run(&c, &ds, &tmp.path().join("resumed"), Some(mid)).unwrap();

    assert_eq!(resumed.records.len(), half);
    for (a, b) in full.records[half..].iter().zip(&resumed.records) {
        assert_eq!(
            a.losses.total.to_bits(),
            b.losses.total.to_bits(),
            "step {}",
            a.step
        );
    }
    assert_eq!(full.state.student, resumed.state.student);
    assert_eq!(full.state.teacher, resumed.state.teacher);
}

#[test]
fn same_seed_same_metrics_any_threading() {
    let mut c = tiny_config(Framework::Mocov3);
    c.sdssl_enabled = true;
    let ds = train_set(&c);
    let tmp = tempfile::tempdir().unwrap();
    run(&c, &ds, &tmp.path().join("a"), None).unwrap();
    exec::set_parallel(false);
    run(&c, &ds, &tmp.path().join("b"), None).unwrap();
    exec::set_parallel(true);
    let a = metrics_rows(&tmp.path().join("a"));
    assert_eq!(a.len(), 8);
    assert_eq!(a, metrics_rows(&tmp.path().join("b")));

    c.seed = 7;
    run(&c, &ds, &tmp.path().join("c"), None).unwrap();
    assert_ne!(a, metrics_rows(&tmp.path().join("c")));
}

#[test]
fn run_directory_contents() {
    let mut c = tiny_config(Framework::Simclr);
    c.sdssl_enabled = true;
    c.schedule.epochs = 3;
    c.schedule.checkpoint_every = 1;
    let ds = train_set(&c);
    let tmp = tempfile::tempdir().unwrap();
    let out = run(&c, &ds, tmp.path(), None).unwrap();
    for f in [
        "metrics.csv",
        "resolved_config.toml",
        "VERSION",
        "epoch_0001.ckpt",
        "epoch_0002.ckpt",
        "final.ckpt",
    ] {
        assert!(tmp.path().join(f).exists(), "{f}");
    }
    assert!(!tmp.path().join("epoch_0003.ckpt").exists());

    let text = fs::read_to_string(tmp.path().join("resolved_config.toml")).unwrap();
    let back = ExperimentConfig::from_table(toml::from_str(&text).unwrap()).unwrap();
    assert_eq!(back, c);

    let rows = metrics_rows(tmp.path());
    assert_eq!(rows.len(), out.records.len());
    let alphas: Vec<f64> = rows.iter().map(|r| r[5].parse().unwrap()).collect();
    assert_eq!(alphas[0], 0.0);
    assert!(alphas.windows(2).all(|w| w[1] >= w[0]));
    for r in &rows {
        let v: Vec<f64> = r[1..5].iter().map(|x| x.parse().unwrap()).collect();
        assert!(v.iter().all(|x| x.is_finite()));
    }
}
