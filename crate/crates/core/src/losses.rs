//! Self-supervised objectives and the self-distillation terms built on them.
//!
//! Every loss exists in graph form (used by the training engine) and as a
//! plain value function over matrices (used by evaluation and tests). The
//! value functions build a constant graph and read the result, so both paths
//! share one implementation.
//!
//! Contrastive logits are cosine similarities: rows of `q` and `z` are
//! ℓ2-normalized before the inner product, and the cross-entropy is scaled
//! by `2τ`.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Mat, Var};
use crate::error::{Error, Result};
use crate::framework::Framework;

/// Where intermediate layers take their distillation targets from.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DistillView {
    /// The other view's final (teacher) projection.
    #[default]
    CrossView,
    /// The same view's final student projection, detached.
    SameView,
}

/// Shape of the distillation-weight ramp.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AlphaSchedule {
    #[default]
    Cosine,
    Constant,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossConfig {
    pub temperature: f64,
    pub alpha_max: f64,
    pub alpha_schedule: AlphaSchedule,
    pub beta: f64,
    pub distill_view: DistillView,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            temperature: 0.2,
            alpha_max: 0.6,
            alpha_schedule: AlphaSchedule::Cosine,
            beta: 1.0,
            distill_view: DistillView::CrossView,
        }
    }
}

impl LossConfig {
    pub fn validate(&self, framework: Framework) -> Result<()> {
        if framework.is_contrastive() && !(self.temperature > 0.0) {
            return Err(Error::config("loss.temperature", "must be > 0"));
        }
        if !(self.alpha_max >= 0.0) || !self.alpha_max.is_finite() {
            return Err(Error::config("loss.alpha_max", "must be finite and >= 0"));
        }
        if !(self.beta >= 0.0) || !self.beta.is_finite() {
            return Err(Error::config("loss.beta", "must be finite and >= 0"));
        }
        Ok(())
    }
}

/// Per-step loss components. `ssl`, `isd` and `pred` are symmetrized over
/// the two views.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBundle {
    pub ssl: f64,
    pub isd: f64,
    pub pred: f64,
    pub total: f64,
    pub per_layer_isd: Vec<f64>,
    pub per_layer_pred: Vec<f64>,
}

/// Weight actually applied to the predictor loss (zero without predictors).
pub fn effective_beta(beta: f64, framework: Framework) -> f64 {
    if framework.has_predictor() {
        beta
    } else {
        0.0
    }
}

/// `total = ssl + α·isd + β·pred` (the `pred` term is dropped for SimCLR).
pub fn total_loss(
    ssl: f64,
    isd: f64,
    pred: f64,
    alpha: f64,
    beta: f64,
    framework: Framework,
) -> Result<LossBundle> {
    for (name, v) in [
        ("ssl", ssl),
        ("isd", isd),
        ("pred", pred),
        ("alpha", alpha),
        ("beta", beta),
    ] {
        if !v.is_finite() {
            return Err(Error::numeric(format!("loss component `{name}` is {v}")));
        }
    }
    let beta = effective_beta(beta, framework);
    let mut total = ssl;
    if alpha != 0.0 {
        total += alpha * isd;
    }
    if beta != 0.0 {
        total += beta * pred;
    }
    Ok(LossBundle {
        ssl,
        isd,
        pred,
        total,
        ..LossBundle::default()
    })
}

/// Graph form of [`total_loss`]; zero-weighted terms receive no gradient.
pub fn total_loss_graph(
    g: &mut Graph,
    ssl: Var,
    isd: Option<Var>,
    pred: Option<Var>,
    alpha: f64,
    beta: f64,
    framework: Framework,
) -> Var {
    let mut terms = vec![(ssl, 1.0)];
    if let Some(isd) = isd {
        terms.push((isd, alpha));
    }
    if let Some(pred) = pred {
        terms.push((pred, effective_beta(beta, framework)));
    }
    g.weighted_sum(&terms)
}

/// Selects the distillation target for `view` (0 or 1).
pub fn same_view_targets<T: Copy>(
    mode: DistillView,
    view: usize,
    student_outputs: [T; 2],
    teacher_outputs: [T; 2],
) -> T {
    match mode {
        DistillView::CrossView => teacher_outputs[1 - view],
        DistillView::SameView => student_outputs[view],
    }
}

/// Contrastive loss over stacked queries: `q` holds `num_layers` blocks of
/// `N` rows, each block scored against the `N` rows of `z`; row `i` of every
/// block is positive with row `i` of `z`. Returns `2τ·CE`.
pub fn ctr(g: &mut Graph, q: Var, z: Var, tau: f64, num_layers: usize) -> Var {
    let n = g.value(z).nrows();
    debug_assert_eq!(g.value(q).nrows(), n * num_layers);
    let qn = g.l2_normalize_rows(q);
    let zn = g.l2_normalize_rows(z);
    let logits = g.matmul_nt(qn, zn);
    let logits = g.scale(logits, 1.0 / tau);
    let labels = (0..n * num_layers).map(|i| i % n).collect();
    let ce = g.softmax_cross_entropy(logits, labels, None);
    g.scale(ce, 2.0 * tau)
}

/// General InfoNCE: query `i` is positive with `z[positive_map[i]]`; all
/// other rows of `z` (except `excluded[i]`) are negatives. Returns `2τ·CE`.
pub fn infonce(
    g: &mut Graph,
    q: Var,
    z: Var,
    tau: f64,
    positive_map: Vec<usize>,
    excluded: Option<&[Option<usize>]>,
) -> Var {
    let qn = g.l2_normalize_rows(q);
    let zn = g.l2_normalize_rows(z);
    let logits = g.matmul_nt(qn, zn);
    let logits = g.scale(logits, 1.0 / tau);
    let ce = g.softmax_cross_entropy(logits, positive_map, excluded);
    g.scale(ce, 2.0 * tau)
}

/// Mean of `2 − 2·cos(q_i, z_{i mod N})` over the stacked rows of `q`.
pub fn byol_stacked(g: &mut Graph, q: Var, z: Var, num_layers: usize) -> Var {
    let n = g.value(z).nrows();
    let qn = g.l2_normalize_rows(q);
    let zn = g.l2_normalize_rows(z);
    let zr = if num_layers == 1 {
        zn
    } else {
        g.gather_rows(zn, (0..n * num_layers).map(|i| i % n).collect())
    };
    let prod = g.mul(qn, zr);
    let s = g.sum_all(prod);
    let m = g.scale(s, -2.0 / (n * num_layers) as f64);
    g.offset(m, 2.0)
}

/// The framework's pairwise objective between stacked queries and one target block.
pub fn ssl_stacked(
    g: &mut Graph,
    framework: Framework,
    q: Var,
    z: Var,
    tau: f64,
    num_layers: usize,
) -> Var {
    if framework.is_contrastive() {
        ctr(g, q, z, tau, num_layers)
    } else {
        byol_stacked(g, q, z, num_layers)
    }
}

/// `L_ssl(q, z)` for one block of `N` rows.
pub fn ssl_pair(g: &mut Graph, framework: Framework, q: Var, z: Var, tau: f64) -> Var {
    ssl_stacked(g, framework, q, z, tau, 1)
}

/// Symmetric NT-Xent over both views: each projection is scored against the
/// projections of both views except itself; the positive is its other view.
pub fn ntxent_symmetric(g: &mut Graph, h1: Var, h2: Var, tau: f64) -> Var {
    let n = g.value(h1).nrows();
    let all = g.concat_rows(&[h1, h2]);
    let pos1: Vec<usize> = (0..n).map(|i| n + i).collect();
    let ex1: Vec<Option<usize>> = (0..n).map(Some).collect();
    let pos2: Vec<usize> = (0..n).collect();
    let ex2: Vec<Option<usize>> = (0..n).map(|i| Some(n + i)).collect();
    let a = infonce(g, h1, all, tau, pos1, Some(&ex1));
    let b = infonce(g, h2, all, tau, pos2, Some(&ex2));
    g.add(a, b)
}

/// Mean over intermediate layers of `L_ssl(q_l, z)`; returns the mean node
/// and the per-layer nodes.
pub fn isd_graph(
    g: &mut Graph,
    framework: Framework,
    q_layers: &[Var],
    z: Var,
    tau: f64,
) -> Result<(Var, Vec<Var>)> {
    if q_layers.is_empty() {
        return Err(Error::config(
            "encoder.num_layers",
            "self-distillation needs at least 2 layers",
        ));
    }
    let per: Vec<Var> = q_layers
        .iter()
        .map(|&q| ssl_pair(g, framework, q, z, tau))
        .collect();
    let w = 1.0 / per.len() as f64;
    let terms: Vec<(Var, f64)> = per.iter().map(|&v| (v, w)).collect();
    Ok((g.weighted_sum(&terms), per))
}

/// Sum over layers of `L_ssl(q_l, z)`; returns the sum node and per-layer nodes.
pub fn layer_sum_graph(
    g: &mut Graph,
    framework: Framework,
    q_layers: &[Var],
    z: Var,
    tau: f64,
) -> (Var, Vec<Var>) {
    let per: Vec<Var> = q_layers
        .iter()
        .map(|&q| ssl_pair(g, framework, q, z, tau))
        .collect();
    let terms: Vec<(Var, f64)> = per.iter().map(|&v| (v, 1.0)).collect();
    (g.weighted_sum(&terms), per)
}

fn check_rows(m: &Mat, what: &str) -> Result<()> {
    for (i, r) in m.rows().into_iter().enumerate() {
        let n = r.dot(&r).sqrt();
        if !(n > 0.0) || !n.is_finite() {
            return Err(Error::Numeric {
                what: format!("{what} row {i} has zero or non-finite norm"),
                layer: None,
            });
        }
    }
    Ok(())
}

fn check_tau(tau: f64) -> Result<()> {
    if tau > 0.0 && tau.is_finite() {
        Ok(())
    } else {
        Err(Error::config(
            "loss.temperature",
            format!("{tau} is not > 0"),
        ))
    }
}

/// Mean over rows of `2 − 2·cos(q_n, z_n)`.
pub fn byol_loss(q: &Mat, z: &Mat) -> Result<f64> {
    if q.dim() != z.dim() {
        return Err(Error::shape(
            "byol_loss",
            format!("{:?}", z.dim()),
            format!("{:?}", q.dim()),
        ));
    }
    check_rows(q, "q")?;
    check_rows(z, "z")?;
    let mut g = Graph::new();
    let (qv, zv) = (g.constant(q.clone()), g.constant(z.clone()));
    let l = byol_stacked(&mut g, qv, zv, 1);
    Ok(g.scalar(l))
}

/// `2τ` times the mean over queries of `−log softmax(⟨q̂_i, ẑ⟩/τ)[positive_map[i]]`.
pub fn infonce_loss(q: &Mat, z: &Mat, tau: f64, positive_map: &[usize]) -> Result<f64> {
    check_tau(tau)?;
    if positive_map.len() != q.nrows() {
        return Err(Error::shape("positive_map", q.nrows(), positive_map.len()));
    }
    if let Some(&bad) = positive_map.iter().find(|&&p| p >= z.nrows()) {
        return Err(Error::Index {
            what: "positive_map".into(),
            index: bad,
            valid: format!("0..{}", z.nrows()),
        });
    }
    check_rows(q, "q")?;
    check_rows(z, "z")?;
    let mut g = Graph::new();
    let (qv, zv) = (g.constant(q.clone()), g.constant(z.clone()));
    let l = infonce(&mut g, qv, zv, tau, positive_map.to_vec(), None);
    Ok(g.scalar(l))
}

/// Value of `L_ssl(q, z)` for the given framework.
pub fn ssl_loss(framework: Framework, q: &Mat, z: &Mat, tau: f64) -> Result<f64> {
    if framework.is_contrastive() {
        let map: Vec<usize> = (0..q.nrows()).collect();
        infonce_loss(q, z, tau, &map)
    } else {
        byol_loss(q, z)
    }
}

/// Mean over the `L−1` intermediate layers of `L_ssl(q_l, z_L)`, with the
/// per-layer values.
pub fn isd_loss(
    framework: Framework,
    q_stack: &[Mat],
    z_last: &Mat,
    tau: f64,
) -> Result<(f64, Vec<f64>)> {
    if q_stack.is_empty() {
        return Err(Error::config(
            "encoder.num_layers",
            "self-distillation needs at least 2 layers",
        ));
    }
    if framework.is_contrastive() {
        check_tau(tau)?;
    }
    let per = q_stack
        .iter()
        .map(|q| ssl_loss(framework, q, z_last, tau))
        .collect::<Result<Vec<_>>>()?;
    Ok((per.iter().sum::<f64>() / per.len() as f64, per))
}

/// Stacked evaluation of [`isd_loss`] / [`pred_loss`]: all layers' rows in
/// one matrix scored against `z_last`, returning the mean over stacked rows.
pub fn stacked_loss(framework: Framework, q_stack: &[Mat], z_last: &Mat, tau: f64) -> Result<f64> {
    if q_stack.is_empty() {
        return Err(Error::Input("empty layer stack".into()));
    }
    if framework.is_contrastive() {
        check_tau(tau)?;
    }
    let views: Vec<_> = q_stack.iter().map(|m| m.view()).collect();
    let stacked = ndarray::concatenate(ndarray::Axis(0), &views)
        .map_err(|e| Error::shape("stacked layers", "equal widths", e))?;
    let mut g = Graph::new();
    let (qv, zv) = (g.constant(stacked), g.constant(z_last.clone()));
    let l = ssl_stacked(&mut g, framework, qv, zv, tau, q_stack.len());
    Ok(g.scalar(l))
}

/// Sum over all layers of `L_ssl(pred_l(h_l), z_L)`, given predictor
/// outputs already computed from detached projections.
pub fn pred_loss(
    framework: Framework,
    predicted: &[Mat],
    z_last: &Mat,
    tau: f64,
) -> Result<(f64, Vec<f64>)> {
    if !framework.has_predictor() {
        return Err(Error::Unsupported {
            framework: framework.to_string(),
            operation: "predictor loss".into(),
        });
    }
    let per = predicted
        .iter()
        .map(|q| ssl_loss(framework, q, z_last, tau))
        .collect::<Result<Vec<_>>>()?;
    Ok((per.iter().sum(), per))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(rows: usize, cols: usize, seed: u64) -> Mat {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Mat::from_shape_fn((rows, cols), |_| rng.random_range(-1.0..1.0))
    }

    #[test]
    fn byol_reference_values() {
        let z = array![[1.0, 0.0], [0.0, 2.0]];
        assert!(byol_loss(&z, &z).unwrap().abs() < 1e-12);
        assert!((byol_loss(&(-&z), &z).unwrap() - 4.0).abs() < 1e-12);
        let orth = array![[0.0, 3.0], [1.0, 0.0]];
        assert!((byol_loss(&orth, &z).unwrap() - 2.0).abs() < 1e-12);
    }

    #[test]
    fn byol_zero_row_names_index() {
        let q = array![[1.0, 0.0], [0.0, 0.0]];
        match byol_loss(&q, &q) {
            Err(Error::Numeric { what, .. }) => assert!(what.contains("row 1")),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn infonce_two_term_reference() {
        let q = array![[1.0, 0.0]];
        let z = array![[1.0, 0.0], [0.0, 1.0]];
        let l = infonce_loss(&q, &z, 1.0, &[0]).unwrap();
        let e = std::f64::consts::E;
        assert!((l - 2.0 * -(e / (e + 1.0)).ln()).abs() < 1e-12);
        assert!((l - 0.6265).abs() < 1e-4);
    }

    #[test]
    fn infonce_uniform_limit() {
        let n = 5;
        let mut z = Mat::zeros((n, n));
        for i in 0..n {
            z[[i, i]] = 1.0;
        }
        let q = z.slice(ndarray::s![0..1, ..]).to_owned();
        let tau = 1e4;
        let l = infonce_loss(&q, &z, tau, &[0]).unwrap();
        let limit = 2.0 * tau * (n as f64).ln();
        assert!(((l - limit) / limit).abs() < 1e-3, "{l} vs {limit}");
    }

    #[test]
    fn infonce_rejects_bad_tau_and_map() {
        let q = random(2, 3, 0);
        assert!(matches!(
            infonce_loss(&q, &q, 0.0, &[0, 1]),
            Err(Error::Config { .. })
        ));
        assert!(matches!(
            infonce_loss(&q, &q, 0.2, &[0, 2]),
            Err(Error::Index { .. })
        ));
    }

    #[test]
    fn isd_single_layer_and_identical_layers() {
        let q = random(4, 6, 1);
        let z = random(4, 6, 2);
        for fw in Framework::ALL {
            let single = ssl_loss(fw, &q, &z, 0.2).unwrap();
            let (isd, per) = isd_loss(fw, std::slice::from_ref(&q), &z, 0.2).unwrap();
            assert_eq!(per.len(), 1);
            assert!((isd - single).abs() < 1e-12);
            let (isd3, _) = isd_loss(fw, &[q.clone(), q.clone(), q.clone()], &z, 0.2).unwrap();
            assert!((isd3 - single).abs() < 1e-12);
        }
        assert!(isd_loss(Framework::Byol, &[], &z, 0.2).is_err());
    }

    #[test]
    fn pred_loss_unsupported_for_simclr() {
        let q = random(4, 6, 1);
        assert!(matches!(
            pred_loss(Framework::Simclr, std::slice::from_ref(&q), &q, 0.2),
            Err(Error::Unsupported { .. })
        ));
        let (single, per) =
            pred_loss(Framework::Mocov3, std::slice::from_ref(&q), &q, 0.2).unwrap();
        assert_eq!(per.len(), 1);
        assert!((single - ssl_loss(Framework::Mocov3, &q, &q, 0.2).unwrap()).abs() < 1e-12);
    }

    #[test]
    fn total_loss_arithmetic() {
        let b = total_loss(1.5, 0.7, 2.0, 0.0, 0.0, Framework::Mocov3).unwrap();
        assert_eq!(b.total, 1.5);
        let b = total_loss(1.5, 0.7, 2.0, 0.3, 1.0, Framework::Mocov3).unwrap();
        assert!((b.total - (1.5 + 0.3 * 0.7 + 2.0)).abs() < 1e-9);
        let b = total_loss(1.5, 0.7, 2.0, 0.3, 1.0, Framework::Simclr).unwrap();
        assert!((b.total - (1.5 + 0.3 * 0.7)).abs() < 1e-9);
        match total_loss(1.0, f64::NAN, 0.0, 0.1, 1.0, Framework::Byol) {
            Err(Error::Numeric { what, .. }) => assert!(what.contains("isd")),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn target_selection() {
        let student = ["sA", "sB"];
        let teacher = ["tA", "tB"];
        assert_eq!(
            same_view_targets(DistillView::CrossView, 0, student, teacher),
            "tB"
        );
        assert_eq!(
            same_view_targets(DistillView::CrossView, 1, student, teacher),
            "tA"
        );
        assert_eq!(
            same_view_targets(DistillView::SameView, 0, student, teacher),
            "sA"
        );
        assert_eq!(
            same_view_targets(DistillView::SameView, 1, student, teacher),
            "sB"
        );
    }

    #[test]
    fn ntxent_excludes_self() {
        // With self excluded, identical views give the same loss as scoring
        // only against the other view plus the remaining negatives.
        let h = random(3, 4, 9);
        let mut g = Graph::new();
        let (a, b) = (g.constant(h.clone()), g.constant(h.clone()));
        let l = ntxent_symmetric(&mut g, a, b, 0.5);
        assert!(g.scalar(l).is_finite());
        // Oracle: direct double loop.
        let norm = |r: ndarray::ArrayView1<f64>| &r / r.dot(&r).sqrt();
        let all: Vec<_> = (0..6).map(|i| norm(h.row(i % 3))).collect();
        let mut total = 0.0;
        for i in 0..6 {
            let pos = (i + 3) % 6;
            let mut denom = 0.0;
            for j in 0..6 {
                if j != i {
                    denom += (all[i].dot(&all[j]) / 0.5).exp();
                }
            }
            total += -((all[i].dot(&all[pos]) / 0.5).exp() / denom).ln();
        }
        let expected = 2.0 * 0.5 * total / 3.0;
        assert!((g.scalar(l) - expected).abs() < 1e-10);
    }

    #[test]
    fn loss_config_validation() {
        let mut c = LossConfig::default();
        c.temperature = 0.0;
        assert!(c.validate(Framework::Mocov3).is_err());
        assert!(c.validate(Framework::Byol).is_ok());
        c.temperature = 0.2;
        c.beta = -1.0;
        assert!(c.validate(Framework::Byol).is_err());
    }
}
