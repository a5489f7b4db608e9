//! Weighted k-nearest-neighbour classification on cosine similarity.

use crate::error::{Error, Result};
use crate::exec;

use super::FeatureBank;

/// Label predicted for each test row: the `k` most similar train rows vote
/// with weight `exp(sim / tau)`; ties go to the smaller class index.
pub fn knn_predict(
    train: &FeatureBank,
    test: &FeatureBank,
    k: usize,
    tau: f64,
) -> Result<Vec<u32>> {
    if train.is_empty() || test.is_empty() {
        return Err(Error::Input(
            "k-NN needs non-empty train and test banks".into(),
        ));
    }
    if k == 0 || k > train.len() {
        return Err(Error::Input(format!(
            "k = {k} must lie in 1..={}",
            train.len()
        )));
    }
    if !(tau > 0.0) {
        return Err(Error::config("eval.knn_tau", "must be > 0"));
    }
    if train.dim() != test.dim() {
        return Err(Error::shape(
            "k-NN feature dimension",
            train.dim(),
            test.dim(),
        ));
    }
    let tr = train.normalized();
    let te = test.normalized();
    let classes = train.num_classes.max(test.num_classes);
    let preds = exec::map_range(te.len(), |i| {
        let sims = tr.features.dot(&te.features.row(i));
        let mut order: Vec<usize> = (0..sims.len()).collect();
        // stable tie-break on index keeps results independent of thread count
        let cmp = |a: &usize, b: &usize| sims[*b].total_cmp(&sims[*a]).then(a.cmp(b));
        if k < order.len() {
            order.select_nth_unstable_by(k - 1, cmp);
            order.truncate(k);
        }
        order.sort_by(cmp);
        let mut votes = vec![0.0f64; classes];
        for j in order {
            votes[tr.labels[j] as usize] += (sims[j] / tau).exp();
        }
        let mut best = 0;
        for c in 1..classes {
            if votes[c] > votes[best] {
                best = c;
            }
        }
        best as u32
    });
    Ok(preds)
}

/// Top-1 accuracy of [`knn_predict`].
pub fn knn_classify(train: &FeatureBank, test: &FeatureBank, k: usize, tau: f64) -> Result<f64> {
    let preds = knn_predict(train, test, k, tau)?;
    let correct = preds
        .iter()
        .zip(&test.labels)
        .filter(|(p, l)| p == l)
        .count();
    Ok(correct as f64 / test.len() as f64)
}
