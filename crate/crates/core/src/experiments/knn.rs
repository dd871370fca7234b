//! Brute-force k-nearest-neighbor baseline with a grid search over k and the
//! distance metric on validation accuracy.

use crate::error::{Error, Result};
use crate::tasks::{Dataset, SplitSpec, Targets};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum KnnMetric {
    L1,
    L2,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct KnnReport {
    pub best_k: usize,
    pub best_metric: KnnMetric,
    pub val_acc: f64,
    pub test_acc: f64,
}

fn distance(metric: KnnMetric, a: &[f64], b: &[f64]) -> f64 {
    match metric {
        KnnMetric::L1 => a.iter().zip(b).map(|(x, y)| (x - y).abs()).sum(),
        KnnMetric::L2 => a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum(),
    }
}

fn classify(
    ds: &Dataset,
    classes: &[usize],
    train: &[usize],
    query: usize,
    k: usize,
    metric: KnnMetric,
) -> usize {
    let d = ds.dims();
    let q = &ds.x.data[query * d..(query + 1) * d];
    let mut dists: Vec<(f64, usize)> = train
        .iter()
        .map(|&r| (distance(metric, q, &ds.x.data[r * d..(r + 1) * d]), classes[r]))
        .collect();
    dists.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap().then(a.1.cmp(&b.1)));
    let mut votes = vec![0usize; ds.class_count];
    for (_, class) in dists.iter().take(k.min(dists.len())) {
        votes[*class] += 1;
    }
    // majority vote, ties toward the lower class index
    let mut best = 0;
    for (c, &v) in votes.iter().enumerate() {
        if v > votes[best] {
            best = c;
        }
    }
    best
}

fn accuracy_on(
    ds: &Dataset,
    classes: &[usize],
    train: &[usize],
    rows: &[usize],
    k: usize,
    metric: KnnMetric,
) -> f64 {
    if rows.is_empty() {
        return f64::NAN;
    }
    let hits = rows
        .iter()
        .filter(|&&r| classify(ds, classes, train, r, k, metric) == classes[r])
        .count();
    hits as f64 / rows.len() as f64
}

/// Grid search k in 1..=k_max and the metric on validation accuracy; ties
/// prefer the smaller k, then L2.
pub fn knn_baseline(ds: &Dataset, splits: &SplitSpec, k_max: usize) -> Result<KnnReport> {
    if splits.train.is_empty() {
        return Err(Error::Data("k-NN needs a non-empty training split".into()));
    }
    let classes = match &ds.targets {
        Targets::Classes(c) => c,
        Targets::Values(_) => {
            return Err(Error::Data("k-NN baseline applies to classification tasks".into()))
        }
    };
    let val = if splits.val.is_empty() { &splits.train } else { &splits.val };
    let mut best: Option<(usize, KnnMetric, f64)> = None;
    for k in 1..=k_max.max(1) {
        for metric in [KnnMetric::L2, KnnMetric::L1] {
            let acc = accuracy_on(ds, classes, &splits.train, val, k, metric);
            let better = match &best {
                Some((_, _, best_acc)) => acc > *best_acc,
                None => true,
            };
            if better {
                best = Some((k, metric, acc));
            }
        }
    }
    let (best_k, best_metric, val_acc) = best.unwrap();
    let test_acc = accuracy_on(ds, classes, &splits.train, &splits.test, best_k, best_metric);
    Ok(KnnReport { best_k, best_metric, val_acc, test_acc })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tasks::{gen_two_blobs, split};

    #[test]
    fn one_nearest_neighbor_memorizes_the_training_points() {
        let ds = gen_two_blobs(20, 2.0, 3);
        let classes = match &ds.targets {
            Targets::Classes(c) => c.clone(),
            _ => unreachable!(),
        };
        let train: Vec<usize> = (0..ds.rows()).collect();
        for &r in &train {
            assert_eq!(classify(&ds, &classes, &train, r, 1, KnnMetric::L2), classes[r]);
        }
    }

    #[test]
    fn separable_blobs_are_solved_for_small_k() {
        let ds = gen_two_blobs(40, 2.0, 5);
        let splits = split(ds.rows(), 0.8, 5).unwrap().with_validation_like_test();
        let report = knn_baseline(&ds, &splits, 8).unwrap();
        assert_eq!(report.test_acc, 1.0);
    }

    #[test]
    fn single_class_dataset_always_predicts_that_class() {
        let mut ds = gen_two_blobs(10, 2.0, 7);
        ds.targets = Targets::Classes(vec![0; ds.rows()]);
        ds.class_count = 1;
        let splits = split(ds.rows(), 0.8, 7).unwrap();
        let report = knn_baseline(&ds, &splits, 4).unwrap();
        assert_eq!(report.test_acc, 1.0);
    }
}
