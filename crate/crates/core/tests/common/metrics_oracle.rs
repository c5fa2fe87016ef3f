//! Brute-force reference for the classification metrics.

use fpdanet::metrics::EvalReport;
use rand::Rng;

use super::rng;

/// Indices of the `k` largest entries, picked one at a time; on equal values
/// the earlier index is taken first.
pub fn top_k_set(row: &[f64], k: usize) -> Vec<usize> {
    let mut taken = vec![false; row.len()];
    let mut out = Vec::new();
    for _ in 0..k {
        let mut best: Option<usize> = None;
        for j in 0..row.len() {
            if taken[j] {
                continue;
            }
            best = match best {
                Some(b) if row[b] >= row[j] => Some(b),
                _ => Some(j),
            };
        }
        let b = best.unwrap();
        taken[b] = true;
        out.push(b);
    }
    out
}

pub fn topk(logits: &[f64], classes: usize, labels: &[usize], k: usize) -> f64 {
    let mut hits = 0;
    for (i, &l) in labels.iter().enumerate() {
        if top_k_set(&logits[i * classes..(i + 1) * classes], k).contains(&l) {
            hits += 1;
        }
    }
    hits as f64 / labels.len() as f64
}

/// Per-class recall with 1.0 for classes without samples.
pub fn recall(logits: &[f64], classes: usize, labels: &[usize]) -> Vec<f64> {
    (0..classes)
        .map(|c| {
            let mut total = 0;
            let mut right = 0;
            for (i, &l) in labels.iter().enumerate() {
                if l == c {
                    total += 1;
                    if top_k_set(&logits[i * classes..(i + 1) * classes], 1)[0] == c {
                        right += 1;
                    }
                }
            }
            if total == 0 {
                1.0
            } else {
                right as f64 / total as f64
            }
        })
        .collect()
}

/// `confusion[truth][pred]` with the prediction taken as the first pick.
pub fn confusion(logits: &[f64], classes: usize, labels: &[usize]) -> Vec<Vec<u64>> {
    let mut m = vec![vec![0u64; classes]; classes];
    for (i, &l) in labels.iter().enumerate() {
        m[l][top_k_set(&logits[i * classes..(i + 1) * classes], 1)[0]] += 1;
    }
    m
}

/// Random logits over 21 classes; every other batch uses a handful of
/// integer levels so ties are common.
pub fn random_batch(seed: u64, n: usize) -> (Vec<f64>, Vec<usize>) {
    let mut r = rng(seed);
    let coarse = seed % 2 == 0;
    let logits = (0..n * 21)
        .map(|_| if coarse { r.random_range(0..4) as f64 } else { r.random_range(-5.0..5.0) })
        .collect();
    let labels = (0..n).map(|_| r.random_range(0..21)).collect();
    (logits, labels)
}

/// Largest disagreement between a report and the brute-force reference
/// over top-1, top-5 and every per-class recall and FNR; a differing
/// confusion matrix counts as 1.
pub fn discrepancy(report: &EvalReport, logits: &[f64], labels: &[usize]) -> f64 {
    if report.confusion != confusion(logits, 21, labels) {
        return 1.0;
    }
    let mut worst = (report.top1 - topk(logits, 21, labels, 1)).abs();
    worst = worst.max((report.top5 - topk(logits, 21, labels, 5)).abs());
    for (c, r) in recall(logits, 21, labels).into_iter().enumerate() {
        worst = worst.max((report.per_class_recall[c] - r).abs());
        worst = worst.max((report.per_class_fnr[c] - (1.0 - r)).abs());
    }
    worst
}
