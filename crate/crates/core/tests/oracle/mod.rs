//! Independent reference computations used by the test suites.
//!
//! Nothing in here calls into `cxr_core`; every routine is a deliberately
//! naive re-derivation (plain loops over `Vec`s) so that it can check the
//! library's vectorised paths.
#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn brute_partition(anchor: usize, targets: &[bool], sites: &[usize]) -> (Vec<usize>, Vec<usize>) {
    let mut aligned = vec![];
    let mut conflicting = vec![];
    for j in 0..targets.len() {
        if j == anchor || targets[j] != targets[anchor] {
            continue;
        }
        if sites[j] == sites[anchor] {
            aligned.push(j);
        }
        if sites[j] != sites[anchor] {
            conflicting.push(j);
        }
    }
    (aligned, conflicting)
}

pub fn naive_similarity(rows: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let n = rows.len();
    let mut out = vec![vec![0.0; n]; n];
    for i in 0..n {
        for j in 0..n {
            let mut dot = 0.0;
            let mut ni = 0.0;
            let mut nj = 0.0;
            for k in 0..rows[i].len() {
                dot += rows[i][k] * rows[j][k];
                ni += rows[i][k] * rows[i][k];
                nj += rows[j][k] * rows[j][k];
            }
            out[i][j] = dot / (ni.sqrt() * nj.sqrt());
        }
    }
    out
}

fn normal_pdf(x: f64, mu: f64, var: f64) -> f64 {
    (-(x - mu) * (x - mu) / (2.0 * var)).exp() / (2.0 * std::f64::consts::PI * var).sqrt()
}

/// KL(p || q) by composite Simpson integration of p ln(p/q).
pub fn kl_quadrature(mu_p: f64, var_p: f64, mu_q: f64, var_q: f64) -> f64 {
    let sd = var_p.sqrt().max(var_q.sqrt());
    let lo = mu_p.min(mu_q) - 14.0 * sd;
    let hi = mu_p.max(mu_q) + 14.0 * sd;
    let n = 200_000;
    let h = (hi - lo) / n as f64;
    let f = |x: f64| {
        let p = normal_pdf(x, mu_p, var_p);
        if p == 0.0 {
            return 0.0;
        }
        // log-ratio evaluated analytically to avoid underflow in q
        let log_p = -(x - mu_p).powi(2) / (2.0 * var_p) - 0.5 * (2.0 * std::f64::consts::PI * var_p).ln();
        let log_q = -(x - mu_q).powi(2) / (2.0 * var_q) - 0.5 * (2.0 * std::f64::consts::PI * var_q).ln();
        p * (log_p - log_q)
    };
    let mut s = f(lo) + f(hi);
    for i in 1..n {
        let w = if i % 2 == 1 { 4.0 } else { 2.0 };
        s += w * f(lo + i as f64 * h);
    }
    s * h / 3.0
}

/// From-scratch regularizer: per-anchor loops, own statistics.
pub fn fairkl_oracle(rows: &[Vec<f64>], targets: &[bool], sites: &[usize]) -> f64 {
    const FLOOR: f64 = 1e-6;
    if targets.iter().all(|&t| t) || targets.iter().all(|&t| !t) {
        return 0.0;
    }
    let sim = naive_similarity(rows);
    let mut sum = 0.0;
    let mut count = 0;
    for a in 0..rows.len() {
        let (al, co) = brute_partition(a, targets, sites);
        if al.len() < 2 || co.len() < 2 {
            continue;
        }
        let stats = |idx: &[usize]| {
            let m = idx.len() as f64;
            let mean = idx.iter().map(|&j| sim[a][j]).sum::<f64>() / m;
            let var = idx.iter().map(|&j| (sim[a][j] - mean).powi(2)).sum::<f64>() / (m - 1.0);
            (mean, if var < FLOOR { FLOOR } else { var })
        };
        let (mp, vp) = stats(&al);
        let (mq, vq) = stats(&co);
        sum += (vq / vp).sqrt().ln() + (vp + (mp - mq).powi(2)) / (2.0 * vq) - 0.5;
        count += 1;
    }
    if count == 0 {
        0.0
    } else {
        sum / count as f64
    }
}

pub struct RandomBatch {
    pub rows: Vec<Vec<f64>>,
    pub targets: Vec<bool>,
    pub sites: Vec<usize>,
}

pub fn random_batch(seed: u64, n: usize, d: usize, n_sites: usize) -> RandomBatch {
    let mut r = rng(seed);
    let rows = (0..n)
        .map(|_| (0..d).map(|_| r.random_range(-1.0..1.0)).collect())
        .collect();
    let targets = (0..n).map(|i| i % 2 == 0 || r.random_bool(0.2)).collect();
    let sites = (0..n).map(|_| r.random_range(0..n_sites)).collect();
    RandomBatch { rows, targets, sites }
}

/// Mann-Whitney AUC by explicit enumeration of all (positive, negative) pairs.
pub fn auc_all_pairs(scores: &[f64], labels: &[bool]) -> f64 {
    let mut wins = 0.0;
    let mut pairs = 0.0;
    for i in 0..scores.len() {
        if !labels[i] {
            continue;
        }
        for j in 0..scores.len() {
            if labels[j] {
                continue;
            }
            pairs += 1.0;
            if scores[i] > scores[j] {
                wins += 1.0;
            } else if scores[i] == scores[j] {
                wins += 0.5;
            }
        }
    }
    wins / pairs
}

/// Balanced accuracy straight from the confusion-matrix definition.
pub fn balanced_accuracy_confusion(tp: usize, fn_: usize, tn: usize, fp: usize) -> f64 {
    let sens = tp as f64 / (tp + fn_) as f64;
    let spec = tn as f64 / (tn + fp) as f64;
    (sens + spec) / 2.0
}

/// Hand-worked confusion matrices `(tp, fn, tn, fp, balanced accuracy)`.
pub const BALANCED_ACCURACY_FIXTURES: [(usize, usize, usize, usize, f64); 20] = [
    (3, 1, 4, 0, 7.0 / 8.0),
    (9, 4, 5, 8, 7.0 / 13.0),
    (0, 7, 3, 0, 1.0 / 2.0),
    (2, 1, 5, 7, 13.0 / 24.0),
    (3, 6, 8, 1, 11.0 / 18.0),
    (9, 3, 0, 3, 3.0 / 8.0),
    (6, 4, 2, 6, 17.0 / 40.0),
    (2, 1, 2, 9, 14.0 / 33.0),
    (9, 7, 2, 2, 17.0 / 32.0),
    (2, 2, 4, 5, 17.0 / 36.0),
    (3, 8, 3, 2, 24.0 / 55.0),
    (3, 6, 4, 0, 2.0 / 3.0),
    (5, 6, 2, 2, 21.0 / 44.0),
    (4, 1, 5, 4, 61.0 / 90.0),
    (9, 9, 0, 9, 1.0 / 4.0),
    (5, 1, 4, 5, 23.0 / 36.0),
    (4, 7, 5, 2, 83.0 / 154.0),
    (7, 7, 2, 0, 3.0 / 4.0),
    (4, 0, 5, 6, 8.0 / 11.0),
    (0, 8, 6, 5, 3.0 / 11.0),
];

/// Prediction and label vectors realising a confusion matrix, shuffled.
pub fn confusion_vectors(seed: u64, tp: usize, fn_: usize, tn: usize, fp: usize) -> (Vec<bool>, Vec<bool>) {
    use rand::seq::SliceRandom;
    let mut pairs = vec![];
    pairs.extend(std::iter::repeat_n((true, true), tp));
    pairs.extend(std::iter::repeat_n((false, true), fn_));
    pairs.extend(std::iter::repeat_n((false, false), tn));
    pairs.extend(std::iter::repeat_n((true, false), fp));
    pairs.shuffle(&mut rng(seed));
    pairs.into_iter().unzip()
}

/// Scores drawn from a small grid (so ties are common) with both classes present.
pub fn random_scored_set(seed: u64, n: usize, levels: u32) -> (Vec<f64>, Vec<bool>) {
    let mut r = rng(seed);
    loop {
        let scores: Vec<f64> = (0..n)
            .map(|_| r.random_range(0..levels) as f64 / levels as f64)
            .collect();
        let labels: Vec<bool> = (0..n).map(|_| r.random_bool(0.5)).collect();
        if labels.iter().any(|&l| l) && labels.iter().any(|&l| !l) {
            return (scores, labels);
        }
    }
}

/// Group-by mean of `(key, value)` rows.
pub fn group_mean(rows: &[(String, f64)]) -> std::collections::BTreeMap<String, f64> {
    let mut sums: std::collections::BTreeMap<String, (f64, f64)> = Default::default();
    for (k, v) in rows {
        let e = sums.entry(k.clone()).or_insert((0.0, 0.0));
        e.0 += v;
        e.1 += 1.0;
    }
    sums.into_iter().map(|(k, (s, n))| (k, s / n)).collect()
}
