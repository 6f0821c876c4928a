//! Reference computations written independently of the library, used to
//! check it. They favour directness over speed.

#![allow(dead_code)]

use std::collections::BTreeSet;

/// Macro-F1 through an explicit confusion matrix over the union of labels.
pub fn macro_f1(preds: &[String], golds: &[String]) -> f64 {
    let classes: Vec<&String> = golds.iter().chain(preds).collect::<BTreeSet<_>>().into_iter().collect();
    let idx = |s: &String| classes.iter().position(|c| *c == s).unwrap();
    let c = classes.len();
    let mut m = vec![vec![0u64; c]; c];
    for (p, g) in preds.iter().zip(golds) {
        m[idx(g)][idx(p)] += 1;
    }
    let mut total = 0.0;
    for (k, row_k) in m.iter().enumerate() {
        let tp = row_k[k] as f64;
        let col: u64 = m.iter().map(|r| r[k]).sum();
        let row: u64 = row_k.iter().sum();
        let precision = if col == 0 { 0.0 } else { tp / col as f64 };
        let recall = if row == 0 { 0.0 } else { tp / row as f64 };
        let f1 = if precision + recall == 0.0 { 0.0 } else { 2.0 * precision * recall / (precision + recall) };
        total += f1;
    }
    total / c as f64
}

fn entropy(p: &[f64]) -> f64 {
    -p.iter().filter(|&&x| x > 0.0).map(|&x| x * x.ln()).sum::<f64>()
}

/// Jensen-Shannon divergence in nats, via the entropy identity.
pub fn js(p: &[f64], q: &[f64]) -> f64 {
    let m: Vec<f64> = p.iter().zip(q).map(|(a, b)| 0.5 * (a + b)).collect();
    entropy(&m) - 0.5 * (entropy(p) + entropy(q))
}

/// Softmax without the max shift; only for moderate logits.
pub fn naive_softmax(x: &[f64]) -> Vec<f64> {
    let e: Vec<f64> = x.iter().map(|v| v.exp()).collect();
    let z: f64 = e.iter().sum();
    e.into_iter().map(|v| v / z).collect()
}

/// First index of the maximum, by linear scan.
pub fn first_max(x: &[f64]) -> usize {
    let mut best = 0;
    for i in 1..x.len() {
        if x[i] > x[best] {
            best = i;
        }
    }
    best
}

/// Winner of the text-prior subtraction on a noiseless synthetic record,
/// from the closed form: gold scores `v`, the favorite `(1 - alpha) * p`
/// and everything else 0. Ties go to the lower index.
pub fn noiseless_scicon_winner(gold: usize, favorite: usize, k: usize, p: f64, v: f64, alpha: f64) -> usize {
    let mut s = vec![0.0; k];
    if gold == favorite {
        s[gold] = p + v - alpha * p;
    } else {
        s[gold] = v;
        s[favorite] = (1.0 - alpha) * p;
    }
    first_max(&s)
}
