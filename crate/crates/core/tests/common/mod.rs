//! Scalar-loop reference oracles for the alignment losses.
//!
//! These iterate every index of the loss formulas explicitly with naive
//! exponential sums and stay independent of the graph-based implementations
//! they check.

#![allow(dead_code)]

use metalign_core::losses::{AlignmentBatch, TokenBundle};
use metalign_core::soft_targets::SoftTargetMatrix;
use metalign_core::Tensor;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

fn sim(a: &[f64], b: &[f64], tau: f64) -> f64 {
    let mut dot = 0.0;
    let mut na = 0.0;
    let mut nb = 0.0;
    for i in 0..a.len() {
        dot += a[i] * b[i];
        na += a[i] * a[i];
        nb += b[i] * b[i];
    }
    dot / (na.sqrt() * nb.sqrt()) / tau
}

pub fn oracle_image_consistency(batch: &AlignmentBatch, tau: f64) -> f64 {
    let n = batch.len();
    let mut acc = 0.0;
    for i in 0..n {
        let anchor = &batch.image_view1[i].cls;
        let num = sim(anchor, &batch.image_view2[i].cls, tau).exp();
        let mut den = 0.0;
        for k in 0..n {
            den += sim(anchor, &batch.image_view2[k].cls, tau).exp();
            if k != i {
                den += sim(anchor, &batch.image_view1[k].cls, tau).exp();
            }
        }
        acc += (num / den).ln();
    }
    -acc / n as f64
}

pub fn oracle_global_semantic(batch: &AlignmentBatch, tau: f64) -> f64 {
    let n = batch.len();
    let mut acc = 0.0;
    for i in 0..n {
        for view in [&batch.image_view1, &batch.image_view2] {
            let p = &view[i].cls;
            let q = &batch.text[i].cls;
            let mut den_t = 0.0;
            let mut den_i = 0.0;
            for k in 0..n {
                den_t += sim(p, &batch.text[k].cls, tau).exp();
                den_i += sim(q, &view[k].cls, tau).exp();
            }
            acc += (sim(p, q, tau).exp() / den_t).ln();
            acc += (sim(q, p, tau).exp() / den_i).ln();
        }
    }
    -acc / (4.0 * n as f64)
}

/// Per-pair attention pooling computed entry by entry.
pub fn oracle_attention_pool(text_seq: &Tensor, image_seq: &Tensor) -> Tensor {
    let l = text_seq.rows();
    let k = image_seq.rows();
    let d = text_seq.cols();
    let mut pooled = Tensor::zeros(l, d);
    for li in 0..l {
        let mut weights = vec![0.0; k];
        let mut den = 0.0;
        for ki in 0..k {
            let mut dot = 0.0;
            for c in 0..d {
                dot += text_seq.get(li, c) * image_seq.get(ki, c);
            }
            let w = (dot / (d as f64).sqrt()).exp();
            weights[ki] = w;
            den += w;
        }
        for ki in 0..k {
            for c in 0..d {
                let cur = pooled.get(li, c);
                pooled.set(li, c, cur + weights[ki] / den * image_seq.get(ki, c));
            }
        }
    }
    pooled
}

fn oracle_local_generic(batch: &AlignmentBatch, tau: f64, mean_pool: bool) -> f64 {
    let n = batch.len();
    let mut total = 0.0;
    for i in 0..n {
        let text_seq = &batch.text[i].seq;
        let l = text_seq.rows();
        let mut acc = 0.0;
        for view in [&batch.image_view1, &batch.image_view2] {
            let image_seq = &view[i].seq;
            let pooled = if mean_pool {
                let k = image_seq.rows();
                let d = image_seq.cols();
                let mut mean = vec![0.0; d];
                for ki in 0..k {
                    for c in 0..d {
                        mean[c] += image_seq.get(ki, c) / k as f64;
                    }
                }
                let mut p = Tensor::zeros(l, d);
                for li in 0..l {
                    for c in 0..d {
                        p.set(li, c, mean[c]);
                    }
                }
                p
            } else {
                oracle_attention_pool(text_seq, image_seq)
            };
            for li in 0..l {
                let q_l = text_seq.row(li);
                let p_l = pooled.row(li);
                let mut den_v = 0.0;
                let mut den_t = 0.0;
                for m in 0..l {
                    den_v += sim(q_l, pooled.row(m), tau).exp();
                    den_t += sim(p_l, text_seq.row(m), tau).exp();
                }
                acc += (sim(q_l, p_l, tau).exp() / den_v).ln();
                acc += (sim(p_l, q_l, tau).exp() / den_t).ln();
            }
        }
        total += acc / (4.0 * l as f64 * n as f64);
    }
    -total
}

pub fn oracle_local_semantic(batch: &AlignmentBatch, tau: f64) -> f64 {
    oracle_local_generic(batch, tau, false)
}

pub fn oracle_local_semantic_direct(batch: &AlignmentBatch, tau: f64) -> f64 {
    oracle_local_generic(batch, tau, true)
}

pub fn oracle_soft_semantic(batch: &AlignmentBatch, soft: &SoftTargetMatrix, tau: f64) -> f64 {
    let n = batch.len();
    let mut acc = 0.0;
    for i in 0..n {
        for j in 0..n {
            for view in [&batch.image_view1, &batch.image_view2] {
                let p_ik = &view[i].cls;
                let q_j = &batch.text[j].cls;
                let mut den_t = 0.0;
                let mut den_i = 0.0;
                for l in 0..n {
                    den_t += sim(p_ik, &batch.text[l].cls, tau).exp();
                    den_i += sim(q_j, &view[l].cls, tau).exp();
                }
                let term = (sim(p_ik, q_j, tau).exp() / den_t).ln()
                    + (sim(q_j, p_ik, tau).exp() / den_i).ln();
                acc += soft.get(i, j) * term;
            }
        }
    }
    -acc / (4.0 * (n * n) as f64)
}

/// Brute-force confusion-matrix metrics used as the metrics oracle.
pub fn oracle_confusion_metrics(
    predictions: &[usize],
    truths: &[usize],
    n_classes: usize,
) -> (Vec<f64>, f64, f64, f64) {
    let mut confusion = vec![vec![0usize; n_classes]; n_classes];
    for (&p, &t) in predictions.iter().zip(truths) {
        confusion[t][p] += 1;
    }
    let mut f1s = vec![0.0; n_classes];
    let mut recalls = Vec::new();
    for c in 0..n_classes {
        let tp = confusion[c][c] as f64;
        let fp: f64 = (0..n_classes)
            .filter(|&t| t != c)
            .map(|t| confusion[t][c] as f64)
            .sum();
        let fal_n: f64 = (0..n_classes)
            .filter(|&p| p != c)
            .map(|p| confusion[c][p] as f64)
            .sum();
        let support = tp + fal_n;
        let denom = 2.0 * tp + fp + fal_n;
        f1s[c] = if denom > 0.0 { 2.0 * tp / denom } else { 0.0 };
        if support > 0.0 {
            recalls.push(tp / support);
        }
    }
    let macro_f1 = f1s.iter().sum::<f64>() / n_classes as f64;
    let acc = predictions
        .iter()
        .zip(truths)
        .filter(|(p, t)| p == t)
        .count() as f64
        / predictions.len() as f64;
    let bacc = recalls.iter().sum::<f64>() / recalls.len() as f64;
    (
        f1s.iter().map(|v| v * 100.0).collect(),
        macro_f1 * 100.0,
        acc * 100.0,
        bacc * 100.0,
    )
}

pub fn random_bundle(rng: &mut ChaCha8Rng, tokens: usize, d: usize) -> TokenBundle {
    let cls: Vec<f64> = (0..d).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let seq = Tensor::from_vec(
        tokens,
        d,
        (0..tokens * d).map(|_| rng.gen_range(-1.0..1.0)).collect(),
    )
    .unwrap();
    TokenBundle::new(cls, seq).unwrap()
}

pub fn random_batch(rng: &mut ChaCha8Rng, n: usize, l: usize, k: usize, d: usize) -> AlignmentBatch {
    AlignmentBatch {
        image_view1: (0..n).map(|_| random_bundle(rng, k, d)).collect(),
        image_view2: (0..n).map(|_| random_bundle(rng, k, d)).collect(),
        text: (0..n).map(|_| random_bundle(rng, l, d)).collect(),
    }
}
