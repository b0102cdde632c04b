//! Statistical checks on the synthetic cohort generator: attribute-label
//! mutual information tracks the correlation knob, and image signal strength
//! controls what a linear probe can recover.

use std::collections::BTreeMap;

use metalign_core::data::{generate_synthetic_cohort, DatasetManifest, SyntheticSpec};
use metalign_core::graph::Graph;
use metalign_core::Tensor;

fn spec(correlation: f64, image_signal: f64, patients: usize) -> SyntheticSpec {
    SyntheticSpec {
        patients,
        classes: 3,
        correlation,
        image_signal,
        seed: 1234,
        scans_min: 1,
        scans_max: 1,
        channels: 3,
        height: 16,
        width: 16,
        class_weights: Vec::new(),
    }
}

/// Plug-in mutual information (nats) between one attribute and the label.
fn mutual_information(manifest: &DatasetManifest, attribute: &str) -> f64 {
    let n = manifest.len() as f64;
    let mut joint: BTreeMap<(String, String), f64> = BTreeMap::new();
    let mut attr_marginal: BTreeMap<String, f64> = BTreeMap::new();
    let mut label_marginal: BTreeMap<String, f64> = BTreeMap::new();
    for record in &manifest.records {
        let a = record.metadata[attribute].clone();
        let l = record.label.clone();
        *joint.entry((a.clone(), l.clone())).or_insert(0.0) += 1.0 / n;
        *attr_marginal.entry(a).or_insert(0.0) += 1.0 / n;
        *label_marginal.entry(l).or_insert(0.0) += 1.0 / n;
    }
    joint
        .iter()
        .map(|((a, l), &p)| p * (p / (attr_marginal[a] * label_marginal[l])).ln())
        .sum()
}

#[test]
fn zero_correlation_means_no_attribute_information() {
    let manifest = generate_synthetic_cohort(&spec(0.0, 0.5, 2000)).unwrap();
    for attr in ["risk_primary", "exposure", "site", "texture", "age_group"] {
        let mi = mutual_information(&manifest, attr);
        // plug-in MI bias at this sample size is well under 0.01 nats
        assert!(mi < 0.02, "attribute '{attr}' has MI {mi}");
    }
}

#[test]
fn high_correlation_concentrates_information_in_risk_attribute() {
    let manifest = generate_synthetic_cohort(&spec(0.9, 0.5, 2000)).unwrap();
    let mi = mutual_information(&manifest, "risk_primary");
    assert!(mi > 0.4, "risk_primary MI {mi} too low at correlation 0.9");
    let noise_mi = mutual_information(&manifest, "age_group");
    assert!(noise_mi < 0.02, "age_group must stay uninformative, MI {noise_mi}");
}

/// Multinomial logistic regression on flattened pixels, full-batch gradient
/// descent. Independent of the encoder stack.
fn probe_accuracy(manifest: &DatasetManifest, train: usize, test: usize) -> f64 {
    let n_classes = manifest.classes.len();
    let dim = {
        let img = &manifest.records[0].scans[0].image;
        img.channels * img.height * img.width
    };
    let features = |idx: std::ops::Range<usize>| -> (Tensor, Vec<usize>) {
        let rows = idx.len();
        let mut x = Tensor::zeros(rows, dim);
        let mut y = Vec::with_capacity(rows);
        for (r, i) in idx.enumerate() {
            let record = &manifest.records[i];
            x.row_mut(r).copy_from_slice(&record.scans[0].image.data);
            y.push(manifest.class_index(&record.label).unwrap());
        }
        (x, y)
    };
    let (x_train, y_train) = features(0..train);
    let (x_test, y_test) = features(train..train + test);

    let mut weights = Tensor::zeros(n_classes, dim);
    let mut bias = Tensor::zeros(1, n_classes);
    let lr = 0.05;
    for _ in 0..150 {
        let mut g = Graph::new();
        let w = g.leaf(weights.clone(), true);
        let b = g.leaf(bias.clone(), true);
        let x = g.constant(x_train.clone());
        let logits = g.matmul_nt(x, w).unwrap();
        let logits = g.add_row_broadcast(logits, b).unwrap();
        let logp = g.log_softmax_rows(logits);
        let mut picks = Tensor::zeros(train, n_classes);
        for (r, &label) in y_train.iter().enumerate() {
            picks.set(r, label, -1.0 / train as f64);
        }
        let loss = g.weighted_sum(logp, picks).unwrap();
        let grads = g.backward(loss).unwrap();
        let gw = grads[w.index()].as_ref().unwrap();
        let gb = grads[b.index()].as_ref().unwrap();
        for (wv, gv) in weights.data_mut().iter_mut().zip(gw.data()) {
            *wv -= lr * gv;
        }
        for (bv, gv) in bias.data_mut().iter_mut().zip(gb.data()) {
            *bv -= lr * gv;
        }
    }

    let logits = x_test
        .matmul_nt(&weights)
        .unwrap();
    let mut correct = 0usize;
    for (r, &truth) in y_test.iter().enumerate() {
        let row: Vec<f64> = logits
            .row(r)
            .iter()
            .zip(bias.row(0))
            .map(|(l, b)| l + b)
            .collect();
        let pred = row
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
            .unwrap()
            .0;
        if pred == truth {
            correct += 1;
        }
    }
    100.0 * correct as f64 / test as f64
}

#[test]
fn zero_signal_images_score_chance_level() {
    let manifest = generate_synthetic_cohort(&spec(0.5, 0.0, 2000)).unwrap();
    let acc = probe_accuracy(&manifest, 1500, 500);
    let chance = 100.0 / 3.0;
    assert!(
        (acc - chance).abs() <= 5.0,
        "probe accuracy {acc} should be within 5 points of chance {chance}"
    );
}

#[test]
fn strong_signal_images_are_separable() {
    let manifest = generate_synthetic_cohort(&spec(0.5, 0.5, 2000)).unwrap();
    let acc = probe_accuracy(&manifest, 1500, 500);
    assert!(
        acc > 100.0 / 3.0 + 15.0,
        "probe accuracy {acc} too low; the image signal must be learnable"
    );
}
