//! Vectorized losses against the scalar-loop oracles, plus the frozen
//! expected values computed from those oracles.

mod common;

use common::*;
use metalign_core::gradcheck::random_soft_matrix;
use metalign_core::losses::{
    attention_pool, combined_alignment_loss, global_semantic_loss, image_consistency_loss,
    local_semantic_loss, local_semantic_loss_direct, soft_semantic_loss,
    supervised_contrastive_loss, AlignmentBatch, LossWeights,
};
use metalign_core::numerics::{seeded_rng, SimilarityConfig};
use metalign_core::soft_targets::SoftTargetMatrix;
use metalign_core::Tensor;
use rand::Rng;

const ORACLE_TOL: f64 = 1e-10;

#[test]
fn oracle_equivalence_over_100_seeds() {
    for seed in 0..100u64 {
        let mut rng = seeded_rng(seed);
        let n = rng.gen_range(1..=4);
        let l = rng.gen_range(1..=4);
        let k = rng.gen_range(1..=5);
        let d = rng.gen_range(2..=8);
        let batch = random_batch(&mut rng, n, l, k, d);
        let tau = rng.gen_range(0.07..1.0);
        let cfg = SimilarityConfig::new(tau).unwrap();
        let soft = random_soft_matrix(&mut rng, n);

        let pairs = [
            (
                image_consistency_loss(&batch, &cfg).unwrap(),
                oracle_image_consistency(&batch, tau),
                "image",
            ),
            (
                global_semantic_loss(&batch, &cfg).unwrap(),
                oracle_global_semantic(&batch, tau),
                "global",
            ),
            (
                local_semantic_loss(&batch, &cfg).unwrap(),
                oracle_local_semantic(&batch, tau),
                "local",
            ),
            (
                local_semantic_loss_direct(&batch, &cfg).unwrap(),
                oracle_local_semantic_direct(&batch, tau),
                "local_direct",
            ),
            (
                soft_semantic_loss(&batch, &soft, &cfg).unwrap(),
                oracle_soft_semantic(&batch, &soft, tau),
                "soft",
            ),
        ];
        for (got, want, name) in pairs {
            assert!(
                (got - want).abs() < ORACLE_TOL,
                "seed {seed} {name}: impl {got} vs oracle {want}"
            );
        }
    }
}

#[test]
fn image_loss_two_identical_patients_is_log_three() {
    // all cls tokens identical: denominator has 2N-1 = 3 equal terms
    let batch = {
        let mut rng = seeded_rng(3);
        let mut b = random_batch(&mut rng, 2, 2, 3, 4);
        let cls = vec![0.25, -0.5, 0.75, 0.1];
        for bundle in b.image_view1.iter_mut().chain(b.image_view2.iter_mut()) {
            bundle.cls = cls.clone();
        }
        b
    };
    let cfg = SimilarityConfig::default();
    let v = image_consistency_loss(&batch, &cfg).unwrap();
    assert!((v - 3.0f64.ln()).abs() < 1e-9, "{v}");
    assert!((v - oracle_image_consistency(&batch, cfg.tau)).abs() < ORACLE_TOL);
}

#[test]
fn global_loss_two_identical_patients_is_log_two() {
    let mut rng = seeded_rng(5);
    let mut batch = random_batch(&mut rng, 2, 2, 3, 4);
    let cls = vec![0.3, 0.3, -0.9, 0.2];
    for bundle in batch
        .image_view1
        .iter_mut()
        .chain(batch.image_view2.iter_mut())
        .chain(batch.text.iter_mut())
    {
        bundle.cls = cls.clone();
    }
    let cfg = SimilarityConfig::default();
    let v = global_semantic_loss(&batch, &cfg).unwrap();
    assert!((v - 2.0f64.ln()).abs() < 1e-9, "{v}");
}

#[test]
fn local_loss_identical_tokens_is_log_l_for_l4() {
    // all text tokens identical and all patches identical => log L
    let d = 4;
    let l = 4;
    let text_row = [0.4, -0.2, 0.8, 0.05];
    let patch_row = [-0.3, 0.9, 0.1, 0.6];
    let text = Tensor::from_vec(l, d, text_row.repeat(l)).unwrap();
    let patches = Tensor::from_vec(5, d, patch_row.repeat(5)).unwrap();
    let mk = |seq: &Tensor| {
        metalign_core::losses::TokenBundle::new(vec![0.1, 0.2, 0.3, 0.4], seq.clone()).unwrap()
    };
    let batch = AlignmentBatch {
        image_view1: vec![mk(&patches), mk(&patches)],
        image_view2: vec![mk(&patches), mk(&patches)],
        text: vec![mk(&text), mk(&text)],
    };
    let cfg = SimilarityConfig::default();
    let v = local_semantic_loss(&batch, &cfg).unwrap();
    assert!((v - 4.0f64.ln()).abs() < 1e-9, "{v} vs {}", 4.0f64.ln());
    assert!((v - oracle_local_semantic(&batch, cfg.tau)).abs() < ORACLE_TOL);
}

#[test]
fn attention_pool_matches_oracle_on_random_instance() {
    let mut rng = seeded_rng(13);
    let text = Tensor::from_vec(3, 6, (0..18).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap();
    let patches =
        Tensor::from_vec(5, 6, (0..30).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap();
    let (pooled, attn) = attention_pool(&text, &patches).unwrap();
    let reference = oracle_attention_pool(&text, &patches);
    for r in 0..3 {
        let row_sum: f64 = attn.weights.row(r).iter().sum();
        assert!((row_sum - 1.0).abs() < 1e-6);
        for c in 0..6 {
            assert!((pooled.get(r, c) - reference.get(r, c)).abs() < 1e-12);
        }
    }
}

#[test]
fn supervised_contrastive_matches_oracle_on_grouped_labels() {
    let mut rng = seeded_rng(17);
    let batch = random_batch(&mut rng, 4, 2, 3, 5);
    let labels = [0usize, 0, 1, 1];
    let cfg = SimilarityConfig::default();
    let got = supervised_contrastive_loss(&batch, &labels, &cfg).unwrap();
    let soft = SoftTargetMatrix::from_labels(&labels).unwrap();
    let want = oracle_soft_semantic(&batch, &soft, cfg.tau);
    assert!((got - want).abs() < ORACLE_TOL, "{got} vs {want}");
}

#[test]
fn batch_permutation_invariance() {
    let mut rng = seeded_rng(23);
    for _ in 0..10 {
        let n = 4;
        let batch = random_batch(&mut rng, n, 3, 4, 5);
        let perm = [2usize, 0, 3, 1];
        let permute = |bundles: &[metalign_core::losses::TokenBundle]| {
            perm.iter().map(|&i| bundles[i].clone()).collect()
        };
        let permuted = AlignmentBatch {
            image_view1: permute(&batch.image_view1),
            image_view2: permute(&batch.image_view2),
            text: permute(&batch.text),
        };
        let weights = LossWeights::default();
        let soft = random_soft_matrix(&mut rng, n);
        let mut soft_perm = Tensor::zeros(n, n);
        for i in 0..n {
            for j in 0..n {
                soft_perm.set(i, j, soft.get(perm[i], perm[j]));
            }
        }
        let soft_perm = SoftTargetMatrix::new(soft_perm).unwrap();
        let (t1, p1) = combined_alignment_loss(&batch, &soft, &weights).unwrap();
        let (t2, p2) = combined_alignment_loss(&permuted, &soft_perm, &weights).unwrap();
        assert!((t1 - t2).abs() < 1e-9);
        assert!((p1.image - p2.image).abs() < 1e-9);
        assert!((p1.global - p2.global).abs() < 1e-9);
        assert!((p1.local - p2.local).abs() < 1e-9);
        assert!((p1.soft - p2.soft).abs() < 1e-9);
    }
}

#[test]
fn variable_token_counts_supported() {
    // patients with different text lengths share one batch
    let mut rng = seeded_rng(29);
    let d = 5;
    let batch = AlignmentBatch {
        image_view1: vec![random_bundle(&mut rng, 4, d), random_bundle(&mut rng, 4, d)],
        image_view2: vec![random_bundle(&mut rng, 4, d), random_bundle(&mut rng, 4, d)],
        text: vec![random_bundle(&mut rng, 2, d), random_bundle(&mut rng, 5, d)],
    };
    let cfg = SimilarityConfig::default();
    let got = local_semantic_loss(&batch, &cfg).unwrap();
    let want = oracle_local_semantic(&batch, cfg.tau);
    assert!((got - want).abs() < ORACLE_TOL);
}
