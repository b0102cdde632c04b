//! Central finite-difference verification of the analytic loss gradients.
//!
//! For random small batches, every scalar entry of every input token is
//! perturbed by `+-h` and the resulting slope is compared with the gradient
//! produced by the reverse pass. Lives in library code (not test code) so the
//! CLI can expose it as a runnable check.

use alloc::string::String;
use alloc::vec::Vec;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::losses::{loss_gradients, loss_value, AlignmentBatch, LossKind, TokenBundle};
use crate::numerics::{seeded_rng, softmax, SimilarityConfig};
use crate::soft_targets::SoftTargetMatrix;
use crate::tensor::Tensor;

/// Upper bounds on the randomly drawn instance sizes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct GradCheckSizes {
    pub n: usize,
    pub l: usize,
    pub k: usize,
    pub d: usize,
}

impl Default for GradCheckSizes {
    fn default() -> Self {
        GradCheckSizes {
            n: 4,
            l: 4,
            k: 5,
            d: 8,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GradCheckConfig {
    pub seed: u64,
    pub instances: usize,
    pub sizes: GradCheckSizes,
    /// Central-difference step.
    pub step: f64,
    /// Maximum tolerated relative error.
    pub tolerance: f64,
    pub tau: f64,
    /// Test hook: corrupt the analytic gradient so the check must fail.
    #[serde(default)]
    pub corrupt: bool,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        GradCheckConfig {
            seed: 0,
            instances: 20,
            sizes: GradCheckSizes::default(),
            step: 1e-5,
            tolerance: 1e-4,
            tau: 0.07,
            corrupt: false,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LossCheckReport {
    pub loss: String,
    pub instances: usize,
    pub checked_entries: usize,
    pub max_rel_error: f64,
    pub passed: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GradCheckReport {
    pub config: GradCheckConfig,
    pub losses: Vec<LossCheckReport>,
    pub passed: bool,
}

fn random_bundle(rng: &mut ChaCha8Rng, tokens: usize, d: usize) -> TokenBundle {
    let cls: Vec<f64> = (0..d).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let seq = Tensor::from_vec(
        tokens,
        d,
        (0..tokens * d).map(|_| rng.gen_range(-1.0..1.0)).collect(),
    )
    .expect("sized data");
    TokenBundle::new(cls, seq).expect("valid bundle")
}

/// Random batch with sizes drawn in `1..=max` per dimension.
pub fn random_instance(
    rng: &mut ChaCha8Rng,
    sizes: &GradCheckSizes,
) -> (AlignmentBatch, SoftTargetMatrix) {
    let n = rng.gen_range(1..=sizes.n);
    let l = rng.gen_range(1..=sizes.l);
    let k = rng.gen_range(1..=sizes.k);
    let d = rng.gen_range(2..=sizes.d.max(2));
    let batch = AlignmentBatch {
        image_view1: (0..n).map(|_| random_bundle(rng, k, d)).collect(),
        image_view2: (0..n).map(|_| random_bundle(rng, k, d)).collect(),
        text: (0..n).map(|_| random_bundle(rng, l, d)).collect(),
    };
    let soft = random_soft_matrix(rng, n);
    (batch, soft)
}

/// Random row-stochastic matrix via softmax of random logits.
pub fn random_soft_matrix(rng: &mut ChaCha8Rng, n: usize) -> SoftTargetMatrix {
    let mut m = Tensor::zeros(n, n);
    for r in 0..n {
        let logits: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
        m.row_mut(r)
            .copy_from_slice(&softmax(&logits).expect("nonempty"));
    }
    SoftTargetMatrix::new(m).expect("row-stochastic by construction")
}

/// Slots of an alignment batch addressable for perturbation.
#[derive(Clone, Copy)]
enum Side {
    View1,
    View2,
    Text,
}

fn bundle_mut(batch: &mut AlignmentBatch, side: Side, i: usize) -> &mut TokenBundle {
    match side {
        Side::View1 => &mut batch.image_view1[i],
        Side::View2 => &mut batch.image_view2[i],
        Side::Text => &mut batch.text[i],
    }
}

fn perturbed(
    batch: &AlignmentBatch,
    side: Side,
    i: usize,
    entry: usize,
    is_cls: bool,
    delta: f64,
) -> AlignmentBatch {
    let mut out = batch.clone();
    let b = bundle_mut(&mut out, side, i);
    if is_cls {
        b.cls[entry] += delta;
    } else {
        b.seq.data_mut()[entry] += delta;
    }
    out
}

/// Checks one loss on one instance; returns (max relative error, entries).
pub fn check_instance(
    kind: LossKind,
    batch: &AlignmentBatch,
    soft: Option<&SoftTargetMatrix>,
    cfg: &SimilarityConfig,
    step: f64,
    corrupt: bool,
) -> Result<(f64, usize)> {
    let (_, grads) = loss_gradients(kind, batch, soft, cfg)?;
    let mut max_rel = 0.0f64;
    let mut entries = 0usize;
    let n = batch.len();
    let mut first = corrupt;
    for (side, side_grads) in [
        (Side::View1, &grads.view1),
        (Side::View2, &grads.view2),
        (Side::Text, &grads.text),
    ] {
        for i in 0..n {
            for is_cls in [true, false] {
                let grad_tensor = if is_cls {
                    &side_grads[i].cls
                } else {
                    &side_grads[i].seq
                };
                for entry in 0..grad_tensor.len() {
                    let mut analytic = grad_tensor.data()[entry];
                    if first {
                        // deliberate corruption for the negative control
                        analytic = analytic * 1.5 + 1.0;
                        first = false;
                    }
                    let plus = perturbed(batch, side, i, entry, is_cls, step);
                    let minus = perturbed(batch, side, i, entry, is_cls, -step);
                    let fp = loss_value(kind, &plus, soft, cfg)?;
                    let fm = loss_value(kind, &minus, soft, cfg)?;
                    let numeric = (fp - fm) / (2.0 * step);
                    let denom = crate::math::abs(analytic)
                        .max(crate::math::abs(numeric))
                        .max(1e-6);
                    let rel = crate::math::abs(analytic - numeric) / denom;
                    if rel > max_rel {
                        max_rel = rel;
                    }
                    entries += 1;
                }
            }
        }
    }
    Ok((max_rel, entries))
}

/// Runs the full harness over all five losses.
pub fn run_gradcheck(config: &GradCheckConfig) -> Result<GradCheckReport> {
    let cfg = SimilarityConfig::new(config.tau)?;
    let mut losses = Vec::new();
    for kind in LossKind::ALL {
        let mut rng = seeded_rng(config.seed);
        let mut max_rel = 0.0f64;
        let mut entries = 0usize;
        for _ in 0..config.instances {
            let (batch, soft) = random_instance(&mut rng, &config.sizes);
            let soft_ref = matches!(kind, LossKind::SoftSemantic).then_some(&soft);
            let (rel, count) =
                check_instance(kind, &batch, soft_ref, &cfg, config.step, config.corrupt)?;
            if rel > max_rel {
                max_rel = rel;
            }
            entries += count;
        }
        losses.push(LossCheckReport {
            loss: String::from(kind.name()),
            instances: config.instances,
            checked_entries: entries,
            max_rel_error: max_rel,
            passed: max_rel < config.tolerance,
        });
    }
    let passed = losses.iter().all(|l| l.passed);
    Ok(GradCheckReport {
        config: *config,
        losses,
        passed,
    })
}
