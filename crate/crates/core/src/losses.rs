//! The four multi-granular alignment objectives and their combination.
//!
//! * image consistency: anchors the first view's class token against the
//!   second view plus all other first-view tokens in the batch,
//! * global semantic: symmetric cross-entropy between image and text class
//!   tokens over both views,
//! * local semantic: attention-pooled visual words contrasted against text
//!   tokens in both directions,
//! * soft semantic: soft cross-entropy weighted by the metadata target
//!   matrix.
//!
//! Each loss has a graph builder (differentiable, used for training and
//! gradient verification) and a thin value wrapper. Similarities inside the
//! contrast terms use the temperature-scaled cosine; the attention logits of
//! the local loss use the raw dot product scaled by `1/sqrt(d)`.

use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::graph::{Graph, NodeId};
use crate::math;
use crate::numerics::SimilarityConfig;
use crate::soft_targets::SoftTargetMatrix;
use crate::tensor::Tensor;
use crate::{domain_err, shape_err};

/// Encoder output for one item: a class token plus local tokens, all in the
/// shared latent space.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TokenBundle {
    pub cls: Vec<f64>,
    /// Local tokens, one row per token.
    pub seq: Tensor,
}

impl TokenBundle {
    pub fn new(cls: Vec<f64>, seq: Tensor) -> Result<Self> {
        if cls.is_empty() {
            return Err(shape_err!("class token must be nonempty"));
        }
        if seq.rows() == 0 || seq.cols() != cls.len() {
            return Err(shape_err!(
                "local tokens must be (tokens >= 1) x {} , got {}x{}",
                cls.len(),
                seq.rows(),
                seq.cols()
            ));
        }
        Ok(TokenBundle { cls, seq })
    }

    pub fn dim(&self) -> usize {
        self.cls.len()
    }

    pub fn token_count(&self) -> usize {
        self.seq.rows()
    }

    pub fn is_finite(&self) -> bool {
        self.cls.iter().all(|v| v.is_finite()) && self.seq.is_finite()
    }
}

/// One alignment batch: two image views and the text bundle per patient.
#[derive(Debug, Clone, PartialEq)]
pub struct AlignmentBatch {
    pub image_view1: Vec<TokenBundle>,
    pub image_view2: Vec<TokenBundle>,
    pub text: Vec<TokenBundle>,
}

impl AlignmentBatch {
    pub fn len(&self) -> usize {
        self.text.len()
    }

    pub fn is_empty(&self) -> bool {
        self.text.is_empty()
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.text.len();
        if n == 0 {
            return Err(shape_err!("alignment batch is empty"));
        }
        if self.image_view1.len() != n || self.image_view2.len() != n {
            return Err(shape_err!(
                "batch arrays disagree: views {}/{} vs text {}",
                self.image_view1.len(),
                self.image_view2.len(),
                n
            ));
        }
        let d = self.text[0].dim();
        for bundle in self
            .image_view1
            .iter()
            .chain(&self.image_view2)
            .chain(&self.text)
        {
            if bundle.dim() != d {
                return Err(shape_err!(
                    "latent dimension mismatch: {} vs {d}",
                    bundle.dim()
                ));
            }
            if !bundle.is_finite() {
                return Err(domain_err!("batch contains non-finite entries"));
            }
        }
        // both views of one patient must agree on patch count
        for i in 0..n {
            if self.image_view1[i].token_count() != self.image_view2[i].token_count() {
                return Err(shape_err!("patient {i}: views disagree on patch count"));
            }
        }
        Ok(())
    }
}

/// Weights and temperatures of the combined objective.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub beta1: f64,
    pub beta2: f64,
    pub beta3: f64,
    pub beta4: f64,
    pub tau: f64,
    pub tau_label: f64,
}

impl Default for LossWeights {
    /// Reported coefficients with the standard contrastive temperature and
    /// the mid-range sharpening temperature.
    fn default() -> Self {
        LossWeights {
            beta1: 0.2,
            beta2: 0.3,
            beta3: 0.2,
            beta4: 0.3,
            tau: 0.07,
            tau_label: 0.5,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for (name, b) in [
            ("beta1", self.beta1),
            ("beta2", self.beta2),
            ("beta3", self.beta3),
            ("beta4", self.beta4),
        ] {
            if !(b >= 0.0) || !b.is_finite() {
                return Err(domain_err!("{name} must be nonnegative, got {b}"));
            }
        }
        if !(self.tau > 0.0) || !(self.tau_label > 0.0) {
            return Err(domain_err!(
                "temperatures must be positive (tau {}, tau_label {})",
                self.tau,
                self.tau_label
            ));
        }
        Ok(())
    }

    pub fn similarity(&self) -> SimilarityConfig {
        SimilarityConfig { tau: self.tau }
    }
}

/// Row-stochastic relevance scores of text tokens over image patches.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionMap {
    pub weights: Tensor,
}

/// Graph handles for one bound token bundle.
#[derive(Debug, Clone, Copy)]
pub struct BundleNodes {
    pub cls: NodeId,
    pub seq: NodeId,
}

/// Graph handles for a bound alignment batch.
#[derive(Debug, Clone)]
pub struct BatchNodes {
    pub view1: Vec<BundleNodes>,
    pub view2: Vec<BundleNodes>,
    pub text: Vec<BundleNodes>,
}

/// Inserts every bundle of the batch as graph leaves.
pub fn bind_batch(g: &mut Graph, batch: &AlignmentBatch, requires_grad: bool) -> BatchNodes {
    let bind = |g: &mut Graph, bundles: &[TokenBundle]| -> Vec<BundleNodes> {
        bundles
            .iter()
            .map(|b| BundleNodes {
                cls: g.leaf(Tensor::row_vector(&b.cls), requires_grad),
                seq: g.leaf(b.seq.clone(), requires_grad),
            })
            .collect()
    };
    BatchNodes {
        view1: bind(g, &batch.image_view1),
        view2: bind(g, &batch.image_view2),
        text: bind(g, &batch.text),
    }
}

/// Stacks the class tokens of a bundle list into an `[N, d]` node.
fn stack_cls(g: &mut Graph, bundles: &[BundleNodes]) -> Result<NodeId> {
    let ids: Vec<NodeId> = bundles.iter().map(|b| b.cls).collect();
    g.concat_rows(&ids)
}

/// Normalized cosine-similarity logits `[rows(a), rows(b)]` scaled by 1/tau.
fn cosine_logits(g: &mut Graph, a: NodeId, b: NodeId, tau: f64) -> Result<NodeId> {
    let an = g.l2_normalize_rows(a)?;
    let bn = g.l2_normalize_rows(b)?;
    let s = g.matmul_nt(an, bn)?;
    Ok(g.scale(s, 1.0 / tau))
}

/// Image consistency objective over the batch's two views.
///
/// For each anchor `p[i,1]`, the positive is `p[i,2]` and the negatives are
/// every `p[k,2]` plus every `p[k,1]` with `k != i`; the mean negative
/// log-probability is returned.
pub fn image_consistency_loss_graph(
    g: &mut Graph,
    nodes: &BatchNodes,
    cfg: &SimilarityConfig,
) -> Result<NodeId> {
    let n = nodes.view1.len();
    let p1 = stack_cls(g, &nodes.view1)?;
    let p2 = stack_cls(g, &nodes.view2)?;
    let p1n = g.l2_normalize_rows(p1)?;
    let p2n = g.l2_normalize_rows(p2)?;
    let s12 = g.matmul_nt(p1n, p2n)?;
    let s12 = g.scale(s12, 1.0 / cfg.tau);
    let s11 = g.matmul_nt(p1n, p1n)?;
    let s11 = g.scale(s11, 1.0 / cfg.tau);
    let logits = g.concat_cols(s12, s11)?;

    // second block excludes the self term (the k != i indicator)
    let mut mask = Tensor::full(n, 2 * n, 1.0);
    for i in 0..n {
        mask.set(i, n + i, 0.0);
    }
    let logp = g.log_softmax_rows_masked(logits, mask)?;

    let mut picks = Tensor::zeros(n, 2 * n);
    for i in 0..n {
        picks.set(i, i, 1.0 / n as f64);
    }
    let mean_logp = g.weighted_sum(logp, picks)?;
    Ok(g.scale(mean_logp, -1.0))
}

/// Global semantic objective: symmetric cross-entropy between image and text
/// class tokens, both views, scaled by `1/(4N)`.
pub fn global_semantic_loss_graph(
    g: &mut Graph,
    nodes: &BatchNodes,
    cfg: &SimilarityConfig,
) -> Result<NodeId> {
    let n = nodes.text.len();
    let q = stack_cls(g, &nodes.text)?;
    let mut acc: Option<NodeId> = None;
    for view in [&nodes.view1, &nodes.view2] {
        let p = stack_cls(g, view)?;
        let img_to_text = cosine_logits(g, p, q, cfg.tau)?;
        let text_to_img = cosine_logits(g, q, p, cfg.tau)?;
        for logits in [img_to_text, text_to_img] {
            let logp = g.log_softmax_rows(logits);
            let diag = g.weighted_sum(logp, Tensor::eye(n))?;
            acc = Some(match acc {
                Some(prev) => g.add(prev, diag)?,
                None => diag,
            });
        }
    }
    Ok(g.scale(acc.expect("two views always present"), -1.0 / (4.0 * n as f64)))
}

/// Attention pooling: text tokens attend over image patches with raw
/// dot-product logits scaled by `1/sqrt(d)`; returns the pooled visual words.
pub fn attention_pool_graph(
    g: &mut Graph,
    text_seq: NodeId,
    image_seq: NodeId,
) -> Result<(NodeId, NodeId)> {
    let d = g.value(text_seq).cols();
    if g.value(image_seq).cols() != d {
        return Err(shape_err!(
            "attention_pool: dim mismatch {} vs {}",
            d,
            g.value(image_seq).cols()
        ));
    }
    let logits = g.matmul_nt(text_seq, image_seq)?;
    let logits = g.scale(logits, 1.0 / math::sqrt(d as f64));
    let attn = g.softmax_rows(logits);
    let pooled = g.matmul(attn, image_seq)?;
    Ok((pooled, attn))
}

/// Value-level attention pooling; also returns the row-stochastic map.
pub fn attention_pool(text_seq: &Tensor, image_seq: &Tensor) -> Result<(Tensor, AttentionMap)> {
    let mut g = Graph::new();
    let q = g.constant(text_seq.clone());
    let p = g.constant(image_seq.clone());
    let (pooled, attn) = attention_pool_graph(&mut g, q, p)?;
    Ok((
        g.value(pooled).clone(),
        AttentionMap {
            weights: g.value(attn).clone(),
        },
    ))
}

enum LocalPooling {
    Attention,
    MeanPatch,
}

fn local_loss_graph(
    g: &mut Graph,
    nodes: &BatchNodes,
    cfg: &SimilarityConfig,
    pooling: LocalPooling,
) -> Result<NodeId> {
    let n = nodes.text.len();
    let mut acc: Option<NodeId> = None;
    for i in 0..n {
        let text_seq = nodes.text[i].seq;
        let token_count = g.value(text_seq).rows();
        for view in [&nodes.view1, &nodes.view2] {
            let image_seq = view[i].seq;
            let pooled = match pooling {
                LocalPooling::Attention => attention_pool_graph(g, text_seq, image_seq)?.0,
                LocalPooling::MeanPatch => {
                    let mean = g.mean_rows(image_seq);
                    let ones = g.constant(Tensor::full(token_count, 1, 1.0));
                    g.matmul(ones, mean)?
                }
            };
            // text tokens against visual words, then visual words against
            // text tokens; both contrast over the other side's L candidates
            let t_to_v = cosine_logits(g, text_seq, pooled, cfg.tau)?;
            let v_to_t = cosine_logits(g, pooled, text_seq, cfg.tau)?;
            let weight = 1.0 / (4.0 * token_count as f64 * n as f64);
            for logits in [t_to_v, v_to_t] {
                let logp = g.log_softmax_rows(logits);
                let diag = g.weighted_sum(logp, Tensor::eye(token_count).scaled(weight))?;
                acc = Some(match acc {
                    Some(prev) => g.add(prev, diag)?,
                    None => diag,
                });
            }
        }
    }
    Ok(g.scale(acc.expect("n >= 1 after validation"), -1.0))
}

/// Local semantic objective with attention pooling (per-patient token counts
/// may differ; each patient is normalized by its own token count).
pub fn local_semantic_loss_graph(
    g: &mut Graph,
    nodes: &BatchNodes,
    cfg: &SimilarityConfig,
) -> Result<NodeId> {
    local_loss_graph(g, nodes, cfg, LocalPooling::Attention)
}

/// Ablation variant of the local loss: visual words are the plain mean over
/// patches, identical for every text token.
pub fn local_semantic_loss_direct_graph(
    g: &mut Graph,
    nodes: &BatchNodes,
    cfg: &SimilarityConfig,
) -> Result<NodeId> {
    local_loss_graph(g, nodes, cfg, LocalPooling::MeanPatch)
}

/// Soft semantic objective: metadata-weighted symmetric cross-entropy over
/// both views, scaled by `1/(4 N^2)`.
pub fn soft_semantic_loss_graph(
    g: &mut Graph,
    nodes: &BatchNodes,
    soft: &SoftTargetMatrix,
    cfg: &SimilarityConfig,
) -> Result<NodeId> {
    let n = nodes.text.len();
    if soft.n() != n {
        return Err(shape_err!(
            "soft target matrix is {}x{} but batch has {n} patients",
            soft.n(),
            soft.n()
        ));
    }
    let q = stack_cls(g, &nodes.text)?;
    let scale = 1.0 / (4.0 * (n * n) as f64);
    let weights_img = soft.values().scaled(scale);
    let weights_txt = soft.values().transpose().scaled(scale);
    let mut acc: Option<NodeId> = None;
    for view in [&nodes.view1, &nodes.view2] {
        let p = stack_cls(g, view)?;
        // image (row i) scored against every text (col j), weighted s[i][j]
        let img_logits = cosine_logits(g, p, q, cfg.tau)?;
        let img_logp = g.log_softmax_rows(img_logits);
        let img_term = g.weighted_sum(img_logp, weights_img.clone())?;
        // text (row j) scored against every image at this view, weighted s[i][j]
        let txt_logits = cosine_logits(g, q, p, cfg.tau)?;
        let txt_logp = g.log_softmax_rows(txt_logits);
        let txt_term = g.weighted_sum(txt_logp, weights_txt.clone())?;
        let pair = g.add(img_term, txt_term)?;
        acc = Some(match acc {
            Some(prev) => g.add(prev, pair)?,
            None => pair,
        });
    }
    Ok(g.scale(acc.expect("two views always present"), -1.0))
}

/// Per-part handles of the combined objective.
#[derive(Debug, Clone, Copy)]
pub struct CombinedNodes {
    pub total: NodeId,
    pub image: NodeId,
    pub global: NodeId,
    pub local: NodeId,
    pub soft: NodeId,
}

/// Named part values of the combined objective.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossParts {
    pub image: f64,
    pub global: f64,
    pub local: f64,
    pub soft: f64,
}

impl LossParts {
    pub fn weighted_total(&self, w: &LossWeights) -> f64 {
        w.beta1 * self.image + w.beta2 * self.global + w.beta3 * self.local + w.beta4 * self.soft
    }
}

/// Which pooling the third loss term uses (ablation switch).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum LocalVariant {
    Attention,
    DirectMean,
}

/// Builds all four objectives on one shared graph and returns the weighted
/// total plus the individual parts.
pub fn combined_alignment_loss_graph(
    g: &mut Graph,
    nodes: &BatchNodes,
    soft: &SoftTargetMatrix,
    weights: &LossWeights,
    local_variant: LocalVariant,
) -> Result<CombinedNodes> {
    weights.validate()?;
    let cfg = weights.similarity();
    let image = image_consistency_loss_graph(g, nodes, &cfg)?;
    let global = global_semantic_loss_graph(g, nodes, &cfg)?;
    let local = match local_variant {
        LocalVariant::Attention => local_semantic_loss_graph(g, nodes, &cfg)?,
        LocalVariant::DirectMean => local_semantic_loss_direct_graph(g, nodes, &cfg)?,
    };
    let soft_node = soft_semantic_loss_graph(g, nodes, soft, &cfg)?;
    let wi = g.scale(image, weights.beta1);
    let wg = g.scale(global, weights.beta2);
    let wl = g.scale(local, weights.beta3);
    let ws = g.scale(soft_node, weights.beta4);
    let s1 = g.add(wi, wg)?;
    let s2 = g.add(wl, ws)?;
    let total = g.add(s1, s2)?;
    Ok(CombinedNodes {
        total,
        image,
        global,
        local,
        soft: soft_node,
    })
}

fn eval_scalar(
    batch: &AlignmentBatch,
    build: impl FnOnce(&mut Graph, &BatchNodes) -> Result<NodeId>,
) -> Result<f64> {
    batch.validate()?;
    let mut g = Graph::new();
    let nodes = bind_batch(&mut g, batch, false);
    let out = build(&mut g, &nodes)?;
    Ok(g.scalar(out))
}

/// Value of the image consistency loss.
pub fn image_consistency_loss(batch: &AlignmentBatch, cfg: &SimilarityConfig) -> Result<f64> {
    eval_scalar(batch, |g, nodes| image_consistency_loss_graph(g, nodes, cfg))
}

/// Value of the global semantic loss.
pub fn global_semantic_loss(batch: &AlignmentBatch, cfg: &SimilarityConfig) -> Result<f64> {
    eval_scalar(batch, |g, nodes| global_semantic_loss_graph(g, nodes, cfg))
}

/// Value of the local semantic loss.
pub fn local_semantic_loss(batch: &AlignmentBatch, cfg: &SimilarityConfig) -> Result<f64> {
    eval_scalar(batch, |g, nodes| local_semantic_loss_graph(g, nodes, cfg))
}

/// Value of the attention-free local loss (ablation).
pub fn local_semantic_loss_direct(batch: &AlignmentBatch, cfg: &SimilarityConfig) -> Result<f64> {
    eval_scalar(batch, |g, nodes| {
        local_semantic_loss_direct_graph(g, nodes, cfg)
    })
}

/// Value of the soft semantic loss.
pub fn soft_semantic_loss(
    batch: &AlignmentBatch,
    soft: &SoftTargetMatrix,
    cfg: &SimilarityConfig,
) -> Result<f64> {
    eval_scalar(batch, |g, nodes| {
        soft_semantic_loss_graph(g, nodes, soft, cfg)
    })
}

/// Soft loss restricted to one-hot class labels (ablation).
pub fn supervised_contrastive_loss(
    batch: &AlignmentBatch,
    labels: &[usize],
    cfg: &SimilarityConfig,
) -> Result<f64> {
    if labels.len() != batch.len() {
        return Err(shape_err!(
            "label count {} does not match batch size {}",
            labels.len(),
            batch.len()
        ));
    }
    let soft = SoftTargetMatrix::from_labels(labels)?;
    soft_semantic_loss(batch, &soft, cfg)
}

/// Values of the weighted combination and its parts.
pub fn combined_alignment_loss(
    batch: &AlignmentBatch,
    soft: &SoftTargetMatrix,
    weights: &LossWeights,
) -> Result<(f64, LossParts)> {
    batch.validate()?;
    let mut g = Graph::new();
    let nodes = bind_batch(&mut g, batch, false);
    let combined =
        combined_alignment_loss_graph(&mut g, &nodes, soft, weights, LocalVariant::Attention)?;
    Ok((
        g.scalar(combined.total),
        LossParts {
            image: g.scalar(combined.image),
            global: g.scalar(combined.global),
            local: g.scalar(combined.local),
            soft: g.scalar(combined.soft),
        },
    ))
}

/// Gradients of one loss with respect to every input token.
#[derive(Debug, Clone)]
pub struct BundleGrad {
    pub cls: Tensor,
    pub seq: Tensor,
}

#[derive(Debug, Clone)]
pub struct BatchGrads {
    pub view1: Vec<BundleGrad>,
    pub view2: Vec<BundleGrad>,
    pub text: Vec<BundleGrad>,
}

/// Loss selector used by the gradient-check harness and the CLI.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum LossKind {
    ImageConsistency,
    GlobalSemantic,
    LocalSemantic,
    LocalSemanticDirect,
    SoftSemantic,
}

impl LossKind {
    pub const ALL: [LossKind; 5] = [
        LossKind::ImageConsistency,
        LossKind::GlobalSemantic,
        LossKind::LocalSemantic,
        LossKind::LocalSemanticDirect,
        LossKind::SoftSemantic,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            LossKind::ImageConsistency => "image_consistency",
            LossKind::GlobalSemantic => "global_semantic",
            LossKind::LocalSemantic => "local_semantic",
            LossKind::LocalSemanticDirect => "local_semantic_direct",
            LossKind::SoftSemantic => "soft_semantic",
        }
    }
}

fn build_kind(
    g: &mut Graph,
    nodes: &BatchNodes,
    kind: LossKind,
    soft: Option<&SoftTargetMatrix>,
    cfg: &SimilarityConfig,
) -> Result<NodeId> {
    match kind {
        LossKind::ImageConsistency => image_consistency_loss_graph(g, nodes, cfg),
        LossKind::GlobalSemantic => global_semantic_loss_graph(g, nodes, cfg),
        LossKind::LocalSemantic => local_semantic_loss_graph(g, nodes, cfg),
        LossKind::LocalSemanticDirect => local_semantic_loss_direct_graph(g, nodes, cfg),
        LossKind::SoftSemantic => {
            let soft = soft.ok_or_else(|| shape_err!("soft loss needs a target matrix"))?;
            soft_semantic_loss_graph(g, nodes, soft, cfg)
        }
    }
}

/// Evaluates one loss by kind.
pub fn loss_value(
    kind: LossKind,
    batch: &AlignmentBatch,
    soft: Option<&SoftTargetMatrix>,
    cfg: &SimilarityConfig,
) -> Result<f64> {
    batch.validate()?;
    let mut g = Graph::new();
    let nodes = bind_batch(&mut g, batch, false);
    let out = build_kind(&mut g, &nodes, kind, soft, cfg)?;
    Ok(g.scalar(out))
}

/// Evaluates one loss and its analytic gradient w.r.t. every input token.
pub fn loss_gradients(
    kind: LossKind,
    batch: &AlignmentBatch,
    soft: Option<&SoftTargetMatrix>,
    cfg: &SimilarityConfig,
) -> Result<(f64, BatchGrads)> {
    batch.validate()?;
    let mut g = Graph::new();
    let nodes = bind_batch(&mut g, batch, true);
    let out = build_kind(&mut g, &nodes, kind, soft, cfg)?;
    let value = g.scalar(out);
    let grads = g.backward(out)?;
    let collect = |side: &[BundleNodes]| -> Vec<BundleGrad> {
        side.iter()
            .map(|b| BundleGrad {
                cls: grads[b.cls.index()]
                    .clone()
                    .unwrap_or_else(|| Tensor::zeros(1, g.value(b.cls).cols())),
                seq: grads[b.seq.index()]
                    .clone()
                    .unwrap_or_else(|| Tensor::zeros(g.value(b.seq).rows(), g.value(b.seq).cols())),
            })
            .collect()
    };
    Ok((
        value,
        BatchGrads {
            view1: collect(&nodes.view1),
            view2: collect(&nodes.view2),
            text: collect(&nodes.text),
        },
    ))
}
