//! Three-stage training pipeline: masked-token knowledge injection, the
//! four-objective alignment with supervised refinement, and fused
//! vocabulary-restricted classification, per cross-validation fold.
//!
//! Every stage draws from seeds derived of (run seed, stage, fold), so folds
//! can execute in parallel and resumed runs reproduce uninterrupted ones
//! bitwise. Checkpoints land at stage boundaries via atomic renames.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};

use metalign_core::data::{
    augment, make_folds, sample_two_views, AugmentationConfig, DatasetManifest, PatientRecord,
};
use metalign_core::encoders::{Binding, ParamId, ParamStore};
use metalign_core::fusion::{
    restricted_class_probabilities, ClassVocabulary, FusionInput,
};
use metalign_core::graph::{Graph, NodeId};
use metalign_core::losses::{
    global_semantic_loss_graph, image_consistency_loss_graph, local_semantic_loss_direct_graph,
    local_semantic_loss_graph, soft_semantic_loss_graph, BatchNodes, LossParts, LossWeights,
};
use metalign_core::metrics::{
    aggregate_folds, compute_metrics, AblationVariant, FoldSummary, MetricsReport,
};
use metalign_core::mlm::{document_windows, make_mlm_batch, mlm_loss_graph, CorpusDocument};
use metalign_core::model::{Model, ModelConfig, TrainPhase};
use metalign_core::numerics::{seeded_rng, SimilarityConfig};
use metalign_core::optim::{AdamW, OptimizerConfig};
use metalign_core::soft_targets::{
    build_soft_targets, encode_metadata, AttributeSpec, MetadataSchema, MetadataVector,
    SoftTargetMatrix,
};
use metalign_core::vocab::{render_metadata_tokens, Vocabulary};
use metalign_core::Tensor;
use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{checkpoint_exists, load_checkpoint, save_checkpoint};
use crate::config::{config_hash, config_snapshot, RunConfig};
use crate::corpus::load_corpus;
use crate::error::{AppError, Result};
use crate::manifest::load_manifest;
use crate::trace::{TraceWriter, TraceRow};

/// Output directory layout of one run.
#[derive(Debug, Clone)]
pub struct RunDirs {
    pub root: PathBuf,
}

impl RunDirs {
    pub fn new(root: PathBuf) -> Self {
        RunDirs { root }
    }

    pub fn config_snapshot(&self) -> PathBuf {
        self.root.join("config.toml")
    }

    pub fn stage1_checkpoint(&self) -> PathBuf {
        self.root.join("stage1")
    }

    pub fn stage1_trace(&self) -> PathBuf {
        self.root.join("stage1_trace.jsonl")
    }

    pub fn fold_dir(&self, fold: usize) -> PathBuf {
        self.root.join(format!("fold_{fold}"))
    }

    pub fn stage2_checkpoint(&self, fold: usize) -> PathBuf {
        self.fold_dir(fold).join("stage2")
    }

    pub fn stage3_checkpoint(&self, fold: usize) -> PathBuf {
        self.fold_dir(fold).join("stage3")
    }

    pub fn fold_trace(&self, fold: usize) -> PathBuf {
        self.fold_dir(fold).join("trace.jsonl")
    }

    pub fn predictions(&self, fold: usize) -> PathBuf {
        self.fold_dir(fold).join("predictions.jsonl")
    }

    pub fn metrics(&self) -> PathBuf {
        self.root.join("metrics.json")
    }

    pub fn metrics_table(&self) -> PathBuf {
        self.root.join("metrics_table.txt")
    }
}

/// Which pipeline stages to execute in this invocation.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StageSelection {
    pub stage1: bool,
    pub stage2: bool,
    pub stage3: bool,
}

impl StageSelection {
    pub fn all() -> Self {
        StageSelection {
            stage1: true,
            stage2: true,
            stage3: true,
        }
    }

    pub fn parse(text: &str) -> Result<Self> {
        if text == "all" {
            return Ok(Self::all());
        }
        let mut sel = StageSelection {
            stage1: false,
            stage2: false,
            stage3: false,
        };
        for part in text.split(',') {
            match part.trim() {
                "1" => sel.stage1 = true,
                "2" => sel.stage2 = true,
                "3" => sel.stage3 = true,
                other => {
                    return Err(AppError::validation(format!(
                        "unknown stage '{other}' (expected 1, 2, 3, or all)"
                    )))
                }
            }
        }
        Ok(sel)
    }
}

/// Prediction file row: per-sample class probabilities and the decision.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionRow {
    pub patient_id: String,
    pub probabilities: Vec<f64>,
    pub predicted: String,
    pub truth: String,
}

/// Result of a completed run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub per_fold: Vec<MetricsReport>,
    pub summary: FoldSummary,
}

/// Extra knobs for a run beyond the config file.
#[derive(Debug, Clone)]
pub struct RunOptions {
    pub variant: AblationVariant,
    /// Reuse an existing stage-1 checkpoint directory instead of training.
    pub stage1_cache: Option<PathBuf>,
    pub stages: StageSelection,
}

impl Default for RunOptions {
    fn default() -> Self {
        RunOptions {
            variant: full_variant(),
            stage1_cache: None,
            stages: StageSelection::all(),
        }
    }
}

/// The complete configuration: knowledge pretraining plus all four losses.
pub fn full_variant() -> AblationVariant {
    AblationVariant {
        knowledge_pretraining: true,
        l_img: true,
        l_glo: true,
        l_loc: true,
        l_soft: true,
        l_loc_dir: false,
        l_sup_con: false,
    }
}

fn model_config_from(config: &RunConfig) -> ModelConfig {
    let m = &config.model;
    ModelConfig {
        vision: metalign_core::encoders::VisionSpec {
            channels: m.image_channels,
            height: m.image_height,
            width: m.image_width,
            patch_size: m.patch_size,
            native_dim: m.vision_native_dim,
            latent_dim: m.shared_dim,
            depth: m.vision_depth,
            seed: 0,
        },
        text: metalign_core::encoders::TextSpec {
            vocab_size: 0,
            max_len: m.text_max_len,
            native_dim: m.text_native_dim,
            latent_dim: m.shared_dim,
            depth: m.text_depth,
            seed: 0,
        },
        decoder: metalign_core::fusion::DecoderSpec {
            vocab_size: 0,
            max_len: m.decoder_max_len,
            native_dim: m.decoder_dim,
            depth: m.decoder_depth,
            seed: 0,
        },
        ranks: metalign_core::model::LoraRanks {
            text: config.stage1.lora_rank,
            vision: config.stage2.lora_rank,
            decoder: config.stage3.lora_rank,
        },
        fusion_stride: m.fusion_stride,
        special_seed_words: metalign_core::fusion::default_special_seed_words(),
        seed: config.run.seed,
    }
}

fn loss_weights(config: &RunConfig) -> LossWeights {
    LossWeights {
        beta1: config.losses.beta1,
        beta2: config.losses.beta2,
        beta3: config.losses.beta3,
        beta4: config.losses.beta4,
        tau: config.losses.tau,
        tau_label: config.losses.tau_label,
    }
}

fn augmentation_config(config: &RunConfig) -> AugmentationConfig {
    AugmentationConfig {
        enabled: config.augmentation.enabled,
        flip_prob: config.augmentation.flip_prob,
        crop_margin: config.augmentation.crop_margin,
        brightness_jitter: config.augmentation.brightness_jitter,
    }
}

/// Schema used for soft-target vectors: the manifest schema with the config's
/// upweight factor, plus the class label as a disease-related attribute when
/// enabled (a training-time construct; labels come from the training split).
fn soft_target_schema(
    base: &MetadataSchema,
    classes: &[String],
    config: &RunConfig,
) -> Result<MetadataSchema> {
    let mut attributes = base.attributes.clone();
    if config.soft_targets.include_label_attribute {
        attributes.push(AttributeSpec {
            name: "__label".to_string(),
            levels: classes.to_vec(),
            disease_related: true,
            visually_relevant: false,
            allow_missing: false,
        });
    }
    MetadataSchema::new(attributes, config.soft_targets.upweight_factor).map_err(Into::into)
}

fn metadata_vector_for(
    record: &PatientRecord,
    schema: &MetadataSchema,
    include_label: bool,
) -> Result<MetadataVector> {
    let mut metadata = record.metadata.clone();
    if include_label {
        metadata.insert("__label".to_string(), record.label.clone());
    }
    encode_metadata(&metadata, schema).map_err(Into::into)
}

fn optimizer(stage: &crate::config::StageSection, total_steps: usize) -> Result<AdamW> {
    let mut cfg = OptimizerConfig::new(stage.lr, stage.weight_decay, stage.warmup_frac, total_steps)?;
    cfg.grad_clip = (stage.grad_clip > 0.0).then_some(stage.grad_clip);
    Ok(AdamW::new(cfg))
}

fn collect_grads(
    store: &ParamStore,
    bind: &Binding,
    node_grads: &[Option<Tensor>],
) -> Vec<(ParamId, Tensor)> {
    store
        .iter()
        .filter(|(_, p)| p.trainable)
        .filter_map(|(id, _)| {
            node_grads[bind.node(id).index()]
                .clone()
                .map(|g| (id, g))
        })
        .collect()
}

/// Aborts a stage whose loss sits above ten times its initial value for 50
/// consecutive steps.
struct DivergenceGuard {
    stage: &'static str,
    initial: Option<f64>,
    consecutive: usize,
}

impl DivergenceGuard {
    fn new(stage: &'static str) -> Self {
        DivergenceGuard {
            stage,
            initial: None,
            consecutive: 0,
        }
    }

    fn observe(&mut self, loss: f64) -> Result<()> {
        if !loss.is_finite() {
            return Err(AppError::runtime(format!(
                "{}: loss became non-finite",
                self.stage
            )));
        }
        let initial = *self.initial.get_or_insert(loss);
        if initial > 0.0 && loss > 10.0 * initial {
            self.consecutive += 1;
        } else {
            self.consecutive = 0;
        }
        if self.consecutive >= 50 {
            return Err(AppError::runtime(format!(
                "{} diverged: loss above 10x the initial value ({initial:.4}) for 50 consecutive steps",
                self.stage
            )));
        }
        Ok(())
    }
}

/// Stage 1: masked-token prediction on the curated corpus. Trains the text
/// adapter and the prediction head; the text backbone stays frozen.
pub fn run_stage1(
    config: &RunConfig,
    corpus: &[CorpusDocument],
    vocab: &Vocabulary,
    model: &mut Model,
    trace_path: &Path,
) -> Result<()> {
    if corpus.is_empty() {
        return Err(AppError::validation("stage 1 needs a nonempty corpus"));
    }
    model.set_phase(TrainPhase::KnowledgeInjection);
    let windows: Vec<Vec<u32>> = corpus
        .iter()
        .flat_map(|doc| document_windows(doc, vocab, config.model.text_max_len))
        .filter(|w| w.len() >= 2)
        .collect();
    if windows.is_empty() {
        return Err(AppError::validation("corpus yields no usable token windows"));
    }
    let stage = &config.stage1;
    let batches_per_epoch = windows.len().div_ceil(stage.batch_size.max(1));
    let total_steps = stage.epochs * batches_per_epoch;
    let mut opt = optimizer(stage, total_steps)?;
    let mut rng = seeded_rng(config.stage_seed(1, None));
    let mut trace = TraceWriter::create(trace_path)?;
    let mut guard = DivergenceGuard::new("stage1");
    let mut order: Vec<usize> = (0..windows.len()).collect();
    for epoch in 0..stage.epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(stage.batch_size.max(1)) {
            let batch_windows: Vec<Vec<u32>> =
                chunk.iter().map(|&i| windows[i].clone()).collect();
            let examples = make_mlm_batch(&batch_windows, stage.mask_rate, &mut rng, vocab)?;
            if examples.is_empty() {
                continue;
            }
            let mut g = Graph::new();
            let bind = model.store.bind(&mut g);
            let loss = mlm_loss_graph(&mut g, &bind, &model.text, &model.mlm_head, &examples)?;
            let value = g.scalar(loss);
            guard.observe(value)?;
            let node_grads = g.backward(loss)?;
            let mut grads = collect_grads(&model.store, &bind, &node_grads);
            let lr = opt.step(&mut model.store, &mut grads)?;
            trace.record("stage1", epoch, lr, value, None)?;
        }
    }
    trace.finish()
}

/// Differentiable loss of one alignment batch under the variant's flags.
#[allow(clippy::too_many_arguments)]
fn build_variant_loss(
    g: &mut Graph,
    nodes: &BatchNodes,
    variant: &AblationVariant,
    weights: &LossWeights,
    soft: Option<&SoftTargetMatrix>,
    label_soft: Option<&SoftTargetMatrix>,
) -> Result<(NodeId, LossParts)> {
    let cfg = SimilarityConfig::new(weights.tau)?;
    let mut parts = LossParts {
        image: 0.0,
        global: 0.0,
        local: 0.0,
        soft: 0.0,
    };
    let mut terms: Vec<NodeId> = Vec::new();
    if variant.l_img {
        let node = image_consistency_loss_graph(g, nodes, &cfg)?;
        parts.image = g.scalar(node);
        terms.push(g.scale(node, weights.beta1));
    }
    if variant.l_glo {
        let node = global_semantic_loss_graph(g, nodes, &cfg)?;
        parts.global = g.scalar(node);
        terms.push(g.scale(node, weights.beta2));
    }
    if variant.l_loc || variant.l_loc_dir {
        let node = if variant.l_loc {
            local_semantic_loss_graph(g, nodes, &cfg)?
        } else {
            local_semantic_loss_direct_graph(g, nodes, &cfg)?
        };
        parts.local = g.scalar(node);
        terms.push(g.scale(node, weights.beta3));
    }
    if variant.l_soft || variant.l_sup_con {
        let matrix = if variant.l_soft {
            soft.ok_or_else(|| AppError::runtime("soft loss active without a target matrix"))?
        } else {
            label_soft.ok_or_else(|| AppError::runtime("label soft matrix missing"))?
        };
        let node = soft_semantic_loss_graph(g, nodes, matrix, &cfg)?;
        parts.soft = g.scalar(node);
        terms.push(g.scale(node, weights.beta4));
    }
    let mut total = terms
        .first()
        .copied()
        .ok_or_else(|| AppError::runtime("variant has no active alignment loss"))?;
    for term in &terms[1..] {
        total = g.add(total, *term)?;
    }
    Ok((total, parts))
}

/// Stage 2: alignment over two augmented views plus metadata text, then
/// supervised refinement of the vision path with ground-truth labels.
pub fn run_stage2(
    config: &RunConfig,
    manifest: &DatasetManifest,
    train: &[&PatientRecord],
    variant: &AblationVariant,
    vocab: &Vocabulary,
    model: &mut Model,
    fold: usize,
    trace_path: &Path,
) -> Result<()> {
    let stage = &config.stage2;
    if train.len() < 2 {
        return Err(AppError::validation(format!(
            "fold {fold}: stage 2 needs at least 2 training records"
        )));
    }
    let mut trace = TraceWriter::create(trace_path)?;
    let weights = loss_weights(config);
    let aug = augmentation_config(config);
    let mut rng = seeded_rng(config.stage_seed(2, Some(fold)));

    if variant.any_alignment() {
        model.set_phase(TrainPhase::Alignment);
        // the text backbone is frozen here: cache its native tokens
        let text_natives: Vec<Tensor> = train
            .iter()
            .map(|r| {
                let ids = render_metadata_tokens(&r.metadata, &manifest.schema, vocab)?;
                model.text_native(&ids)
            })
            .collect::<metalign_core::Result<_>>()?;
        let st_schema = soft_target_schema(&manifest.schema, &manifest.classes, config)?;
        let y_vectors: Vec<MetadataVector> = train
            .iter()
            .map(|r| {
                metadata_vector_for(r, &st_schema, config.soft_targets.include_label_attribute)
            })
            .collect::<Result<_>>()?;
        let labels: Vec<usize> = train
            .iter()
            .map(|r| manifest.class_index(&r.label))
            .collect::<metalign_core::Result<_>>()?;

        let batches_per_epoch = train.len().div_ceil(stage.batch_size);
        let total_steps = stage.epochs * batches_per_epoch;
        let mut opt = optimizer(stage, total_steps)?;
        let mut guard = DivergenceGuard::new("stage2");
        let mut order: Vec<usize> = (0..train.len()).collect();
        for epoch in 0..stage.epochs {
            order.shuffle(&mut rng);
            for chunk in order.chunks(stage.batch_size) {
                if chunk.len() < 2 {
                    continue; // contrastive terms need in-batch negatives
                }
                let mut g = Graph::new();
                let bind = model.store.bind(&mut g);
                let mut nodes = BatchNodes {
                    view1: Vec::with_capacity(chunk.len()),
                    view2: Vec::with_capacity(chunk.len()),
                    text: Vec::with_capacity(chunk.len()),
                };
                for &i in chunk {
                    let (v1, v2) = sample_two_views(
                        train[i],
                        &mut rng,
                        &aug,
                        config.data.same_modality_pairs,
                    )?;
                    nodes.view1.push(model.encode_image_graph(&mut g, &bind, &v1)?);
                    nodes.view2.push(model.encode_image_graph(&mut g, &bind, &v2)?);
                    nodes
                        .text
                        .push(model.project_text_native_graph(&mut g, &bind, &text_natives[i])?);
                }
                let soft = if variant.l_soft {
                    let batch_y: Vec<MetadataVector> =
                        chunk.iter().map(|&i| y_vectors[i].clone()).collect();
                    Some(build_soft_targets(&batch_y, weights.tau_label)?)
                } else {
                    None
                };
                let label_soft = if variant.l_sup_con {
                    let batch_labels: Vec<usize> = chunk.iter().map(|&i| labels[i]).collect();
                    Some(SoftTargetMatrix::from_labels(&batch_labels)?)
                } else {
                    None
                };
                let (total, parts) = build_variant_loss(
                    &mut g,
                    &nodes,
                    variant,
                    &weights,
                    soft.as_ref(),
                    label_soft.as_ref(),
                )?;
                let value = g.scalar(total);
                guard.observe(value)?;
                let node_grads = g.backward(total)?;
                let mut grads = collect_grads(&model.store, &bind, &node_grads);
                let lr = opt.step(&mut model.store, &mut grads)?;
                trace.record("stage2", epoch, lr, value, Some(parts))?;
            }
        }
    }

    // supervised refinement: per-scan cross-entropy through the vision path
    if stage.refine_epochs > 0 {
        model.set_phase(TrainPhase::Refinement);
        let mut pairs: Vec<(usize, usize)> = Vec::new();
        for (i, record) in train.iter().enumerate() {
            for s in 0..record.scans.len() {
                pairs.push((i, s));
            }
        }
        let batches_per_epoch = pairs.len().div_ceil(stage.batch_size);
        let total_steps = stage.refine_epochs * batches_per_epoch;
        let mut opt = optimizer(stage, total_steps)?;
        let mut guard = DivergenceGuard::new("stage2_refine");
        for epoch in 0..stage.refine_epochs {
            pairs.shuffle(&mut rng);
            for chunk in pairs.chunks(stage.batch_size) {
                let mut g = Graph::new();
                let bind = model.store.bind(&mut g);
                let mut acc: Option<NodeId> = None;
                for &(i, s) in chunk {
                    let image = augment(&train[i].scans[s].image, &mut rng, &aug);
                    let bundle = model.encode_image_graph(&mut g, &bind, &image)?;
                    let logits = model.classifier_logits_graph(&mut g, &bind, bundle.cls)?;
                    let logp = g.log_softmax_rows(logits);
                    let mut pick = Tensor::zeros(1, model.n_classes);
                    pick.set(0, manifest.class_index(&train[i].label)?, 1.0);
                    let term = g.weighted_sum(logp, pick)?;
                    acc = Some(match acc {
                        Some(prev) => g.add(prev, term)?,
                        None => term,
                    });
                }
                let Some(acc) = acc else { continue };
                let loss = g.scale(acc, -1.0 / chunk.len() as f64);
                let value = g.scalar(loss);
                guard.observe(value)?;
                let node_grads = g.backward(loss)?;
                let mut grads = collect_grads(&model.store, &bind, &node_grads);
                let lr = opt.step(&mut model.store, &mut grads)?;
                trace.record("stage2_refine", epoch, lr, value, None)?;
            }
        }
    }
    trace.finish()
}

fn fusion_input_for(
    model: &Model,
    record: &PatientRecord,
    schema: &MetadataSchema,
    vocab: &Vocabulary,
) -> Result<FusionInput> {
    let mut image_globals = Vec::with_capacity(record.scans.len());
    let mut image_locals = Vec::with_capacity(record.scans.len());
    for scan in &record.scans {
        let bundle = model.encode_image(&scan.image)?;
        image_globals.push(Tensor::row_vector(&bundle.cls));
        image_locals.push(bundle.seq);
    }
    let ids = render_metadata_tokens(&record.metadata, schema, vocab)?;
    let text = model.encode_text(&ids)?;
    Ok(FusionInput {
        image_globals,
        image_locals,
        text_global: Tensor::row_vector(&text.cls),
        text_local: text.seq,
    })
}

/// Stage 3: trains the fusion projectors, decoder adapter, and special
/// tokens with restricted cross-entropy, then writes per-sample predictions
/// for the held-out fold.
#[allow(clippy::too_many_arguments)]
pub fn run_stage3(
    config: &RunConfig,
    manifest: &DatasetManifest,
    train: &[&PatientRecord],
    test: &[&PatientRecord],
    vocab: &Vocabulary,
    model: &mut Model,
    fold: usize,
    trace_path: &Path,
    predictions_path: &Path,
) -> Result<MetricsReport> {
    let stage = &config.stage3;
    if train.is_empty() || test.is_empty() {
        return Err(AppError::validation(format!(
            "fold {fold}: stage 3 needs nonempty train and test splits"
        )));
    }
    let class_vocab = ClassVocabulary::build(&manifest.classes, vocab)?;
    model.set_phase(TrainPhase::Fusion);

    // encoders are frozen in this stage: precompute every record's features
    let train_inputs: Vec<FusionInput> = train
        .iter()
        .map(|r| fusion_input_for(model, r, &manifest.schema, vocab))
        .collect::<Result<_>>()?;
    let train_labels: Vec<usize> = train
        .iter()
        .map(|r| manifest.class_index(&r.label))
        .collect::<metalign_core::Result<_>>()?;

    let mut trace = TraceWriter::create(trace_path)?;
    let batches_per_epoch = train.len().div_ceil(stage.batch_size);
    let total_steps = stage.epochs * batches_per_epoch;
    let mut opt = optimizer(stage, total_steps)?;
    let mut guard = DivergenceGuard::new("stage3");
    let mut rng = seeded_rng(config.stage_seed(3, Some(fold)));
    let mut order: Vec<usize> = (0..train.len()).collect();
    for epoch in 0..stage.epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(stage.batch_size) {
            let mut g = Graph::new();
            let bind = model.store.bind(&mut g);
            let mut acc: Option<NodeId> = None;
            for &i in chunk {
                let logits = model.fusion_logits_graph(&mut g, &bind, &train_inputs[i])?;
                let term = metalign_core::fusion::fusion_loss_graph(
                    &mut g,
                    logits,
                    &class_vocab,
                    train_labels[i],
                )?;
                acc = Some(match acc {
                    Some(prev) => g.add(prev, term)?,
                    None => term,
                });
            }
            let Some(acc) = acc else { continue };
            let loss = g.scale(acc, 1.0 / chunk.len() as f64);
            let value = g.scalar(loss);
            guard.observe(value)?;
            let node_grads = g.backward(loss)?;
            let mut grads = collect_grads(&model.store, &bind, &node_grads);
            let lr = opt.step(&mut model.store, &mut grads)?;
            trace.record("stage3", epoch, lr, value, None)?;
        }
    }
    trace.finish()?;

    // held-out predictions
    let mut rows = Vec::with_capacity(test.len());
    let mut predicted_idx = Vec::with_capacity(test.len());
    let mut truth_idx = Vec::with_capacity(test.len());
    for record in test {
        let input = fusion_input_for(model, record, &manifest.schema, vocab)?;
        let logits = model.fusion_logits(&input)?;
        let probabilities = restricted_class_probabilities(&logits, &class_vocab)?;
        let best = probabilities
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.partial_cmp(b.1).expect("finite probabilities"))
            .expect("nonempty class set")
            .0;
        predicted_idx.push(best);
        truth_idx.push(manifest.class_index(&record.label)?);
        rows.push(PredictionRow {
            patient_id: record.patient_id.clone(),
            probabilities,
            predicted: manifest.classes[best].clone(),
            truth: record.label.clone(),
        });
    }
    write_predictions(predictions_path, &rows)?;
    compute_metrics(&predicted_idx, &truth_idx, &manifest.classes).map_err(Into::into)
}

pub fn write_predictions(path: &Path, rows: &[PredictionRow]) -> Result<()> {
    let mut out = std::fs::File::create(path)?;
    for row in rows {
        writeln!(out, "{}", serde_json::to_string(row)?)?;
    }
    Ok(())
}

pub fn read_predictions(path: &Path) -> Result<Vec<PredictionRow>> {
    let text = std::fs::read_to_string(path).map_err(|e| {
        AppError::validation(format!(
            "missing predictions file '{}': {e}",
            path.display()
        ))
    })?;
    let mut rows = Vec::new();
    for line in text.lines() {
        if line.trim().is_empty() {
            continue;
        }
        rows.push(serde_json::from_str(line)?);
    }
    Ok(rows)
}

/// Metrics recomputed from a predictions file.
pub fn metrics_from_predictions(
    rows: &[PredictionRow],
    classes: &[String],
) -> Result<MetricsReport> {
    let index = |label: &str| -> Result<usize> {
        classes
            .iter()
            .position(|c| c == label)
            .ok_or_else(|| AppError::validation(format!("unknown class '{label}' in predictions")))
    };
    let predicted: Vec<usize> = rows
        .iter()
        .map(|r| index(&r.predicted))
        .collect::<Result<_>>()?;
    let truths: Vec<usize> = rows.iter().map(|r| index(&r.truth)).collect::<Result<_>>()?;
    compute_metrics(&predicted, &truths, classes).map_err(Into::into)
}

/// Checks the output directory's config snapshot: write it on first use,
/// require an exact match afterwards (resume safety).
fn ensure_snapshot(dirs: &RunDirs, config: &RunConfig) -> Result<()> {
    std::fs::create_dir_all(&dirs.root)?;
    let snapshot = config_snapshot(config)?;
    let path = dirs.config_snapshot();
    if path.exists() {
        let existing = std::fs::read_to_string(&path)?;
        if existing != snapshot {
            return Err(AppError::validation(format!(
                "output directory '{}' holds a different config snapshot; \
                 use a fresh directory or matching configuration",
                dirs.root.display()
            )));
        }
    } else {
        std::fs::write(&path, snapshot)?;
    }
    Ok(())
}

/// Executes the selected stages of the full pipeline, resuming from any
/// stage checkpoints already present in the output directory.
pub fn run_full(config: &RunConfig, options: &RunOptions) -> Result<Option<RunSummary>> {
    config.validate()?;
    options.variant.validate()?;
    let dirs = RunDirs::new(config.run.out_dir.clone());
    ensure_snapshot(&dirs, config)?;
    let hash = config_hash(config)?;

    let manifest = load_manifest(&config.data.manifest)?;
    let vocab = Vocabulary::build(&manifest.schema, &manifest.classes)?;
    let template = model_config_from(config);

    // stage 1 is corpus-only and fold-independent: trained once per run
    let mut base_model: Option<Model> = None;
    if options.variant.knowledge_pretraining {
        let ck = dirs.stage1_checkpoint();
        if let Some(cache) = options
            .stage1_cache
            .as_ref()
            .filter(|p| checkpoint_exists(p))
        {
            let (_, model) = load_checkpoint(cache, None)?;
            base_model = Some(model);
        } else if checkpoint_exists(&ck) {
            let (_, model) = load_checkpoint(&ck, Some(hash))?;
            base_model = Some(model);
        } else if options.stages.stage1 {
            let corpus = load_corpus(&config.data.corpus, config.data.include_unvetted)?;
            let mut model = Model::new(template.clone(), &vocab, manifest.classes.len())?;
            run_stage1(config, &corpus, &vocab, &mut model, &dirs.stage1_trace())?;
            save_checkpoint(&ck, &model, "stage1", config.run.seed, None, hash)?;
            base_model = Some(model);
        } else {
            return Err(AppError::validation(
                "stage 2/3 need a stage-1 checkpoint; run stage 1 first or disable knowledge pretraining",
            ));
        }
    }
    if !options.stages.stage2 && !options.stages.stage3 {
        return Ok(None);
    }

    let folds = make_folds(&manifest, config.run.n_folds, config.run.seed)?;
    let fold_results: Vec<Result<Option<MetricsReport>>> = (0..config.run.n_folds)
        .into_par_iter()
        .map(|fold| {
            run_fold(
                config,
                options,
                &dirs,
                &manifest,
                &vocab,
                &template,
                base_model.as_ref(),
                &folds,
                fold,
                hash,
            )
        })
        .collect();

    let mut per_fold = Vec::with_capacity(config.run.n_folds);
    for result in fold_results {
        match result? {
            Some(report) => per_fold.push(report),
            None => return Ok(None), // stage 3 not selected
        }
    }
    let summary = aggregate_folds(&per_fold)?;
    let run_summary = RunSummary { per_fold, summary };
    std::fs::write(
        dirs.metrics(),
        serde_json::to_string_pretty(&run_summary)?,
    )?;
    std::fs::write(
        dirs.metrics_table(),
        crate::report::fold_table(&run_summary),
    )?;
    Ok(Some(run_summary))
}

#[allow(clippy::too_many_arguments)]
fn run_fold(
    config: &RunConfig,
    options: &RunOptions,
    dirs: &RunDirs,
    manifest: &DatasetManifest,
    vocab: &Vocabulary,
    template: &ModelConfig,
    base_model: Option<&Model>,
    folds: &metalign_core::data::FoldAssignment,
    fold: usize,
    hash: u64,
) -> Result<Option<MetricsReport>> {
    std::fs::create_dir_all(dirs.fold_dir(fold))?;
    let (train, test) = folds.split(manifest, fold)?;

    // stage 2
    let stage2_ck = dirs.stage2_checkpoint(fold);
    let mut model_after_2: Option<Model> = None;
    if checkpoint_exists(&stage2_ck) {
        let (_, model) = load_checkpoint(&stage2_ck, Some(hash))?;
        model_after_2 = Some(model);
    } else if options.stages.stage2 {
        let mut model = match base_model {
            Some(m) => m.clone(),
            None => Model::new(template.clone(), vocab, manifest.classes.len())?,
        };
        run_stage2(
            config,
            manifest,
            &train,
            &options.variant,
            vocab,
            &mut model,
            fold,
            &dirs.fold_trace(fold),
        )?;
        save_checkpoint(&stage2_ck, &model, "stage2", config.run.seed, Some(fold), hash)?;
        model_after_2 = Some(model);
    }

    if !options.stages.stage3 {
        return Ok(None);
    }
    let stage3_ck = dirs.stage3_checkpoint(fold);
    let predictions_path = dirs.predictions(fold);
    if checkpoint_exists(&stage3_ck) && predictions_path.exists() {
        let rows = read_predictions(&predictions_path)?;
        return metrics_from_predictions(&rows, &manifest.classes).map(Some);
    }
    let mut model = model_after_2.ok_or_else(|| {
        AppError::validation(format!(
            "fold {fold}: stage 3 needs the stage-2 checkpoint '{}'",
            stage2_ck.display()
        ))
    })?;
    let report = run_stage3(
        config,
        manifest,
        &train,
        &test,
        vocab,
        &mut model,
        fold,
        &dirs.fold_dir(fold).join("stage3_trace.jsonl"),
        &predictions_path,
    )?;
    save_checkpoint(&stage3_ck, &model, "stage3", config.run.seed, Some(fold), hash)?;
    Ok(Some(report))
}

/// Reads all per-fold traces of a run (stage 1 plus every fold).
pub fn read_all_traces(dirs: &RunDirs, n_folds: usize) -> Result<Vec<TraceRow>> {
    let mut rows = Vec::new();
    if dirs.stage1_trace().exists() {
        rows.extend(crate::trace::read_trace(&dirs.stage1_trace())?);
    }
    for fold in 0..n_folds {
        let path = dirs.fold_trace(fold);
        if path.exists() {
            rows.extend(crate::trace::read_trace(&path)?);
        }
        let s3 = dirs.fold_dir(fold).join("stage3_trace.jsonl");
        if s3.exists() {
            rows.extend(crate::trace::read_trace(&s3)?);
        }
    }
    Ok(rows)
}

/// Convenience wrapper: metadata map plus label-aware soft vectors for one
/// record set (used by inspection tooling and tests).
pub fn soft_vectors_for_records(
    config: &RunConfig,
    manifest: &DatasetManifest,
    records: &[&PatientRecord],
) -> Result<Vec<MetadataVector>> {
    let schema = soft_target_schema(&manifest.schema, &manifest.classes, config)?;
    records
        .iter()
        .map(|r| metadata_vector_for(r, &schema, config.soft_targets.include_label_attribute))
        .collect()
}

/// Label map of a manifest (`class name -> count`), for CLI summaries.
pub fn class_counts(manifest: &DatasetManifest) -> BTreeMap<String, usize> {
    let mut counts = BTreeMap::new();
    for record in &manifest.records {
        *counts.entry(record.label.clone()).or_insert(0) += 1;
    }
    counts
}
