//! Full model assembly: both encoders, projection heads, the MLM and
//! refinement heads, the decoder, and the fusion projectors, all over one
//! parameter store so training phases can freeze components wholesale and
//! checkpoints can serialize a single flat list.

use alloc::string::String;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::data::ImageTensor;
use crate::encoders::{
    split_bundle, Binding, Component, Linear, ParamStore, ProjectionHead, TextEncoder, TextSpec,
    VisionEncoder, VisionSpec,
};
use crate::error::Result;
use crate::fusion::{
    assemble_sequence, default_special_seed_words, Decoder, DecoderSpec, FusionInput,
    FusionProjectors, SpecialTokenSet,
};
use crate::graph::{Graph, NodeId};
use crate::losses::{BundleNodes, TokenBundle};
use crate::numerics::{derive_seed, seeded_rng};
use crate::vocab::Vocabulary;
use crate::{config_err, Tensor};

/// Adapter ranks per component (text encoder, vision encoder, decoder).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LoraRanks {
    pub text: usize,
    pub vision: usize,
    pub decoder: usize,
}

impl Default for LoraRanks {
    /// Reported ranks (text 8, vision 32, decoder 16).
    fn default() -> Self {
        LoraRanks {
            text: 8,
            vision: 32,
            decoder: 16,
        }
    }
}

/// Everything needed to rebuild the model deterministically.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub vision: VisionSpec,
    pub text: TextSpec,
    pub decoder: DecoderSpec,
    pub ranks: LoraRanks,
    pub fusion_stride: usize,
    pub special_seed_words: Vec<Vec<String>>,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            vision: VisionSpec::default(),
            text: TextSpec::default(),
            decoder: DecoderSpec::default(),
            ranks: LoraRanks::default(),
            fusion_stride: 2,
            special_seed_words: default_special_seed_words(),
            seed: 1,
        }
    }
}

impl ModelConfig {
    /// Fills vocabulary-dependent sizes and derives per-submodel seeds.
    pub fn resolved(mut self, vocab: &Vocabulary) -> Self {
        self.text.vocab_size = vocab.len();
        self.decoder.vocab_size = vocab.len();
        self.vision.seed = derive_seed(self.seed, &[1]);
        self.text.seed = derive_seed(self.seed, &[2]);
        self.decoder.seed = derive_seed(self.seed, &[3]);
        self
    }
}

/// Training phases and the components they are allowed to update.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum TrainPhase {
    /// Stage 1: masked-token prediction; text adapter + MLM head.
    KnowledgeInjection,
    /// Stage 2 alignment: projection heads + vision adapter.
    Alignment,
    /// Stage 2 refinement: vision adapter + vision head + classifier.
    Refinement,
    /// Stage 3: decoder adapter + fusion projectors + special tokens.
    Fusion,
}

impl TrainPhase {
    pub fn trainable_components(&self) -> &'static [Component] {
        match self {
            TrainPhase::KnowledgeInjection => &[Component::TextAdapter, Component::MlmHead],
            TrainPhase::Alignment => &[
                Component::VisionAdapter,
                Component::VisionProjection,
                Component::TextProjection,
            ],
            TrainPhase::Refinement => &[
                Component::VisionAdapter,
                Component::VisionProjection,
                Component::RefinementClassifier,
            ],
            TrainPhase::Fusion => &[
                Component::DecoderAdapter,
                Component::FusionProjector,
                Component::SpecialTokens,
            ],
        }
    }
}

/// The assembled model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Model {
    pub config: ModelConfig,
    pub store: ParamStore,
    pub vision: VisionEncoder,
    pub text: TextEncoder,
    pub decoder: Decoder,
    pub vision_head: ProjectionHead,
    pub text_head: ProjectionHead,
    pub mlm_head: Linear,
    pub classifier: Linear,
    pub projectors: FusionProjectors,
    pub specials: SpecialTokenSet,
    pub n_classes: usize,
}

impl Model {
    pub fn new(config: ModelConfig, vocab: &Vocabulary, n_classes: usize) -> Result<Self> {
        let config = config.resolved(vocab);
        if config.vision.latent_dim != config.text.latent_dim {
            return Err(config_err!(
                "vision and text must share the latent dimension ({} vs {})",
                config.vision.latent_dim,
                config.text.latent_dim
            ));
        }
        if n_classes < 2 {
            return Err(config_err!("need at least 2 classes"));
        }
        let shared_dim = config.vision.latent_dim;
        let mut store = ParamStore::new();
        let vision = VisionEncoder::new(
            &mut store,
            config.vision,
            config.ranks.vision,
            config.ranks.vision as f64,
        )?;
        let text = TextEncoder::new(
            &mut store,
            config.text,
            config.ranks.text,
            config.ranks.text as f64,
        )?;
        let decoder = Decoder::new(
            &mut store,
            config.decoder,
            config.ranks.decoder,
            config.ranks.decoder as f64,
        )?;
        let mut head_rng = seeded_rng(derive_seed(config.seed, &[4]));
        let vision_head = ProjectionHead::new(
            &mut store,
            &mut head_rng,
            "vision_head",
            config.vision.native_dim,
            shared_dim,
            Component::VisionProjection,
        );
        let text_head = ProjectionHead::new(
            &mut store,
            &mut head_rng,
            "text_head",
            config.text.native_dim,
            shared_dim,
            Component::TextProjection,
        );
        let mlm_head = Linear::new(
            &mut store,
            &mut head_rng,
            "mlm_head",
            config.text.native_dim,
            vocab.len(),
            Component::MlmHead,
        );
        let classifier = Linear::new(
            &mut store,
            &mut head_rng,
            "refinement_classifier",
            shared_dim,
            n_classes,
            Component::RefinementClassifier,
        );
        let mut fusion_rng = seeded_rng(derive_seed(config.seed, &[5]));
        let projectors = FusionProjectors::new(
            &mut store,
            &mut fusion_rng,
            shared_dim,
            config.decoder.native_dim,
            config.fusion_stride,
        )?;
        let specials = SpecialTokenSet::new(
            &mut store,
            &decoder,
            vocab,
            config.special_seed_words.clone(),
        )?;
        Ok(Model {
            config,
            store,
            vision,
            text,
            decoder,
            vision_head,
            text_head,
            mlm_head,
            classifier,
            projectors,
            specials,
            n_classes,
        })
    }

    /// Marks exactly the phase's components trainable.
    pub fn set_phase(&mut self, phase: TrainPhase) {
        self.store
            .set_trainable_components(phase.trainable_components());
    }

    /// Projected shared-space bundle of one image.
    pub fn encode_image_graph(
        &self,
        g: &mut Graph,
        bind: &Binding,
        image: &ImageTensor,
    ) -> Result<BundleNodes> {
        let native = self.vision.encode_native(g, bind, image)?;
        let projected = self.vision_head.forward(g, bind, native)?;
        split_bundle(g, projected)
    }

    /// Projected shared-space bundle of one id sequence.
    pub fn encode_text_graph(
        &self,
        g: &mut Graph,
        bind: &Binding,
        ids: &[u32],
    ) -> Result<BundleNodes> {
        let native = self.text.encode_native(g, bind, ids)?;
        let projected = self.text_head.forward(g, bind, native)?;
        split_bundle(g, projected)
    }

    /// Text-head projection of precomputed native tokens (the text backbone
    /// is frozen during alignment, so its output can be cached).
    pub fn project_text_native_graph(
        &self,
        g: &mut Graph,
        bind: &Binding,
        native: &Tensor,
    ) -> Result<BundleNodes> {
        let node = g.constant(native.clone());
        let projected = self.text_head.forward(g, bind, node)?;
        split_bundle(g, projected)
    }

    fn bundle_value(g: &Graph, nodes: BundleNodes) -> Result<TokenBundle> {
        TokenBundle::new(
            g.value(nodes.cls).row(0).to_vec(),
            g.value(nodes.seq).clone(),
        )
    }

    /// Value-level image encoding.
    pub fn encode_image(&self, image: &ImageTensor) -> Result<TokenBundle> {
        let mut g = Graph::new();
        let bind = self.store.bind(&mut g);
        let nodes = self.encode_image_graph(&mut g, &bind, image)?;
        Self::bundle_value(&g, nodes)
    }

    /// Value-level text encoding.
    pub fn encode_text(&self, ids: &[u32]) -> Result<TokenBundle> {
        let mut g = Graph::new();
        let bind = self.store.bind(&mut g);
        let nodes = self.encode_text_graph(&mut g, &bind, ids)?;
        Self::bundle_value(&g, nodes)
    }

    /// Value-level native (pre-projection) text tokens `[1+L, native_dim]`.
    pub fn text_native(&self, ids: &[u32]) -> Result<Tensor> {
        let mut g = Graph::new();
        let bind = self.store.bind(&mut g);
        let node = self.text.encode_native(&mut g, &bind, ids)?;
        Ok(g.value(node).clone())
    }

    /// Refinement classifier logits for a projected class token.
    pub fn classifier_logits_graph(
        &self,
        g: &mut Graph,
        bind: &Binding,
        cls: NodeId,
    ) -> Result<NodeId> {
        self.classifier.forward(g, bind, cls)
    }

    /// Decoder vocabulary logits at the answer position for one fusion input.
    pub fn fusion_logits_graph(
        &self,
        g: &mut Graph,
        bind: &Binding,
        input: &FusionInput,
    ) -> Result<NodeId> {
        let seq = assemble_sequence(g, bind, &self.projectors, &self.specials, input)?;
        let hidden = self.decoder.forward_hidden(g, bind, seq)?;
        self.decoder.logits_at_last(g, bind, hidden)
    }

    /// Value-level fusion logits.
    pub fn fusion_logits(&self, input: &FusionInput) -> Result<Vec<f64>> {
        let mut g = Graph::new();
        let bind = self.store.bind(&mut g);
        let node = self.fusion_logits_graph(&mut g, &bind, input)?;
        Ok(g.value(node).row(0).to_vec())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::soft_targets::MetadataSchema;
    use alloc::string::ToString;

    fn small_config() -> ModelConfig {
        ModelConfig {
            vision: VisionSpec {
                channels: 2,
                height: 8,
                width: 8,
                patch_size: 4,
                native_dim: 16,
                latent_dim: 8,
                depth: 1,
                seed: 0,
            },
            text: TextSpec {
                vocab_size: 0,
                max_len: 16,
                native_dim: 16,
                latent_dim: 8,
                depth: 1,
                seed: 0,
            },
            decoder: DecoderSpec {
                vocab_size: 0,
                max_len: 48,
                native_dim: 16,
                depth: 1,
                seed: 0,
            },
            ranks: LoraRanks {
                text: 2,
                vision: 4,
                decoder: 2,
            },
            fusion_stride: 2,
            special_seed_words: default_special_seed_words(),
            seed: 42,
        }
    }

    fn vocab() -> Vocabulary {
        Vocabulary::build(
            &MetadataSchema::default(),
            &["class_a".to_string(), "class_b".to_string()],
        )
        .unwrap()
    }

    #[test]
    fn construction_is_deterministic() {
        let v = vocab();
        let a = Model::new(small_config(), &v, 2).unwrap();
        let b = Model::new(small_config(), &v, 2).unwrap();
        assert_eq!(a.store, b.store);
    }

    #[test]
    fn image_encoding_contract() {
        let v = vocab();
        let model = Model::new(small_config(), &v, 2).unwrap();
        let mut img = ImageTensor::zeros(2, 8, 8);
        for (i, px) in img.data.iter_mut().enumerate() {
            *px = (i % 13) as f64 * 0.1;
        }
        let b1 = model.encode_image(&img).unwrap();
        let b2 = model.encode_image(&img).unwrap();
        assert_eq!(b1, b2);
        assert_eq!(b1.cls.len(), 8);
        assert_eq!(b1.seq.rows(), 4); // (8/4)^2 patches
        assert_eq!(b1.seq.cols(), 8);
    }

    #[test]
    fn text_encoding_contract() {
        let v = vocab();
        let model = Model::new(small_config(), &v, 2).unwrap();
        let ids = v.tokenize("risk of lesion");
        let bundle = model.encode_text(&ids).unwrap();
        assert_eq!(bundle.cls.len(), 8);
        assert_eq!(bundle.seq.rows(), 3);
        assert!(model.encode_text(&[]).is_err());
        assert!(model.encode_text(&[v.len() as u32]).is_err());
    }

    #[test]
    fn projecting_cached_native_matches_direct_encoding() {
        let v = vocab();
        let model = Model::new(small_config(), &v, 2).unwrap();
        let ids = v.tokenize("risk of lesion observed");
        let direct = model.encode_text(&ids).unwrap();
        let native = model.text_native(&ids).unwrap();
        let mut g = Graph::new();
        let bind = model.store.bind(&mut g);
        let nodes = model.project_text_native_graph(&mut g, &bind, &native).unwrap();
        let cached = Model::bundle_value(&g, nodes).unwrap();
        assert_eq!(direct, cached);
    }

    #[test]
    fn phase_switching_freezes_backbones() {
        let v = vocab();
        let mut model = Model::new(small_config(), &v, 2).unwrap();
        for phase in [
            TrainPhase::KnowledgeInjection,
            TrainPhase::Alignment,
            TrainPhase::Refinement,
            TrainPhase::Fusion,
        ] {
            model.set_phase(phase);
            for (_, p) in model.store.iter() {
                if p.component.is_backbone() {
                    assert!(!p.trainable, "{} trainable in {phase:?}", p.name);
                }
                if p.trainable {
                    assert!(
                        phase.trainable_components().contains(&p.component),
                        "{} unexpectedly trainable in {phase:?}",
                        p.name
                    );
                }
            }
        }
    }

    #[test]
    fn fusion_path_produces_vocab_logits() {
        let v = vocab();
        let model = Model::new(small_config(), &v, 2).unwrap();
        let mut img = ImageTensor::zeros(2, 8, 8);
        for (i, px) in img.data.iter_mut().enumerate() {
            *px = ((i * 7) % 11) as f64 * 0.05;
        }
        let image_bundle = model.encode_image(&img).unwrap();
        let text_bundle = model.encode_text(&v.tokenize("site arm")).unwrap();
        let input = FusionInput {
            image_globals: alloc::vec![Tensor::row_vector(&image_bundle.cls)],
            image_locals: alloc::vec![image_bundle.seq.clone()],
            text_global: Tensor::row_vector(&text_bundle.cls),
            text_local: text_bundle.seq.clone(),
        };
        let logits = model.fusion_logits(&input).unwrap();
        assert_eq!(logits.len(), v.len());
        assert!(logits.iter().all(|v| v.is_finite()));
    }
}
