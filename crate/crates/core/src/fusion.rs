//! Fusion head: projects aligned tokens into the decoder's embedding space,
//! assembles the demarcated input sequence, and classifies over a restricted
//! class-token vocabulary.
//!
//! Sequence layout (version 1):
//! `[img_start, {scan global, scan locals...} per scan, img_end,
//!   txt_start, text global, text locals..., txt_end, answer]`
//! and classification reads the logits at the final (answer) position only.

use alloc::string::{String, ToString};
use alloc::vec::Vec;

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::encoders::{Binding, Component, Linear, MixerBlock, ParamId, ParamStore};
use crate::error::Result;
use crate::graph::{Graph, NodeId};
use crate::numerics::{derive_seed, seeded_rng, softmax};
use crate::tensor::Tensor;
use crate::vocab::Vocabulary;
use crate::{config_err, domain_err, math, shape_err};

/// Version tag of the assembled-sequence layout.
pub const SEQUENCE_LAYOUT_VERSION: u32 = 1;

/// Decoder sizing.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct DecoderSpec {
    pub vocab_size: usize,
    pub max_len: usize,
    pub native_dim: usize,
    pub depth: usize,
    pub seed: u64,
}

impl Default for DecoderSpec {
    fn default() -> Self {
        DecoderSpec {
            vocab_size: 0, // filled from the vocabulary
            max_len: 96,
            native_dim: 48,
            depth: 2,
            seed: 3,
        }
    }
}

/// Toy causal decoder: embedding, positional rows, causal mixing blocks, and
/// a frozen output projection onto the vocabulary.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Decoder {
    pub spec: DecoderSpec,
    pub embedding: ParamId,
    pub pos: ParamId,
    pub blocks: Vec<MixerBlock>,
    pub out_weight: ParamId,
}

impl Decoder {
    pub fn new(
        store: &mut ParamStore,
        spec: DecoderSpec,
        adapter_rank: usize,
        alpha: f64,
    ) -> Result<Self> {
        if spec.vocab_size < 5 || spec.max_len == 0 || spec.native_dim < 2 || spec.depth == 0 {
            return Err(config_err!("decoder spec has a degenerate dimension"));
        }
        let mut rng = seeded_rng(spec.seed);
        let mut lora_rng = seeded_rng(derive_seed(spec.seed, &[0x10ca]));
        let embedding = store.add(
            "decoder.embedding".to_string(),
            gaussian(&mut rng, spec.vocab_size, spec.native_dim, 0.02),
            Component::DecoderBackbone,
        );
        let pos = store.add(
            "decoder.pos".to_string(),
            gaussian(&mut rng, spec.max_len, spec.native_dim, 0.02),
            Component::DecoderBackbone,
        );
        let adapter = (adapter_rank > 0).then_some(crate::encoders::AdapterSpec {
            component: Component::DecoderAdapter,
            rank: adapter_rank,
            alpha,
        });
        let blocks = (0..spec.depth)
            .map(|b| {
                MixerBlock::new(
                    store,
                    &mut rng,
                    &mut lora_rng,
                    &alloc::format!("decoder.block{b}"),
                    spec.native_dim,
                    Component::DecoderBackbone,
                    adapter,
                )
            })
            .collect::<Result<Vec<_>>>()?;
        let out_weight = store.add(
            "decoder.out_weight".to_string(),
            gaussian(&mut rng, spec.vocab_size, spec.native_dim, 0.02),
            Component::DecoderBackbone,
        );
        Ok(Decoder {
            spec,
            embedding,
            pos,
            blocks,
            out_weight,
        })
    }

    /// Causal forward over an embedded sequence `[T, d] -> [T, d]`.
    pub fn forward_hidden(&self, g: &mut Graph, bind: &Binding, seq: NodeId) -> Result<NodeId> {
        let t = g.value(seq).rows();
        if t > self.spec.max_len {
            return Err(shape_err!(
                "sequence of {t} exceeds decoder maximum {}",
                self.spec.max_len
            ));
        }
        let pos = g.slice_rows(bind.node(self.pos), 0, t)?;
        let mut x = g.add(seq, pos)?;
        for block in &self.blocks {
            x = block.forward(g, bind, x, true)?;
        }
        Ok(x)
    }

    /// Vocabulary logits at the final position, `[1, V]`.
    pub fn logits_at_last(&self, g: &mut Graph, bind: &Binding, hidden: NodeId) -> Result<NodeId> {
        let t = g.value(hidden).rows();
        let last = g.slice_rows(hidden, t - 1, t)?;
        g.matmul_nt(last, bind.node(self.out_weight))
    }
}

fn gaussian(rng: &mut ChaCha8Rng, rows: usize, cols: usize, std: f64) -> Tensor {
    use rand::Rng;
    let mut data = Vec::with_capacity(rows * cols);
    while data.len() < rows * cols {
        let u1: f64 = rng.gen_range(f64::EPSILON..1.0);
        let u2: f64 = rng.gen_range(0.0..1.0);
        let r = math::sqrt(-2.0 * math::ln(u1));
        let theta = 2.0 * math::PI * u2;
        data.push(r * math::cos(theta) * std);
        if data.len() < rows * cols {
            data.push(r * libm::sin(theta) * std);
        }
    }
    Tensor::from_vec(rows, cols, data).expect("sized data")
}

/// Ordered class names and their decoder token ids.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassVocabulary {
    pub classes: Vec<String>,
    pub token_ids: Vec<u32>,
}

impl ClassVocabulary {
    pub fn build(classes: &[String], vocab: &Vocabulary) -> Result<Self> {
        if classes.len() < 2 {
            return Err(config_err!(
                "class vocabulary needs at least 2 classes, got {}",
                classes.len()
            ));
        }
        let token_ids: Vec<u32> = classes
            .iter()
            .map(|c| vocab.require_id(c))
            .collect::<Result<_>>()?;
        let mut seen = token_ids.clone();
        seen.sort_unstable();
        seen.dedup();
        if seen.len() != token_ids.len() {
            return Err(config_err!("class token ids are not distinct"));
        }
        Ok(ClassVocabulary {
            classes: classes.to_vec(),
            token_ids,
        })
    }

    pub fn len(&self) -> usize {
        self.classes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.classes.is_empty()
    }

    pub fn index_of(&self, class: &str) -> Result<usize> {
        self.classes
            .iter()
            .position(|c| c == class)
            .ok_or_else(|| config_err!("class '{class}' not in vocabulary"))
    }
}

/// The five learnable boundary embeddings.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum SpecialToken {
    ImgStart,
    ImgEnd,
    TxtStart,
    TxtEnd,
    Answer,
}

impl SpecialToken {
    pub const ALL: [SpecialToken; 5] = [
        SpecialToken::ImgStart,
        SpecialToken::ImgEnd,
        SpecialToken::TxtStart,
        SpecialToken::TxtEnd,
        SpecialToken::Answer,
    ];

    fn row(self) -> usize {
        match self {
            SpecialToken::ImgStart => 0,
            SpecialToken::ImgEnd => 1,
            SpecialToken::TxtStart => 2,
            SpecialToken::TxtEnd => 3,
            SpecialToken::Answer => 4,
        }
    }
}

/// Word lists whose averaged base embeddings seed each special token.
pub fn default_special_seed_words() -> Vec<Vec<String>> {
    [
        &["image", "begin"][..],
        &["image", "end"][..],
        &["text", "begin"][..],
        &["text", "end"][..],
        &["answer"][..],
    ]
    .iter()
    .map(|ws| ws.iter().map(|w| w.to_string()).collect())
    .collect()
}

/// Learnable demarcation embeddings, initialized from semantic seed words
/// rather than noise.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpecialTokenSet {
    pub embeddings: ParamId,
    pub seed_words: Vec<Vec<String>>,
}

impl SpecialTokenSet {
    pub fn new(
        store: &mut ParamStore,
        decoder: &Decoder,
        vocab: &Vocabulary,
        seed_words: Vec<Vec<String>>,
    ) -> Result<Self> {
        if seed_words.len() != SpecialToken::ALL.len() {
            return Err(config_err!(
                "need {} seed word lists, got {}",
                SpecialToken::ALL.len(),
                seed_words.len()
            ));
        }
        let emb = store.value(decoder.embedding).clone();
        let d = emb.cols();
        let mut init = Tensor::zeros(SpecialToken::ALL.len(), d);
        for (row, words) in seed_words.iter().enumerate() {
            if words.is_empty() {
                return Err(config_err!("seed word list {row} is empty"));
            }
            for word in words {
                let id = vocab.require_id(word)? as usize;
                for c in 0..d {
                    let cur = init.get(row, c);
                    init.set(row, c, cur + emb.get(id, c) / words.len() as f64);
                }
            }
        }
        let embeddings = store.add(
            "fusion.special_tokens".to_string(),
            init,
            Component::SpecialTokens,
        );
        Ok(SpecialTokenSet {
            embeddings,
            seed_words,
        })
    }

    pub fn token(&self, g: &mut Graph, bind: &Binding, which: SpecialToken) -> Result<NodeId> {
        g.gather_rows(bind.node(self.embeddings), &[which.row()])
    }
}

/// Projectors from the shared space into the decoder space: a two-layer MLP
/// for global tokens and a strided window projection (kernel = stride) for
/// local sequences.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FusionProjectors {
    pub global_l1: Linear,
    pub global_l2: Linear,
    pub local_window: Linear,
    pub stride: usize,
    pub shared_dim: usize,
    pub decoder_dim: usize,
}

impl FusionProjectors {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        shared_dim: usize,
        decoder_dim: usize,
        stride: usize,
    ) -> Result<Self> {
        if stride == 0 {
            return Err(config_err!("downsampling stride must be >= 1"));
        }
        let hidden = 2 * shared_dim;
        Ok(FusionProjectors {
            global_l1: Linear::new(
                store,
                rng,
                "fusion.global.l1",
                shared_dim,
                hidden,
                Component::FusionProjector,
            ),
            global_l2: Linear::new(
                store,
                rng,
                "fusion.global.l2",
                hidden,
                decoder_dim,
                Component::FusionProjector,
            ),
            local_window: Linear::new(
                store,
                rng,
                "fusion.local.window",
                stride * shared_dim,
                decoder_dim,
                Component::FusionProjector,
            ),
            stride,
            shared_dim,
            decoder_dim,
        })
    }

    /// Projects one global token `[1, d] -> [1, d_dec]`.
    pub fn project_global(&self, g: &mut Graph, bind: &Binding, token: NodeId) -> Result<NodeId> {
        if g.value(token).cols() != self.shared_dim {
            return Err(shape_err!(
                "global token dim {} vs projector input {}",
                g.value(token).cols(),
                self.shared_dim
            ));
        }
        let h = self.global_l1.forward(g, bind, token)?;
        let h = g.tanh(h);
        self.global_l2.forward(g, bind, h)
    }

    /// Projects a local sequence `[L, d] -> [ceil(L/stride), d_dec]` by
    /// mapping non-overlapping windows of `stride` tokens (zero-padded at
    /// the tail). Sequences shorter than the stride become one padded
    /// window, with a warning.
    pub fn project_local(&self, g: &mut Graph, bind: &Binding, seq: NodeId) -> Result<NodeId> {
        let len = g.value(seq).rows();
        if g.value(seq).cols() != self.shared_dim {
            return Err(shape_err!(
                "local token dim {} vs projector input {}",
                g.value(seq).cols(),
                self.shared_dim
            ));
        }
        if len < self.stride {
            log::warn!(
                "sequence of {len} tokens shorter than stride {}; emitting one padded window",
                self.stride
            );
        }
        let windows = len.div_ceil(self.stride);
        let padded = g.pad_rows(seq, windows * self.stride)?;
        let stacked = g.reshape(padded, windows, self.stride * self.shared_dim)?;
        self.local_window.forward(g, bind, stacked)
    }

    /// Output length of [`Self::project_local`].
    pub fn downsampled_len(&self, len: usize) -> usize {
        len.div_ceil(self.stride)
    }
}

/// Precomputed shared-space features of one patient entering the fusion head.
#[derive(Debug, Clone, PartialEq)]
pub struct FusionInput {
    /// One `[1, d]` global token per scan.
    pub image_globals: Vec<Tensor>,
    /// One `[K, d]` local sequence per scan.
    pub image_locals: Vec<Tensor>,
    pub text_global: Tensor,
    pub text_local: Tensor,
}

impl FusionInput {
    pub fn validate(&self) -> Result<()> {
        if self.image_globals.is_empty() {
            return Err(domain_err!("fusion input needs at least one image"));
        }
        if self.image_globals.len() != self.image_locals.len() {
            return Err(shape_err!(
                "{} image globals vs {} local sequences",
                self.image_globals.len(),
                self.image_locals.len()
            ));
        }
        let d = self.text_global.cols();
        for t in self
            .image_globals
            .iter()
            .chain(self.image_locals.iter())
            .chain([&self.text_global, &self.text_local])
        {
            if t.cols() != d {
                return Err(shape_err!("fusion input dims disagree: {} vs {d}", t.cols()));
            }
        }
        Ok(())
    }
}

/// Assembles the projected, demarcated decoder input sequence.
pub fn assemble_sequence(
    g: &mut Graph,
    bind: &Binding,
    projectors: &FusionProjectors,
    specials: &SpecialTokenSet,
    input: &FusionInput,
) -> Result<NodeId> {
    input.validate()?;
    let mut parts: Vec<NodeId> = Vec::new();
    parts.push(specials.token(g, bind, SpecialToken::ImgStart)?);
    for (global, local) in input.image_globals.iter().zip(&input.image_locals) {
        let global = g.constant(global.clone());
        let local = g.constant(local.clone());
        parts.push(projectors.project_global(g, bind, global)?);
        parts.push(projectors.project_local(g, bind, local)?);
    }
    parts.push(specials.token(g, bind, SpecialToken::ImgEnd)?);
    parts.push(specials.token(g, bind, SpecialToken::TxtStart)?);
    let tg = g.constant(input.text_global.clone());
    let tl = g.constant(input.text_local.clone());
    parts.push(projectors.project_global(g, bind, tg)?);
    parts.push(projectors.project_local(g, bind, tl)?);
    parts.push(specials.token(g, bind, SpecialToken::TxtEnd)?);
    parts.push(specials.token(g, bind, SpecialToken::Answer)?);
    g.concat_rows(&parts)
}

/// Closed-form length of the assembled sequence.
pub fn expected_sequence_length(
    projectors: &FusionProjectors,
    scan_local_lens: &[usize],
    text_local_len: usize,
) -> usize {
    let image_part: usize = scan_local_lens
        .iter()
        .map(|&k| 1 + projectors.downsampled_len(k))
        .sum();
    // img markers + image blocks + txt markers + text block + answer slot
    2 + image_part + 2 + (1 + projectors.downsampled_len(text_local_len)) + 1
}

/// Restricted class probabilities: softmax over the class token ids only.
pub fn restricted_class_probabilities(
    logits: &[f64],
    vocab: &ClassVocabulary,
) -> Result<Vec<f64>> {
    if vocab.len() < 2 {
        return Err(config_err!("restricted set needs at least 2 classes"));
    }
    let mut picked = Vec::with_capacity(vocab.len());
    for &id in &vocab.token_ids {
        let id = id as usize;
        if id >= logits.len() {
            return Err(shape_err!(
                "class token id {id} outside logit width {}",
                logits.len()
            ));
        }
        picked.push(logits[id]);
    }
    softmax(&picked)
}

/// Restricted log-probabilities as a graph node `[1, |C|]`.
pub fn restricted_log_probs_graph(
    g: &mut Graph,
    logits: NodeId,
    vocab: &ClassVocabulary,
) -> Result<NodeId> {
    if vocab.len() < 2 {
        return Err(config_err!("restricted set needs at least 2 classes"));
    }
    let idx: Vec<usize> = vocab.token_ids.iter().map(|&i| i as usize).collect();
    let picked = g.gather_cols(logits, &idx)?;
    Ok(g.log_softmax_rows(picked))
}

/// Cross-entropy of the restricted distribution against the true class.
pub fn fusion_classification_loss(probabilities: &[f64], true_class: usize) -> Result<f64> {
    if true_class >= probabilities.len() {
        return Err(shape_err!(
            "class index {true_class} outside {} classes",
            probabilities.len()
        ));
    }
    Ok(-math::ln(probabilities[true_class]))
}

/// Graph form of the restricted cross-entropy at the answer position.
pub fn fusion_loss_graph(
    g: &mut Graph,
    logits: NodeId,
    vocab: &ClassVocabulary,
    true_class: usize,
) -> Result<NodeId> {
    if true_class >= vocab.len() {
        return Err(shape_err!(
            "class index {true_class} outside {} classes",
            vocab.len()
        ));
    }
    let logp = restricted_log_probs_graph(g, logits, vocab)?;
    let mut pick = Tensor::zeros(1, vocab.len());
    pick.set(0, true_class, 1.0);
    let picked = g.weighted_sum(logp, pick)?;
    Ok(g.scale(picked, -1.0))
}
