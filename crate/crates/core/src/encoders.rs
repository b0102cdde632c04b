//! Toy stand-ins for the vision and text backbones, projection heads into
//! the shared space, and LoRA adapters.
//!
//! Both encoders share one structure: token embedding (patch projection or
//! id lookup), a learned class token, positional embeddings, and a small
//! stack of attention+FFN mixing blocks. Every linear layer inside a mixing
//! block can carry a low-rank adapter; adapters start at an exact identity
//! (up factor zero). All parameters live in a [`ParamStore`] so stages can
//! freeze and thaw whole components and checkpoints can serialize one flat
//! list.

use alloc::string::{String, ToString};
use alloc::vec::Vec;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::ImageTensor;
use crate::error::Result;
use crate::graph::{Graph, NodeId};
use crate::losses::BundleNodes;
use crate::numerics::{derive_seed, seeded_rng};
use crate::tensor::Tensor;
use crate::vocab::Vocabulary;
use crate::{config_err, shape_err, CoreError};

/// Which part of the pipeline a parameter belongs to; stages freeze and thaw
/// whole components.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Component {
    VisionBackbone,
    VisionAdapter,
    VisionProjection,
    TextBackbone,
    TextAdapter,
    TextProjection,
    MlmHead,
    RefinementClassifier,
    DecoderBackbone,
    DecoderAdapter,
    FusionProjector,
    SpecialTokens,
}

impl Component {
    pub const ALL: [Component; 12] = [
        Component::VisionBackbone,
        Component::VisionAdapter,
        Component::VisionProjection,
        Component::TextBackbone,
        Component::TextAdapter,
        Component::TextProjection,
        Component::MlmHead,
        Component::RefinementClassifier,
        Component::DecoderBackbone,
        Component::DecoderAdapter,
        Component::FusionProjector,
        Component::SpecialTokens,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            Component::VisionBackbone => "vision_backbone",
            Component::VisionAdapter => "vision_adapter",
            Component::VisionProjection => "vision_projection",
            Component::TextBackbone => "text_backbone",
            Component::TextAdapter => "text_adapter",
            Component::TextProjection => "text_projection",
            Component::MlmHead => "mlm_head",
            Component::RefinementClassifier => "refinement_classifier",
            Component::DecoderBackbone => "decoder_backbone",
            Component::DecoderAdapter => "decoder_adapter",
            Component::FusionProjector => "fusion_projector",
            Component::SpecialTokens => "special_tokens",
        }
    }

    /// Backbone components are never trained after construction.
    pub fn is_backbone(&self) -> bool {
        matches!(
            self,
            Component::VisionBackbone | Component::TextBackbone | Component::DecoderBackbone
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamId(usize);

impl ParamId {
    /// Stable index into the owning store's flat parameter list.
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Param {
    pub name: String,
    pub value: Tensor,
    pub trainable: bool,
    pub component: Component,
}

/// Flat, ordered parameter registry.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct ParamStore {
    params: Vec<Param>,
}

impl ParamStore {
    pub fn new() -> Self {
        ParamStore { params: Vec::new() }
    }

    pub fn add(&mut self, name: String, value: Tensor, component: Component) -> ParamId {
        self.params.push(Param {
            name,
            value,
            trainable: false,
            component,
        });
        ParamId(self.params.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn param(&self, id: ParamId) -> &Param {
        &self.params[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Tensor {
        &self.params[id.0].value
    }

    pub fn set_value(&mut self, id: ParamId, value: Tensor) -> Result<()> {
        if !self.params[id.0].value.same_shape(&value) {
            return Err(shape_err!(
                "parameter '{}' shape mismatch on assignment",
                self.params[id.0].name
            ));
        }
        self.params[id.0].value = value;
        Ok(())
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Param)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (ParamId, &mut Param)> {
        self.params
            .iter_mut()
            .enumerate()
            .map(|(i, p)| (ParamId(i), p))
    }

    pub fn freeze_all(&mut self) {
        for p in &mut self.params {
            p.trainable = false;
        }
    }

    /// Marks exactly the given components trainable, everything else frozen.
    pub fn set_trainable_components(&mut self, components: &[Component]) {
        for p in &mut self.params {
            p.trainable = components.contains(&p.component);
        }
    }

    pub fn trainable_components(&self) -> Vec<Component> {
        let mut out: Vec<Component> = Vec::new();
        for p in &self.params {
            if p.trainable && !out.contains(&p.component) {
                out.push(p.component);
            }
        }
        out
    }

    /// Inserts every parameter as a graph leaf (gradients only for trainable
    /// ones) and returns the id-aligned node table.
    pub fn bind(&self, g: &mut Graph) -> Binding {
        let nodes = self
            .params
            .iter()
            .map(|p| g.leaf(p.value.clone(), p.trainable))
            .collect();
        Binding { nodes }
    }

    /// FNV-1a over the raw bit patterns of the selected components.
    pub fn fingerprint(&self, filter: impl Fn(&Param) -> bool) -> u64 {
        let mut hash: u64 = 0xcbf2_9ce4_8422_2325;
        for p in &self.params {
            if !filter(p) {
                continue;
            }
            for &v in p.value.data() {
                for byte in v.to_bits().to_le_bytes() {
                    hash ^= byte as u64;
                    hash = hash.wrapping_mul(0x1000_0000_01b3);
                }
            }
        }
        hash
    }
}

/// Node table produced by [`ParamStore::bind`].
pub struct Binding {
    nodes: Vec<NodeId>,
}

impl Binding {
    pub fn node(&self, id: ParamId) -> NodeId {
        self.nodes[id.0]
    }
}

/// Low-rank adapter factors of one linear layer: the adapted output is
/// `base(x) + (alpha/r) * (x down^T) up^T` with `up` zero-initialized.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LoraAdapter {
    pub down: ParamId,
    pub up: ParamId,
    pub rank: usize,
    pub alpha: f64,
}

impl LoraAdapter {
    /// `rank * (d_in + d_out)` trainable scalars.
    pub fn parameter_count(d_in: usize, d_out: usize, rank: usize) -> usize {
        rank * (d_in + d_out)
    }
}

/// Affine layer `x W^T + b` with an optional low-rank adapter.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
    pub adapter: Option<LoraAdapter>,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        component: Component,
    ) -> Self {
        let scale = 1.0 / crate::math::sqrt(in_dim as f64);
        let weight = store.add(
            alloc::format!("{name}.weight"),
            gaussian(rng, out_dim, in_dim, scale),
            component,
        );
        let bias = store.add(
            alloc::format!("{name}.bias"),
            Tensor::zeros(1, out_dim),
            component,
        );
        Linear {
            weight,
            bias,
            adapter: None,
            in_dim,
            out_dim,
        }
    }

    /// Attaches a zero-initialized adapter; at construction the adapted layer
    /// equals the base layer exactly.
    pub fn with_adapter(
        mut self,
        store: &mut ParamStore,
        lora_rng: &mut ChaCha8Rng,
        name: &str,
        rank: usize,
        alpha: f64,
        component: Component,
    ) -> Result<Self> {
        if rank == 0 || rank > self.in_dim.min(self.out_dim) {
            return Err(config_err!(
                "adapter rank {rank} invalid for {}x{} layer '{name}'",
                self.out_dim,
                self.in_dim
            ));
        }
        let scale = 1.0 / crate::math::sqrt(self.in_dim as f64);
        let down = store.add(
            alloc::format!("{name}.lora_down"),
            gaussian(lora_rng, rank, self.in_dim, scale),
            component,
        );
        let up = store.add(
            alloc::format!("{name}.lora_up"),
            Tensor::zeros(self.out_dim, rank),
            component,
        );
        self.adapter = Some(LoraAdapter {
            down,
            up,
            rank,
            alpha,
        });
        Ok(self)
    }

    /// `x [T, in] -> [T, out]`, adding the adapter path when present.
    pub fn forward(&self, g: &mut Graph, bind: &Binding, x: NodeId) -> Result<NodeId> {
        let base = g.matmul_nt(x, bind.node(self.weight))?;
        let mut out = g.add_row_broadcast(base, bind.node(self.bias))?;
        if let Some(adapter) = &self.adapter {
            let mid = g.matmul_nt(x, bind.node(adapter.down))?;
            let delta = g.matmul_nt(mid, bind.node(adapter.up))?;
            let delta = g.scale(delta, adapter.alpha / adapter.rank as f64);
            out = g.add(out, delta)?;
        }
        Ok(out)
    }

    /// Base path only, ignoring any adapter.
    pub fn forward_base(&self, g: &mut Graph, bind: &Binding, x: NodeId) -> Result<NodeId> {
        let base = g.matmul_nt(x, bind.node(self.weight))?;
        g.add_row_broadcast(base, bind.node(self.bias))
    }

    /// Trainable scalars contributed by the adapter (zero when absent).
    pub fn adapter_parameter_count(&self) -> usize {
        self.adapter
            .map(|a| LoraAdapter::parameter_count(self.in_dim, self.out_dim, a.rank))
            .unwrap_or(0)
    }
}

/// Value-level application of a linear layer to a matrix.
pub fn linear_apply(store: &ParamStore, layer: &Linear, x: &Tensor) -> Result<Tensor> {
    let mut g = Graph::new();
    let bind = store.bind(&mut g);
    let xn = g.constant(x.clone());
    let out = layer.forward(&mut g, &bind, xn)?;
    Ok(g.value(out).clone())
}

fn gaussian(rng: &mut ChaCha8Rng, rows: usize, cols: usize, std: f64) -> Tensor {
    // Box-Muller on the seeded stream
    let mut data = Vec::with_capacity(rows * cols);
    while data.len() < rows * cols {
        let u1: f64 = rng.gen_range(f64::EPSILON..1.0);
        let u2: f64 = rng.gen_range(0.0..1.0);
        let r = crate::math::sqrt(-2.0 * crate::math::ln(u1));
        let theta = 2.0 * crate::math::PI * u2;
        data.push(r * crate::math::cos(theta) * std);
        if data.len() < rows * cols {
            data.push(r * libm::sin(theta) * std);
        }
    }
    Tensor::from_vec(rows, cols, data).expect("sized data")
}

/// One attention + feed-forward mixing block with residual connections.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MixerBlock {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub o: Linear,
    pub ff1: Linear,
    pub ff2: Linear,
    dim: usize,
}

/// Adapter request for the linears inside mixing blocks.
#[derive(Debug, Clone, Copy)]
pub struct AdapterSpec {
    pub component: Component,
    pub rank: usize,
    pub alpha: f64,
}

impl MixerBlock {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        lora_rng: &mut ChaCha8Rng,
        prefix: &str,
        dim: usize,
        component: Component,
        adapter: Option<AdapterSpec>,
    ) -> Result<Self> {
        let ff_dim = 2 * dim;
        let make = |store: &mut ParamStore,
                        rng: &mut ChaCha8Rng,
                        lora_rng: &mut ChaCha8Rng,
                        name: &str,
                        in_dim: usize,
                        out_dim: usize|
         -> Result<Linear> {
            let full = alloc::format!("{prefix}.{name}");
            let layer = Linear::new(store, rng, &full, in_dim, out_dim, component);
            match adapter {
                Some(spec) => layer.with_adapter(
                    store,
                    lora_rng,
                    &full,
                    spec.rank,
                    spec.alpha,
                    spec.component,
                ),
                None => Ok(layer),
            }
        };
        Ok(MixerBlock {
            q: make(store, rng, lora_rng, "attn_q", dim, dim)?,
            k: make(store, rng, lora_rng, "attn_k", dim, dim)?,
            v: make(store, rng, lora_rng, "attn_v", dim, dim)?,
            o: make(store, rng, lora_rng, "attn_o", dim, dim)?,
            ff1: make(store, rng, lora_rng, "ff1", dim, ff_dim)?,
            ff2: make(store, rng, lora_rng, "ff2", ff_dim, dim)?,
            dim,
        })
    }

    pub fn forward(
        &self,
        g: &mut Graph,
        bind: &Binding,
        x: NodeId,
        causal: bool,
    ) -> Result<NodeId> {
        let t = g.value(x).rows();
        let q = self.q.forward(g, bind, x)?;
        let k = self.k.forward(g, bind, x)?;
        let v = self.v.forward(g, bind, x)?;
        let logits = g.matmul_nt(q, k)?;
        let logits = g.scale(logits, 1.0 / crate::math::sqrt(self.dim as f64));
        let attn = if causal {
            let mut mask = Tensor::zeros(t, t);
            for r in 0..t {
                for c in 0..=r {
                    mask.set(r, c, 1.0);
                }
            }
            g.softmax_rows_masked(logits, mask)?
        } else {
            g.softmax_rows(logits)
        };
        let mixed = g.matmul(attn, v)?;
        let mixed = self.o.forward(g, bind, mixed)?;
        let x = g.add(x, mixed)?;
        let h = self.ff1.forward(g, bind, x)?;
        let h = g.tanh(h);
        let h = self.ff2.forward(g, bind, h)?;
        g.add(x, h)
    }

    pub fn linears(&self) -> [&Linear; 6] {
        [&self.q, &self.k, &self.v, &self.o, &self.ff1, &self.ff2]
    }
}

/// Two-layer projection head into the shared space (hidden width `2 d`).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProjectionHead {
    pub l1: Linear,
    pub l2: Linear,
}

impl ProjectionHead {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        component: Component,
    ) -> Self {
        let hidden = 2 * out_dim;
        ProjectionHead {
            l1: Linear::new(
                store,
                rng,
                &alloc::format!("{name}.l1"),
                in_dim,
                hidden,
                component,
            ),
            l2: Linear::new(
                store,
                rng,
                &alloc::format!("{name}.l2"),
                hidden,
                out_dim,
                component,
            ),
        }
    }

    pub fn forward(&self, g: &mut Graph, bind: &Binding, x: NodeId) -> Result<NodeId> {
        let h = self.l1.forward(g, bind, x)?;
        let h = g.tanh(h);
        self.l2.forward(g, bind, h)
    }
}

/// Splits a `[1+T, d]` token matrix into class and sequence nodes.
pub fn split_bundle(g: &mut Graph, tokens: NodeId) -> Result<BundleNodes> {
    let rows = g.value(tokens).rows();
    if rows < 2 {
        return Err(shape_err!("token matrix needs a class token plus >= 1 local token"));
    }
    Ok(BundleNodes {
        cls: g.slice_rows(tokens, 0, 1)?,
        seq: g.slice_rows(tokens, 1, rows)?,
    })
}

/// Vision encoder geometry and sizing.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct VisionSpec {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub patch_size: usize,
    pub native_dim: usize,
    pub latent_dim: usize,
    pub depth: usize,
    pub seed: u64,
}

impl Default for VisionSpec {
    fn default() -> Self {
        VisionSpec {
            channels: 3,
            height: 16,
            width: 16,
            patch_size: 4,
            native_dim: 48,
            latent_dim: 16,
            depth: 2,
            seed: 1,
        }
    }
}

impl VisionSpec {
    pub fn validate(&self) -> Result<()> {
        if self.patch_size == 0
            || self.height % self.patch_size != 0
            || self.width % self.patch_size != 0
        {
            return Err(config_err!(
                "patch size {} must divide {}x{}",
                self.patch_size,
                self.height,
                self.width
            ));
        }
        if self.latent_dim < 2 || self.native_dim < 2 || self.depth == 0 || self.channels == 0 {
            return Err(config_err!("vision spec has a degenerate dimension"));
        }
        Ok(())
    }

    /// Number of patch tokens K.
    pub fn token_count(&self) -> usize {
        (self.height / self.patch_size) * (self.width / self.patch_size)
    }

    pub fn patch_dim(&self) -> usize {
        self.channels * self.patch_size * self.patch_size
    }
}

/// Text encoder sizing.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TextSpec {
    pub vocab_size: usize,
    pub max_len: usize,
    pub native_dim: usize,
    pub latent_dim: usize,
    pub depth: usize,
    pub seed: u64,
}

impl Default for TextSpec {
    fn default() -> Self {
        TextSpec {
            vocab_size: 0, // filled from the vocabulary
            max_len: 32,
            native_dim: 48,
            latent_dim: 16,
            depth: 2,
            seed: 2,
        }
    }
}

impl TextSpec {
    pub fn validate(&self) -> Result<()> {
        if self.vocab_size < 5 || self.max_len == 0 || self.latent_dim < 2 || self.depth == 0 {
            return Err(config_err!("text spec has a degenerate dimension"));
        }
        Ok(())
    }
}

/// Patch-embedding vision encoder with mixing blocks.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VisionEncoder {
    pub spec: VisionSpec,
    pub patch_embed: Linear,
    pub cls: ParamId,
    pub pos: ParamId,
    pub blocks: Vec<MixerBlock>,
}

impl VisionEncoder {
    pub fn new(store: &mut ParamStore, spec: VisionSpec, adapter_rank: usize, alpha: f64) -> Result<Self> {
        spec.validate()?;
        let mut rng = seeded_rng(spec.seed);
        let mut lora_rng = seeded_rng(derive_seed(spec.seed, &[0x10ca]));
        let patch_embed = Linear::new(
            store,
            &mut rng,
            "vision.patch_embed",
            spec.patch_dim(),
            spec.native_dim,
            Component::VisionBackbone,
        );
        let cls = store.add(
            "vision.cls".to_string(),
            gaussian(&mut rng, 1, spec.native_dim, 0.02),
            Component::VisionBackbone,
        );
        let pos = store.add(
            "vision.pos".to_string(),
            gaussian(&mut rng, 1 + spec.token_count(), spec.native_dim, 0.02),
            Component::VisionBackbone,
        );
        let adapter = (adapter_rank > 0).then_some(AdapterSpec {
            component: Component::VisionAdapter,
            rank: adapter_rank,
            alpha,
        });
        let blocks = (0..spec.depth)
            .map(|b| {
                MixerBlock::new(
                    store,
                    &mut rng,
                    &mut lora_rng,
                    &alloc::format!("vision.block{b}"),
                    spec.native_dim,
                    Component::VisionBackbone,
                    adapter,
                )
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(VisionEncoder {
            spec,
            patch_embed,
            cls,
            pos,
            blocks,
        })
    }

    fn patches(&self, image: &ImageTensor) -> Result<Tensor> {
        image.validate()?;
        if image.channels != self.spec.channels
            || image.height != self.spec.height
            || image.width != self.spec.width
        {
            return Err(shape_err!(
                "image {}x{}x{} does not match encoder input {}x{}x{}",
                image.channels,
                image.height,
                image.width,
                self.spec.channels,
                self.spec.height,
                self.spec.width
            ));
        }
        let p = self.spec.patch_size;
        let grid_h = self.spec.height / p;
        let grid_w = self.spec.width / p;
        let mut out = Tensor::zeros(grid_h * grid_w, self.spec.patch_dim());
        for gy in 0..grid_h {
            for gx in 0..grid_w {
                let row = gy * grid_w + gx;
                let mut col = 0;
                for c in 0..image.channels {
                    for dy in 0..p {
                        for dx in 0..p {
                            out.set(row, col, image.get(c, gy * p + dy, gx * p + dx));
                            col += 1;
                        }
                    }
                }
            }
        }
        Ok(out)
    }

    /// Native (pre-projection) tokens `[1+K, native_dim]`.
    pub fn encode_native(
        &self,
        g: &mut Graph,
        bind: &Binding,
        image: &ImageTensor,
    ) -> Result<NodeId> {
        let patches = self.patches(image)?;
        let patches = g.constant(patches);
        let embedded = self.patch_embed.forward(g, bind, patches)?;
        let cls = bind.node(self.cls);
        let tokens = g.concat_rows(&[cls, embedded])?;
        let tokens = g.add(tokens, bind.node(self.pos))?;
        let mut x = tokens;
        for block in &self.blocks {
            x = block.forward(g, bind, x, false)?;
        }
        Ok(x)
    }
}

/// Token-embedding text encoder with mixing blocks.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TextEncoder {
    pub spec: TextSpec,
    pub embedding: ParamId,
    pub cls: ParamId,
    pub pos: ParamId,
    pub blocks: Vec<MixerBlock>,
}

impl TextEncoder {
    pub fn new(store: &mut ParamStore, spec: TextSpec, adapter_rank: usize, alpha: f64) -> Result<Self> {
        spec.validate()?;
        let mut rng = seeded_rng(spec.seed);
        let mut lora_rng = seeded_rng(derive_seed(spec.seed, &[0x10ca]));
        let embedding = store.add(
            "text.embedding".to_string(),
            gaussian(&mut rng, spec.vocab_size, spec.native_dim, 0.02),
            Component::TextBackbone,
        );
        let cls = store.add(
            "text.cls".to_string(),
            gaussian(&mut rng, 1, spec.native_dim, 0.02),
            Component::TextBackbone,
        );
        let pos = store.add(
            "text.pos".to_string(),
            gaussian(&mut rng, 1 + spec.max_len, spec.native_dim, 0.02),
            Component::TextBackbone,
        );
        let adapter = (adapter_rank > 0).then_some(AdapterSpec {
            component: Component::TextAdapter,
            rank: adapter_rank,
            alpha,
        });
        let blocks = (0..spec.depth)
            .map(|b| {
                MixerBlock::new(
                    store,
                    &mut rng,
                    &mut lora_rng,
                    &alloc::format!("text.block{b}"),
                    spec.native_dim,
                    Component::TextBackbone,
                    adapter,
                )
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(TextEncoder {
            spec,
            embedding,
            cls,
            pos,
            blocks,
        })
    }

    /// Native tokens `[1+L, native_dim]` for an id sequence.
    pub fn encode_native(&self, g: &mut Graph, bind: &Binding, ids: &[u32]) -> Result<NodeId> {
        if ids.is_empty() {
            return Err(shape_err!("text encoder needs at least one token id"));
        }
        if ids.len() > self.spec.max_len {
            return Err(shape_err!(
                "sequence of {} tokens exceeds maximum {}",
                ids.len(),
                self.spec.max_len
            ));
        }
        for &id in ids {
            if id as usize >= self.spec.vocab_size {
                return Err(CoreError::Vocabulary(alloc::format!(
                    "id {id} out of vocabulary (size {})",
                    self.spec.vocab_size
                )));
            }
        }
        let idx: Vec<usize> = ids.iter().map(|&i| i as usize).collect();
        let looked_up = g.gather_rows(bind.node(self.embedding), &idx)?;
        let tokens = g.concat_rows(&[bind.node(self.cls), looked_up])?;
        let pos = g.slice_rows(bind.node(self.pos), 0, 1 + ids.len())?;
        let tokens = g.add(tokens, pos)?;
        let mut x = tokens;
        for block in &self.blocks {
            x = block.forward(g, bind, x, false)?;
        }
        Ok(x)
    }
}

/// Per-component parameter counts.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComponentCount {
    pub component: String,
    pub trainable: usize,
    pub total: usize,
}

/// Trainable/total breakdown used to assert the adapter-only contract.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParameterReport {
    pub components: Vec<ComponentCount>,
    pub trainable: usize,
    pub total: usize,
    pub trainable_fraction: f64,
}

/// Counts trainable and total scalars per component.
pub fn trainable_parameter_report(store: &ParamStore) -> ParameterReport {
    let mut components: Vec<ComponentCount> = Component::ALL
        .iter()
        .map(|c| ComponentCount {
            component: c.name().to_string(),
            trainable: 0,
            total: 0,
        })
        .collect();
    let mut trainable = 0;
    let mut total = 0;
    for (_, p) in store.iter() {
        let idx = Component::ALL
            .iter()
            .position(|c| c == &p.component)
            .expect("component listed");
        let n = p.value.len();
        components[idx].total += n;
        total += n;
        if p.trainable {
            components[idx].trainable += n;
            trainable += n;
        }
    }
    components.retain(|c| c.total > 0);
    ParameterReport {
        components,
        trainable,
        total,
        trainable_fraction: if total > 0 {
            trainable as f64 / total as f64
        } else {
            0.0
        },
    }
}

/// Builds the text spec for a vocabulary.
pub fn text_spec_for(vocab: &Vocabulary, spec: TextSpec) -> TextSpec {
    TextSpec {
        vocab_size: vocab.len(),
        ..spec
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn store_with_linear(rank: usize) -> (ParamStore, Linear) {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut lora_rng = ChaCha8Rng::seed_from_u64(4);
        let layer = Linear::new(&mut store, &mut rng, "test", 6, 4, Component::VisionBackbone);
        let layer = if rank > 0 {
            layer
                .with_adapter(
                    &mut store,
                    &mut lora_rng,
                    "test",
                    rank,
                    rank as f64,
                    Component::VisionAdapter,
                )
                .unwrap()
        } else {
            layer
        };
        (store, layer)
    }

    #[test]
    fn zero_init_adapter_is_identity() {
        let (store_plain, plain) = store_with_linear(0);
        let (store_lora, lora) = store_with_linear(3);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..100 {
            let x = Tensor::from_vec(
                2,
                6,
                (0..12).map(|_| rng.gen_range(-2.0..2.0)).collect(),
            )
            .unwrap();
            let a = linear_apply(&store_plain, &plain, &x).unwrap();
            let b = linear_apply(&store_lora, &lora, &x).unwrap();
            for (x, y) in a.data().iter().zip(b.data()) {
                assert!((x - y).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn adapter_rank_bounds_checked() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut lora_rng = ChaCha8Rng::seed_from_u64(4);
        let layer = Linear::new(&mut store, &mut rng, "t", 6, 4, Component::VisionBackbone);
        assert!(layer
            .clone()
            .with_adapter(&mut store, &mut lora_rng, "t", 5, 5.0, Component::VisionAdapter)
            .is_err());
        assert!(layer
            .with_adapter(&mut store, &mut lora_rng, "t", 0, 0.0, Component::VisionAdapter)
            .is_err());
    }

    #[test]
    fn adapter_parameter_count_closed_form() {
        let (_, layer) = store_with_linear(3);
        assert_eq!(layer.adapter_parameter_count(), 3 * (6 + 4));
    }

    #[test]
    fn adapter_gradients_match_finite_differences() {
        let (mut store, layer) = store_with_linear(2);
        // train only the adapter factors
        store.set_trainable_components(&[Component::VisionAdapter]);
        // nonzero up factor so the gradient is informative
        let up_id = layer.adapter.unwrap().up;
        let mut up = store.value(up_id).clone();
        for (i, v) in up.data_mut().iter_mut().enumerate() {
            *v = 0.05 * (i as f64 + 1.0);
        }
        store.set_value(up_id, up).unwrap();

        let x = Tensor::from_vec(2, 6, (0..12).map(|i| (i as f64) * 0.1 - 0.5).collect()).unwrap();
        let weight_w = Tensor::from_vec(2, 4, (0..8).map(|i| 0.3 - 0.07 * i as f64).collect()).unwrap();

        let loss_of = |store: &ParamStore| -> f64 {
            let mut g = Graph::new();
            let bind = store.bind(&mut g);
            let xn = g.constant(x.clone());
            let out = layer.forward(&mut g, &bind, xn).unwrap();
            let t = g.tanh(out);
            let l = g.weighted_sum(t, weight_w.clone()).unwrap();
            g.scalar(l)
        };

        let mut g = Graph::new();
        let bind = store.bind(&mut g);
        let xn = g.constant(x.clone());
        let out = layer.forward(&mut g, &bind, xn).unwrap();
        let t = g.tanh(out);
        let l = g.weighted_sum(t, weight_w.clone()).unwrap();
        let grads = g.backward(l).unwrap();

        let adapter = layer.adapter.unwrap();
        for pid in [adapter.down, adapter.up] {
            let analytic = grads[bind.node(pid).index()].clone().unwrap();
            let h = 1e-5;
            for entry in 0..analytic.len() {
                let mut plus = store.clone();
                let mut v = plus.value(pid).clone();
                v.data_mut()[entry] += h;
                plus.set_value(pid, v).unwrap();
                let mut minus = store.clone();
                let mut v = minus.value(pid).clone();
                v.data_mut()[entry] -= h;
                minus.set_value(pid, v).unwrap();
                let numeric = (loss_of(&plus) - loss_of(&minus)) / (2.0 * h);
                let a = analytic.data()[entry];
                let denom = a.abs().max(numeric.abs()).max(1e-6);
                assert!(
                    (a - numeric).abs() / denom < 1e-4,
                    "param {pid:?} entry {entry}: {a} vs {numeric}"
                );
            }
        }
    }

    #[test]
    fn vision_encoder_shapes_and_determinism() {
        let mut store = ParamStore::new();
        let spec = VisionSpec::default();
        let enc = VisionEncoder::new(&mut store, spec, 8, 8.0).unwrap();
        let mut img = ImageTensor::zeros(3, 16, 16);
        for (i, v) in img.data.iter_mut().enumerate() {
            *v = (i % 17) as f64 * 0.05;
        }
        let run = |store: &ParamStore| {
            let mut g = Graph::new();
            let bind = store.bind(&mut g);
            let out = enc.encode_native(&mut g, &bind, &img).unwrap();
            g.value(out).clone()
        };
        let a = run(&store);
        let b = run(&store);
        assert_eq!(a, b);
        assert_eq!(a.rows(), 1 + spec.token_count());
        assert_eq!(a.cols(), spec.native_dim);

        // same seed, fresh store: identical weights
        let mut store2 = ParamStore::new();
        let enc2 = VisionEncoder::new(&mut store2, spec, 8, 8.0).unwrap();
        assert_eq!(store.param(enc.cls).value, store2.param(enc2.cls).value);
    }

    #[test]
    fn vision_encoder_rejects_wrong_shape() {
        let mut store = ParamStore::new();
        let enc = VisionEncoder::new(&mut store, VisionSpec::default(), 0, 0.0).unwrap();
        let img = ImageTensor::zeros(1, 16, 16);
        let mut g = Graph::new();
        let bind = store.bind(&mut g);
        assert!(enc.encode_native(&mut g, &bind, &img).is_err());
    }

    #[test]
    fn text_encoder_contract() {
        let mut store = ParamStore::new();
        let spec = TextSpec {
            vocab_size: 50,
            max_len: 10,
            native_dim: 16,
            latent_dim: 8,
            depth: 2,
            seed: 5,
        };
        let enc = TextEncoder::new(&mut store, spec, 4, 4.0).unwrap();
        let mut g = Graph::new();
        let bind = store.bind(&mut g);
        let out = enc.encode_native(&mut g, &bind, &[3, 7, 9]).unwrap();
        assert_eq!(g.value(out).rows(), 4);
        assert_eq!(g.value(out).cols(), 16);

        assert!(enc.encode_native(&mut g, &bind, &[]).is_err());
        assert!(enc.encode_native(&mut g, &bind, &[50]).is_err());
        assert!(enc
            .encode_native(&mut g, &bind, &[0; 11])
            .is_err());
    }

    #[test]
    fn parameter_report_counts_lora_closed_form() {
        let mut store = ParamStore::new();
        let spec = VisionSpec {
            native_dim: 24,
            ..VisionSpec::default()
        };
        let enc = VisionEncoder::new(&mut store, spec, 8, 8.0).unwrap();
        store.set_trainable_components(&[Component::VisionAdapter]);
        let report = trainable_parameter_report(&store);
        // 6 adapted linears per block: 4 square (24x24) + ff 24->48 + 48->24
        let per_block: usize = enc.blocks[0]
            .linears()
            .iter()
            .map(|l| l.adapter_parameter_count())
            .sum();
        let expected_block = 4 * 8 * (24 + 24) + 8 * (24 + 48) + 8 * (48 + 24);
        assert_eq!(per_block, expected_block);
        assert_eq!(report.trainable, spec.depth * expected_block);
        let backbone = report
            .components
            .iter()
            .find(|c| c.component == "vision_backbone")
            .unwrap();
        assert_eq!(backbone.trainable, 0);
    }

    #[test]
    fn fingerprint_tracks_changes() {
        let mut store = ParamStore::new();
        let _ = VisionEncoder::new(&mut store, VisionSpec::default(), 4, 4.0).unwrap();
        let before = store.fingerprint(|p| p.component == Component::VisionBackbone);
        let adapter_fp = store.fingerprint(|p| p.component == Component::VisionAdapter);
        // mutating an adapter param must not move the backbone fingerprint
        let (id, _) = store
            .iter()
            .find(|(_, p)| p.component == Component::VisionAdapter)
            .unwrap();
        let mut v = store.value(id).clone();
        v.data_mut()[0] += 1.0;
        store.set_value(id, v).unwrap();
        assert_eq!(
            before,
            store.fingerprint(|p| p.component == Component::VisionBackbone)
        );
        assert_ne!(
            adapter_fp,
            store.fingerprint(|p| p.component == Component::VisionAdapter)
        );
    }
}
