//! Masked-language-model machinery for the knowledge-injection stage.
//!
//! Corpus documents (pre-curated risk-disease text) are tokenized into
//! windows; positions are masked with the 80/10/10 mask/random/keep recipe;
//! the loss is mean cross-entropy over masked positions only.

use alloc::string::String;
use alloc::vec::Vec;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::encoders::{Binding, Linear, TextEncoder};
use crate::error::Result;
use crate::graph::{Graph, NodeId};
use crate::vocab::{Vocabulary, FIRST_WORD, MASK};
use crate::{domain_err, shape_err};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ReviewStatus {
    Vetted,
    Unvetted,
}

/// One curated corpus document: a global summary plus per-risk-factor
/// paragraphs, with its review status.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusDocument {
    pub id: String,
    pub global_summary: String,
    pub risk_sections: Vec<RiskSection>,
    pub review_status: ReviewStatus,
    /// Citation string for the retrieval source.
    pub source: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RiskSection {
    pub risk_factor: String,
    pub text: String,
}

impl CorpusDocument {
    pub fn validate(&self) -> Result<()> {
        let empty_summary = self.global_summary.trim().is_empty();
        let empty_sections = self
            .risk_sections
            .iter()
            .all(|s| s.text.trim().is_empty());
        if empty_summary && (self.risk_sections.is_empty() || empty_sections) {
            return Err(domain_err!(
                "document '{}' has neither summary nor risk sections",
                self.id
            ));
        }
        Ok(())
    }

    /// Full text: summary then sections, in order.
    pub fn full_text(&self) -> String {
        let mut out = self.global_summary.clone();
        for section in &self.risk_sections {
            out.push(' ');
            out.push_str(&section.text);
        }
        out
    }
}

/// One masked training example. `original_ids` is the unmasked sequence;
/// only the ids at `mask_positions` ever contribute to the loss.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MlmExample {
    pub input_ids: Vec<u32>,
    pub mask_positions: Vec<usize>,
    pub original_ids: Vec<u32>,
}

impl MlmExample {
    pub fn validate(&self) -> Result<()> {
        if self.input_ids.len() != self.original_ids.len() {
            return Err(shape_err!("input/original length mismatch"));
        }
        if self.mask_positions.iter().any(|&p| p >= self.input_ids.len()) {
            return Err(shape_err!("mask position out of range"));
        }
        Ok(())
    }
}

/// Tokenizes a document and splits it into windows of at most `max_len`.
pub fn document_windows(
    doc: &CorpusDocument,
    vocab: &Vocabulary,
    max_len: usize,
) -> Vec<Vec<u32>> {
    let ids = vocab.tokenize(&doc.full_text());
    ids.chunks(max_len.max(2)).map(|c| c.to_vec()).collect()
}

/// Masks token windows: every position is selected with probability
/// `mask_rate` (at least one per retained window); selected positions become
/// the mask id 80% of the time, a random word id 10%, and stay unchanged 10%.
/// Windows shorter than 2 tokens are skipped with a warning.
pub fn make_mlm_batch(
    windows: &[Vec<u32>],
    mask_rate: f64,
    rng: &mut ChaCha8Rng,
    vocab: &Vocabulary,
) -> Result<Vec<MlmExample>> {
    if !(mask_rate > 0.0 && mask_rate < 1.0) {
        return Err(domain_err!("mask_rate must be in (0,1), got {mask_rate}"));
    }
    let vocab_len = vocab.len() as u32;
    let mut out = Vec::new();
    for window in windows {
        if window.len() < 2 {
            log::warn!("skipping window of {} tokens", window.len());
            continue;
        }
        vocab.validate_ids(window)?;
        let mut input = window.clone();
        let mut positions: Vec<usize> = (0..window.len())
            .filter(|_| rng.gen_bool(mask_rate))
            .collect();
        if positions.is_empty() {
            positions.push(rng.gen_range(0..window.len()));
        }
        for &p in &positions {
            let roll: f64 = rng.gen_range(0.0..1.0);
            if roll < 0.8 {
                input[p] = MASK;
            } else if roll < 0.9 {
                input[p] = rng.gen_range(FIRST_WORD..vocab_len);
            } // else keep the original token
        }
        out.push(MlmExample {
            input_ids: input,
            mask_positions: positions,
            original_ids: window.clone(),
        });
    }
    Ok(out)
}

/// Mean cross-entropy over the masked positions of a batch, computed through
/// the text encoder and the token-prediction head.
pub fn mlm_loss_graph(
    g: &mut Graph,
    bind: &Binding,
    encoder: &TextEncoder,
    head: &Linear,
    examples: &[MlmExample],
) -> Result<NodeId> {
    let total_masked: usize = examples.iter().map(|e| e.mask_positions.len()).sum();
    if total_masked == 0 {
        return Err(domain_err!("batch has zero masked positions"));
    }
    let mut acc: Option<NodeId> = None;
    for example in examples {
        example.validate()?;
        let hidden = encoder.encode_native(g, bind, &example.input_ids)?;
        // +1 offsets past the prepended class token
        let rows: Vec<usize> = example.mask_positions.iter().map(|&p| p + 1).collect();
        let picked = g.gather_rows(hidden, &rows)?;
        let logits = head.forward(g, bind, picked)?;
        let logp = g.log_softmax_rows(logits);
        let mut weights = crate::tensor::Tensor::zeros(rows.len(), head.out_dim);
        for (r, &p) in example.mask_positions.iter().enumerate() {
            let truth = example.original_ids[p] as usize;
            if truth >= head.out_dim {
                return Err(shape_err!("truth id {truth} outside head width"));
            }
            weights.set(r, truth, 1.0 / total_masked as f64);
        }
        let term = g.weighted_sum(logp, weights)?;
        acc = Some(match acc {
            Some(prev) => g.add(prev, term)?,
            None => term,
        });
    }
    Ok(g.scale(acc.expect("nonempty after mask check"), -1.0))
}

/// Value-level MLM loss.
pub fn mlm_loss(
    store: &crate::encoders::ParamStore,
    encoder: &TextEncoder,
    head: &Linear,
    examples: &[MlmExample],
) -> Result<f64> {
    let mut g = Graph::new();
    let bind = store.bind(&mut g);
    let out = mlm_loss_graph(&mut g, &bind, encoder, head, examples)?;
    Ok(g.scalar(out))
}

/// Cross-entropy of arbitrary per-position logits against truth ids
/// (the decoder-independent core of the MLM objective).
pub fn masked_cross_entropy(logits_rows: &crate::tensor::Tensor, truths: &[usize]) -> Result<f64> {
    if logits_rows.rows() != truths.len() || truths.is_empty() {
        return Err(shape_err!(
            "{} logit rows vs {} truths",
            logits_rows.rows(),
            truths.len()
        ));
    }
    let mut acc = 0.0;
    for (r, &truth) in truths.iter().enumerate() {
        let logp = crate::numerics::log_softmax(logits_rows.row(r))?;
        if truth >= logp.len() {
            return Err(shape_err!("truth {truth} outside logit width"));
        }
        acc -= logp[truth];
    }
    Ok(acc / truths.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoders::{Component, ParamStore, TextSpec};
    use crate::numerics::seeded_rng;
    use crate::soft_targets::MetadataSchema;
    use crate::tensor::Tensor;
    use alloc::string::ToString;
    use alloc::vec;

    fn vocab() -> Vocabulary {
        Vocabulary::build(&MetadataSchema::default(), &["class_a".to_string()]).unwrap()
    }

    fn doc(id: &str, words: usize) -> CorpusDocument {
        let text = (0..words)
            .map(|i| crate::vocab::BUILTIN_WORDS[i % crate::vocab::BUILTIN_WORDS.len()])
            .collect::<Vec<_>>()
            .join(" ");
        CorpusDocument {
            id: id.to_string(),
            global_summary: text,
            risk_sections: vec![],
            review_status: ReviewStatus::Vetted,
            source: "synthetic".to_string(),
        }
    }

    #[test]
    fn empty_document_rejected() {
        let d = CorpusDocument {
            id: "x".into(),
            global_summary: "  ".into(),
            risk_sections: vec![],
            review_status: ReviewStatus::Vetted,
            source: String::new(),
        };
        assert!(d.validate().is_err());
    }

    #[test]
    fn masking_fraction_concentrates() {
        let v = vocab();
        let windows: Vec<Vec<u32>> = (0..500).map(|_| v.tokenize(&doc("d", 20).full_text())).collect();
        let mut rng = seeded_rng(3);
        let batch = make_mlm_batch(&windows, 0.15, &mut rng, &v).unwrap();
        let total: usize = batch.iter().map(|e| e.input_ids.len()).sum();
        let masked: usize = batch.iter().map(|e| e.mask_positions.len()).sum();
        let fraction = masked as f64 / total as f64;
        assert!(total >= 10_000, "need a big sample, got {total}");
        assert!(
            (0.13..=0.17).contains(&fraction),
            "masked fraction {fraction}"
        );
    }

    #[test]
    fn at_least_one_position_masked() {
        let v = vocab();
        let windows = vec![v.tokenize("risk of lesion"); 50];
        let mut rng = seeded_rng(5);
        let batch = make_mlm_batch(&windows, 0.001, &mut rng, &v).unwrap();
        assert_eq!(batch.len(), 50);
        for e in &batch {
            assert!(!e.mask_positions.is_empty());
        }
    }

    #[test]
    fn masking_is_deterministic_under_seed() {
        let v = vocab();
        let windows = vec![v.tokenize(&doc("d", 30).full_text()); 10];
        let a = make_mlm_batch(&windows, 0.15, &mut seeded_rng(9), &v).unwrap();
        let b = make_mlm_batch(&windows, 0.15, &mut seeded_rng(9), &v).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn short_windows_skipped() {
        let v = vocab();
        let windows = vec![vec![5u32], vec![5, 6, 7]];
        let batch = make_mlm_batch(&windows, 0.5, &mut seeded_rng(1), &v).unwrap();
        assert_eq!(batch.len(), 1);
    }

    #[test]
    fn bad_mask_rate_rejected() {
        let v = vocab();
        let windows = vec![vec![5u32, 6]];
        assert!(make_mlm_batch(&windows, 0.0, &mut seeded_rng(1), &v).is_err());
        assert!(make_mlm_batch(&windows, 1.0, &mut seeded_rng(1), &v).is_err());
    }

    fn tiny_model() -> (ParamStore, TextEncoder, Linear) {
        let v = vocab();
        let mut store = ParamStore::new();
        let spec = TextSpec {
            vocab_size: v.len(),
            max_len: 16,
            native_dim: 12,
            latent_dim: 6,
            depth: 1,
            seed: 7,
        };
        let encoder = TextEncoder::new(&mut store, spec, 2, 2.0).unwrap();
        let mut rng = seeded_rng(8);
        let head = Linear::new(
            &mut store,
            &mut rng,
            "mlm_head",
            12,
            v.len(),
            Component::MlmHead,
        );
        (store, encoder, head)
    }

    #[test]
    fn zero_head_gives_log_vocab() {
        let v = vocab();
        let (mut store, encoder, head) = tiny_model();
        // zero the head so every logit row is uniform
        store
            .set_value(head.weight, Tensor::zeros(v.len(), 12))
            .unwrap();
        let windows = vec![v.tokenize("risk of lesion observed with history")];
        let batch = make_mlm_batch(&windows, 0.3, &mut seeded_rng(2), &v).unwrap();
        let loss = mlm_loss(&store, &encoder, &head, &batch).unwrap();
        let expected = (v.len() as f64).ln();
        assert!((loss - expected).abs() < 1e-9, "{loss} vs {expected}");
    }

    #[test]
    fn perfect_logits_give_zero_loss() {
        let truths = [3usize, 5];
        let mut logits = Tensor::full(2, 8, -30.0);
        logits.set(0, 3, 30.0);
        logits.set(1, 5, 30.0);
        let loss = masked_cross_entropy(&logits, &truths).unwrap();
        assert!(loss < 1e-9);
    }

    #[test]
    fn loss_ignores_unmasked_labels() {
        let v = vocab();
        let (store, encoder, head) = tiny_model();
        let windows = vec![v.tokenize("risk of lesion observed with history suggests diagnosis")];
        let mut batch = make_mlm_batch(&windows, 0.3, &mut seeded_rng(4), &v).unwrap();
        let base = mlm_loss(&store, &encoder, &head, &batch).unwrap();
        // perturb original ids everywhere except masked positions
        for e in batch.iter_mut() {
            for p in 0..e.original_ids.len() {
                if !e.mask_positions.contains(&p) {
                    e.original_ids[p] = FIRST_WORD;
                }
            }
        }
        let perturbed = mlm_loss(&store, &encoder, &head, &batch).unwrap();
        assert_eq!(base.to_bits(), perturbed.to_bits());
    }

    #[test]
    fn empty_mask_batch_is_domain_error() {
        let (store, encoder, head) = tiny_model();
        let batch: Vec<MlmExample> = vec![];
        assert!(mlm_loss(&store, &encoder, &head, &batch).is_err());
    }
}
