//! Stable scalar primitives shared by every loss: temperature-scaled cosine
//! similarity, max-shifted log-softmax / log-sum-exp, and seeded randomness.

use alloc::vec::Vec;

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::tensor::{dot, norm};
use crate::{domain_err, math, shape_err};

/// Temperature used when scaling cosine similarities.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SimilarityConfig {
    pub tau: f64,
}

impl SimilarityConfig {
    pub fn new(tau: f64) -> Result<Self> {
        if !(tau > 0.0) || !tau.is_finite() {
            return Err(domain_err!("temperature must be positive, got {tau}"));
        }
        Ok(SimilarityConfig { tau })
    }
}

impl Default for SimilarityConfig {
    /// The standard contrastive-learning temperature.
    fn default() -> Self {
        SimilarityConfig { tau: 0.07 }
    }
}

/// Cosine similarity divided by the temperature: `(x1.x2)/(|x1||x2| tau)`.
///
/// Zero-norm operands are rejected rather than clamped: a collapsed
/// embedding should surface as an error, not as a silent zero.
pub fn temperature_scaled_similarity(
    x1: &[f64],
    x2: &[f64],
    cfg: &SimilarityConfig,
) -> Result<f64> {
    if x1.len() != x2.len() || x1.is_empty() {
        return Err(shape_err!(
            "similarity operands must share length >= 1, got {} and {}",
            x1.len(),
            x2.len()
        ));
    }
    let n1 = norm(x1);
    let n2 = norm(x2);
    if n1 == 0.0 {
        return Err(domain_err!("first similarity operand has zero norm"));
    }
    if n2 == 0.0 {
        return Err(domain_err!("second similarity operand has zero norm"));
    }
    Ok(dot(x1, x2) / (n1 * n2 * cfg.tau))
}

/// Max-shifted log-sum-exp over a nonempty slice.
pub fn log_sum_exp(values: &[f64]) -> Result<f64> {
    if values.is_empty() {
        return Err(shape_err!("log_sum_exp over empty slice"));
    }
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let sum: f64 = values.iter().map(|&v| math::exp(v - max)).sum();
    Ok(max + math::ln(sum))
}

/// Max-shifted log-softmax over a nonempty slice.
pub fn log_softmax(logits: &[f64]) -> Result<Vec<f64>> {
    let lse = log_sum_exp(logits)?;
    Ok(logits.iter().map(|&v| v - lse).collect())
}

/// Softmax over a nonempty slice.
pub fn softmax(logits: &[f64]) -> Result<Vec<f64>> {
    let lp = log_softmax(logits)?;
    Ok(lp.iter().map(|&v| math::exp(v)).collect())
}

/// Deterministic random stream for a seed. Identical seeds yield identical
/// streams on the same build; a stream is owned by a single caller.
pub fn seeded_rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Mixes a base seed with salt values into a fresh stream seed (SplitMix64
/// finalizer per word), so sub-streams for (stage, fold, epoch, ...) are
/// decorrelated and independent of execution order.
pub fn derive_seed(base: u64, salts: &[u64]) -> u64 {
    let mut state = base ^ 0x9e37_79b9_7f4a_7c15;
    for &s in salts {
        state = state.wrapping_add(s).wrapping_add(0x9e37_79b9_7f4a_7c15);
        let mut z = state;
        z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
        state = z ^ (z >> 31);
    }
    state
}

#[cfg(test)]
mod tests {
    use super::*;
    
    use rand::Rng;

    #[test]
    fn similarity_of_vector_with_itself_is_inverse_tau() {
        let cfg = SimilarityConfig::new(0.07).unwrap();
        let v = [3.0, 4.0];
        let s = temperature_scaled_similarity(&v, &v, &cfg).unwrap();
        assert!((s - 1.0 / 0.07).abs() < 1e-9);
    }

    #[test]
    fn orthogonal_vectors_score_zero() {
        let cfg = SimilarityConfig::new(1.0).unwrap();
        let s = temperature_scaled_similarity(&[1.0, 0.0], &[0.0, 1.0], &cfg).unwrap();
        assert_eq!(s, 0.0);
    }

    #[test]
    fn hand_computed_cosine_over_tau() {
        // cos((1,0),(1,1)) = 1/sqrt(2); divided by tau = 0.5
        let cfg = SimilarityConfig::new(0.5).unwrap();
        let s = temperature_scaled_similarity(&[1.0, 0.0], &[1.0, 1.0], &cfg).unwrap();
        let oracle = scalar_loop_similarity(&[1.0, 0.0], &[1.0, 1.0], 0.5);
        assert!((s - 2.0_f64.sqrt()).abs() < 1e-9);
        assert!((s - oracle).abs() < 1e-12);
    }

    /// Independent scalar-loop reference for the similarity formula.
    fn scalar_loop_similarity(a: &[f64], b: &[f64], tau: f64) -> f64 {
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

    #[test]
    fn zero_norm_rejected_naming_operand() {
        let cfg = SimilarityConfig::default();
        let err = temperature_scaled_similarity(&[0.0, 0.0], &[1.0, 0.0], &cfg).unwrap_err();
        assert!(alloc::format!("{err}").contains("first"));
        let err = temperature_scaled_similarity(&[1.0, 0.0], &[0.0, 0.0], &cfg).unwrap_err();
        assert!(alloc::format!("{err}").contains("second"));
    }

    #[test]
    fn length_mismatch_is_shape_error() {
        let cfg = SimilarityConfig::default();
        assert!(temperature_scaled_similarity(&[1.0], &[1.0, 2.0], &cfg).is_err());
    }

    #[test]
    fn scale_invariance_and_symmetry() {
        let cfg = SimilarityConfig::new(0.2).unwrap();
        let mut rng = seeded_rng(11);
        for _ in 0..50 {
            let a: Vec<f64> = (0..6).map(|_| rng.gen_range(-1.0..1.0f64)).collect();
            let b: Vec<f64> = (0..6).map(|_| rng.gen_range(-1.0..1.0f64)).collect();
            if norm(&a) == 0.0 || norm(&b) == 0.0 {
                continue;
            }
            let scale: f64 = rng.gen_range(0.1..10.0);
            let scaled: Vec<f64> = a.iter().map(|v| v * scale).collect();
            let s1 = temperature_scaled_similarity(&a, &b, &cfg).unwrap();
            let s2 = temperature_scaled_similarity(&scaled, &b, &cfg).unwrap();
            let s3 = temperature_scaled_similarity(&b, &a, &cfg).unwrap();
            assert!((s1 - s2).abs() < 1e-9);
            assert!((s1 - s3).abs() < 1e-12);
            assert!(s1.abs() <= 1.0 / 0.2 + 1e-9);
        }
    }

    #[test]
    fn log_softmax_symmetry_and_overflow() {
        let lp = log_softmax(&[0.0, 0.0]).unwrap();
        assert!((lp[0] - (-(2.0f64).ln())).abs() < 1e-12);
        assert!((lp[1] - (-(2.0f64).ln())).abs() < 1e-12);

        let lp = log_softmax(&[1000.0, 0.0]).unwrap();
        assert!(lp[0].abs() < 1e-9);
        assert!((lp[1] + 1000.0).abs() < 1e-9);
        assert!(lp.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn log_softmax_matches_naive_formula_on_small_inputs() {
        let logits = [1.0, 2.0, 3.0];
        let lp = log_softmax(&logits).unwrap();
        let denom: f64 = logits.iter().map(|v| v.exp()).sum();
        for (l, &z) in lp.iter().zip(&logits) {
            assert!((l - (z.exp() / denom).ln()).abs() < 1e-12);
        }
        let total: f64 = lp.iter().map(|v| v.exp()).sum();
        assert!((total - 1.0).abs() < 1e-9);
    }

    #[test]
    fn empty_log_softmax_is_error() {
        assert!(log_softmax(&[]).is_err());
    }

    #[test]
    fn seeded_streams_are_reproducible_and_distinct() {
        let mut a = seeded_rng(0);
        let mut b = seeded_rng(0);
        let mut c = seeded_rng(1);
        let draws_a: Vec<u64> = (0..100).map(|_| a.gen()).collect();
        let draws_b: Vec<u64> = (0..100).map(|_| b.gen()).collect();
        let draws_c: Vec<u64> = (0..100).map(|_| c.gen()).collect();
        assert_eq!(draws_a, draws_b);
        assert_ne!(draws_a, draws_c);
    }

    #[test]
    fn derived_seeds_differ_per_salt() {
        let s1 = derive_seed(42, &[1, 0]);
        let s2 = derive_seed(42, &[1, 1]);
        let s3 = derive_seed(42, &[2, 0]);
        assert_ne!(s1, s2);
        assert_ne!(s1, s3);
        assert_eq!(s1, derive_seed(42, &[1, 0]));
    }
}
