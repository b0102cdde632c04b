//! Algorithmic core for risk-integrated image-metadata alignment.
//!
//! Everything in this crate is pure computation over owned buffers: the four
//! contrastive alignment objectives and their gradients, soft-target
//! construction from categorical metadata, toy dual encoders with LoRA
//! adapters, masked-language-model machinery, the fused vocabulary-restricted
//! classifier head, grouped cross-validation splitting, a synthetic cohort
//! generator, and classification metrics.
//!
//! The crate is `no_std`-compatible (requires `alloc`); all file formats,
//! training orchestration, and the CLI live in the companion `metalign` crate.

#![cfg_attr(not(feature = "std"), no_std)]

extern crate alloc;

pub mod data;
pub mod encoders;
pub mod error;
pub mod fusion;
pub mod gradcheck;
pub mod graph;
pub mod losses;
pub mod math;
pub mod metrics;
pub mod mlm;
pub mod model;
pub mod numerics;
pub mod optim;
pub mod soft_targets;
pub mod tensor;
pub mod vocab;

pub use error::{CoreError, Result};
pub use tensor::Tensor;
