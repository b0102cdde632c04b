//! Checkpoint directories: a self-describing `manifest.json` (stage
//! provenance, component fingerprints, trainable report, adapter policy)
//! next to `model.json` (the full parameter state). Writes are atomic:
//! everything lands in a temporary directory that is renamed into place.

use std::path::{Path, PathBuf};

use metalign_core::encoders::{trainable_parameter_report, ParameterReport};
use metalign_core::model::Model;
use serde::{Deserialize, Serialize};

use crate::error::{AppError, Result};

pub const CHECKPOINT_VERSION: u32 = 1;

/// Which linear layers carry adapters (recorded for provenance).
pub const ADAPTER_TARGET_POLICY: &str = "all mixing-block linears (attention q/k/v/o, ffn)";

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CheckpointManifest {
    pub format_version: u32,
    /// Producing stage: `stage1`, `stage2`, `stage3`.
    pub stage: String,
    pub run_seed: u64,
    pub fold: Option<usize>,
    pub config_hash: u64,
    pub adapter_targets: String,
    /// Per-component FNV-1a fingerprints of the parameter bits.
    pub fingerprints: Vec<(String, u64)>,
    pub parameter_report: ParameterReport,
    /// Words of the shared vocabulary, for self-description.
    pub vocabulary_len: usize,
}

pub fn component_fingerprints(model: &Model) -> Vec<(String, u64)> {
    metalign_core::encoders::Component::ALL
        .iter()
        .map(|c| {
            (
                c.name().to_string(),
                model.store.fingerprint(|p| p.component == *c),
            )
        })
        .collect()
}

/// Saves a checkpoint atomically (write to `<dir>.tmp`, then rename).
pub fn save_checkpoint(
    dir: &Path,
    model: &Model,
    stage: &str,
    run_seed: u64,
    fold: Option<usize>,
    config_hash: u64,
) -> Result<()> {
    let manifest = CheckpointManifest {
        format_version: CHECKPOINT_VERSION,
        stage: stage.to_string(),
        run_seed,
        fold,
        config_hash,
        adapter_targets: ADAPTER_TARGET_POLICY.to_string(),
        fingerprints: component_fingerprints(model),
        parameter_report: trainable_parameter_report(&model.store),
        vocabulary_len: model.config.text.vocab_size,
    };
    let tmp = tmp_sibling(dir)?;
    std::fs::create_dir_all(&tmp)?;
    let write = || -> Result<()> {
        std::fs::write(
            tmp.join("manifest.json"),
            serde_json::to_string_pretty(&manifest)?,
        )?;
        std::fs::write(tmp.join("model.json"), serde_json::to_string(model)?)?;
        Ok(())
    };
    if let Err(e) = write() {
        let _ = std::fs::remove_dir_all(&tmp);
        return Err(e);
    }
    if dir.exists() {
        std::fs::remove_dir_all(dir)?;
    }
    std::fs::rename(&tmp, dir)?;
    Ok(())
}

fn tmp_sibling(dir: &Path) -> Result<PathBuf> {
    let name = dir
        .file_name()
        .ok_or_else(|| AppError::validation(format!("bad checkpoint path '{}'", dir.display())))?;
    let mut tmp = dir.to_path_buf();
    tmp.set_file_name(format!("{}.tmp", name.to_string_lossy()));
    if tmp.exists() {
        std::fs::remove_dir_all(&tmp)?;
    }
    Ok(tmp)
}

pub fn checkpoint_exists(dir: &Path) -> bool {
    dir.join("manifest.json").exists() && dir.join("model.json").exists()
}

pub fn load_manifest(dir: &Path) -> Result<CheckpointManifest> {
    let text = std::fs::read_to_string(dir.join("manifest.json")).map_err(|e| {
        AppError::validation(format!(
            "missing checkpoint manifest '{}': {e}",
            dir.join("manifest.json").display()
        ))
    })?;
    let manifest: CheckpointManifest = serde_json::from_str(&text)?;
    if manifest.format_version != CHECKPOINT_VERSION {
        return Err(AppError::validation(format!(
            "checkpoint version {} unsupported (expected {CHECKPOINT_VERSION})",
            manifest.format_version
        )));
    }
    Ok(manifest)
}

/// Loads the checkpoint, verifying the config hash when one is supplied.
pub fn load_checkpoint(dir: &Path, expect_hash: Option<u64>) -> Result<(CheckpointManifest, Model)> {
    let manifest = load_manifest(dir)?;
    if let Some(expected) = expect_hash {
        if manifest.config_hash != expected {
            return Err(AppError::validation(format!(
                "checkpoint '{}' was produced by a different configuration \
                 (hash {:#x} vs expected {:#x}); use a fresh output directory",
                dir.display(),
                manifest.config_hash,
                expected
            )));
        }
    }
    let text = std::fs::read_to_string(dir.join("model.json"))?;
    let model: Model = serde_json::from_str(&text)?;
    Ok((manifest, model))
}
