//! Run configuration: TOML file over profile defaults, with dotted-key
//! command-line overrides. The fully resolved config is snapshotted into the
//! output directory and hashed for checkpoint compatibility checks.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{AppError, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunSection {
    pub seed: u64,
    pub out_dir: PathBuf,
    /// `desk` (short epochs, gradient clipping) or `paper` (reported epoch
    /// counts, no clipping).
    pub profile: String,
    pub n_folds: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataSection {
    pub manifest: PathBuf,
    pub corpus: PathBuf,
    /// Restrict two-view sampling to same-modality scan pairs when possible.
    pub same_modality_pairs: bool,
    /// Admit unvetted corpus documents into stage 1.
    pub include_unvetted: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSection {
    pub shared_dim: usize,
    pub vision_native_dim: usize,
    pub text_native_dim: usize,
    pub decoder_dim: usize,
    pub vision_depth: usize,
    pub text_depth: usize,
    pub decoder_depth: usize,
    pub patch_size: usize,
    pub image_channels: usize,
    pub image_height: usize,
    pub image_width: usize,
    pub text_max_len: usize,
    pub decoder_max_len: usize,
    pub fusion_stride: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossSection {
    pub beta1: f64,
    pub beta2: f64,
    pub beta3: f64,
    pub beta4: f64,
    pub tau: f64,
    pub tau_label: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SoftTargetSection {
    /// Append the class label to the metadata vector during alignment.
    pub include_label_attribute: bool,
    pub upweight_factor: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AugmentationSection {
    pub enabled: bool,
    pub flip_prob: f64,
    pub crop_margin: usize,
    pub brightness_jitter: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StageSection {
    pub lr: f64,
    pub weight_decay: f64,
    pub epochs: usize,
    pub warmup_frac: f64,
    pub batch_size: usize,
    pub lora_rank: usize,
    /// Global gradient-norm ceiling; 0 disables clipping.
    pub grad_clip: f64,
    /// Stage seed; 0 derives from the run seed.
    pub seed: u64,
    /// Stage 1 only: masking probability.
    pub mask_rate: f64,
    /// Stage 2 only: supervised refinement epochs.
    pub refine_epochs: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub run: RunSection,
    pub data: DataSection,
    pub model: ModelSection,
    pub losses: LossSection,
    pub soft_targets: SoftTargetSection,
    pub augmentation: AugmentationSection,
    pub stage1: StageSection,
    pub stage2: StageSection,
    pub stage3: StageSection,
}

impl RunConfig {
    /// Desk-scale defaults: reported learning rates, weight decays, warm-up,
    /// and adapter ranks, with epoch counts shrunk to minutes.
    pub fn default_desk() -> Self {
        RunConfig {
            run: RunSection {
                seed: 7,
                out_dir: PathBuf::from("runs/demo"),
                profile: "desk".into(),
                n_folds: 5,
            },
            data: DataSection {
                manifest: PathBuf::from("data/manifest.jsonl"),
                corpus: PathBuf::from("data/corpus.jsonl"),
                same_modality_pairs: false,
                include_unvetted: false,
            },
            model: ModelSection {
                shared_dim: 16,
                vision_native_dim: 48,
                text_native_dim: 48,
                decoder_dim: 48,
                vision_depth: 2,
                text_depth: 2,
                decoder_depth: 2,
                patch_size: 4,
                image_channels: 3,
                image_height: 16,
                image_width: 16,
                text_max_len: 32,
                decoder_max_len: 96,
                fusion_stride: 2,
            },
            losses: LossSection {
                beta1: 0.2,
                beta2: 0.3,
                beta3: 0.2,
                beta4: 0.3,
                tau: 0.07,
                tau_label: 0.5,
            },
            soft_targets: SoftTargetSection {
                include_label_attribute: true,
                upweight_factor: 3.0,
            },
            augmentation: AugmentationSection {
                enabled: true,
                flip_prob: 0.5,
                crop_margin: 2,
                brightness_jitter: 0.2,
            },
            stage1: StageSection {
                lr: 5e-5,
                weight_decay: 1e-3,
                epochs: 40, // paper profile: 2500
                warmup_frac: 0.1,
                batch_size: 16,
                lora_rank: 8,
                grad_clip: 1.0,
                seed: 0,
                mask_rate: 0.15,
                refine_epochs: 0,
            },
            stage2: StageSection {
                lr: 3e-5,
                weight_decay: 1e-3,
                epochs: 30, // paper profile: 150
                warmup_frac: 0.1,
                batch_size: 32,
                lora_rank: 32,
                grad_clip: 1.0,
                seed: 0,
                mask_rate: 0.0,
                refine_epochs: 6,
            },
            stage3: StageSection {
                lr: 1e-5,
                weight_decay: 3e-2,
                epochs: 15, // paper profile: 80
                warmup_frac: 0.1,
                batch_size: 32,
                lora_rank: 16,
                grad_clip: 1.0,
                seed: 0,
                mask_rate: 0.0,
                refine_epochs: 0,
            },
        }
    }

    /// Paper-fidelity profile: reported epoch counts, clipping disabled.
    pub fn default_paper() -> Self {
        let mut cfg = Self::default_desk();
        cfg.run.profile = "paper".into();
        cfg.stage1.epochs = 2500;
        cfg.stage2.epochs = 150;
        cfg.stage2.refine_epochs = 30; // stage-2 epochs / 5
        cfg.stage3.epochs = 80;
        cfg.stage1.grad_clip = 0.0;
        cfg.stage2.grad_clip = 0.0;
        cfg.stage3.grad_clip = 0.0;
        cfg
    }

    pub fn validate(&self) -> Result<()> {
        if self.run.n_folds < 2 {
            return Err(AppError::validation("run.n_folds must be >= 2"));
        }
        if self.run.profile != "desk" && self.run.profile != "paper" {
            return Err(AppError::validation(format!(
                "run.profile must be 'desk' or 'paper', got '{}'",
                self.run.profile
            )));
        }
        for (name, stage) in [
            ("stage1", &self.stage1),
            ("stage2", &self.stage2),
            ("stage3", &self.stage3),
        ] {
            if !(stage.lr > 0.0) {
                return Err(AppError::validation(format!("{name}.lr must be positive")));
            }
            if stage.epochs == 0 {
                return Err(AppError::validation(format!("{name}.epochs must be >= 1")));
            }
            if !(0.0..1.0).contains(&stage.warmup_frac) {
                return Err(AppError::validation(format!(
                    "{name}.warmup_frac must be in [0, 1)"
                )));
            }
            if stage.weight_decay < 0.0 {
                return Err(AppError::validation(format!(
                    "{name}.weight_decay must be nonnegative"
                )));
            }
        }
        if self.stage2.batch_size < 2 {
            return Err(AppError::validation(
                "stage2.batch_size must be >= 2; the contrastive losses need negatives",
            ));
        }
        if !(self.losses.tau > 0.0) || !(self.losses.tau_label > 0.0) {
            return Err(AppError::validation("temperatures must be positive"));
        }
        if self.stage1.mask_rate <= 0.0 || self.stage1.mask_rate >= 1.0 {
            return Err(AppError::validation("stage1.mask_rate must be in (0, 1)"));
        }
        Ok(())
    }

    /// Stage seeds derived from the run seed unless pinned explicitly.
    pub fn stage_seed(&self, stage: usize, fold: Option<usize>) -> u64 {
        let pinned = match stage {
            1 => self.stage1.seed,
            2 => self.stage2.seed,
            3 => self.stage3.seed,
            _ => 0,
        };
        let base = if pinned != 0 { pinned } else { self.run.seed };
        metalign_core::numerics::derive_seed(
            base,
            &[stage as u64, fold.map(|f| f as u64 + 1).unwrap_or(0)],
        )
    }
}

fn profile_defaults(profile: &str) -> Result<RunConfig> {
    match profile {
        "paper" => Ok(RunConfig::default_paper()),
        "desk" => Ok(RunConfig::default_desk()),
        other => Err(AppError::validation(format!(
            "unknown profile '{other}' (expected 'desk' or 'paper')"
        ))),
    }
}

fn deep_merge(base: &mut toml::Value, patch: &toml::Value) {
    match (base, patch) {
        (toml::Value::Table(base_table), toml::Value::Table(patch_table)) => {
            for (key, patch_value) in patch_table {
                match base_table.get_mut(key) {
                    Some(base_value) if base_value.is_table() && patch_value.is_table() => {
                        deep_merge(base_value, patch_value);
                    }
                    _ => {
                        base_table.insert(key.clone(), patch_value.clone());
                    }
                }
            }
        }
        (base_slot, patch_value) => *base_slot = patch_value.clone(),
    }
}

/// Applies one `dotted.key=value` override; unknown paths list the valid
/// keys at the deepest table reached.
fn apply_override(doc: &mut toml::Value, spec: &str) -> Result<()> {
    let (path, raw_value) = spec.split_once('=').ok_or_else(|| {
        AppError::validation(format!("override '{spec}' must look like section.key=value"))
    })?;
    let segments: Vec<&str> = path.split('.').collect();
    if segments.iter().any(|s| s.is_empty()) {
        return Err(AppError::validation(format!("override path '{path}' is malformed")));
    }
    let mut cursor = &mut *doc;
    for (i, segment) in segments.iter().enumerate() {
        let table = cursor.as_table_mut().ok_or_else(|| {
            AppError::validation(format!("override path '{path}' descends into a non-table"))
        })?;
        if !table.contains_key(*segment) {
            let mut valid: Vec<&str> = table.keys().map(|k| k.as_str()).collect();
            valid.sort_unstable();
            return Err(AppError::validation(format!(
                "unknown override key '{segment}' in '{path}'; valid keys here: {}",
                valid.join(", ")
            )));
        }
        if i + 1 == segments.len() {
            let parsed: toml::Value = match table[*segment] {
                toml::Value::String(_) => toml::Value::String(raw_value.to_string()),
                _ => {
                    let doc: toml::Table = format!("v = {raw_value}").parse().map_err(|e| {
                        AppError::validation(format!(
                            "cannot parse override value '{raw_value}': {e}"
                        ))
                    })?;
                    doc["v"].clone()
                }
            };
            table.insert(segment.to_string(), parsed);
            return Ok(());
        }
        cursor = table.get_mut(*segment).expect("checked above");
    }
    unreachable!("override loop always returns")
}

/// Loads a config file over its profile defaults and applies overrides.
pub fn load_config(path: &Path, overrides: &[String]) -> Result<RunConfig> {
    let text = std::fs::read_to_string(path).map_err(|e| {
        AppError::validation(format!("cannot read config '{}': {e}", path.display()))
    })?;
    let file_value: toml::Value = text
        .parse()
        .map_err(|e| AppError::validation(format!("config parse error: {e}")))?;
    let profile = file_value
        .get("run")
        .and_then(|r| r.get("profile"))
        .and_then(|p| p.as_str())
        .unwrap_or("desk")
        .to_string();
    let defaults = profile_defaults(&profile)?;
    let mut merged = toml::Value::try_from(&defaults)
        .map_err(|e| AppError::runtime(format!("default serialization: {e}")))?;
    deep_merge(&mut merged, &file_value);
    for spec in overrides {
        apply_override(&mut merged, spec)?;
    }
    let config: RunConfig = merged
        .try_into()
        .map_err(|e| AppError::validation(format!("config error: {e}")))?;
    config.validate()?;
    Ok(config)
}

/// Canonical TOML snapshot of the resolved config.
pub fn config_snapshot(config: &RunConfig) -> Result<String> {
    toml::to_string_pretty(config)
        .map_err(|e| AppError::runtime(format!("config serialization: {e}")))
}

/// FNV-1a over the canonical snapshot; stored in checkpoints so resume can
/// spot configuration drift.
pub fn config_hash(config: &RunConfig) -> Result<u64> {
    let snapshot = config_snapshot(config)?;
    let mut hash: u64 = 0xcbf2_9ce4_8422_2325;
    for byte in snapshot.as_bytes() {
        hash ^= *byte as u64;
        hash = hash.wrapping_mul(0x1000_0000_01b3);
    }
    Ok(hash)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn desk_defaults_validate() {
        RunConfig::default_desk().validate().unwrap();
        RunConfig::default_paper().validate().unwrap();
    }

    #[test]
    fn paper_profile_keeps_reported_hyperparameters() {
        let cfg = RunConfig::default_paper();
        assert_eq!(cfg.stage1.lr, 5e-5);
        assert_eq!(cfg.stage1.weight_decay, 1e-3);
        assert_eq!(cfg.stage1.epochs, 2500);
        assert_eq!(cfg.stage2.lr, 3e-5);
        assert_eq!(cfg.stage2.weight_decay, 1e-3);
        assert_eq!(cfg.stage2.epochs, 150);
        assert_eq!(cfg.stage3.lr, 1e-5);
        assert_eq!(cfg.stage3.weight_decay, 3e-2);
        assert_eq!(cfg.stage3.epochs, 80);
        assert_eq!(cfg.stage1.lora_rank, 8);
        assert_eq!(cfg.stage2.lora_rank, 32);
        assert_eq!(cfg.stage3.lora_rank, 16);
        assert_eq!(cfg.stage1.warmup_frac, 0.1);
    }

    #[test]
    fn stage_seeds_differ_by_fold_and_stage() {
        let cfg = RunConfig::default_desk();
        let a = cfg.stage_seed(2, Some(0));
        let b = cfg.stage_seed(2, Some(1));
        let c = cfg.stage_seed(3, Some(0));
        assert_ne!(a, b);
        assert_ne!(a, c);
        assert_eq!(a, cfg.stage_seed(2, Some(0)));
    }

    fn write_config(dir: &std::path::Path, body: &str) -> PathBuf {
        let path = dir.join("run.toml");
        std::fs::write(&path, body).unwrap();
        path
    }

    #[test]
    fn sparse_file_inherits_defaults() {
        let dir = tempfile::tempdir().unwrap();
        let path = write_config(dir.path(), "[run]\nseed = 99\n");
        let cfg = load_config(&path, &[]).unwrap();
        assert_eq!(cfg.run.seed, 99);
        assert_eq!(cfg.stage2.lr, 3e-5);
    }

    #[test]
    fn overrides_apply_and_snapshot_reflects_them() {
        let dir = tempfile::tempdir().unwrap();
        let path = write_config(dir.path(), "[run]\nseed = 1\n");
        let cfg = load_config(&path, &["losses.beta2=0.5".into()]).unwrap();
        assert_eq!(cfg.losses.beta2, 0.5);
        let snapshot = config_snapshot(&cfg).unwrap();
        assert!(snapshot.contains("beta2 = 0.5"));
    }

    #[test]
    fn unknown_override_lists_valid_keys() {
        let dir = tempfile::tempdir().unwrap();
        let path = write_config(dir.path(), "[run]\nseed = 1\n");
        let err = load_config(&path, &["losses.beta9=0.5".into()]).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("beta1"), "{msg}");
        assert!(msg.contains("tau_label"), "{msg}");
    }

    #[test]
    fn config_hash_tracks_changes() {
        let a = RunConfig::default_desk();
        let mut b = a.clone();
        b.losses.beta1 = 0.25;
        assert_ne!(config_hash(&a).unwrap(), config_hash(&b).unwrap());
        assert_eq!(config_hash(&a).unwrap(), config_hash(&a.clone()).unwrap());
    }

    #[test]
    fn batch_size_one_rejected() {
        let mut cfg = RunConfig::default_desk();
        cfg.stage2.batch_size = 1;
        assert!(cfg.validate().is_err());
    }
}
