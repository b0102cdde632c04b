//! Patient records, grouped cross-validation folds, two-view sampling with
//! augmentations, and the synthetic cohort generator.

use alloc::collections::{BTreeMap, BTreeSet};
use alloc::string::{String, ToString};
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};
use crate::numerics::{derive_seed, seeded_rng};
use crate::soft_targets::{AttributeSpec, MetadataSchema};
use crate::{config_err, domain_err, math, shape_err};

/// Channel-major image buffer (`[channel][row][col]`).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageTensor {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub data: Vec<f64>,
}

impl ImageTensor {
    pub fn zeros(channels: usize, height: usize, width: usize) -> Self {
        ImageTensor {
            channels,
            height,
            width,
            data: alloc::vec![0.0; channels * height * width],
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.channels == 0 || self.height == 0 || self.width == 0 {
            return Err(shape_err!("image has a zero dimension"));
        }
        if self.data.len() != self.channels * self.height * self.width {
            return Err(shape_err!(
                "image data length {} does not match {}x{}x{}",
                self.data.len(),
                self.channels,
                self.height,
                self.width
            ));
        }
        if !self.data.iter().all(|v| v.is_finite()) {
            return Err(domain_err!("image has non-finite pixels"));
        }
        Ok(())
    }

    #[inline]
    pub fn get(&self, c: usize, y: usize, x: usize) -> f64 {
        self.data[(c * self.height + y) * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, c: usize, y: usize, x: usize, v: f64) {
        self.data[(c * self.height + y) * self.width + x] = v;
    }

    pub fn flip_horizontal(&self) -> ImageTensor {
        let mut out = self.clone();
        for c in 0..self.channels {
            for y in 0..self.height {
                for x in 0..self.width {
                    out.set(c, y, x, self.get(c, y, self.width - 1 - x));
                }
            }
        }
        out
    }

    pub fn scale_brightness(&self, factor: f64) -> ImageTensor {
        ImageTensor {
            channels: self.channels,
            height: self.height,
            width: self.width,
            data: self.data.iter().map(|v| v * factor).collect(),
        }
    }

    /// Crops a window and bilinearly resizes it back to the full resolution.
    pub fn crop_resize(&self, y0: usize, x0: usize, crop_h: usize, crop_w: usize) -> ImageTensor {
        let mut out = ImageTensor::zeros(self.channels, self.height, self.width);
        for c in 0..self.channels {
            for y in 0..self.height {
                for x in 0..self.width {
                    // map output pixel into the crop window
                    let sy = y0 as f64 + (y as f64 + 0.5) * crop_h as f64 / self.height as f64 - 0.5;
                    let sx = x0 as f64 + (x as f64 + 0.5) * crop_w as f64 / self.width as f64 - 0.5;
                    let sy = sy.clamp(0.0, (self.height - 1) as f64);
                    let sx = sx.clamp(0.0, (self.width - 1) as f64);
                    let y1 = sy as usize;
                    let x1 = sx as usize;
                    let y2 = (y1 + 1).min(self.height - 1);
                    let x2 = (x1 + 1).min(self.width - 1);
                    let fy = sy - y1 as f64;
                    let fx = sx - x1 as f64;
                    let v = self.get(c, y1, x1) * (1.0 - fy) * (1.0 - fx)
                        + self.get(c, y1, x2) * (1.0 - fy) * fx
                        + self.get(c, y2, x1) * fy * (1.0 - fx)
                        + self.get(c, y2, x2) * fy * fx;
                    out.set(c, y, x, v);
                }
            }
        }
        out
    }
}

/// One scan with its modality tag.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scan {
    pub modality: String,
    pub image: ImageTensor,
}

/// One subject: scans, categorical metadata, class label, grouping key.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PatientRecord {
    pub patient_id: String,
    pub group_key: String,
    pub scans: Vec<Scan>,
    pub metadata: BTreeMap<String, String>,
    pub label: String,
}

impl PatientRecord {
    pub fn validate(&self) -> Result<()> {
        if self.patient_id.is_empty() {
            return Err(domain_err!("record has empty patient_id"));
        }
        if self.group_key.is_empty() {
            return Err(domain_err!("record '{}' has empty group_key", self.patient_id));
        }
        if self.scans.is_empty() {
            return Err(domain_err!("record '{}' has zero scans", self.patient_id));
        }
        for scan in &self.scans {
            scan.image.validate()?;
        }
        Ok(())
    }
}

/// In-memory dataset: validated records plus schema and class vocabulary.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub records: Vec<PatientRecord>,
    pub schema: MetadataSchema,
    pub classes: Vec<String>,
    /// Which record field populates the grouping key (documentation of the
    /// split policy; `patient_id` or `lesion_id`).
    pub group_key_field: String,
}

impl DatasetManifest {
    /// Validates and sorts records by patient id for a deterministic order.
    pub fn new(
        mut records: Vec<PatientRecord>,
        schema: MetadataSchema,
        classes: Vec<String>,
        group_key_field: String,
    ) -> Result<Self> {
        schema.validate()?;
        if classes.len() < 2 {
            return Err(config_err!("class vocabulary needs at least 2 entries"));
        }
        let class_set: BTreeSet<&String> = classes.iter().collect();
        if class_set.len() != classes.len() {
            return Err(config_err!("duplicate class names"));
        }
        let mut seen_ids = BTreeSet::new();
        for record in &records {
            record.validate()?;
            if !class_set.contains(&record.label) {
                return Err(CoreError::Schema(alloc::format!(
                    "record '{}' has unknown class '{}'",
                    record.patient_id,
                    record.label
                )));
            }
            if !seen_ids.insert(record.patient_id.clone()) {
                return Err(domain_err!("duplicate patient_id '{}'", record.patient_id));
            }
            // metadata must be encodable against the schema
            crate::soft_targets::encode_metadata(&record.metadata, &schema)?;
        }
        records.sort_by(|a, b| a.patient_id.cmp(&b.patient_id));
        Ok(DatasetManifest {
            records,
            schema,
            classes,
            group_key_field,
        })
    }

    pub fn class_index(&self, label: &str) -> Result<usize> {
        self.classes
            .iter()
            .position(|c| c == label)
            .ok_or_else(|| CoreError::Schema(alloc::format!("unknown class '{label}'")))
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }
}

/// Group-level fold assignment: every group key sits in exactly one fold.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FoldAssignment {
    pub n_folds: usize,
    pub seed: u64,
    pub fold_of_group: BTreeMap<String, usize>,
}

impl FoldAssignment {
    pub fn fold_of(&self, record: &PatientRecord) -> Result<usize> {
        self.fold_of_group
            .get(&record.group_key)
            .copied()
            .ok_or_else(|| domain_err!("group '{}' has no fold", record.group_key))
    }

    /// Train/test record split for one fold.
    pub fn split<'a>(
        &self,
        manifest: &'a DatasetManifest,
        fold: usize,
    ) -> Result<(Vec<&'a PatientRecord>, Vec<&'a PatientRecord>)> {
        if fold >= self.n_folds {
            return Err(config_err!("fold {fold} out of {}", self.n_folds));
        }
        let mut train = Vec::new();
        let mut test = Vec::new();
        for record in &manifest.records {
            if self.fold_of(record)? == fold {
                test.push(record);
            } else {
                train.push(record);
            }
        }
        Ok((train, test))
    }
}

/// Stratified grouped fold assignment, deterministic under the seed.
///
/// Groups are stratified by the label of their first record; classes with
/// fewer groups than folds are assigned best-effort with a warning.
pub fn make_folds(manifest: &DatasetManifest, n_folds: usize, seed: u64) -> Result<FoldAssignment> {
    if n_folds < 2 {
        return Err(config_err!("need at least 2 folds, got {n_folds}"));
    }
    // group -> label of its first record (manifest order is deterministic)
    let mut group_label: BTreeMap<&str, &str> = BTreeMap::new();
    for record in &manifest.records {
        group_label
            .entry(record.group_key.as_str())
            .or_insert(record.label.as_str());
    }
    if group_label.len() < n_folds {
        return Err(config_err!(
            "{} groups cannot fill {n_folds} folds",
            group_label.len()
        ));
    }
    let mut by_class: BTreeMap<&str, Vec<&str>> = BTreeMap::new();
    for (group, label) in &group_label {
        by_class.entry(label).or_default().push(group);
    }
    let mut fold_of_group = BTreeMap::new();
    let mut fold_load = alloc::vec![0usize; n_folds];
    for (class_idx, (label, groups)) in by_class.iter_mut().enumerate() {
        if groups.len() < n_folds {
            log::warn!(
                "class '{label}' has {} groups for {n_folds} folds; stratification is best-effort",
                groups.len()
            );
        }
        let mut rng = seeded_rng(derive_seed(seed, &[0x666f_6c64, class_idx as u64]));
        groups.shuffle(&mut rng);
        for group in groups.iter() {
            // least-loaded fold, ties broken by index, keeps folds balanced
            let fold = (0..n_folds).min_by_key(|&f| (fold_load[f], f)).unwrap();
            fold_load[fold] += 1;
            fold_of_group.insert(group.to_string(), fold);
        }
    }
    Ok(FoldAssignment {
        n_folds,
        seed,
        fold_of_group,
    })
}

/// Toy-scale augmentation suite: horizontal flip, crop-resize, brightness.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AugmentationConfig {
    pub enabled: bool,
    pub flip_prob: f64,
    /// Maximum number of pixels shaved off each border before resizing back.
    pub crop_margin: usize,
    /// Brightness factor drawn from `1 +- jitter`.
    pub brightness_jitter: f64,
}

impl Default for AugmentationConfig {
    fn default() -> Self {
        AugmentationConfig {
            enabled: true,
            flip_prob: 0.5,
            crop_margin: 2,
            brightness_jitter: 0.2,
        }
    }
}

/// Applies one independent augmentation draw.
pub fn augment(image: &ImageTensor, rng: &mut ChaCha8Rng, cfg: &AugmentationConfig) -> ImageTensor {
    if !cfg.enabled {
        return image.clone();
    }
    let mut out = image.clone();
    if cfg.flip_prob > 0.0 && rng.gen_bool(cfg.flip_prob) {
        out = out.flip_horizontal();
    }
    if cfg.crop_margin > 0 {
        let max_margin = cfg.crop_margin.min(image.height / 4).min(image.width / 4);
        if max_margin > 0 {
            let y0 = rng.gen_range(0..=max_margin);
            let x0 = rng.gen_range(0..=max_margin);
            let y1 = rng.gen_range(0..=max_margin);
            let x1 = rng.gen_range(0..=max_margin);
            let crop_h = image.height - y0 - y1;
            let crop_w = image.width - x0 - x1;
            out = out.crop_resize(y0, x0, crop_h, crop_w);
        }
    }
    if cfg.brightness_jitter > 0.0 {
        let factor = 1.0 + rng.gen_range(-cfg.brightness_jitter..=cfg.brightness_jitter);
        out = out.scale_brightness(factor);
    }
    out
}

/// Samples the two augmented views of one record: two distinct scans chosen
/// uniformly without replacement when available, otherwise one scan
/// duplicated; each view gets an independent augmentation draw.
///
/// With `same_modality_only`, the pair is drawn among same-modality scan
/// pairs when any exist.
pub fn sample_two_views(
    record: &PatientRecord,
    rng: &mut ChaCha8Rng,
    augmentations: &AugmentationConfig,
    same_modality_only: bool,
) -> Result<(ImageTensor, ImageTensor)> {
    record.validate()?;
    let n = record.scans.len();
    let (a, b) = if n == 1 {
        (0, 0)
    } else {
        let mut pairs: Vec<(usize, usize)> = Vec::new();
        for i in 0..n {
            for j in (i + 1)..n {
                if !same_modality_only || record.scans[i].modality == record.scans[j].modality {
                    pairs.push((i, j));
                }
            }
        }
        if pairs.is_empty() {
            for i in 0..n {
                for j in (i + 1)..n {
                    pairs.push((i, j));
                }
            }
        }
        pairs[rng.gen_range(0..pairs.len())]
    };
    let view1 = augment(&record.scans[a].image, rng, augmentations);
    let view2 = augment(&record.scans[b].image, rng, augmentations);
    Ok((view1, view2))
}

/// Synthetic cohort description.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub patients: usize,
    pub classes: usize,
    /// Strength of the attribute-label coupling in `[0, 1]`.
    pub correlation: f64,
    /// Strength of the class-conditional image pattern.
    pub image_signal: f64,
    pub seed: u64,
    pub scans_min: usize,
    pub scans_max: usize,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    /// Relative class frequencies; uniform when empty.
    pub class_weights: Vec<f64>,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec {
            patients: 600,
            classes: 3,
            correlation: 0.8,
            image_signal: 0.5,
            seed: 7,
            scans_min: 1,
            scans_max: 3,
            channels: 3,
            height: 16,
            width: 16,
            class_weights: Vec::new(),
        }
    }
}

const CLASS_NAME_POOL: &[&str] = &["class_a", "class_b", "class_c", "class_d", "class_e", "class_f"];
const RISK_LEVEL_POOL: &[&str] = &["risk_a", "risk_b", "risk_c", "risk_d", "risk_e", "risk_f"];
const MODALITIES: &[&str] = &["white", "blue", "sclerotic"];

/// Schema used by the synthetic cohort.
///
/// `risk_primary` carries the full correlation signal, is disease-related,
/// and is hidden from the rendered text (the signal has to travel through
/// the soft targets); the visible attributes carry half-strength signal or
/// pure noise.
pub fn synthetic_schema(classes: usize) -> Result<MetadataSchema> {
    if classes < 2 || classes > CLASS_NAME_POOL.len() {
        return Err(config_err!(
            "synthetic cohort supports 2..={} classes, got {classes}",
            CLASS_NAME_POOL.len()
        ));
    }
    let attrs = alloc::vec![
        AttributeSpec {
            name: "risk_primary".into(),
            levels: RISK_LEVEL_POOL[..classes].iter().map(|s| s.to_string()).collect(),
            disease_related: true,
            visually_relevant: false,
            allow_missing: false,
        },
        AttributeSpec {
            name: "exposure".into(),
            levels: alloc::vec!["low".into(), "moderate".into(), "high".into()],
            disease_related: true,
            visually_relevant: false,
            allow_missing: false,
        },
        AttributeSpec {
            name: "site".into(),
            levels: alloc::vec!["arm".into(), "face".into(), "trunk".into(), "leg".into()],
            disease_related: false,
            visually_relevant: true,
            allow_missing: false,
        },
        AttributeSpec {
            name: "texture".into(),
            levels: alloc::vec!["smooth".into(), "rough".into(), "scaly".into()],
            disease_related: false,
            visually_relevant: true,
            allow_missing: false,
        },
        AttributeSpec {
            name: "age_group".into(),
            levels: alloc::vec!["young".into(), "middle".into(), "senior".into(), "elder".into()],
            disease_related: false,
            visually_relevant: true,
            allow_missing: false,
        },
    ];
    MetadataSchema::new(attrs, 3.0)
}

pub fn synthetic_class_names(classes: usize) -> Vec<String> {
    CLASS_NAME_POOL[..classes]
        .iter()
        .map(|s| s.to_string())
        .collect()
}

fn correlated_level(
    rng: &mut ChaCha8Rng,
    preferred: usize,
    n_levels: usize,
    strength: f64,
) -> usize {
    if strength > 0.0 && rng.gen_bool(strength.clamp(0.0, 1.0)) {
        preferred % n_levels
    } else {
        rng.gen_range(0..n_levels)
    }
}

/// Class-conditional blob pattern plus a patient signature, scaled by the
/// signal strength, over a noise floor.
fn synthesize_scan(
    rng: &mut ChaCha8Rng,
    spec: &SyntheticSpec,
    class: usize,
    signature: &[f64],
) -> ImageTensor {
    let mut img = ImageTensor::zeros(spec.channels, spec.height, spec.width);
    let angle = 2.0 * math::PI * class as f64 / spec.classes as f64;
    let cy = spec.height as f64 / 2.0 + math::cos(angle) * spec.height as f64 / 4.0;
    let cx = spec.width as f64 / 2.0 + math::cos(angle + math::PI / 2.0) * spec.width as f64 / 4.0;
    // small per-scan wobble so two scans of one patient are not identical
    let jy = rng.gen_range(-1.0..1.0);
    let jx = rng.gen_range(-1.0..1.0);
    let sigma = 2.5;
    for c in 0..spec.channels {
        let emphasis = if c == class % spec.channels { 1.0 } else { 0.4 };
        for y in 0..spec.height {
            for x in 0..spec.width {
                let dy = y as f64 - (cy + jy);
                let dx = x as f64 - (cx + jx);
                let blob = math::exp(-(dy * dy + dx * dx) / (2.0 * sigma * sigma));
                let noise = rng.gen_range(-0.3..0.3);
                let v = spec.image_signal * emphasis * blob + signature[c] + noise;
                img.set(c, y, x, v);
            }
        }
    }
    img
}

/// Generates a fully reproducible synthetic cohort manifest.
pub fn generate_synthetic_cohort(spec: &SyntheticSpec) -> Result<DatasetManifest> {
    if spec.patients == 0 {
        return Err(config_err!("synthetic cohort needs at least 1 patient"));
    }
    if !(0.0..=1.0).contains(&spec.correlation) {
        return Err(config_err!(
            "correlation must be in [0,1], got {}",
            spec.correlation
        ));
    }
    if spec.scans_min == 0 || spec.scans_min > spec.scans_max {
        return Err(config_err!(
            "scan count range [{}, {}] is invalid",
            spec.scans_min,
            spec.scans_max
        ));
    }
    if !spec.class_weights.is_empty() && spec.class_weights.len() != spec.classes {
        return Err(config_err!(
            "class_weights has {} entries for {} classes",
            spec.class_weights.len(),
            spec.classes
        ));
    }
    let schema = synthetic_schema(spec.classes)?;
    let classes = synthetic_class_names(spec.classes);
    let weights = if spec.class_weights.is_empty() {
        alloc::vec![1.0; spec.classes]
    } else {
        spec.class_weights.clone()
    };
    if weights.iter().any(|&w| w < 0.0) || weights.iter().sum::<f64>() <= 0.0 {
        return Err(config_err!("class weights must be nonnegative and not all zero"));
    }
    let total_weight: f64 = weights.iter().sum();

    let mut records = Vec::with_capacity(spec.patients);
    for p in 0..spec.patients {
        let mut rng = seeded_rng(derive_seed(spec.seed, &[0xc001, p as u64]));
        // label from the class distribution
        let draw: f64 = rng.gen_range(0.0..total_weight);
        let mut acc = 0.0;
        let mut class = 0;
        for (idx, &w) in weights.iter().enumerate() {
            acc += w;
            if draw < acc {
                class = idx;
                break;
            }
        }

        let mut metadata = BTreeMap::new();
        let risk_level = correlated_level(&mut rng, class, spec.classes, spec.correlation);
        metadata.insert(
            "risk_primary".to_string(),
            RISK_LEVEL_POOL[risk_level].to_string(),
        );
        let exposure_idx = correlated_level(&mut rng, class, 3, spec.correlation / 2.0);
        metadata.insert(
            "exposure".to_string(),
            ["low", "moderate", "high"][exposure_idx].to_string(),
        );
        let site_idx = correlated_level(&mut rng, class, 4, spec.correlation / 2.0);
        metadata.insert(
            "site".to_string(),
            ["arm", "face", "trunk", "leg"][site_idx].to_string(),
        );
        let texture_idx = correlated_level(&mut rng, class, 3, spec.correlation / 2.0);
        metadata.insert(
            "texture".to_string(),
            ["smooth", "rough", "scaly"][texture_idx].to_string(),
        );
        let age_idx = correlated_level(&mut rng, class, 4, 0.0);
        metadata.insert(
            "age_group".to_string(),
            ["young", "middle", "senior", "elder"][age_idx].to_string(),
        );

        let signature: Vec<f64> = (0..spec.channels)
            .map(|_| rng.gen_range(-0.2..0.2))
            .collect();
        let n_scans = rng.gen_range(spec.scans_min..=spec.scans_max);
        let scans: Vec<Scan> = (0..n_scans)
            .map(|s| Scan {
                modality: MODALITIES[s % MODALITIES.len()].to_string(),
                image: synthesize_scan(&mut rng, spec, class, &signature),
            })
            .collect();

        let patient_id = alloc::format!("p{p:05}");
        records.push(PatientRecord {
            group_key: patient_id.clone(),
            patient_id,
            scans,
            metadata,
            label: classes[class].clone(),
        });
    }
    DatasetManifest::new(records, schema, classes, "patient_id".to_string())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_spec() -> SyntheticSpec {
        SyntheticSpec {
            patients: 40,
            classes: 3,
            correlation: 0.8,
            image_signal: 0.5,
            seed: 11,
            scans_min: 1,
            scans_max: 3,
            channels: 2,
            height: 8,
            width: 8,
            class_weights: Vec::new(),
        }
    }

    #[test]
    fn generator_is_deterministic() {
        let a = generate_synthetic_cohort(&small_spec()).unwrap();
        let b = generate_synthetic_cohort(&small_spec()).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.len(), 40);
    }

    #[test]
    fn generator_rejects_degenerate_specs() {
        let mut spec = small_spec();
        spec.patients = 0;
        assert!(generate_synthetic_cohort(&spec).is_err());
        let mut spec = small_spec();
        spec.correlation = 1.5;
        assert!(generate_synthetic_cohort(&spec).is_err());
    }

    #[test]
    fn correlation_one_is_deterministic_mapping() {
        let mut spec = small_spec();
        spec.correlation = 1.0;
        spec.patients = 100;
        let manifest = generate_synthetic_cohort(&spec).unwrap();
        for record in &manifest.records {
            let class_idx = manifest.class_index(&record.label).unwrap();
            assert_eq!(
                record.metadata["risk_primary"],
                RISK_LEVEL_POOL[class_idx],
                "risk attribute must determine the label at correlation 1"
            );
        }
    }

    #[test]
    fn folds_keep_groups_together() {
        let manifest = generate_synthetic_cohort(&small_spec()).unwrap();
        let folds = make_folds(&manifest, 5, 3).unwrap();
        for fold in 0..5 {
            let (train, test) = folds.split(&manifest, fold).unwrap();
            let train_groups: BTreeSet<&str> =
                train.iter().map(|r| r.group_key.as_str()).collect();
            for r in &test {
                assert!(!train_groups.contains(r.group_key.as_str()));
            }
        }
    }

    #[test]
    fn folds_are_deterministic_and_balanced() {
        let manifest = generate_synthetic_cohort(&small_spec()).unwrap();
        let a = make_folds(&manifest, 5, 9).unwrap();
        let b = make_folds(&manifest, 5, 9).unwrap();
        assert_eq!(a, b);
        let mut sizes = alloc::vec![0usize; 5];
        for (_, &fold) in &a.fold_of_group {
            sizes[fold] += 1;
        }
        let min = *sizes.iter().min().unwrap();
        let max = *sizes.iter().max().unwrap();
        assert!(max - min <= 1, "fold sizes {sizes:?}");
    }

    #[test]
    fn ten_groups_five_folds_gives_two_each() {
        let mut spec = small_spec();
        spec.patients = 10;
        spec.classes = 2;
        let manifest = generate_synthetic_cohort(&spec).unwrap();
        let folds = make_folds(&manifest, 5, 1).unwrap();
        let mut sizes = alloc::vec![0usize; 5];
        for (_, &fold) in &folds.fold_of_group {
            sizes[fold] += 1;
        }
        assert_eq!(sizes, alloc::vec![2, 2, 2, 2, 2]);
    }

    #[test]
    fn single_scan_views_duplicate_without_augmentation() {
        let mut spec = small_spec();
        spec.scans_min = 1;
        spec.scans_max = 1;
        let manifest = generate_synthetic_cohort(&spec).unwrap();
        let record = &manifest.records[0];
        let cfg = AugmentationConfig {
            enabled: false,
            ..AugmentationConfig::default()
        };
        let mut rng = seeded_rng(5);
        let (v1, v2) = sample_two_views(record, &mut rng, &cfg, false).unwrap();
        assert_eq!(v1, v2);
        assert_eq!(v1, record.scans[0].image);
    }

    #[test]
    fn single_scan_views_differ_under_augmentation() {
        let mut spec = small_spec();
        spec.scans_min = 1;
        spec.scans_max = 1;
        let manifest = generate_synthetic_cohort(&spec).unwrap();
        let record = &manifest.records[0];
        let cfg = AugmentationConfig::default();
        let mut rng = seeded_rng(5);
        let mut any_differ = false;
        for _ in 0..10 {
            let (v1, v2) = sample_two_views(record, &mut rng, &cfg, false).unwrap();
            if v1 != v2 {
                any_differ = true;
            }
        }
        assert!(any_differ);
    }

    #[test]
    fn three_scan_pairs_are_near_uniform() {
        // 3 scans -> 3 unordered pairs, each expected in ~1/3 of draws
        let record = PatientRecord {
            patient_id: "p1".into(),
            group_key: "p1".into(),
            scans: (0..3)
                .map(|i| Scan {
                    modality: alloc::format!("m{i}"),
                    image: {
                        let mut img = ImageTensor::zeros(1, 2, 2);
                        img.set(0, 0, 0, i as f64);
                        img
                    },
                })
                .collect(),
            metadata: BTreeMap::new(),
            label: "class_a".into(),
        };
        let cfg = AugmentationConfig {
            enabled: false,
            ..AugmentationConfig::default()
        };
        let mut rng = seeded_rng(17);
        let mut counts = BTreeMap::new();
        let draws = 10_000;
        for _ in 0..draws {
            let (v1, v2) = sample_two_views(&record, &mut rng, &cfg, false).unwrap();
            let key = (v1.get(0, 0, 0) as i64, v2.get(0, 0, 0) as i64);
            *counts.entry(key).or_insert(0usize) += 1;
        }
        assert_eq!(counts.len(), 3);
        // 3 sigma of Binomial(10k, 1/3)
        let expect = draws as f64 / 3.0;
        let sigma = (draws as f64 * (1.0 / 3.0) * (2.0 / 3.0)).sqrt();
        for (&pair, &count) in &counts {
            assert!(
                (count as f64 - expect).abs() <= 3.0 * sigma,
                "pair {pair:?}: {count} vs {expect}"
            );
        }
    }

    #[test]
    fn same_modality_flag_restricts_pairs() {
        let img = ImageTensor::zeros(1, 2, 2);
        let record = PatientRecord {
            patient_id: "p1".into(),
            group_key: "p1".into(),
            scans: alloc::vec![
                Scan { modality: "white".into(), image: { let mut i = img.clone(); i.set(0,0,0,1.0); i } },
                Scan { modality: "blue".into(), image: { let mut i = img.clone(); i.set(0,0,0,2.0); i } },
                Scan { modality: "white".into(), image: { let mut i = img.clone(); i.set(0,0,0,3.0); i } },
            ],
            metadata: BTreeMap::new(),
            label: "class_a".into(),
        };
        let cfg = AugmentationConfig {
            enabled: false,
            ..AugmentationConfig::default()
        };
        let mut rng = seeded_rng(3);
        for _ in 0..50 {
            let (v1, v2) = sample_two_views(&record, &mut rng, &cfg, true).unwrap();
            let pair = (v1.get(0, 0, 0), v2.get(0, 0, 0));
            assert_eq!(pair, (1.0, 3.0), "only the white-white pair is eligible");
        }
    }

    #[test]
    fn zero_scan_record_is_rejected() {
        let record = PatientRecord {
            patient_id: "p1".into(),
            group_key: "p1".into(),
            scans: Vec::new(),
            metadata: BTreeMap::new(),
            label: "class_a".into(),
        };
        assert!(record.validate().is_err());
    }

    #[test]
    fn crop_resize_preserves_constant_images() {
        let mut img = ImageTensor::zeros(1, 8, 8);
        for v in img.data.iter_mut() {
            *v = 0.7;
        }
        let out = img.crop_resize(1, 1, 6, 6);
        for v in &out.data {
            assert!((v - 0.7).abs() < 1e-12);
        }
    }
}
