//! Dataset manifest file format: line-delimited JSON with a header line
//! (schema, class vocabulary, grouping policy) followed by one record per
//! line. Scans are inline tensors or paths to lossless raster images,
//! resolved relative to the manifest's directory.

use std::collections::BTreeMap;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use metalign_core::data::{DatasetManifest, ImageTensor, PatientRecord, Scan};
use metalign_core::soft_targets::MetadataSchema;
use serde::{Deserialize, Serialize};

use crate::error::{AppError, Result};

pub const MANIFEST_VERSION: u32 = 1;

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "kind")]
enum ManifestLine {
    #[serde(rename = "header")]
    Header(HeaderLine),
    #[serde(rename = "record")]
    Record(RecordLine),
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct HeaderLine {
    version: u32,
    group_key_field: String,
    classes: Vec<String>,
    schema: MetadataSchema,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct RecordLine {
    patient_id: String,
    group_key: String,
    label: String,
    metadata: BTreeMap<String, String>,
    scans: Vec<ScanLine>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct ScanLine {
    modality: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    inline: Option<ImageTensor>,
    #[serde(skip_serializing_if = "Option::is_none")]
    path: Option<String>,
}

/// Loads a raster image file into a normalized tensor (`u8 / 255`).
pub fn load_image_file(path: &Path) -> Result<ImageTensor> {
    let img = image::open(path)
        .map_err(|e| AppError::runtime(format!("cannot read image '{}': {e}", path.display())))?
        .to_rgb8();
    let (width, height) = img.dimensions();
    let mut out = ImageTensor::zeros(3, height as usize, width as usize);
    for (x, y, pixel) in img.enumerate_pixels() {
        for c in 0..3 {
            out.set(c, y as usize, x as usize, pixel.0[c] as f64 / 255.0);
        }
    }
    Ok(out)
}

/// Writes a tensor as an 8-bit PNG, mapping values through `v/4 + 0.5`.
pub fn save_image_file(path: &Path, image: &ImageTensor) -> Result<()> {
    if image.channels != 3 {
        return Err(AppError::validation(format!(
            "png export needs 3 channels, got {}",
            image.channels
        )));
    }
    let mut buf = image::RgbImage::new(image.width as u32, image.height as u32);
    for y in 0..image.height {
        for x in 0..image.width {
            let px: [u8; 3] = std::array::from_fn(|c| {
                ((image.get(c, y, x) * 0.25 + 0.5).clamp(0.0, 1.0) * 255.0).round() as u8
            });
            buf.put_pixel(x as u32, y as u32, image::Rgb(px));
        }
    }
    buf.save(path)
        .map_err(|e| AppError::runtime(format!("cannot write image '{}': {e}", path.display())))
}

/// Loads and validates a manifest; path-referenced scans are resolved
/// relative to the manifest's directory and inlined.
pub fn load_manifest(path: &Path) -> Result<DatasetManifest> {
    let file = std::fs::File::open(path).map_err(|e| {
        AppError::validation(format!("cannot open manifest '{}': {e}", path.display()))
    })?;
    let base_dir = path.parent().unwrap_or_else(|| Path::new("."));
    let reader = BufReader::new(file);
    let mut header: Option<HeaderLine> = None;
    let mut records: Vec<PatientRecord> = Vec::new();
    for (line_no, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let parsed: ManifestLine = serde_json::from_str(&line).map_err(|e| {
            AppError::validation(format!(
                "manifest '{}' line {}: {e}",
                path.display(),
                line_no + 1
            ))
        })?;
        match parsed {
            ManifestLine::Header(h) => {
                if h.version != MANIFEST_VERSION {
                    return Err(AppError::validation(format!(
                        "manifest version {} unsupported (expected {MANIFEST_VERSION})",
                        h.version
                    )));
                }
                if header.replace(h).is_some() {
                    return Err(AppError::validation("manifest has two header lines"));
                }
            }
            ManifestLine::Record(r) => {
                let mut scans = Vec::with_capacity(r.scans.len());
                for scan in r.scans {
                    let image = match (scan.inline, scan.path) {
                        (Some(inline), None) => inline,
                        (None, Some(rel)) => {
                            let full = base_dir.join(&rel);
                            if !full.exists() {
                                return Err(AppError::validation(format!(
                                    "record '{}' references missing image file '{}'",
                                    r.patient_id,
                                    full.display()
                                )));
                            }
                            load_image_file(&full)?
                        }
                        _ => {
                            return Err(AppError::validation(format!(
                                "record '{}': each scan needs exactly one of inline/path",
                                r.patient_id
                            )))
                        }
                    };
                    scans.push(Scan {
                        modality: scan.modality,
                        image,
                    });
                }
                records.push(PatientRecord {
                    patient_id: r.patient_id,
                    group_key: r.group_key,
                    scans,
                    metadata: r.metadata,
                    label: r.label,
                });
            }
        }
    }
    let header = header
        .ok_or_else(|| AppError::validation(format!("manifest '{}' has no header", path.display())))?;
    DatasetManifest::new(records, header.schema, header.classes, header.group_key_field)
        .map_err(Into::into)
}

/// Writes a manifest with inline tensors (the canonical synthetic form).
pub fn write_manifest(path: &Path, manifest: &DatasetManifest) -> Result<()> {
    let mut out = std::fs::File::create(path)?;
    let header = ManifestLine::Header(HeaderLine {
        version: MANIFEST_VERSION,
        group_key_field: manifest.group_key_field.clone(),
        classes: manifest.classes.clone(),
        schema: manifest.schema.clone(),
    });
    writeln!(out, "{}", serde_json::to_string(&header)?)?;
    for record in &manifest.records {
        let line = ManifestLine::Record(RecordLine {
            patient_id: record.patient_id.clone(),
            group_key: record.group_key.clone(),
            label: record.label.clone(),
            metadata: record.metadata.clone(),
            scans: record
                .scans
                .iter()
                .map(|s| ScanLine {
                    modality: s.modality.clone(),
                    inline: Some(s.image.clone()),
                    path: None,
                })
                .collect(),
        });
        writeln!(out, "{}", serde_json::to_string(&line)?)?;
    }
    Ok(())
}

/// Writes a manifest with scans exported as PNG files under `images/`
/// (lossy 8-bit quantization; inline form preserves exact values).
pub fn write_manifest_with_images(path: &Path, manifest: &DatasetManifest) -> Result<()> {
    let base_dir = path.parent().unwrap_or_else(|| Path::new("."));
    let image_dir = base_dir.join("images");
    std::fs::create_dir_all(&image_dir)?;
    let mut out = std::fs::File::create(path)?;
    let header = ManifestLine::Header(HeaderLine {
        version: MANIFEST_VERSION,
        group_key_field: manifest.group_key_field.clone(),
        classes: manifest.classes.clone(),
        schema: manifest.schema.clone(),
    });
    writeln!(out, "{}", serde_json::to_string(&header)?)?;
    for record in &manifest.records {
        let mut scans = Vec::with_capacity(record.scans.len());
        for (i, scan) in record.scans.iter().enumerate() {
            let rel = format!("images/{}_{i}.png", record.patient_id);
            save_image_file(&base_dir.join(&rel), &scan.image)?;
            scans.push(ScanLine {
                modality: scan.modality.clone(),
                inline: None,
                path: Some(rel),
            });
        }
        let line = ManifestLine::Record(RecordLine {
            patient_id: record.patient_id.clone(),
            group_key: record.group_key.clone(),
            label: record.label.clone(),
            metadata: record.metadata.clone(),
            scans,
        });
        writeln!(out, "{}", serde_json::to_string(&line)?)?;
    }
    Ok(())
}
