//! Soft supervision targets built from categorical patient metadata.
//!
//! Metadata records are encoded as concatenated one-hot blocks (one block per
//! schema attribute, disease-related blocks upweighted), and the pairwise
//! inner products are sharpened into a row-stochastic target matrix
//! `s[i][j] = softmax_j(<y_i, y_j> / tau_label)`.

use alloc::collections::BTreeMap;
use alloc::string::String;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};
use crate::numerics::softmax;
use crate::tensor::{dot, Tensor};
use crate::{domain_err, shape_err};

/// Sentinel level name used when a record omits an optional attribute.
pub const MISSING_LEVEL: &str = "missing";

/// One categorical attribute: a name, its levels, and its role flags.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttributeSpec {
    pub name: String,
    pub levels: Vec<String>,
    /// Disease-related blocks are multiplied by the schema upweight factor.
    #[serde(default)]
    pub disease_related: bool,
    /// Whether the attribute is rendered into the text sequence consumed by
    /// the text encoder.
    #[serde(default = "default_true")]
    pub visually_relevant: bool,
    /// When set, records may omit the attribute and a dedicated `missing`
    /// level is appended to the block so `<y,y>` stays constant per schema.
    #[serde(default)]
    pub allow_missing: bool,
}

fn default_true() -> bool {
    true
}

impl AttributeSpec {
    fn block_width(&self) -> usize {
        self.levels.len() + usize::from(self.allow_missing)
    }
}

/// Ordered attribute layout plus the disease-dimension upweight factor.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetadataSchema {
    pub attributes: Vec<AttributeSpec>,
    /// Weight applied to disease-related blocks (default 3).
    pub upweight_factor: f64,
}

impl Default for MetadataSchema {
    fn default() -> Self {
        MetadataSchema {
            attributes: Vec::new(),
            upweight_factor: 3.0,
        }
    }
}

impl MetadataSchema {
    pub fn new(attributes: Vec<AttributeSpec>, upweight_factor: f64) -> Result<Self> {
        let schema = MetadataSchema {
            attributes,
            upweight_factor,
        };
        schema.validate()?;
        Ok(schema)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.upweight_factor > 0.0) {
            return Err(domain_err!(
                "upweight_factor must be positive, got {}",
                self.upweight_factor
            ));
        }
        let mut seen = BTreeMap::new();
        for attr in &self.attributes {
            if attr.levels.len() < 2 {
                return Err(CoreError::Schema(alloc::format!(
                    "attribute '{}' needs at least 2 levels",
                    attr.name
                )));
            }
            if seen.insert(attr.name.clone(), ()).is_some() {
                return Err(CoreError::Schema(alloc::format!(
                    "duplicate attribute '{}'",
                    attr.name
                )));
            }
            if attr.levels.iter().any(|l| l == MISSING_LEVEL) && attr.allow_missing {
                return Err(CoreError::Schema(alloc::format!(
                    "attribute '{}' declares a literal '{MISSING_LEVEL}' level and allow_missing",
                    attr.name
                )));
            }
        }
        Ok(())
    }

    /// Total encoded vector length.
    pub fn vector_len(&self) -> usize {
        self.attributes.iter().map(|a| a.block_width()).sum()
    }

    pub fn attribute(&self, name: &str) -> Option<&AttributeSpec> {
        self.attributes.iter().find(|a| a.name == name)
    }
}

/// Encoded metadata vector: concatenated one-hot blocks, disease-related
/// blocks scaled by the upweight factor.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetadataVector {
    pub values: Vec<f64>,
}

/// Row-stochastic target matrix over a batch.
#[derive(Debug, Clone, PartialEq)]
pub struct SoftTargetMatrix {
    values: Tensor,
}

impl SoftTargetMatrix {
    /// Wraps an N x N matrix, checking row sums and entry range.
    pub fn new(values: Tensor) -> Result<Self> {
        if values.rows() != values.cols() || values.rows() == 0 {
            return Err(shape_err!(
                "soft target matrix must be square and nonempty, got {}x{}",
                values.rows(),
                values.cols()
            ));
        }
        for r in 0..values.rows() {
            let sum: f64 = values.row(r).iter().sum();
            if (sum - 1.0).abs() > 1e-6 {
                return Err(domain_err!("soft target row {r} sums to {sum}, not 1"));
            }
            if values.row(r).iter().any(|&v| v < 0.0 || v > 1.0 + 1e-12) {
                return Err(domain_err!("soft target row {r} has entries outside [0,1]"));
            }
        }
        Ok(SoftTargetMatrix { values })
    }

    pub fn identity(n: usize) -> Result<Self> {
        if n == 0 {
            return Err(shape_err!("identity soft matrix needs n >= 1"));
        }
        let mut m = Tensor::zeros(n, n);
        for i in 0..n {
            m.set(i, i, 1.0);
        }
        Ok(SoftTargetMatrix { values: m })
    }

    /// Uniform soft matrix restricted to same-label pairs.
    pub fn from_labels(labels: &[usize]) -> Result<Self> {
        if labels.is_empty() {
            return Err(shape_err!("labels must be nonempty"));
        }
        let n = labels.len();
        let mut m = Tensor::zeros(n, n);
        for i in 0..n {
            let count = labels.iter().filter(|&&l| l == labels[i]).count() as f64;
            for j in 0..n {
                if labels[j] == labels[i] {
                    m.set(i, j, 1.0 / count);
                }
            }
        }
        Ok(SoftTargetMatrix { values: m })
    }

    pub fn n(&self) -> usize {
        self.values.rows()
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.values.get(i, j)
    }

    pub fn values(&self) -> &Tensor {
        &self.values
    }
}

/// Encodes a record's attribute->level map against the schema.
///
/// Unknown levels are schema errors. A missing attribute maps to the
/// dedicated `missing` level when the schema allows it and is otherwise a
/// schema error.
pub fn encode_metadata(
    record: &BTreeMap<String, String>,
    schema: &MetadataSchema,
) -> Result<MetadataVector> {
    schema.validate()?;
    let mut values = Vec::with_capacity(schema.vector_len());
    for attr in &schema.attributes {
        let weight = if attr.disease_related {
            schema.upweight_factor
        } else {
            1.0
        };
        let hot = match record.get(&attr.name) {
            Some(level) => match attr.levels.iter().position(|l| l == level) {
                Some(idx) => idx,
                None if attr.allow_missing && level == MISSING_LEVEL => attr.levels.len(),
                None => {
                    return Err(CoreError::Schema(alloc::format!(
                        "unknown level '{level}' for attribute '{}'",
                        attr.name
                    )))
                }
            },
            None if attr.allow_missing => attr.levels.len(),
            None => {
                return Err(CoreError::Schema(alloc::format!(
                    "missing attribute '{}'",
                    attr.name
                )))
            }
        };
        for i in 0..attr.block_width() {
            values.push(if i == hot { weight } else { 0.0 });
        }
    }
    Ok(MetadataVector { values })
}

/// Inverse of [`encode_metadata`]: recovers the attribute->level map.
/// Attributes encoded as `missing` are left out of the returned map.
pub fn decode_metadata(
    vector: &MetadataVector,
    schema: &MetadataSchema,
) -> Result<BTreeMap<String, String>> {
    if vector.values.len() != schema.vector_len() {
        return Err(shape_err!(
            "vector length {} does not match schema length {}",
            vector.values.len(),
            schema.vector_len()
        ));
    }
    let mut record = BTreeMap::new();
    let mut offset = 0;
    for attr in &schema.attributes {
        let width = attr.block_width();
        let block = &vector.values[offset..offset + width];
        let hot = block
            .iter()
            .position(|&v| v != 0.0)
            .ok_or_else(|| CoreError::Schema(alloc::format!("all-zero block '{}'", attr.name)))?;
        if block.iter().filter(|&&v| v != 0.0).count() != 1 {
            return Err(CoreError::Schema(alloc::format!(
                "block '{}' is not one-hot",
                attr.name
            )));
        }
        if hot < attr.levels.len() {
            record.insert(attr.name.clone(), attr.levels[hot].clone());
        }
        offset += width;
    }
    Ok(record)
}

/// Sharpened row-stochastic targets: row i = softmax_j(<y_i, y_j>/tau_label).
pub fn build_soft_targets(vectors: &[MetadataVector], tau_label: f64) -> Result<SoftTargetMatrix> {
    if !(tau_label > 0.0) || !tau_label.is_finite() {
        return Err(domain_err!("tau_label must be positive, got {tau_label}"));
    }
    let n = vectors.len();
    if n == 0 {
        return Err(shape_err!("need at least one metadata vector"));
    }
    let len = vectors[0].values.len();
    if vectors.iter().any(|v| v.values.len() != len) {
        return Err(shape_err!("metadata vectors have unequal lengths"));
    }
    let mut out = Tensor::zeros(n, n);
    for i in 0..n {
        let logits: Vec<f64> = (0..n)
            .map(|j| dot(&vectors[i].values, &vectors[j].values) / tau_label)
            .collect();
        let probs = softmax(&logits)?;
        out.row_mut(i).copy_from_slice(&probs);
    }
    SoftTargetMatrix::new(out)
}
