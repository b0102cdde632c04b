//! Corpus file ingestion (line-delimited JSON) and the synthetic
//! risk-disease corpus generator that stands in for the retrieval pipeline.

use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use metalign_core::data::synthetic_class_names;
use metalign_core::mlm::{CorpusDocument, ReviewStatus, RiskSection};
use metalign_core::numerics::seeded_rng;
use metalign_core::soft_targets::MetadataSchema;
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{AppError, Result};

/// On-disk corpus record: one JSON object per line, UTF-8.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CorpusLine {
    id: String,
    global_summary: String,
    #[serde(default)]
    risk_sections: Vec<RiskSectionLine>,
    review_status: String,
    #[serde(default)]
    source: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct RiskSectionLine {
    risk_factor: String,
    text: String,
}

impl CorpusLine {
    fn into_document(self) -> Result<CorpusDocument> {
        let review_status = match self.review_status.as_str() {
            "vetted" => ReviewStatus::Vetted,
            "unvetted" => ReviewStatus::Unvetted,
            other => {
                return Err(AppError::validation(format!(
                    "document '{}': unknown review_status '{other}'",
                    self.id
                )))
            }
        };
        let doc = CorpusDocument {
            id: self.id,
            global_summary: self.global_summary,
            risk_sections: self
                .risk_sections
                .into_iter()
                .map(|s| RiskSection {
                    risk_factor: s.risk_factor,
                    text: s.text,
                })
                .collect(),
            review_status,
            source: self.source,
        };
        doc.validate()?;
        Ok(doc)
    }

    fn from_document(doc: &CorpusDocument) -> Self {
        CorpusLine {
            id: doc.id.clone(),
            global_summary: doc.global_summary.clone(),
            risk_sections: doc
                .risk_sections
                .iter()
                .map(|s| RiskSectionLine {
                    risk_factor: s.risk_factor.clone(),
                    text: s.text.clone(),
                })
                .collect(),
            review_status: match doc.review_status {
                ReviewStatus::Vetted => "vetted".into(),
                ReviewStatus::Unvetted => "unvetted".into(),
            },
            source: doc.source.clone(),
        }
    }
}

/// Loads and schema-validates a corpus file. Unvetted documents are dropped
/// unless `include_unvetted` is set; parse errors carry the line number.
pub fn load_corpus(path: &Path, include_unvetted: bool) -> Result<Vec<CorpusDocument>> {
    let file = std::fs::File::open(path).map_err(|e| {
        AppError::validation(format!("cannot open corpus '{}': {e}", path.display()))
    })?;
    let reader = BufReader::new(file);
    let mut documents = Vec::new();
    for (line_no, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let parsed: CorpusLine = serde_json::from_str(&line).map_err(|e| {
            AppError::validation(format!(
                "corpus '{}' line {}: {e}",
                path.display(),
                line_no + 1
            ))
        })?;
        let doc = parsed.into_document().map_err(|e| {
            AppError::validation(format!(
                "corpus '{}' line {}: {e}",
                path.display(),
                line_no + 1
            ))
        })?;
        if doc.review_status == ReviewStatus::Vetted || include_unvetted {
            documents.push(doc);
        }
    }
    if documents.is_empty() {
        return Err(AppError::validation(format!(
            "corpus '{}' has no usable documents",
            path.display()
        )));
    }
    Ok(documents)
}

pub fn write_corpus(path: &Path, documents: &[CorpusDocument]) -> Result<()> {
    let mut out = std::fs::File::create(path)?;
    for doc in documents {
        let line = serde_json::to_string(&CorpusLine::from_document(doc))?;
        writeln!(out, "{line}")?;
    }
    Ok(())
}

const SUMMARY_TEMPLATES: &[&str] = &[
    "patient history of {risk} indicates elevated likelihood of {class}",
    "systematic review links {risk} with increased risk of {class}",
    "case report shows {risk} correlates with {class} diagnosis",
    "evidence supports {risk} as a strong marker of {class}",
];

const SECTION_TEMPLATES: &[&str] = &[
    "{risk} presents with {texture} texture and {site} site suggests {class}",
    "lesion pattern of {texture} finding at the {site} with {risk} supports {class}",
    "study of {risk} profile shows {class} likelihood increased with {exposure} exposure",
    "observed {risk} history correlates with {class} in the {age} age category",
];

/// Deterministic synthetic corpus over the schema and class words; a small
/// fraction of documents is marked unvetted to exercise the loader filter.
pub fn generate_synthetic_corpus(
    schema: &MetadataSchema,
    classes: usize,
    docs: usize,
    seed: u64,
) -> Result<Vec<CorpusDocument>> {
    if docs == 0 {
        return Err(AppError::validation("corpus needs at least 1 document"));
    }
    let class_names = synthetic_class_names(classes);
    let risk_levels: Vec<String> = schema
        .attribute("risk_primary")
        .map(|a| a.levels.clone())
        .unwrap_or_else(|| vec!["risk".to_string()]);
    let pick = |levels: Option<&metalign_core::soft_targets::AttributeSpec>,
                rng: &mut rand_chacha::ChaCha8Rng,
                fallback: &str| {
        levels
            .and_then(|a| a.levels.choose(rng).cloned())
            .unwrap_or_else(|| fallback.to_string())
    };
    let mut rng = seeded_rng(seed);
    let mut documents = Vec::with_capacity(docs);
    for i in 0..docs {
        let class = &class_names[i % class_names.len()];
        let risk = &risk_levels[i % risk_levels.len()];
        let texture = pick(schema.attribute("texture"), &mut rng, "rough");
        let site = pick(schema.attribute("site"), &mut rng, "arm");
        let exposure = pick(schema.attribute("exposure"), &mut rng, "high");
        let age = pick(schema.attribute("age_group"), &mut rng, "senior");
        let fill = |template: &str| {
            template
                .replace("{risk}", risk)
                .replace("{class}", class)
                .replace("{texture}", &texture)
                .replace("{site}", &site)
                .replace("{exposure}", &exposure)
                .replace("{age}", &age)
        };
        let summary = fill(SUMMARY_TEMPLATES[rng.gen_range(0..SUMMARY_TEMPLATES.len())]);
        let n_sections = rng.gen_range(1..=2);
        let risk_sections = (0..n_sections)
            .map(|_| RiskSection {
                risk_factor: risk.clone(),
                text: fill(SECTION_TEMPLATES[rng.gen_range(0..SECTION_TEMPLATES.len())]),
            })
            .collect();
        // roughly one document in twelve is left unvetted
        let review_status = if rng.gen_range(0..12) == 0 {
            ReviewStatus::Unvetted
        } else {
            ReviewStatus::Vetted
        };
        documents.push(CorpusDocument {
            id: format!("doc{i:04}"),
            global_summary: summary,
            risk_sections,
            review_status,
            source: format!("synthetic://{class}/{risk}"),
        });
    }
    Ok(documents)
}

#[cfg(test)]
mod tests {
    use super::*;
    use metalign_core::data::synthetic_schema;

    #[test]
    fn round_trip_and_vetted_filter() {
        let dir = tempfile::tempdir().unwrap();
        let schema = synthetic_schema(3).unwrap();
        let docs = generate_synthetic_corpus(&schema, 3, 36, 5).unwrap();
        let unvetted = docs
            .iter()
            .filter(|d| d.review_status == ReviewStatus::Unvetted)
            .count();
        assert!(unvetted >= 1, "fixture should include unvetted documents");

        let path = dir.path().join("corpus.jsonl");
        write_corpus(&path, &docs).unwrap();
        let vetted_only = load_corpus(&path, false).unwrap();
        assert_eq!(vetted_only.len(), docs.len() - unvetted);
        let all = load_corpus(&path, true).unwrap();
        assert_eq!(all.len(), docs.len());
    }

    #[test]
    fn parse_error_names_the_line() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.jsonl");
        std::fs::write(
            &path,
            "{\"id\":\"a\",\"global_summary\":\"x\",\"review_status\":\"vetted\"}\nnot json\n",
        )
        .unwrap();
        let err = load_corpus(&path, false).unwrap_err().to_string();
        assert!(err.contains("line 2"), "{err}");
    }

    #[test]
    fn empty_document_rejected_with_line() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.jsonl");
        std::fs::write(
            &path,
            "{\"id\":\"a\",\"global_summary\":\"  \",\"review_status\":\"vetted\"}\n",
        )
        .unwrap();
        let err = load_corpus(&path, false).unwrap_err().to_string();
        assert!(err.contains("line 1"), "{err}");
    }

    #[test]
    fn generator_is_deterministic() {
        let schema = synthetic_schema(3).unwrap();
        let a = generate_synthetic_corpus(&schema, 3, 20, 9).unwrap();
        let b = generate_synthetic_corpus(&schema, 3, 20, 9).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn corpus_words_stay_in_vocabulary() {
        let schema = synthetic_schema(3).unwrap();
        let classes: Vec<String> = synthetic_class_names(3);
        let vocab = metalign_core::vocab::Vocabulary::build(&schema, &classes).unwrap();
        let docs = generate_synthetic_corpus(&schema, 3, 24, 3).unwrap();
        for doc in &docs {
            let ids = vocab.tokenize(&doc.full_text());
            assert!(
                ids.iter().all(|&id| id != metalign_core::vocab::UNK),
                "document '{}' tokenizes outside the vocabulary: {}",
                doc.id,
                doc.full_text()
            );
        }
    }
}
