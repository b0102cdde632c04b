//! Ablation suite: runs the full pipeline once per variant, sharing the
//! stage-1 checkpoint between variants that enable knowledge pretraining,
//! and emits the machine-readable results plus the aligned text table.

use std::path::{Path, PathBuf};

use metalign_core::metrics::{default_ablation_variants, AblationVariant, FoldSummary};
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::error::{AppError, Result};
use crate::pipeline::{run_full, RunOptions, StageSelection};
use crate::report::ablation_table;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AblationRow {
    pub variant: AblationVariant,
    pub slug: String,
    pub out_dir: PathBuf,
    pub summary: Option<FoldSummary>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AblationOutcome {
    pub rows: Vec<AblationRow>,
}

/// Directory of the shared stage-1 checkpoint inside the suite root.
pub fn shared_stage1_dir(root: &Path) -> PathBuf {
    root.join("shared_stage1")
}

/// Runs every variant; with `dry_run` only the table skeleton is emitted.
pub fn run_ablation_suite(
    config: &RunConfig,
    variants: &[AblationVariant],
    root: &Path,
    dry_run: bool,
) -> Result<AblationOutcome> {
    if variants.is_empty() {
        return Err(AppError::validation("ablation suite needs at least one variant"));
    }
    for variant in variants {
        variant.validate()?;
    }
    std::fs::create_dir_all(root)?;
    let mut rows = Vec::with_capacity(variants.len());
    for (index, variant) in variants.iter().enumerate() {
        let slug = variant.slug();
        let out_dir = root.join(format!("variant_{index:02}_{slug}"));
        let summary = if dry_run {
            None
        } else {
            let mut sub_config = config.clone();
            sub_config.run.out_dir = out_dir.clone();
            let options = RunOptions {
                variant: *variant,
                // variants sharing the knowledge-pretraining flag reuse one
                // stage-1 checkpoint (the corpus does not depend on fold or
                // loss flags)
                stage1_cache: variant
                    .knowledge_pretraining
                    .then(|| shared_stage1_dir(root)),
                stages: StageSelection::all(),
            };
            let outcome = run_full(&sub_config, &options)?
                .ok_or_else(|| AppError::runtime("ablation run did not reach stage 3"))?;
            // populate the shared cache from the first variant that trained
            if variant.knowledge_pretraining {
                let shared = shared_stage1_dir(root);
                let own = crate::pipeline::RunDirs::new(out_dir.clone()).stage1_checkpoint();
                if !crate::checkpoint::checkpoint_exists(&shared)
                    && crate::checkpoint::checkpoint_exists(&own)
                {
                    copy_dir(&own, &shared)?;
                }
            }
            Some(outcome.summary)
        };
        rows.push(AblationRow {
            variant: *variant,
            slug,
            out_dir,
            summary,
        });
    }
    let outcome = AblationOutcome { rows };
    std::fs::write(
        root.join("ablation.json"),
        serde_json::to_string_pretty(&outcome)?,
    )?;
    let table_rows: Vec<(AblationVariant, Option<FoldSummary>)> = outcome
        .rows
        .iter()
        .map(|r| (r.variant, r.summary.clone()))
        .collect();
    std::fs::write(root.join("ablation_table.txt"), ablation_table(&table_rows))?;
    Ok(outcome)
}

fn copy_dir(from: &Path, to: &Path) -> Result<()> {
    std::fs::create_dir_all(to)?;
    for entry in std::fs::read_dir(from)? {
        let entry = entry?;
        if entry.file_type()?.is_file() {
            std::fs::copy(entry.path(), to.join(entry.file_name()))?;
        }
    }
    Ok(())
}

/// Parses the CLI variant selector: `default` (the nine reported rows),
/// `full`, `none`, or comma-separated indices into the default list.
pub fn parse_variants(selector: &str) -> Result<Vec<AblationVariant>> {
    let defaults = default_ablation_variants();
    match selector {
        "default" | "all" => Ok(defaults),
        "full" => Ok(vec![*defaults.last().expect("nonempty defaults")]),
        "none" => Ok(vec![defaults[0]]),
        list => list
            .split(',')
            .map(|part| {
                let index: usize = part.trim().parse().map_err(|_| {
                    AppError::validation(format!(
                        "variant selector '{part}' is neither an index nor a known name"
                    ))
                })?;
                defaults.get(index).copied().ok_or_else(|| {
                    AppError::validation(format!(
                        "variant index {index} out of range 0..{}",
                        defaults.len()
                    ))
                })
            })
            .collect(),
    }
}
