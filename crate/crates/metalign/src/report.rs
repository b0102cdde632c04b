//! Plain-text tables rendered from the machine-readable metrics files:
//! per-fold results with `mean (SD)` cells, and the ablation table.

use metalign_core::metrics::{AblationVariant, FoldSummary};

use crate::pipeline::RunSummary;

fn cell(mean: f64, sd: f64) -> String {
    format!("{mean:.2} ({sd:.2})")
}

/// Per-class and aggregate table of one run, fold rows plus a summary row.
pub fn fold_table(run: &RunSummary) -> String {
    let classes = &run.summary.classes;
    let mut out = String::new();
    let mut header: Vec<String> = vec!["Fold".into()];
    header.extend(classes.iter().cloned());
    header.extend(["Avg F1-score".into(), "Acc".into(), "BAcc".into()]);
    let mut rows: Vec<Vec<String>> = vec![header];
    for (i, report) in run.per_fold.iter().enumerate() {
        let mut row = vec![format!("{i}")];
        row.extend(report.per_class_f1.iter().map(|v| format!("{v:.2}")));
        row.push(format!("{:.2}", report.macro_f1));
        row.push(format!("{:.2}", report.accuracy));
        row.push(format!("{:.2}", report.balanced_accuracy));
        rows.push(row);
    }
    let s = &run.summary;
    let mut row = vec!["mean (SD)".to_string()];
    for c in 0..classes.len() {
        row.push(cell(s.per_class_f1_mean[c], s.per_class_f1_sd[c]));
    }
    row.push(cell(s.macro_f1_mean, s.macro_f1_sd));
    row.push(cell(s.accuracy_mean, s.accuracy_sd));
    row.push(cell(s.balanced_accuracy_mean, s.balanced_accuracy_sd));
    rows.push(row);
    render(&rows, &mut out);
    out
}

fn check(flag: bool) -> &'static str {
    if flag {
        "x"
    } else {
        ""
    }
}

/// Ablation table: one row per variant, flag columns then `mean (SD)` cells.
pub fn ablation_table(rows_in: &[(AblationVariant, Option<FoldSummary>)]) -> String {
    let mut rows: Vec<Vec<String>> = vec![vec![
        "Knowledge Pretraining".into(),
        "L_img".into(),
        "L_glo".into(),
        "L_loc".into(),
        "L_soft".into(),
        "L_loc_dir".into(),
        "L_sup_con".into(),
        "Avg F1-score".into(),
        "Acc".into(),
        "BAcc".into(),
    ]];
    for (variant, summary) in rows_in {
        let mut row = vec![
            check(variant.knowledge_pretraining).to_string(),
            check(variant.l_img).to_string(),
            check(variant.l_glo).to_string(),
            check(variant.l_loc).to_string(),
            check(variant.l_soft).to_string(),
            check(variant.l_loc_dir).to_string(),
            check(variant.l_sup_con).to_string(),
        ];
        match summary {
            Some(s) => {
                row.push(cell(s.macro_f1_mean, s.macro_f1_sd));
                row.push(cell(s.accuracy_mean, s.accuracy_sd));
                row.push(cell(s.balanced_accuracy_mean, s.balanced_accuracy_sd));
            }
            None => {
                row.extend(["-".to_string(), "-".to_string(), "-".to_string()]);
            }
        }
        rows.push(row);
    }
    let mut out = String::new();
    render(&rows, &mut out);
    out
}

fn render(rows: &[Vec<String>], out: &mut String) {
    if rows.is_empty() {
        return;
    }
    let cols = rows[0].len();
    let mut widths = vec![0usize; cols];
    for row in rows {
        for (c, value) in row.iter().enumerate() {
            widths[c] = widths[c].max(value.len());
        }
    }
    for (i, row) in rows.iter().enumerate() {
        let line: Vec<String> = row
            .iter()
            .enumerate()
            .map(|(c, v)| format!("{v:>width$}", width = widths[c]))
            .collect();
        out.push_str(&line.join("  "));
        out.push('\n');
        if i == 0 {
            let total: usize = widths.iter().sum::<usize>() + 2 * (cols - 1);
            out.push_str(&"-".repeat(total));
            out.push('\n');
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use metalign_core::metrics::default_ablation_variants;

    #[test]
    fn ablation_table_has_one_row_per_variant() {
        let rows: Vec<(AblationVariant, Option<FoldSummary>)> = default_ablation_variants()
            .into_iter()
            .map(|v| (v, None))
            .collect();
        let table = ablation_table(&rows);
        let lines: Vec<&str> = table.lines().collect();
        // header + separator + 9 variants
        assert_eq!(lines.len(), 11);
        assert!(lines[0].contains("L_sup_con"));
        assert!(lines[10].contains("x"));
    }
}
