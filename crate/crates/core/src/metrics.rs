//! Classification metrics (per-class F1, macro F1, accuracy, balanced
//! accuracy), fold aggregation, and the ablation-variant table structure.

use alloc::string::String;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::{config_err, domain_err, math, shape_err};

/// Metrics of one evaluation, all in percent.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub classes: Vec<String>,
    pub per_class_f1: Vec<f64>,
    /// Classes absent from both predictions and truths, where F1 is reported
    /// as 0 by policy.
    pub undefined_f1: Vec<bool>,
    pub macro_f1: f64,
    pub accuracy: f64,
    pub balanced_accuracy: f64,
    pub support: Vec<usize>,
}

/// Cross-fold mean/SD summary per metric.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FoldSummary {
    pub classes: Vec<String>,
    pub folds: usize,
    pub per_class_f1_mean: Vec<f64>,
    pub per_class_f1_sd: Vec<f64>,
    pub macro_f1_mean: f64,
    pub macro_f1_sd: f64,
    pub accuracy_mean: f64,
    pub accuracy_sd: f64,
    pub balanced_accuracy_mean: f64,
    pub balanced_accuracy_sd: f64,
}

/// One-vs-rest confusion metrics over label index lists.
///
/// F1 per class is the harmonic mean of precision and recall, reported as 0
/// (with a flag) when undefined; macro F1 is the unweighted class mean;
/// balanced accuracy is the mean recall over classes with support.
pub fn compute_metrics(
    predictions: &[usize],
    truths: &[usize],
    classes: &[String],
) -> Result<MetricsReport> {
    if predictions.is_empty() {
        return Err(domain_err!("cannot compute metrics over zero samples"));
    }
    if predictions.len() != truths.len() {
        return Err(shape_err!(
            "{} predictions vs {} truths",
            predictions.len(),
            truths.len()
        ));
    }
    let n_classes = classes.len();
    if n_classes < 2 {
        return Err(config_err!("need at least 2 classes"));
    }
    for &v in predictions.iter().chain(truths) {
        if v >= n_classes {
            return Err(domain_err!("label index {v} outside {n_classes} classes"));
        }
    }
    let mut tp = alloc::vec![0usize; n_classes];
    let mut fp = alloc::vec![0usize; n_classes];
    let mut fn_ = alloc::vec![0usize; n_classes];
    let mut support = alloc::vec![0usize; n_classes];
    let mut correct = 0usize;
    for (&p, &t) in predictions.iter().zip(truths) {
        support[t] += 1;
        if p == t {
            tp[t] += 1;
            correct += 1;
        } else {
            fp[p] += 1;
            fn_[t] += 1;
        }
    }
    let mut per_class_f1 = Vec::with_capacity(n_classes);
    let mut undefined_f1 = Vec::with_capacity(n_classes);
    let mut recalls = Vec::new();
    for c in 0..n_classes {
        let denom = 2 * tp[c] + fp[c] + fn_[c];
        if denom == 0 {
            per_class_f1.push(0.0);
            undefined_f1.push(true);
        } else {
            per_class_f1.push(100.0 * 2.0 * tp[c] as f64 / denom as f64);
            undefined_f1.push(false);
        }
        if support[c] > 0 {
            recalls.push(tp[c] as f64 / support[c] as f64);
        }
    }
    let macro_f1 = per_class_f1.iter().sum::<f64>() / n_classes as f64;
    let accuracy = 100.0 * correct as f64 / predictions.len() as f64;
    let balanced_accuracy = 100.0 * recalls.iter().sum::<f64>() / recalls.len() as f64;
    Ok(MetricsReport {
        classes: classes.to_vec(),
        per_class_f1,
        undefined_f1,
        macro_f1,
        accuracy,
        balanced_accuracy,
        support: support.to_vec(),
    })
}

fn mean_sd(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0);
    (mean, math::sqrt(var))
}

/// Mean and sample standard deviation of every metric across folds.
pub fn aggregate_folds(reports: &[MetricsReport]) -> Result<FoldSummary> {
    if reports.len() < 2 {
        return Err(domain_err!("need at least 2 folds to aggregate"));
    }
    let classes = reports[0].classes.clone();
    for r in reports {
        if r.classes != classes {
            return Err(domain_err!("fold reports disagree on the class set"));
        }
    }
    let n_classes = classes.len();
    let mut per_class_f1_mean = Vec::with_capacity(n_classes);
    let mut per_class_f1_sd = Vec::with_capacity(n_classes);
    for c in 0..n_classes {
        let vals: Vec<f64> = reports.iter().map(|r| r.per_class_f1[c]).collect();
        let (m, s) = mean_sd(&vals);
        per_class_f1_mean.push(m);
        per_class_f1_sd.push(s);
    }
    let collect = |f: fn(&MetricsReport) -> f64| -> (f64, f64) {
        let vals: Vec<f64> = reports.iter().map(f).collect();
        mean_sd(&vals)
    };
    let (macro_f1_mean, macro_f1_sd) = collect(|r| r.macro_f1);
    let (accuracy_mean, accuracy_sd) = collect(|r| r.accuracy);
    let (balanced_accuracy_mean, balanced_accuracy_sd) = collect(|r| r.balanced_accuracy);
    Ok(FoldSummary {
        classes,
        folds: reports.len(),
        per_class_f1_mean,
        per_class_f1_sd,
        macro_f1_mean,
        macro_f1_sd,
        accuracy_mean,
        accuracy_sd,
        balanced_accuracy_mean,
        balanced_accuracy_sd,
    })
}

/// Feature flags of one ablation variant.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct AblationVariant {
    pub knowledge_pretraining: bool,
    pub l_img: bool,
    pub l_glo: bool,
    pub l_loc: bool,
    pub l_soft: bool,
    pub l_loc_dir: bool,
    pub l_sup_con: bool,
}

impl AblationVariant {
    pub fn validate(&self) -> Result<()> {
        if self.l_loc && self.l_loc_dir {
            return Err(config_err!(
                "l_loc and l_loc_dir are mutually exclusive"
            ));
        }
        if self.l_soft && self.l_sup_con {
            return Err(config_err!(
                "l_soft and l_sup_con are mutually exclusive"
            ));
        }
        Ok(())
    }

    /// Whether any alignment objective is active.
    pub fn any_alignment(&self) -> bool {
        self.l_img || self.l_glo || self.l_loc || self.l_soft || self.l_loc_dir || self.l_sup_con
    }

    /// Short text id used in file names and table rows.
    pub fn slug(&self) -> String {
        let mut parts: Vec<&str> = Vec::new();
        if self.knowledge_pretraining {
            parts.push("kp");
        }
        if self.l_img {
            parts.push("img");
        }
        if self.l_glo {
            parts.push("glo");
        }
        if self.l_loc {
            parts.push("loc");
        }
        if self.l_soft {
            parts.push("soft");
        }
        if self.l_loc_dir {
            parts.push("locdir");
        }
        if self.l_sup_con {
            parts.push("supcon");
        }
        if parts.is_empty() {
            String::from("none")
        } else {
            parts.join("+")
        }
    }
}

/// The nine reported ablation rows, in table order: the label-only baseline,
/// single and stacked loss combinations, the two simplified variants, and
/// the full configuration.
pub fn default_ablation_variants() -> Vec<AblationVariant> {
    let off = AblationVariant {
        knowledge_pretraining: false,
        l_img: false,
        l_glo: false,
        l_loc: false,
        l_soft: false,
        l_loc_dir: false,
        l_sup_con: false,
    };
    alloc::vec![
        off,
        AblationVariant { l_glo: true, ..off },
        AblationVariant { l_img: true, ..off },
        AblationVariant { l_img: true, l_glo: true, ..off },
        AblationVariant { l_img: true, l_glo: true, l_loc: true, ..off },
        AblationVariant { l_img: true, l_glo: true, l_loc: true, l_soft: true, ..off },
        AblationVariant {
            knowledge_pretraining: true,
            l_img: true,
            l_glo: true,
            l_soft: true,
            l_loc_dir: true,
            ..off
        },
        AblationVariant {
            knowledge_pretraining: true,
            l_img: true,
            l_glo: true,
            l_loc: true,
            l_sup_con: true,
            ..off
        },
        AblationVariant {
            knowledge_pretraining: true,
            l_img: true,
            l_glo: true,
            l_loc: true,
            l_soft: true,
            ..off
        },
    ]
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::string::ToString;

    fn classes(n: usize) -> Vec<String> {
        (0..n).map(|i| alloc::format!("c{i}")).collect()
    }

    #[test]
    fn perfect_predictions_score_100() {
        let truths = [0usize, 1, 2, 0, 1, 2];
        let report = compute_metrics(&truths, &truths, &classes(3)).unwrap();
        assert_eq!(report.macro_f1, 100.0);
        assert_eq!(report.accuracy, 100.0);
        assert_eq!(report.balanced_accuracy, 100.0);
        for f1 in &report.per_class_f1 {
            assert_eq!(*f1, 100.0);
        }
    }

    #[test]
    fn binary_confusion_closed_form() {
        // TP=4, FP=1, FN=1, TN=4 for class 1 ("positive")
        let truths = [1, 1, 1, 1, 1, 0, 0, 0, 0, 0];
        let preds = [1, 1, 1, 1, 0, 1, 0, 0, 0, 0];
        let report = compute_metrics(&preds, &truths, &classes(2)).unwrap();
        assert!((report.per_class_f1[1] - 80.0).abs() < 1e-12);
    }

    #[test]
    fn all_one_class_predictions() {
        // truths split 5/5, everything predicted class 0
        let truths = [0, 0, 0, 0, 0, 1, 1, 1, 1, 1];
        let preds = [0usize; 10];
        let report = compute_metrics(&preds, &truths, &classes(2)).unwrap();
        assert!((report.accuracy - 50.0).abs() < 1e-12);
        assert!((report.balanced_accuracy - 50.0).abs() < 1e-12);
        assert_eq!(report.per_class_f1[1], 0.0);
        assert!(!report.undefined_f1[1], "class 1 has support, f1 is defined");
    }

    #[test]
    fn absent_class_f1_flagged_undefined() {
        let truths = [0, 1, 0, 1];
        let preds = [0, 1, 0, 1];
        let report = compute_metrics(&preds, &truths, &classes(3)).unwrap();
        assert_eq!(report.per_class_f1[2], 0.0);
        assert!(report.undefined_f1[2]);
        // balanced accuracy ignores the absent class
        assert_eq!(report.balanced_accuracy, 100.0);
    }

    #[test]
    fn bacc_equals_accuracy_when_balanced() {
        let truths = [0, 0, 0, 1, 1, 1];
        let preds = [0, 1, 0, 1, 0, 1];
        let report = compute_metrics(&preds, &truths, &classes(2)).unwrap();
        assert!((report.accuracy - report.balanced_accuracy).abs() < 1e-12);
    }

    #[test]
    fn bacc_invariant_to_duplicating_one_class() {
        let truths = [0, 0, 1, 1, 1];
        let preds = [0, 1, 1, 0, 1];
        let base = compute_metrics(&preds, &truths, &classes(2)).unwrap();
        // duplicate every class-1 sample (with its prediction)
        let mut t2 = truths.to_vec();
        let mut p2 = preds.to_vec();
        for (&t, &p) in truths.iter().zip(&preds) {
            if t == 1 {
                t2.push(t);
                p2.push(p);
            }
        }
        let doubled = compute_metrics(&p2, &t2, &classes(2)).unwrap();
        assert!((base.balanced_accuracy - doubled.balanced_accuracy).abs() < 1e-12);
    }

    #[test]
    fn macro_f1_invariant_to_class_order() {
        let truths = [0, 1, 2, 2, 1, 0, 2];
        let preds = [0, 2, 2, 1, 1, 0, 2];
        let report = compute_metrics(&preds, &truths, &classes(3)).unwrap();
        // relabel classes by the permutation (2,0,1)
        let perm = [2usize, 0, 1];
        let t2: Vec<usize> = truths.iter().map(|&t| perm[t]).collect();
        let p2: Vec<usize> = preds.iter().map(|&p| perm[p]).collect();
        let report2 = compute_metrics(&p2, &t2, &classes(3)).unwrap();
        assert!((report.macro_f1 - report2.macro_f1).abs() < 1e-12);
    }

    #[test]
    fn empty_input_is_error() {
        assert!(compute_metrics(&[], &[], &classes(2)).is_err());
    }

    #[test]
    fn aggregate_two_folds() {
        let mk = |acc: f64| MetricsReport {
            classes: classes(2),
            per_class_f1: alloc::vec![acc, acc],
            undefined_f1: alloc::vec![false, false],
            macro_f1: acc,
            accuracy: acc,
            balanced_accuracy: acc,
            support: alloc::vec![5, 5],
        };
        let summary = aggregate_folds(&[mk(70.0), mk(80.0)]).unwrap();
        assert!((summary.macro_f1_mean - 75.0).abs() < 1e-12);
        assert!((summary.macro_f1_sd - 50.0f64.sqrt()).abs() < 1e-9);
        assert!((summary.macro_f1_sd - 7.071).abs() < 1e-3);

        // identical folds aggregate to zero SD, order does not matter
        let same = aggregate_folds(&[mk(70.0), mk(70.0), mk(70.0)]).unwrap();
        assert_eq!(same.macro_f1_sd, 0.0);
        let swapped = aggregate_folds(&[mk(80.0), mk(70.0)]).unwrap();
        assert_eq!(swapped.macro_f1_mean, summary.macro_f1_mean);
        assert_eq!(swapped.macro_f1_sd, summary.macro_f1_sd);
    }

    #[test]
    fn aggregate_rejects_mismatched_classes() {
        let a = MetricsReport {
            classes: classes(2),
            per_class_f1: alloc::vec![1.0, 2.0],
            undefined_f1: alloc::vec![false, false],
            macro_f1: 1.5,
            accuracy: 1.0,
            balanced_accuracy: 1.0,
            support: alloc::vec![1, 1],
        };
        let mut b = a.clone();
        b.classes = classes(3);
        b.per_class_f1.push(0.0);
        b.undefined_f1.push(true);
        b.support.push(0);
        assert!(aggregate_folds(&[a, b]).is_err());
    }

    #[test]
    fn nine_default_variants_with_exclusions_held() {
        let variants = default_ablation_variants();
        assert_eq!(variants.len(), 9);
        for v in &variants {
            v.validate().unwrap();
        }
        // first row: label-only baseline
        assert!(!variants[0].any_alignment());
        assert!(!variants[0].knowledge_pretraining);
        // last row: the full configuration
        let full = variants.last().unwrap();
        assert!(full.knowledge_pretraining && full.l_img && full.l_glo && full.l_loc && full.l_soft);
        assert!(!full.l_loc_dir && !full.l_sup_con);
        // the simplified variants appear exactly once each
        assert_eq!(variants.iter().filter(|v| v.l_loc_dir).count(), 1);
        assert_eq!(variants.iter().filter(|v| v.l_sup_con).count(), 1);
        // slugs are unique
        let mut slugs: Vec<String> = variants.iter().map(|v| v.slug()).collect();
        slugs.sort();
        slugs.dedup();
        assert_eq!(slugs.len(), 9);
    }

    #[test]
    fn exclusion_violations_rejected() {
        let mut v = default_ablation_variants()[8];
        v.l_loc_dir = true;
        assert!(v.validate().is_err());
        let mut v = default_ablation_variants()[8];
        v.l_sup_con = true;
        assert!(v.validate().is_err());
    }
}
