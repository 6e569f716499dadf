//! Known-class and open-set classification metrics.

use std::collections::BTreeMap;

use serde::Serialize;

use crate::db::NOVEL_LABEL;
use crate::error::EvalError;

/// One-vs-rest metrics for a single class.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct ClassMetrics {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    /// Number of scored samples whose true label is this class.
    pub support: usize,
}

/// Open-set summary metrics.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct OpenSetMetrics {
    /// Macro precision over known classes.
    pub pre_k: f64,
    /// Macro recall over known classes.
    pub rcl_k: f64,
    /// Precision of the novel verdict as a single positive class.
    pub pre_n: f64,
    /// Recall of the novel verdict.
    pub rcl_n: f64,
    /// Balanced mean of known-sample accuracy and novel-sample accuracy.
    pub normalized_accuracy: f64,
}

/// Scored metrics for one result set.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct MetricsReport {
    /// Macro-averaged over known classes only.
    pub macro_precision: f64,
    pub macro_recall: f64,
    pub macro_f1: f64,
    /// Present for open-set runs.
    pub open_set: Option<OpenSetMetrics>,
    /// One-vs-rest metrics for every label in `label_space`.
    pub per_class: BTreeMap<String, ClassMetrics>,
    /// Known labels sorted, then the novel label.
    pub label_space: Vec<String>,
    /// Counts indexed `[true][predicted]` by `label_space` position.
    pub confusion: Vec<Vec<usize>>,
    /// Number of scored pairs.
    pub scored: usize,
}

fn label_space_of(label_set: &[String]) -> Vec<String> {
    let mut space: Vec<String> = label_set.to_vec();
    space.sort();
    space.dedup();
    space.push(NOVEL_LABEL.to_string());
    space
}

fn confusion_matrix(
    pairs: &[(String, String)],
    label_space: &[String],
    novel_truth_allowed: bool,
) -> Result<Vec<Vec<usize>>, EvalError> {
    let index: BTreeMap<&str, usize> = label_space
        .iter()
        .enumerate()
        .map(|(i, l)| (l.as_str(), i))
        .collect();
    let mut confusion = vec![vec![0usize; label_space.len()]; label_space.len()];
    for (truth, predicted) in pairs {
        let t = *index.get(truth.as_str()).ok_or_else(|| {
            EvalError::Validation(format!("true label {truth:?} is outside the label space"))
        })?;
        if !novel_truth_allowed && truth == NOVEL_LABEL {
            return Err(EvalError::Validation(
                "known-class evaluation cannot score a novel true label".into(),
            ));
        }
        let p = *index.get(predicted.as_str()).ok_or_else(|| {
            EvalError::Validation(format!(
                "predicted label {predicted:?} is outside the label space"
            ))
        })?;
        confusion[t][p] += 1;
    }
    Ok(confusion)
}

fn per_class_metrics(
    confusion: &[Vec<usize>],
    label_space: &[String],
) -> BTreeMap<String, ClassMetrics> {
    let n = label_space.len();
    let mut out = BTreeMap::new();
    for c in 0..n {
        let tp = confusion[c][c];
        let row: usize = confusion[c].iter().sum();
        let col: usize = (0..n).map(|t| confusion[t][c]).sum();
        let precision = if col == 0 { 0.0 } else { tp as f64 / col as f64 };
        let recall = if row == 0 { 0.0 } else { tp as f64 / row as f64 };
        let f1 = if precision + recall == 0.0 {
            0.0
        } else {
            2.0 * precision * recall / (precision + recall)
        };
        out.insert(
            label_space[c].clone(),
            ClassMetrics {
                precision,
                recall,
                f1,
                support: row,
            },
        );
    }
    out
}

fn macro_over_known(
    per_class: &BTreeMap<String, ClassMetrics>,
    known: &[String],
) -> (f64, f64, f64) {
    let n = known.len() as f64;
    let mut pre = 0.0;
    let mut rcl = 0.0;
    let mut f1 = 0.0;
    for label in known {
        let m = per_class[label];
        pre += m.precision;
        rcl += m.recall;
        f1 += m.f1;
    }
    (pre / n, rcl / n, f1 / n)
}

/// Scores (true, predicted) pairs where every true label is a known class.
/// Predictions may still be novel; those count as errors against the
/// true class.
pub fn evaluate_known(
    pairs: &[(String, String)],
    label_set: &[String],
) -> Result<MetricsReport, EvalError> {
    if pairs.is_empty() {
        return Err(EvalError::Validation("no scored pairs".into()));
    }
    if label_set.is_empty() {
        return Err(EvalError::Validation("the label set is empty".into()));
    }
    let label_space = label_space_of(label_set);
    let confusion = confusion_matrix(pairs, &label_space, false)?;
    let per_class = per_class_metrics(&confusion, &label_space);
    let known: Vec<String> = label_space[..label_space.len() - 1].to_vec();
    let (macro_precision, macro_recall, macro_f1) = macro_over_known(&per_class, &known);
    Ok(MetricsReport {
        macro_precision,
        macro_recall,
        macro_f1,
        open_set: None,
        per_class,
        label_space,
        confusion,
        scored: pairs.len(),
    })
}

/// Scores pairs whose true labels may include the novel label. Requires at
/// least one known-truth and one novel-truth sample.
pub fn evaluate_openset(
    pairs: &[(String, String)],
    label_set: &[String],
) -> Result<MetricsReport, EvalError> {
    if pairs.is_empty() {
        return Err(EvalError::Validation("no scored pairs".into()));
    }
    if label_set.is_empty() {
        return Err(EvalError::Validation("the label set is empty".into()));
    }
    let known_truth = pairs.iter().filter(|(t, _)| t != NOVEL_LABEL).count();
    let novel_truth = pairs.len() - known_truth;
    if known_truth == 0 || novel_truth == 0 {
        return Err(EvalError::Validation(format!(
            "open-set evaluation needs both strata: {known_truth} known-truth and \
             {novel_truth} novel-truth samples scored"
        )));
    }

    let label_space = label_space_of(label_set);
    let confusion = confusion_matrix(pairs, &label_space, true)?;
    let per_class = per_class_metrics(&confusion, &label_space);
    let known: Vec<String> = label_space[..label_space.len() - 1].to_vec();
    let (macro_precision, macro_recall, macro_f1) = macro_over_known(&per_class, &known);

    let novel = per_class[NOVEL_LABEL];
    let n = label_space.len();
    let known_correct: usize = (0..n - 1).map(|c| confusion[c][c]).sum();
    let aks = known_correct as f64 / known_truth as f64;
    let aus = confusion[n - 1][n - 1] as f64 / novel_truth as f64;

    Ok(MetricsReport {
        macro_precision,
        macro_recall,
        macro_f1,
        open_set: Some(OpenSetMetrics {
            pre_k: macro_precision,
            rcl_k: macro_recall,
            pre_n: novel.precision,
            rcl_n: novel.recall,
            normalized_accuracy: (aks + aus) / 2.0,
        }),
        per_class,
        label_space,
        confusion,
        scored: pairs.len(),
    })
}
