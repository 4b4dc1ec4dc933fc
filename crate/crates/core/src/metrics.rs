//! Binary classification metrics, ROC/AUC and fold aggregation.

use serde::{Deserialize, Serialize};

use crate::error::{validation_err, Error, Result};

/// Confusion counts relative to `positive_class`.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub tp: u64,
    pub tn: u64,
    pub fp: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
    pub positive_class: u8,
}

impl ConfusionMatrix {
    pub fn total(&self) -> u64 {
        self.tp + self.tn + self.fp + self.fn_
    }

    /// The same counts seen from the other class.
    pub fn swapped(&self) -> Self {
        Self {
            tp: self.tn,
            tn: self.tp,
            fp: self.fn_,
            fn_: self.fp,
            positive_class: 1 - self.positive_class,
        }
    }
}

fn check_classes(values: &[u8], what: &str) -> Result<()> {
    if let Some(v) = values.iter().find(|&&v| v > 1) {
        return Err(validation_err!("{what} contain class {v}; only 0 and 1 are defined"));
    }
    Ok(())
}

pub fn confusion(predictions: &[u8], labels: &[u8], positive_class: u8) -> Result<ConfusionMatrix> {
    if predictions.len() != labels.len() {
        return Err(validation_err!(
            "{} predictions for {} labels",
            predictions.len(),
            labels.len()
        ));
    }
    if labels.is_empty() {
        return Err(validation_err!("cannot score an empty prediction list"));
    }
    check_classes(predictions, "predictions")?;
    check_classes(labels, "labels")?;
    check_classes(&[positive_class], "positive class")?;
    let mut cm = ConfusionMatrix {
        positive_class,
        ..Default::default()
    };
    for (&p, &l) in predictions.iter().zip(labels) {
        match (p == positive_class, l == positive_class) {
            (true, true) => cm.tp += 1,
            (false, false) => cm.tn += 1,
            (true, false) => cm.fp += 1,
            (false, true) => cm.fn_ += 1,
        }
    }
    Ok(cm)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub accuracy: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub auc: Option<f64>,
    pub n_samples: u64,
    pub positive_class: u8,
    pub confusion: ConfusionMatrix,
    /// Set when precision, recall or F1 had a zero denominator and was
    /// reported as 0.
    pub zero_denominator: bool,
}

fn ratio(num: u64, den: u64, flag: &mut bool) -> f64 {
    if den == 0 {
        *flag = true;
        0.0
    } else {
        num as f64 / den as f64
    }
}

/// Accuracy, precision, recall and F1. The AUC slot is left empty.
pub fn classification_metrics(cm: &ConfusionMatrix) -> Result<MetricsReport> {
    let total = cm.total();
    if total == 0 {
        return Err(validation_err!("confusion matrix is empty"));
    }
    let mut zero = false;
    let precision = ratio(cm.tp, cm.tp + cm.fp, &mut zero);
    let recall = ratio(cm.tp, cm.tp + cm.fn_, &mut zero);
    // 2PR/(P+R) written over counts, so it is a single rounding
    let f1 = ratio(2 * cm.tp, 2 * cm.tp + cm.fp + cm.fn_, &mut zero);
    Ok(MetricsReport {
        accuracy: (cm.tn + cm.tp) as f64 / total as f64,
        precision,
        recall,
        f1,
        auc: None,
        n_samples: total,
        positive_class: cm.positive_class,
        confusion: *cm,
        zero_denominator: zero,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RocResult {
    /// `(fpr, tpr)` from `(0, 0)` to `(1, 1)`.
    pub points: Vec<(f64, f64)>,
    pub auc: f64,
}

/// AUC as the Mann-Whitney statistic over average ranks, plus the ROC
/// curve from a descending threshold sweep. `scores` are positive-class
/// scores.
pub fn roc_auc(scores: &[f64], labels: &[u8], positive_class: u8) -> Result<RocResult> {
    if scores.len() != labels.len() {
        return Err(validation_err!("{} scores for {} labels", scores.len(), labels.len()));
    }
    check_classes(labels, "labels")?;
    if scores.iter().any(|s| !s.is_finite()) {
        return Err(Error::NonFinite("ROC scores must be finite".into()));
    }
    let n_pos = labels.iter().filter(|&&l| l == positive_class).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::UndefinedAuc(format!(
            "{n_pos} positive and {n_neg} negative samples; both classes are required"
        )));
    }

    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));

    // average 1-based ranks over tie groups
    let mut rank_sum_pos = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        let avg = (i + j + 2) as f64 / 2.0;
        let pos_in_group = order[i..=j]
            .iter()
            .filter(|&&k| labels[k] == positive_class)
            .count();
        rank_sum_pos += avg * pos_in_group as f64;
        i = j + 1;
    }
    let (np, nn) = (n_pos as f64, n_neg as f64);
    let auc = (rank_sum_pos - np * (np + 1.0) / 2.0) / (np * nn);

    // sweep thresholds from high to low, one point per distinct score
    let mut points = vec![(0.0, 0.0)];
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut k = order.len();
    while k > 0 {
        let s = scores[order[k - 1]];
        while k > 0 && scores[order[k - 1]] == s {
            if labels[order[k - 1]] == positive_class {
                tp += 1;
            } else {
                fp += 1;
            }
            k -= 1;
        }
        points.push((fp as f64 / nn, tp as f64 / np));
    }

    let trapezoid = trapezoid_area(&points);
    if (trapezoid - auc).abs() > 1e-9 {
        return Err(Error::Contract(format!(
            "ROC trapezoid area {trapezoid} disagrees with rank AUC {auc}"
        )));
    }
    Ok(RocResult { points, auc })
}

pub fn trapezoid_area(points: &[(f64, f64)]) -> f64 {
    points
        .windows(2)
        .map(|w| (w[1].0 - w[0].0) * (w[0].1 + w[1].1) / 2.0)
        .sum()
}

/// Full report for one evaluation: threshold metrics from `predictions`,
/// AUC from `scores` when both classes are present.
pub fn evaluate_predictions(
    predictions: &[u8],
    scores: &[f64],
    labels: &[u8],
    positive_class: u8,
) -> Result<MetricsReport> {
    let cm = confusion(predictions, labels, positive_class)?;
    let mut report = classification_metrics(&cm)?;
    report.auc = match roc_auc(scores, labels, positive_class) {
        Ok(r) => Some(r.auc),
        Err(Error::UndefinedAuc(_)) => None,
        Err(e) => return Err(e),
    };
    Ok(report)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FoldSummary {
    pub mean: MetricsReport,
    pub per_fold: Vec<MetricsReport>,
}

/// Per-metric arithmetic means. Confusion counts and sample counts are
/// summed. The AUC mean covers the folds where it was defined and is
/// absent only if no fold had one.
pub fn aggregate_folds(reports: &[MetricsReport]) -> Result<FoldSummary> {
    let first = reports
        .first()
        .ok_or_else(|| validation_err!("no fold reports to aggregate"))?;
    if let Some(r) = reports.iter().find(|r| r.positive_class != first.positive_class) {
        return Err(validation_err!(
            "folds disagree on the positive class ({} vs {})",
            first.positive_class,
            r.positive_class
        ));
    }
    let n = reports.len() as f64;
    let mean = |f: fn(&MetricsReport) -> f64| reports.iter().map(f).sum::<f64>() / n;
    let aucs: Vec<f64> = reports.iter().filter_map(|r| r.auc).collect();
    let mut confusion = ConfusionMatrix {
        positive_class: first.positive_class,
        ..Default::default()
    };
    for r in reports {
        confusion.tp += r.confusion.tp;
        confusion.tn += r.confusion.tn;
        confusion.fp += r.confusion.fp;
        confusion.fn_ += r.confusion.fn_;
    }
    Ok(FoldSummary {
        mean: MetricsReport {
            accuracy: mean(|r| r.accuracy),
            precision: mean(|r| r.precision),
            recall: mean(|r| r.recall),
            f1: mean(|r| r.f1),
            auc: (!aucs.is_empty()).then(|| aucs.iter().sum::<f64>() / aucs.len() as f64),
            n_samples: reports.iter().map(|r| r.n_samples).sum(),
            positive_class: first.positive_class,
            confusion,
            zero_denominator: reports.iter().any(|r| r.zero_denominator),
        },
        per_fold: reports.to_vec(),
    })
}

/// One line of the summary table.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TableRow {
    pub dataset: String,
    pub accuracy: f64,
    pub auc: Option<f64>,
    pub f1: f64,
    pub training_seconds: f64,
}

impl TableRow {
    pub fn from_report(dataset: impl Into<String>, report: &MetricsReport, training_seconds: f64) -> Self {
        Self {
            dataset: dataset.into(),
            accuracy: report.accuracy,
            auc: report.auc,
            f1: report.f1,
            training_seconds,
        }
    }
}

/// `1 hr 3 min`, `4 min 12 s`, `9.3 s`.
pub fn format_duration(seconds: f64) -> String {
    if seconds < 60.0 {
        return format!("{seconds:.1} s");
    }
    let total = seconds.round() as u64;
    let (h, m, s) = (total / 3600, (total % 3600) / 60, total % 60);
    if h > 0 {
        format!("{h} hr {m} min")
    } else {
        format!("{m} min {s} s")
    }
}

/// Aligned text table with columns Dataset size, Accuracy, AUC, F1 Score,
/// Training time.
pub fn render_table(rows: &[TableRow]) -> String {
    let header = ["Dataset size", "Accuracy", "AUC", "F1 Score", "Training time"];
    let cells: Vec<[String; 5]> = rows
        .iter()
        .map(|r| {
            [
                r.dataset.clone(),
                format!("{:.2}%", r.accuracy * 100.0),
                r.auc.map_or_else(|| "n/a".to_string(), |a| format!("{a:.2}")),
                format!("{:.2}", r.f1),
                format_duration(r.training_seconds),
            ]
        })
        .collect();
    let mut widths = header.map(str::len);
    for row in &cells {
        for (w, c) in widths.iter_mut().zip(row) {
            *w = (*w).max(c.chars().count());
        }
    }
    let line = |row: &[String]| -> String {
        row.iter()
            .zip(widths)
            .map(|(c, w)| format!("{c:<w$}"))
            .collect::<Vec<_>>()
            .join("  ")
            .trim_end()
            .to_string()
    };
    let mut out = line(&header.map(String::from));
    out.push('\n');
    for row in &cells {
        out.push_str(&line(row));
        out.push('\n');
    }
    out
}
