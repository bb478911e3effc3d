//! Confusion-matrix construction and the derived classification metrics:
//! accuracy, one-vs-rest TPR/TNR/PPV/F1 with macro averaging, ROC/AUC, and
//! the relative-percentage comparison of two scores.

use std::collections::BTreeMap;
use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Row-major `n_classes x n_classes` count matrix; rows are true classes,
/// columns are predictions.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    n_classes: usize,
    counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn new(n_classes: usize) -> Self {
        ConfusionMatrix { n_classes, counts: vec![0; n_classes * n_classes] }
    }

    pub fn from_predictions(preds: &[usize], labels: &[usize], n_classes: usize) -> Result<Self> {
        if preds.len() != labels.len() {
            return Err(Error::Shape(format!(
                "{} predictions against {} labels",
                preds.len(),
                labels.len()
            )));
        }
        let mut cm = ConfusionMatrix::new(n_classes);
        for (&p, &t) in preds.iter().zip(labels.iter()) {
            if p >= n_classes || t >= n_classes {
                return Err(Error::Domain(format!(
                    "class id out of range: true {t}, predicted {p}, n_classes {n_classes}"
                )));
            }
            cm.counts[t * n_classes + p] += 1;
        }
        Ok(cm)
    }

    pub fn n_classes(&self) -> usize {
        self.n_classes
    }

    pub fn get(&self, true_class: usize, predicted: usize) -> u64 {
        self.counts[true_class * self.n_classes + predicted]
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn trace(&self) -> u64 {
        (0..self.n_classes).map(|c| self.get(c, c)).sum()
    }

    pub fn row_total(&self, true_class: usize) -> u64 {
        (0..self.n_classes).map(|p| self.get(true_class, p)).sum()
    }

    pub fn col_total(&self, predicted: usize) -> u64 {
        (0..self.n_classes).map(|t| self.get(t, predicted)).sum()
    }

    /// Accuracy restricted to samples whose true class is in `classes`.
    /// `None` when no such samples were evaluated.
    pub fn subset_accuracy(&self, classes: &[usize]) -> Option<f64> {
        let support: u64 = classes.iter().map(|&c| self.row_total(c)).sum();
        if support == 0 {
            return None;
        }
        let correct: u64 = classes.iter().map(|&c| self.get(c, c)).sum();
        Some(correct as f64 / support as f64)
    }

    /// Writes `true\predicted` CSV with one row per true class.
    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<()> {
        write!(w, "true\\predicted")?;
        for p in 0..self.n_classes {
            write!(w, ",{p}")?;
        }
        writeln!(w)?;
        for t in 0..self.n_classes {
            write!(w, "{t}")?;
            for p in 0..self.n_classes {
                write!(w, ",{}", self.get(t, p))?;
            }
            writeln!(w)?;
        }
        Ok(())
    }
}

/// One-vs-rest metrics for a single class. `None` marks an undefined
/// denominator; such entries are excluded from the macro averages.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassMetrics {
    pub class: usize,
    pub support: u64,
    pub tpr: Option<f64>,
    pub tnr: Option<f64>,
    pub ppv: Option<f64>,
    pub f1: Option<f64>,
}

/// Evaluation summary: confusion matrix, macro-averaged metrics, per-class
/// breakdown, and optional per-grouping AUC values.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub confusion: ConfusionMatrix,
    pub accuracy: f64,
    pub tpr: f64,
    pub tnr: f64,
    pub ppv: f64,
    pub f1: f64,
    pub per_class: Vec<ClassMetrics>,
    pub auc: BTreeMap<String, f64>,
    /// Number of per-class metric values excluded from the macro averages
    /// because their denominator was zero.
    pub excluded_from_macro: usize,
}

fn ratio(num: u64, den: u64) -> Option<f64> {
    if den == 0 {
        None
    } else {
        Some(num as f64 / den as f64)
    }
}

fn macro_mean(values: impl Iterator<Item = Option<f64>>, excluded: &mut usize) -> f64 {
    let mut sum = 0.0;
    let mut n = 0usize;
    for v in values {
        match v {
            Some(x) => {
                sum += x;
                n += 1;
            }
            None => *excluded += 1,
        }
    }
    if n == 0 {
        0.0
    } else {
        sum / n as f64
    }
}

/// Derives accuracy and macro TPR/TNR/PPV/F1 from a confusion matrix.
///
/// Per class, one-vs-rest counts give TPR = TP/(TP+FN), TNR = TN/(TN+FP),
/// PPV = TP/(TP+FP) and F1 = 2*PPV*TPR/(PPV+TPR). Classes whose denominator
/// is zero are excluded from the corresponding macro average and counted in
/// `excluded_from_macro`, with a warning.
pub fn classification_metrics(confusion: ConfusionMatrix) -> Result<EvalReport> {
    let total = confusion.total();
    if total == 0 {
        return Err(Error::Domain("confusion matrix holds no samples".into()));
    }
    let n = confusion.n_classes();
    let mut per_class = Vec::with_capacity(n);
    for c in 0..n {
        let tp = confusion.get(c, c);
        let fn_ = confusion.row_total(c) - tp;
        let fp = confusion.col_total(c) - tp;
        let tn = total - tp - fn_ - fp;
        let tpr = ratio(tp, tp + fn_);
        let tnr = ratio(tn, tn + fp);
        let ppv = ratio(tp, tp + fp);
        let f1 = match (ppv, tpr) {
            (Some(p), Some(r)) => {
                if p + r > 0.0 {
                    Some(2.0 * p * r / (p + r))
                } else {
                    Some(0.0)
                }
            }
            _ => None,
        };
        if tpr.is_none() {
            log::warn!("class {c} has zero support; excluded from macro averages");
        }
        per_class.push(ClassMetrics { class: c, support: tp + fn_, tpr, tnr, ppv, f1 });
    }
    let mut excluded = 0usize;
    let tpr = macro_mean(per_class.iter().map(|m| m.tpr), &mut excluded);
    let tnr = macro_mean(per_class.iter().map(|m| m.tnr), &mut excluded);
    let ppv = macro_mean(per_class.iter().map(|m| m.ppv), &mut excluded);
    let f1 = macro_mean(per_class.iter().map(|m| m.f1), &mut excluded);
    Ok(EvalReport {
        accuracy: confusion.trace() as f64 / total as f64,
        confusion,
        tpr,
        tnr,
        ppv,
        f1,
        per_class,
        auc: BTreeMap::new(),
        excluded_from_macro: excluded,
    })
}

/// One point of an ROC curve.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RocPoint {
    pub fpr: f64,
    pub tpr: f64,
}

/// Threshold sweep over the unique scores (descending); tied scores move the
/// operating point in one step. Returns the curve and its trapezoidal AUC.
pub fn roc_auc(scores: &[f64], labels: &[bool]) -> Result<(Vec<RocPoint>, f64)> {
    if scores.len() != labels.len() {
        return Err(Error::Shape(format!(
            "{} scores against {} labels",
            scores.len(),
            labels.len()
        )));
    }
    if scores.iter().any(|s| !s.is_finite()) {
        return Err(Error::Domain("scores must be finite".into()));
    }
    let pos = labels.iter().filter(|&&l| l).count();
    let neg = labels.len() - pos;
    if pos == 0 || neg == 0 {
        return Err(Error::Domain("ROC needs both classes present".into()));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].partial_cmp(&scores[a]).expect("finite scores"));

    let mut curve = vec![RocPoint { fpr: 0.0, tpr: 0.0 }];
    let mut auc = 0.0;
    let (mut tp, mut fp) = (0u64, 0u64);
    let mut i = 0;
    while i < order.len() {
        let threshold = scores[order[i]];
        while i < order.len() && scores[order[i]] == threshold {
            if labels[order[i]] {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        let prev = *curve.last().expect("curve starts non-empty");
        let point =
            RocPoint { fpr: fp as f64 / neg as f64, tpr: tp as f64 / pos as f64 };
        auc += (point.fpr - prev.fpr) * (point.tpr + prev.tpr) / 2.0;
        curve.push(point);
    }
    Ok((curve, auc))
}

/// Relative percentage between a leading and a lagging score:
/// `(leading - lagging) / lagging * 100`.
pub fn relative_percentage(leading: f64, lagging: f64) -> Result<f64> {
    if !(lagging > 0.0) {
        return Err(Error::Domain(format!("lagging score must be > 0, got {lagging}")));
    }
    Ok((leading - lagging) / lagging * 100.0)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn perfect_predictions_are_diagonal() {
        let cm = ConfusionMatrix::from_predictions(&[0, 1, 2, 1], &[0, 1, 2, 1], 3).unwrap();
        assert_eq!(cm.trace(), 4);
        assert_eq!(cm.total(), 4);
        let report = classification_metrics(cm).unwrap();
        assert_eq!(report.accuracy, 1.0);
        assert_eq!(report.tpr, 1.0);
        assert_eq!(report.tnr, 1.0);
        assert_eq!(report.ppv, 1.0);
        assert_eq!(report.f1, 1.0);
    }

    #[test]
    fn binary_hand_arithmetic() {
        // [[8,2],[1,9]]: accuracy 0.85, class-0 TPR 0.8, class-0 PPV 8/9
        let mut cm = ConfusionMatrix::new(2);
        cm.counts = vec![8, 2, 1, 9];
        let report = classification_metrics(cm).unwrap();
        assert!((report.accuracy - 0.85).abs() < 1e-15);
        let c0 = &report.per_class[0];
        assert!((c0.tpr.unwrap() - 0.8).abs() < 1e-15);
        assert!((c0.ppv.unwrap() - 8.0 / 9.0).abs() < 1e-15);
    }

    /// Brute-force oracle: recounts TP/FP/FN/TN per class by iterating the
    /// (true, predicted) pairs the matrix was built from.
    #[test]
    fn metrics_match_per_sample_counter() {
        use rand::Rng;
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(17);
        for _ in 0..100 {
            let n_classes = rng.random_range(2..6usize);
            let n = rng.random_range(1..80usize);
            let labels: Vec<usize> = (0..n).map(|_| rng.random_range(0..n_classes)).collect();
            let preds: Vec<usize> = (0..n).map(|_| rng.random_range(0..n_classes)).collect();
            let cm = ConfusionMatrix::from_predictions(&preds, &labels, n_classes).unwrap();
            let report = classification_metrics(cm).unwrap();
            for c in 0..n_classes {
                let mut tp = 0u64;
                let mut fp = 0u64;
                let mut fn_ = 0u64;
                let mut tn = 0u64;
                for (&t, &p) in labels.iter().zip(preds.iter()) {
                    match (t == c, p == c) {
                        (true, true) => tp += 1,
                        (false, true) => fp += 1,
                        (true, false) => fn_ += 1,
                        (false, false) => tn += 1,
                    }
                }
                let m = &report.per_class[c];
                assert_eq!(m.tpr, ratio(tp, tp + fn_));
                assert_eq!(m.tnr, ratio(tn, tn + fp));
                assert_eq!(m.ppv, ratio(tp, tp + fp));
            }
            let correct =
                labels.iter().zip(preds.iter()).filter(|(t, p)| t == p).count() as f64;
            assert_eq!(report.accuracy, correct / n as f64);
        }
    }

    #[test]
    fn zero_support_class_excluded_with_warning_count() {
        // class 2 never appears as a true label
        let cm = ConfusionMatrix::from_predictions(&[0, 1, 2], &[0, 1, 1], 3).unwrap();
        let report = classification_metrics(cm).unwrap();
        assert!(report.per_class[2].tpr.is_none());
        assert!(report.excluded_from_macro > 0);
        // macro TPR averages classes 0 and 1 only: (1.0 + 0.5) / 2
        assert!((report.tpr - 0.75).abs() < 1e-15);
    }

    #[test]
    fn per_class_recall_examples() {
        // 36549 of 37022 correct -> recall 0.9872...; 11 of 29 -> 0.379
        let mut cm = ConfusionMatrix::new(2);
        cm.counts = vec![36_549, 37_022 - 36_549, 0, 1];
        let report = classification_metrics(cm).unwrap();
        assert!((report.per_class[0].tpr.unwrap() - 0.9872).abs() < 5e-5);
        let mut cm = ConfusionMatrix::new(2);
        cm.counts = vec![11, 29 - 11, 0, 1];
        let report = classification_metrics(cm).unwrap();
        assert!((report.per_class[0].tpr.unwrap() - 0.379).abs() < 5e-4);
    }

    #[test]
    fn subset_accuracy_restricts_to_rows() {
        let cm = ConfusionMatrix::from_predictions(&[0, 0, 2, 1], &[0, 1, 2, 1], 3).unwrap();
        // classes {0,1}: rows 0 (1 correct of 1) and 1 (1 of 2)
        assert!((cm.subset_accuracy(&[0, 1]).unwrap() - 2.0 / 3.0).abs() < 1e-15);
        assert_eq!(ConfusionMatrix::new(2).subset_accuracy(&[0]), None);
    }

    /// Brute-force oracle: concordant (positive, negative) pairs with ties
    /// counted one half.
    fn pairwise_auc(scores: &[f64], labels: &[bool]) -> f64 {
        let mut concordant = 0.0;
        let mut pairs = 0.0;
        for (i, &li) in labels.iter().enumerate() {
            if !li {
                continue;
            }
            for (j, &lj) in labels.iter().enumerate() {
                if lj {
                    continue;
                }
                pairs += 1.0;
                if scores[i] > scores[j] {
                    concordant += 1.0;
                } else if scores[i] == scores[j] {
                    concordant += 0.5;
                }
            }
        }
        concordant / pairs
    }

    #[test]
    fn auc_perfect_separation() {
        let scores = [0.9, 0.8, 0.2, 0.1];
        let labels = [true, true, false, false];
        let (curve, auc) = roc_auc(&scores, &labels).unwrap();
        assert!((auc - 1.0).abs() < 1e-12);
        assert_eq!(curve.first().unwrap(), &RocPoint { fpr: 0.0, tpr: 0.0 });
        let last = curve.last().unwrap();
        assert_eq!((last.fpr, last.tpr), (1.0, 1.0));
    }

    #[test]
    fn auc_constant_scores_is_half() {
        let scores = [0.5; 6];
        let labels = [true, false, true, false, true, false];
        let (_, auc) = roc_auc(&scores, &labels).unwrap();
        assert!((auc - 0.5).abs() < 1e-12);
    }

    #[test]
    fn auc_six_point_toy_matches_pair_oracle() {
        let scores = [0.1, 0.4, 0.35, 0.8, 0.35, 0.7];
        let labels = [false, true, false, true, true, false];
        let (_, auc) = roc_auc(&scores, &labels).unwrap();
        assert!((auc - pairwise_auc(&scores, &labels)).abs() < 1e-9);
    }

    #[test]
    fn auc_requires_both_classes() {
        assert!(roc_auc(&[0.1, 0.2], &[true, true]).is_err());
    }

    #[test]
    fn relative_percentage_paper_margins() {
        let dmc = relative_percentage(0.98, 0.97).unwrap();
        assert!((dmc - 1.03).abs() < 0.01, "{dmc}");
        let lacnn = relative_percentage(0.987, 0.864).unwrap();
        assert!((lacnn - 14.24).abs() < 0.05, "{lacnn}");
        assert_eq!(relative_percentage(0.5, 0.5).unwrap(), 0.0);
        assert!(relative_percentage(0.5, 0.0).is_err());
    }

    #[test]
    fn confusion_csv_layout() {
        let cm = ConfusionMatrix::from_predictions(&[0, 1, 1], &[0, 1, 0], 2).unwrap();
        let mut buf = Vec::new();
        cm.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(text, "true\\predicted,0,1\n0,1,1\n1,0,1\n");
    }
}
