//! Classification metrics, ROC AUC, complexity accounting and CSV reports.

mod flops;
mod report;

pub use flops::{count_flops, count_params, encoder_flops, FlopsBreakdown, SCAN_FLOPS_PER_STATE};
pub use report::{emit_report, merge_report, read_predictions, score_predictions_file};

use crate::error::{Result, VimError};

/// Rows are true classes, columns predicted classes.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ConfusionMatrix {
    pub counts: Vec<Vec<u64>>,
    pub class_names: Vec<String>,
}

impl ConfusionMatrix {
    pub fn num_classes(&self) -> usize {
        self.counts.len()
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().flatten().sum()
    }

    pub fn trace(&self) -> u64 {
        (0..self.num_classes()).map(|i| self.counts[i][i]).sum()
    }

    pub fn with_class_names(mut self, names: Vec<String>) -> Result<Self> {
        if names.len() != self.num_classes() {
            return Err(VimError::invalid(
                "class name count does not match the matrix",
            ));
        }
        self.class_names = names;
        Ok(self)
    }
}

pub fn confusion(y_true: &[usize], y_pred: &[usize], k: usize) -> Result<ConfusionMatrix> {
    if y_true.len() != y_pred.len() {
        return Err(VimError::invalid(format!(
            "{} labels but {} predictions",
            y_true.len(),
            y_pred.len()
        )));
    }
    let mut counts = vec![vec![0u64; k]; k];
    for (&t, &p) in y_true.iter().zip(y_pred) {
        if let Some(&bad) = [t, p].iter().find(|&&l| l >= k) {
            return Err(VimError::LabelOutOfRange {
                label: bad,
                classes: k,
            });
        }
        counts[t][p] += 1;
    }
    Ok(ConfusionMatrix {
        counts,
        class_names: (0..k).map(|i| i.to_string()).collect(),
    })
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ClassMetrics {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub specificity: f64,
    pub support: u64,
}

/// Per-class one-vs-rest rates and their support-weighted means.
#[derive(Clone, Debug, PartialEq)]
pub struct Metrics {
    pub per_class: Vec<ClassMetrics>,
    pub accuracy: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub specificity: f64,
    /// Same as `recall`.
    pub sensitivity: f64,
}

fn ratio(num: u64, den: u64, what: &str, class: usize) -> f64 {
    if den == 0 {
        log::warn!("{what} of class {class} has a zero denominator; using 0");
        0.0
    } else {
        num as f64 / den as f64
    }
}

pub fn metrics(cm: &ConfusionMatrix) -> Result<Metrics> {
    let total = cm.total();
    if total == 0 {
        return Err(VimError::invalid("confusion matrix is empty"));
    }
    let k = cm.num_classes();
    let mut per_class = Vec::with_capacity(k);
    for c in 0..k {
        let tp = cm.counts[c][c];
        let support: u64 = cm.counts[c].iter().sum();
        let predicted: u64 = (0..k).map(|r| cm.counts[r][c]).sum();
        let (fn_, fp) = (support - tp, predicted - tp);
        let tn = total - tp - fn_ - fp;
        let precision = ratio(tp, tp + fp, "precision", c);
        let recall = ratio(tp, tp + fn_, "recall", c);
        let f1 = if precision + recall > 0.0 {
            2.0 * precision * recall / (precision + recall)
        } else {
            0.0
        };
        per_class.push(ClassMetrics {
            precision,
            recall,
            f1,
            specificity: ratio(tn, tn + fp, "specificity", c),
            support,
        });
    }
    let weighted = |f: fn(&ClassMetrics) -> f64| {
        per_class
            .iter()
            .map(|m| f(m) * m.support as f64)
            .sum::<f64>()
            / total as f64
    };
    let recall = weighted(|m| m.recall);
    Ok(Metrics {
        accuracy: cm.trace() as f64 / total as f64,
        precision: weighted(|m| m.precision),
        recall,
        f1: weighted(|m| m.f1),
        specificity: weighted(|m| m.specificity),
        sensitivity: recall,
        per_class,
    })
}

/// Rank-based AUC with midranks for ties. `None` when either side is empty.
pub fn binary_auc(scores: &[f64], positive: &[bool]) -> Option<f64> {
    let p = positive.iter().filter(|&&b| b).count();
    let n = positive.len() - p;
    if p == 0 || n == 0 {
        return None;
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        // ranks are 1-based; the tie group i..=j shares their mean
        let mid = (i + j) as f64 / 2.0 + 1.0;
        rank_sum += mid * order[i..=j].iter().filter(|&&o| positive[o]).count() as f64;
        i = j + 1;
    }
    let (p, n) = (p as f64, n as f64);
    Some((rank_sum - p * (p + 1.0) / 2.0) / (p * n))
}

#[derive(Clone, Debug, PartialEq)]
pub struct AucReport {
    /// Unweighted mean over classes with both positives and negatives.
    pub macro_auc: f64,
    pub per_class: Vec<Option<f64>>,
}

/// One-vs-rest AUC per class from row-major `[M, K]` scores.
pub fn roc_auc_ovr(scores: &[f64], y_true: &[usize], k: usize) -> Result<AucReport> {
    if scores.len() != y_true.len() * k {
        return Err(VimError::Shape {
            op: "roc_auc_ovr",
            lhs: vec![scores.len()],
            rhs: vec![y_true.len(), k],
        });
    }
    if let Some(&bad) = y_true.iter().find(|&&l| l >= k) {
        return Err(VimError::LabelOutOfRange {
            label: bad,
            classes: k,
        });
    }
    let mut per_class = Vec::with_capacity(k);
    for c in 0..k {
        let col: Vec<f64> = scores.iter().skip(c).step_by(k).copied().collect();
        let pos: Vec<bool> = y_true.iter().map(|&l| l == c).collect();
        let auc = binary_auc(&col, &pos);
        if auc.is_none() {
            log::warn!("class {c} has no positives or no negatives; AUC skipped");
        }
        per_class.push(auc);
    }
    let computed: Vec<f64> = per_class.iter().flatten().copied().collect();
    if computed.is_empty() {
        return Err(VimError::invalid(
            "AUC is undefined: every sample has the same class",
        ));
    }
    Ok(AucReport {
        macro_auc: computed.iter().sum::<f64>() / computed.len() as f64,
        per_class,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub model: String,
    pub strategy: String,
    pub confusion: ConfusionMatrix,
    pub metrics: Metrics,
    pub auc: Option<AucReport>,
    pub params: u64,
    pub flops: u64,
}

/// Scores `[M, K]` probabilities against labels; predictions are row argmaxes.
pub fn evaluate_scores(
    model: &str,
    strategy: &str,
    scores: &[f64],
    y_true: &[usize],
    class_names: &[String],
    params: u64,
    flops: u64,
) -> Result<EvalReport> {
    let k = class_names.len();
    if k == 0 || scores.len() != y_true.len() * k {
        return Err(VimError::Shape {
            op: "evaluate",
            lhs: vec![scores.len()],
            rhs: vec![y_true.len(), k],
        });
    }
    let y_pred: Vec<usize> = scores.chunks(k).map(crate::train::argmax).collect();
    let confusion = confusion(y_true, &y_pred, k)?.with_class_names(class_names.to_vec())?;
    let metrics = metrics(&confusion)?;
    let auc = match roc_auc_ovr(scores, y_true, k) {
        Ok(a) => Some(a),
        Err(e) => {
            log::warn!("{e}");
            None
        }
    };
    Ok(EvalReport {
        model: model.to_string(),
        strategy: strategy.to_string(),
        confusion,
        metrics,
        auc,
        params,
        flops,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hand_matrix() {
        let cm = confusion(&[0, 0, 1, 2], &[0, 1, 1, 2], 3).unwrap();
        assert_eq!(cm.counts, vec![vec![1, 1, 0], vec![0, 1, 0], vec![0, 0, 1]]);
        let m = metrics(&cm).unwrap();
        assert_eq!(m.accuracy, 0.75);
        assert!((m.per_class[1].specificity - 2.0 / 3.0).abs() < 1e-15);
        assert_eq!(m.per_class[1].precision, 0.5);
        assert_eq!(m.sensitivity, m.recall);
    }

    #[test]
    fn perfect_and_empty() {
        let y: Vec<usize> = (0..158).map(|i| i % 6).collect();
        let cm = confusion(&y, &y, 6).unwrap();
        for i in 0..6 {
            for j in 0..6 {
                assert_eq!(cm.counts[i][j] > 0, i == j);
            }
        }
        let m = metrics(&cm).unwrap();
        for v in [
            m.accuracy,
            m.precision,
            m.recall,
            m.f1,
            m.specificity,
            m.sensitivity,
        ] {
            assert_eq!(v, 1.0);
        }
        let empty = confusion(&[], &[], 3).unwrap();
        assert_eq!(empty.total(), 0);
        assert!(metrics(&empty).is_err());
        assert!(confusion(&[3], &[0], 3).is_err());
    }

    #[test]
    fn zero_denominators_are_zero() {
        // class 2 never predicted and never present
        let cm = confusion(&[0, 1], &[1, 1], 3).unwrap();
        let m = metrics(&cm).unwrap();
        assert_eq!(m.per_class[0].precision, 0.0);
        assert_eq!(m.per_class[2].f1, 0.0);
        assert!(m.precision.is_finite());
    }

    #[test]
    fn auc_examples() {
        let s = [0.9, 0.8, 0.3, 0.2];
        assert_eq!(binary_auc(&s, &[true, true, false, false]), Some(1.0));
        assert_eq!(binary_auc(&s, &[true, false, true, false]), Some(0.75));
        assert_eq!(
            binary_auc(&[0.4; 4], &[true, false, true, false]),
            Some(0.5)
        );
        assert_eq!(binary_auc(&s, &[true; 4]), None);
    }

    #[test]
    fn ovr_skips_absent_classes_and_rejects_single_class() {
        let scores = [0.9, 0.1, 0.0, 0.2, 0.8, 0.0, 0.6, 0.4, 0.0];
        let r = roc_auc_ovr(&scores, &[0, 1, 0], 3).unwrap();
        assert_eq!(r.per_class[2], None);
        assert_eq!(r.macro_auc, 1.0);
        assert!(roc_auc_ovr(&scores, &[1, 1, 1], 3).is_err());
    }
}
