//! Classification metrics: confusion-matrix statistics and rank-based AUC.

use pdx_tensor::Tensor;
use serde::{Deserialize, Serialize};

/// Row = true class, column = predicted class.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Confusion {
    pub matrix: Vec<Vec<usize>>,
}

impl Confusion {
    pub fn from_predictions(y_true: &[usize], y_pred: &[usize], classes: usize) -> Self {
        assert_eq!(y_true.len(), y_pred.len());
        let mut matrix = vec![vec![0usize; classes]; classes];
        for (&t, &p) in y_true.iter().zip(y_pred) {
            assert!(t < classes && p < classes, "label outside class range");
            matrix[t][p] += 1;
        }
        Self { matrix }
    }

    pub fn classes(&self) -> usize {
        self.matrix.len()
    }

    pub fn total(&self) -> usize {
        self.matrix.iter().flatten().sum()
    }

    pub fn accuracy(&self) -> f64 {
        let correct: usize = (0..self.classes()).map(|c| self.matrix[c][c]).sum();
        correct as f64 / self.total() as f64
    }

    fn class_counts(&self, c: usize) -> (usize, usize, usize, usize) {
        let tp = self.matrix[c][c];
        let fn_: usize = self.matrix[c].iter().sum::<usize>() - tp;
        let fp: usize = (0..self.classes()).map(|r| self.matrix[r][c]).sum::<usize>() - tp;
        let tn = self.total() - tp - fn_ - fp;
        (tp, fp, fn_, tn)
    }

    /// Macro recall over classes present in the truth.
    pub fn sensitivity(&self) -> f64 {
        let mut total = 0.0;
        let mut count = 0.0;
        for c in 0..self.classes() {
            let (tp, _, fn_, _) = self.class_counts(c);
            if tp + fn_ > 0 {
                total += tp as f64 / (tp + fn_) as f64;
                count += 1.0;
            }
        }
        if count == 0.0 {
            0.0
        } else {
            total / count
        }
    }

    /// Macro true-negative rate over classes present in the truth.
    pub fn specificity(&self) -> f64 {
        let mut total = 0.0;
        let mut count = 0.0;
        for c in 0..self.classes() {
            let (tp, fp, fn_, tn) = self.class_counts(c);
            if tp + fn_ > 0 {
                if tn + fp > 0 {
                    total += tn as f64 / (tn + fp) as f64;
                }
                count += 1.0;
            }
        }
        if count == 0.0 {
            0.0
        } else {
            total / count
        }
    }

    /// Macro F1; a class with no true or predicted members contributes 0.
    pub fn macro_f1(&self) -> f64 {
        let mut total = 0.0;
        for c in 0..self.classes() {
            let (tp, fp, fn_, _) = self.class_counts(c);
            let denom = 2 * tp + fp + fn_;
            if denom > 0 {
                total += 2.0 * tp as f64 / denom as f64;
            }
        }
        total / self.classes() as f64
    }
}

/// Binary AUC by tie-averaged ranks: with positives' rank sum `R`,
/// `AUC = (R - n_pos (n_pos + 1) / 2) / (n_pos · n_neg)`. Degenerate inputs
/// (single-class labels) score 0.5.
pub fn binary_auc(labels: &[bool], scores: &[f64]) -> f64 {
    assert_eq!(labels.len(), scores.len());
    let n = labels.len();
    let n_pos = labels.iter().filter(|&&l| l).count();
    let n_neg = n - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return 0.5;
    }

    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| scores[a].partial_cmp(&scores[b]).expect("finite scores"));

    // Tie-averaged ranks (1-based).
    let mut ranks = vec![0.0; n];
    let mut i = 0;
    while i < n {
        let mut j = i + 1;
        while j < n && scores[order[j]] == scores[order[i]] {
            j += 1;
        }
        let avg = (i + 1 + j) as f64 / 2.0;
        for &idx in &order[i..j] {
            ranks[idx] = avg;
        }
        i = j;
    }

    let rank_sum: f64 = labels
        .iter()
        .zip(&ranks)
        .filter_map(|(&l, &r)| l.then_some(r))
        .sum();
    (rank_sum - n_pos as f64 * (n_pos as f64 + 1.0) / 2.0) / (n_pos as f64 * n_neg as f64)
}

/// Macro one-vs-rest AUC over class probability columns.
pub fn macro_auc(y_true: &[usize], probs: &Tensor) -> f64 {
    let classes = probs.cols();
    assert_eq!(y_true.len(), probs.rows());
    let mut total = 0.0;
    for c in 0..classes {
        let labels: Vec<bool> = y_true.iter().map(|&y| y == c).collect();
        let scores: Vec<f64> = (0..probs.rows()).map(|i| probs.get2(i, c)).collect();
        total += binary_auc(&labels, &scores);
    }
    total / classes as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::oracle;

    #[test]
    fn auc_matches_hand_computed_example() {
        let labels = vec![false, false, true, true];
        let scores = vec![0.1, 0.4, 0.35, 0.8];
        assert_eq!(binary_auc(&labels, &scores), 0.75);
    }

    #[test]
    fn auc_equals_brute_force_on_random_inputs_with_ties() {
        use pdx_tensor::SeededRng;
        let mut rng = SeededRng::new(77);
        for trial in 0..50 {
            let n = 5 + rng.below(100);
            let labels: Vec<bool> = (0..n).map(|_| rng.uniform() < 0.4).collect();
            // Quantized scores force ties.
            let scores: Vec<f64> = (0..n).map(|_| (rng.uniform() * 8.0).floor() / 8.0).collect();
            let fast = binary_auc(&labels, &scores);
            let slow = oracle::pairwise_binary_auc(&labels, &scores);
            assert!(
                (fast - slow).abs() == 0.0,
                "trial {trial}: rank {fast} vs pairwise {slow}"
            );
        }
    }

    #[test]
    fn confusion_example_matches_hand_computation() {
        // [[2, 1], [0, 3]]: accuracy 5/6, macro recall (2/3 + 1)/2 = 5/6.
        let y_true = vec![0, 0, 0, 1, 1, 1];
        let y_pred = vec![0, 0, 1, 1, 1, 1];
        let c = Confusion::from_predictions(&y_true, &y_pred, 2);
        assert_eq!(c.matrix, vec![vec![2, 1], vec![0, 3]]);
        assert!((c.accuracy() - 5.0 / 6.0).abs() < 1e-12);
        assert!((c.sensitivity() - 5.0 / 6.0).abs() < 1e-12);
        // Specificity: class 0 TNR = 1, class 1 TNR = 2/3.
        assert!((c.specificity() - 5.0 / 6.0).abs() < 1e-12);
        // F1: class 0 = 4/5, class 1 = 6/7.
        let expect_f1 = (0.8 + 6.0 / 7.0) / 2.0;
        assert!((c.macro_f1() - expect_f1).abs() < 1e-12);
    }

    #[test]
    fn perfect_predictions_score_one_everywhere() {
        let y = vec![0, 1, 2, 0, 1, 2];
        let c = Confusion::from_predictions(&y, &y, 3);
        assert_eq!(c.accuracy(), 1.0);
        assert_eq!(c.macro_f1(), 1.0);
        assert_eq!(c.sensitivity(), 1.0);
        assert_eq!(c.specificity(), 1.0);
    }

    #[test]
    fn macro_auc_handles_missing_class_as_half() {
        // Class 2 never appears in the truth; its one-vs-rest term is 0.5.
        let y = vec![0, 0, 1, 1];
        let probs = Tensor::matrix(
            4,
            3,
            vec![
                0.8, 0.1, 0.1, //
                0.7, 0.2, 0.1, //
                0.2, 0.7, 0.1, //
                0.1, 0.8, 0.1,
            ],
        );
        let auc = macro_auc(&y, &probs);
        // Classes 0 and 1 are perfectly ranked (AUC 1), class 2 defaults.
        assert!((auc - (1.0 + 1.0 + 0.5) / 3.0).abs() < 1e-12);
    }
}
