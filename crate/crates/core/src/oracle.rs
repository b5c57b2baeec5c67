//! Independent reference implementations used to validate the pipeline.
//!
//! Everything here is deliberately written without the autodiff tape or the
//! production metric code: a hand-derived softmax-regression trainer, a
//! brute-force pairwise AUC, and a generator for linearly separable binary
//! tasks with a guaranteed margin. Tests compare the production path against
//! these.

use crate::prior::SampledTask;
use pdx_tensor::{SeededRng, Tensor};

/// Multinomial logistic regression trained by full-batch gradient descent
/// with hand-written gradients (no tape involvement).
pub struct SoftmaxRegression {
    w: Vec<f64>, // [features, classes]
    b: Vec<f64>,
    features: usize,
    classes: usize,
}

impl SoftmaxRegression {
    pub fn fit(x: &Tensor, y: &[usize], classes: usize, steps: usize, lr: f64) -> Self {
        let (n, f) = (x.rows(), x.cols());
        assert_eq!(n, y.len());
        let mut model = Self { w: vec![0.0; f * classes], b: vec![0.0; classes], features: f, classes };
        let mut probs = vec![0.0; classes];
        let mut gw = vec![0.0; f * classes];
        let mut gb = vec![0.0; classes];
        for _ in 0..steps {
            gw.iter_mut().for_each(|v| *v = 0.0);
            gb.iter_mut().for_each(|v| *v = 0.0);
            for i in 0..n {
                model.predict_into(x.row(i), &mut probs);
                for c in 0..classes {
                    let err = probs[c] - f64::from(u8::from(y[i] == c));
                    gb[c] += err;
                    for (j, &xv) in x.row(i).iter().enumerate() {
                        gw[j * classes + c] += err * xv;
                    }
                }
            }
            let inv_n = 1.0 / n as f64;
            for (w, &g) in model.w.iter_mut().zip(&gw) {
                *w -= lr * g * inv_n;
            }
            for (b, &g) in model.b.iter_mut().zip(&gb) {
                *b -= lr * g * inv_n;
            }
        }
        model
    }

    fn predict_into(&self, row: &[f64], probs: &mut [f64]) {
        for c in 0..self.classes {
            let mut z = self.b[c];
            for (j, &xv) in row.iter().enumerate() {
                z += xv * self.w[j * self.classes + c];
            }
            probs[c] = z;
        }
        let max = probs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for p in probs.iter_mut() {
            *p = (*p - max).exp();
            sum += *p;
        }
        for p in probs.iter_mut() {
            *p /= sum;
        }
    }

    pub fn predict(&self, row: &[f64]) -> usize {
        let mut probs = vec![0.0; self.classes];
        self.predict_into(row, &mut probs);
        probs
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.partial_cmp(b.1).expect("finite"))
            .expect("non-empty")
            .0
    }

    pub fn accuracy(&self, x: &Tensor, y: &[usize]) -> f64 {
        assert_eq!(self.features, x.cols());
        let correct = (0..x.rows()).filter(|&i| self.predict(x.row(i)) == y[i]).count();
        correct as f64 / x.rows() as f64
    }
}

/// Pairwise (brute force) binary AUC with the half-credit tie convention.
/// Degenerate label sets score 0.5.
pub fn pairwise_binary_auc(labels: &[bool], scores: &[f64]) -> f64 {
    assert_eq!(labels.len(), scores.len());
    let mut wins = 0.0;
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
                wins += 1.0;
            } else if scores[i] == scores[j] {
                wins += 0.5;
            }
        }
    }
    if pairs == 0.0 {
        0.5
    } else {
        wins / pairs
    }
}

/// Macro one-vs-rest AUC built from [`pairwise_binary_auc`].
pub fn pairwise_macro_auc(y_true: &[usize], probs: &Tensor) -> f64 {
    let classes = probs.cols();
    let mut total = 0.0;
    for c in 0..classes {
        let labels: Vec<bool> = y_true.iter().map(|&y| y == c).collect();
        let scores: Vec<f64> = (0..probs.rows()).map(|i| probs.get2(i, c)).collect();
        total += pairwise_binary_auc(&labels, &scores);
    }
    total / classes as f64
}

/// Binary task that is linearly separable with an empty margin band of
/// `2 * margin_sigmas` standard deviations along a random direction: class 0
/// sits below the band, class 1 above it. Off-direction coordinates are
/// standard normal noise.
pub fn separable_binary_task(
    features: usize,
    n_support: usize,
    n_query: usize,
    margin_sigmas: f64,
    rng: &mut SeededRng,
) -> SampledTask {
    assert!(features >= 1);
    // Random unit direction.
    let mut w: Vec<f64> = (0..features).map(|_| rng.normal()).collect();
    let norm = w.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-12);
    w.iter_mut().for_each(|v| *v /= norm);

    let total = n_support + n_query;
    let mut x = Tensor::zeros(vec![total, features]);
    let mut y = Vec::with_capacity(total);
    for i in 0..total {
        // Balanced classes; the along-direction coordinate is pushed at
        // least `margin_sigmas` away from zero on the class's side.
        let class = i % 2;
        let side = if class == 0 { -1.0 } else { 1.0 };
        let along = side * (margin_sigmas + rng.normal().abs());
        // Start from isotropic noise, then set the along-w component exactly.
        let noise: Vec<f64> = (0..features).map(|_| rng.normal()).collect();
        let proj: f64 = noise.iter().zip(&w).map(|(&n, &wv)| n * wv).sum();
        for j in 0..features {
            x.set2(i, j, noise[j] + (along - proj) * w[j]);
        }
        y.push(class);
    }

    // Shuffle support and query independently to mix class order.
    let mut order: Vec<usize> = (0..total).collect();
    rng.shuffle(&mut order[..n_support]);
    rng.shuffle(&mut order[n_support..]);
    let f = features;
    let xs = Tensor::matrix(total, f, order.iter().flat_map(|&i| x.row(i).to_vec()).collect());
    let ys: Vec<usize> = order.iter().map(|&i| y[i]).collect();

    SampledTask {
        support_x: Tensor::matrix(n_support, f, xs.values()[..n_support * f].to_vec()),
        support_y: ys[..n_support].to_vec(),
        query_x: Tensor::matrix(n_query, f, xs.values()[n_support * f..].to_vec()),
        query_y: ys[n_support..].to_vec(),
        n_classes: 2,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn softmax_regression_solves_a_linear_problem() {
        let mut rng = SeededRng::new(8);
        let n = 200;
        let mut x = Tensor::zeros(vec![n, 2]);
        let mut y = Vec::new();
        for i in 0..n {
            let c = i % 2;
            x.set2(i, 0, rng.normal() + if c == 0 { -2.0 } else { 2.0 });
            x.set2(i, 1, rng.normal());
            y.push(c);
        }
        let model = SoftmaxRegression::fit(&x, &y, 2, 400, 0.5);
        assert!(model.accuracy(&x, &y) > 0.97);
    }

    #[test]
    fn pairwise_auc_matches_hand_computed_example() {
        let labels = vec![false, false, true, true];
        let scores = vec![0.1, 0.4, 0.35, 0.8];
        assert_eq!(pairwise_binary_auc(&labels, &scores), 0.75);
    }

    #[test]
    fn degenerate_auc_is_half() {
        assert_eq!(pairwise_binary_auc(&[true, true], &[0.3, 0.9]), 0.5);
        assert_eq!(pairwise_binary_auc(&[false, false], &[0.3, 0.9]), 0.5);
    }

    #[test]
    fn separable_tasks_are_learnable_by_logistic_regression() {
        let rng = SeededRng::new(5);
        for i in 0..10 {
            let task = separable_binary_task(6, 40, 20, 2.0, &mut rng.split(i));
            let model = SoftmaxRegression::fit(&task.support_x, &task.support_y, 2, 600, 0.5);
            let acc = model.accuracy(&task.query_x, &task.query_y);
            assert!(acc >= 0.99, "oracle accuracy {acc} on task {i}");
        }
    }

    #[test]
    fn separable_task_margin_band_is_empty() {
        let mut rng = SeededRng::new(6);
        let task = separable_binary_task(4, 60, 30, 2.0, &mut rng);
        // Recover the direction from class means; projections must be
        // bounded away from the midpoint.
        let f = task.support_x.cols();
        let mut mean0 = vec![0.0; f];
        let mut mean1 = vec![0.0; f];
        let (mut n0, mut n1) = (0.0, 0.0);
        for i in 0..task.support_x.rows() {
            let target = if task.support_y[i] == 0 { (&mut mean0, &mut n0) } else { (&mut mean1, &mut n1) };
            for j in 0..f {
                target.0[j] += task.support_x.get2(i, j);
            }
            *target.1 += 1.0;
        }
        mean0.iter_mut().for_each(|v| *v /= n0);
        mean1.iter_mut().for_each(|v| *v /= n1);
        let dir: Vec<f64> = mean0.iter().zip(&mean1).map(|(&a, &b)| b - a).collect();
        let norm = dir.iter().map(|v| v * v).sum::<f64>().sqrt();
        let project = |row: &[f64]| dir.iter().zip(row).map(|(&d, &v)| d * v).sum::<f64>() / norm;
        let sign = |c: usize| if c == 0 { -1.0 } else { 1.0 };
        for i in 0..task.support_x.rows() {
            assert!(project(task.support_x.row(i)) * sign(task.support_y[i]) > 0.5);
        }
    }
}
