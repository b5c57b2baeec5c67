//! Synthetic task prior and engine pretraining.
//!
//! The engine never sees real data during pretraining. Each step draws a
//! fresh classification task from a prior over small nonlinear
//! teachers — random two-layer networks labeling standard-normal inputs —
//! fits the quantile preprocessing on the task's support set, and minimizes
//! query cross-entropy. After enough tasks the frozen engine performs
//! in-context classification on unseen tasks with no further updates.

use crate::engine::Engine;
use crate::quantile::QuantileTransform;
use crate::train::{DivergenceWatch, LossCurve};
use crate::CoreError;
use pdx_tensor::{Adam, Binding, SeededRng, Tape, Tensor};

#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PriorConfig {
    pub features_min: usize,
    pub features_max: usize,
    pub classes_min: usize,
    pub classes_max: usize,
    pub support_min: usize,
    pub support_max: usize,
    pub query_min: usize,
    pub query_max: usize,
    pub teacher_hidden: usize,
    pub label_noise_max: f64,
}

impl Default for PriorConfig {
    fn default() -> Self {
        Self {
            features_min: 3,
            features_max: 110,
            classes_min: 2,
            classes_max: 10,
            support_min: 8,
            support_max: 60,
            query_min: 8,
            query_max: 32,
            teacher_hidden: 16,
            label_noise_max: 0.3,
        }
    }
}

#[derive(Debug, Clone)]
pub struct SampledTask {
    pub support_x: Tensor,
    pub support_y: Vec<usize>,
    pub query_x: Tensor,
    pub query_y: Vec<usize>,
    pub n_classes: usize,
}

fn in_range(rng: &mut SeededRng, lo: usize, hi: usize) -> usize {
    lo + rng.below(hi - lo + 1)
}

/// One attempt at labeling `n` standard-normal rows with a random teacher.
fn teacher_labels(
    x: &Tensor,
    n_classes: usize,
    hidden: usize,
    noise: f64,
    rng: &mut SeededRng,
) -> Vec<usize> {
    let (n, f) = (x.rows(), x.cols());
    let w1 = Tensor::randn(vec![f, hidden], 1.0 / (f as f64).sqrt(), rng);
    let w2 = Tensor::randn(vec![hidden, n_classes], 1.0 / (hidden as f64).sqrt(), rng);
    let tanh_act = rng.uniform() < 0.5;
    let mut labels = Vec::with_capacity(n);
    let mut h = vec![0.0; hidden];
    for i in 0..n {
        let row = x.row(i);
        for (j, hv) in h.iter_mut().enumerate() {
            let mut acc = 0.0;
            for (p, &xv) in row.iter().enumerate() {
                acc += xv * w1.get2(p, j);
            }
            *hv = if tanh_act { acc.tanh() } else { acc.max(0.0) };
        }
        let mut best = 0;
        let mut best_v = f64::NEG_INFINITY;
        for c in 0..n_classes {
            let mut acc = noise * rng.normal();
            for (j, &hv) in h.iter().enumerate() {
                acc += hv * w2.get2(j, c);
            }
            if acc > best_v {
                best_v = acc;
                best = c;
            }
        }
        labels.push(best);
    }
    labels
}

/// Draw one prior task. Labelings that leave a class without support
/// examples are resampled up to 100 times; if that fails, the class set is
/// compressed to the classes the support actually contains and queries with
/// unseen labels are dropped.
pub fn sample_task(cfg: &PriorConfig, f_cap: usize, c_cap: usize, rng: &mut SeededRng) -> SampledTask {
    let f = in_range(rng, cfg.features_min, cfg.features_max.min(f_cap));
    let s = in_range(rng, cfg.support_min, cfg.support_max);
    let q = in_range(rng, cfg.query_min, cfg.query_max);
    // Keep the class count well below the support size so every class can
    // realistically appear in the support set.
    let c_hi = cfg.classes_max.min(c_cap).min((s / 4).max(2));
    let c = in_range(rng, cfg.classes_min.min(c_hi), c_hi);
    let noise = rng.uniform() * cfg.label_noise_max;

    for _attempt in 0..100 {
        let x = Tensor::randn(vec![s + q, f], 1.0, rng);
        let y = teacher_labels(&x, c, cfg.teacher_hidden, noise, rng);
        let support_has_all = (0..c).all(|class| y[..s].contains(&class));
        if support_has_all {
            return split_task(x, y, s, c);
        }
    }

    // Fallback: compress to support-present classes.
    let x = Tensor::randn(vec![s + q, f], 1.0, rng);
    let y = teacher_labels(&x, c, cfg.teacher_hidden, noise, rng);
    let mut remap = vec![usize::MAX; c];
    let mut next = 0;
    for &label in &y[..s] {
        if remap[label] == usize::MAX {
            remap[label] = next;
            next += 1;
        }
    }
    if next < 2 {
        // Degenerate support (all one class): force a two-class threshold
        // task on the first feature, which always has both sides present
        // for s >= 2 distinct values.
        let median = {
            let mut col: Vec<f64> = (0..s).map(|i| x.get2(i, 0)).collect();
            col.sort_by(|a, b| a.partial_cmp(b).expect("finite"));
            col[s / 2]
        };
        let y2: Vec<usize> = (0..s + q).map(|i| usize::from(x.get2(i, 0) > median)).collect();
        return split_task(x, y2, s, 2);
    }
    let f_cols = x.cols();
    let mut keep_rows: Vec<usize> = (0..s).collect();
    keep_rows.extend((s..s + q).filter(|&i| remap[y[i]] != usize::MAX));
    let kept_x = Tensor::matrix(
        keep_rows.len(),
        f_cols,
        keep_rows.iter().flat_map(|&i| x.row(i).to_vec()).collect(),
    );
    let kept_y: Vec<usize> = keep_rows.iter().map(|&i| remap[y[i]]).collect();
    split_task(kept_x, kept_y, s, next)
}

fn split_task(x: Tensor, y: Vec<usize>, s: usize, c: usize) -> SampledTask {
    let f = x.cols();
    let q = x.rows() - s;
    SampledTask {
        support_x: Tensor::matrix(s, f, x.values()[..s * f].to_vec()),
        support_y: y[..s].to_vec(),
        query_x: Tensor::matrix(q, f, x.values()[s * f..].to_vec()),
        query_y: y[s..].to_vec(),
        n_classes: c,
    }
}

#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PretrainConfig {
    pub steps: usize,
    pub lr: f64,
    pub prior: PriorConfig,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self { steps: 3000, lr: 1e-3, prior: PriorConfig::default() }
    }
}

#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct PretrainReport {
    pub steps: usize,
    pub initial_loss: f64,
    pub final_loss: f64,
    pub curve: LossCurve,
}

/// Train the engine on freshly sampled prior tasks. The quantile transform is
/// fitted on each task's support set and applied to support and queries, so
/// the engine only ever sees its inference-time input distribution.
pub fn pretrain_engine(
    engine: &mut Engine,
    cfg: &PretrainConfig,
    rng: &SeededRng,
) -> Result<PretrainReport, CoreError> {
    let f_cap = engine.config.f_max;
    let c_cap = engine.config.c_max;
    let mut adam = Adam::new(cfg.lr);
    let mut watch = DivergenceWatch::default();
    let mut curve = LossCurve::with_stride((cfg.steps / 50).max(1));
    let mut last = f64::NAN;

    for step in 0..cfg.steps {
        let mut task_rng = rng.split(step as u64);
        let task = sample_task(&cfg.prior, f_cap, c_cap, &mut task_rng);
        let qt = QuantileTransform::fit(&task.support_x)?;
        let sx = qt.apply(&task.support_x);
        let qx = qt.apply(&task.query_x);

        let mut tape = Tape::new();
        let mut binding = Binding::trainable();
        let loss = engine.episode_loss(
            &mut tape,
            &mut binding,
            &sx,
            &task.support_y,
            &qx,
            &task.query_y,
            task.n_classes,
        )?;
        let loss_v = tape.scalar_value(loss);
        watch.observe(step, loss_v)?;
        curve.push(step, loss_v);
        last = loss_v;

        let grads = tape.backward(loss);
        let named = binding.gradients(&grads);
        adam.step(engine, &named);
    }
    curve.push_final(cfg.steps.saturating_sub(1), last);
    Ok(PretrainReport {
        steps: cfg.steps,
        initial_loss: watch.initial().unwrap_or(f64::NAN),
        final_loss: last,
        curve,
    })
}

/// In-context accuracy on a fresh task: fit the quantile transform on the
/// support set, predict queries, compare argmax labels.
pub fn eval_on_task(engine: &Engine, task: &SampledTask) -> Result<f64, CoreError> {
    let qt = QuantileTransform::fit(&task.support_x)?;
    let sx = qt.apply(&task.support_x);
    let qx = qt.apply(&task.query_x);
    let pred = engine.predict_labels(&sx, &task.support_y, &qx, task.n_classes)?;
    let correct = pred.iter().zip(&task.query_y).filter(|(a, b)| a == b).count();
    Ok(correct as f64 / task.query_y.len() as f64)
}
