//! Learned input adapter for the frozen in-context engine.
//!
//! The engine expects quantile-scored features. The adapter is a small MLP
//! trained to replace that preprocessing for a specific cohort: it maps raw
//! representation vectors into the engine's input space. Training combines
//! two objectives on stratified context/query episodes:
//!
//! * an alignment loss — mean per-token L1 distance between the adapter
//!   output and the quantile scores fitted on the episode's context rows;
//! * the engine's own query cross-entropy, backpropagated *through* the
//!   frozen engine into the adapter.
//!
//! At inference the adapter transforms both context and query rows and the
//! frozen engine predicts as usual.

use crate::data::{gather_labels, gather_rows_host, stratified_sample, stratified_two_way};
use crate::engine::Engine;
use crate::quantile::QuantileTransform;
use crate::train::DivergenceWatch;
use crate::CoreError;
use pdx_tensor::{ops, Adam, Binding, Parameterized, SeededRng, Tape, Tensor, Tracked};

#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdapterConfig {
    pub layers: usize,
    /// Hidden width as a multiple of the input width.
    pub hidden_mult: usize,
    pub lr: f64,
    pub epochs: usize,
    pub lambda_align: f64,
    pub lambda_icl: f64,
    /// Fraction of each episode used as context.
    pub support_frac: f64,
    /// Resample the episode every epoch (`false`) or reuse one fixed draw
    /// (`true`).
    pub fixed_episode: bool,
    /// Upper bound on episode size; larger training sets are subsampled
    /// per epoch with class stratification.
    pub episode_cap: usize,
}

impl Default for AdapterConfig {
    fn default() -> Self {
        Self {
            layers: 6,
            hidden_mult: 2,
            lr: 1e-3,
            epochs: 100,
            lambda_align: 1.0,
            lambda_icl: 0.01,
            support_frac: 0.7,
            fixed_episode: false,
            episode_cap: 1024,
        }
    }
}

/// MLP with GELU between layers and a linear output.
#[derive(Debug, Clone)]
pub struct Adapter {
    pub d_in: usize,
    pub d_out: usize,
    weights: Vec<Tensor>,
    biases: Vec<Tensor>,
}

impl Adapter {
    pub fn new(d_in: usize, d_out: usize, layers: usize, hidden_mult: usize, rng: &mut SeededRng) -> Self {
        assert!(layers >= 1);
        let hidden = (hidden_mult * d_in).max(1);
        let mut weights = Vec::with_capacity(layers);
        let mut biases = Vec::with_capacity(layers);
        for i in 0..layers {
            let rows = if i == 0 { d_in } else { hidden };
            let cols = if i == layers - 1 { d_out } else { hidden };
            // Variance-preserving scale: with six layers, a flat small-gain
            // init collapses the forward signal to ~1e-5 and the network
            // cannot leave the dead zone within a 100-step budget.
            let std = 1.0 / (rows as f64).sqrt();
            weights.push(Tensor::randn(vec![rows, cols], std, &mut rng.split(i as u64)));
            biases.push(Tensor::zeros(vec![1, cols]));
        }
        Self { d_in, d_out, weights, biases }
    }

    pub fn layer_count(&self) -> usize {
        self.weights.len()
    }

    /// Initialize the network as an exact per-coordinate standardization map.
    ///
    /// GELU satisfies `gelu(x) - gelu(-x) = x`, so carrying each coordinate
    /// as a `(+, -)` pair through the hidden layers and recombining makes the
    /// whole stack the identity on standardized inputs — the first-order
    /// approximation of the quantile-score target the adapter is trained
    /// toward. Small random noise breaks symmetry. Requires `d_out == d_in`
    /// and hidden width at least `2 * d_in`; callers fall back to
    /// [`Self::new`] otherwise.
    pub fn new_standardizing(
        d: usize,
        layers: usize,
        hidden_mult: usize,
        stats: Option<(&[f64], &[f64])>,
        rng: &mut SeededRng,
    ) -> Self {
        assert!(layers >= 2, "paired wiring needs at least two layers");
        assert!(hidden_mult >= 2, "paired wiring needs hidden width >= 2 * d_in");
        let hidden = hidden_mult * d;
        // Units 0..2d carry the coordinate pairs; any units beyond that are
        // free random features, variance-preserving so they are alive from
        // step 0, weighted into the carried path only where that cannot
        // perturb the exact init.
        const NOISE: f64 = 0.02;
        let set = |w: &mut Tensor, r: usize, c: usize, v: f64| {
            let cols = w.cols();
            w.values_mut()[r * cols + c] = v;
        };
        let mut weights = Vec::with_capacity(layers);
        let mut biases = Vec::with_capacity(layers);
        for i in 0..layers {
            let rows = if i == 0 { d } else { hidden };
            let cols = if i == layers - 1 { d } else { hidden };
            let mut w = Tensor::zeros(vec![rows, cols]);
            let mut b = Tensor::zeros(vec![1, cols]);
            let mut noise = rng.split(i as u64);
            if i == 0 {
                for j in 0..d {
                    let (mu, sd) = match stats {
                        // Unit spread for constant columns: centering already
                        // maps them to the 0 the quantile map produces.
                        Some((means, stds)) => {
                            (means[j], if stds[j] > 1e-12 { stds[j] } else { 1.0 })
                        }
                        None => (0.0, 1.0),
                    };
                    // x_j -> pair (z_j, -z_j) with z = (x - mean) / std.
                    let s = 1.0 / sd;
                    set(&mut w, j, j, s + NOISE * noise.normal());
                    set(&mut w, j, d + j, -s + NOISE * noise.normal());
                    b.values_mut()[j] = -mu * s;
                    b.values_mut()[d + j] = mu * s;
                }
                let live = 1.0 / (d as f64).sqrt();
                for r in 0..rows {
                    for c in 2 * d..cols {
                        set(&mut w, r, c, live * noise.normal());
                    }
                }
            } else if i == layers - 1 {
                // Recombine: out_j = gelu(z_j) - gelu(-z_j) = z_j. Extra
                // units start disconnected so the init stays exact; their
                // output weights grow from zero during training.
                for j in 0..d {
                    set(&mut w, j, j, 1.0 + NOISE * noise.normal());
                    set(&mut w, d + j, j, -1.0 + NOISE * noise.normal());
                }
            } else {
                // Recombine and re-pair so every hidden layer stays linear
                // in the carried coordinate.
                for j in 0..d {
                    set(&mut w, j, j, 1.0 + NOISE * noise.normal());
                    set(&mut w, d + j, j, -1.0 + NOISE * noise.normal());
                    set(&mut w, j, d + j, -1.0 + NOISE * noise.normal());
                    set(&mut w, d + j, d + j, 1.0 + NOISE * noise.normal());
                }
                let live = 1.0 / (hidden as f64).sqrt();
                for r in 0..rows {
                    for c in 2 * d..cols {
                        set(&mut w, r, c, live * noise.normal());
                    }
                }
            }
            weights.push(w);
            biases.push(b);
        }
        Self { d_in: d, d_out: d, weights, biases }
    }

    fn bind(&self, tape: &mut Tape, binding: &mut Binding) -> Vec<(Tracked, Tracked)> {
        (0..self.weights.len())
            .map(|i| {
                (
                    binding.leaf(tape, format!("adapter.{i}.w"), &self.weights[i]),
                    binding.leaf(tape, format!("adapter.{i}.b"), &self.biases[i]),
                )
            })
            .collect()
    }

    fn forward_tape(&self, tape: &mut Tape, layers: &[(Tracked, Tracked)], x: Tracked) -> Tracked {
        let last = layers.len() - 1;
        let mut h = x;
        for (i, &(w, b)) in layers.iter().enumerate() {
            h = tape.linear(h, w, b);
            if i != last {
                h = tape.gelu(h);
            }
        }
        h
    }

    /// Plain host-side forward pass for inference.
    pub fn apply_host(&self, x: &Tensor) -> Tensor {
        assert_eq!(x.cols(), self.d_in);
        let rows = x.rows();
        let mut h = x.values().to_vec();
        let last = self.weights.len() - 1;
        for (i, (w, b)) in self.weights.iter().zip(&self.biases).enumerate() {
            let (wr, wc) = (w.rows(), w.cols());
            let mut out = ops::matmul(&h, w.values(), rows, wr, wc);
            for r in 0..rows {
                for c in 0..wc {
                    out[r * wc + c] += b.values()[c];
                }
            }
            if i != last {
                out.iter_mut().for_each(|v| *v = ops::gelu(*v));
            }
            h = out;
        }
        Tensor::matrix(rows, self.d_out, h)
    }
}

impl Parameterized for Adapter {
    fn visit(&self, f: &mut dyn FnMut(&str, &Tensor)) {
        for i in 0..self.weights.len() {
            f(&format!("adapter.{i}.w"), &self.weights[i]);
            f(&format!("adapter.{i}.b"), &self.biases[i]);
        }
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut Tensor)) {
        for i in 0..self.weights.len() {
            f(&format!("adapter.{i}.w"), &mut self.weights[i]);
            f(&format!("adapter.{i}.b"), &mut self.biases[i]);
        }
    }
}

/// One training epoch of the adapter, as emitted into curve files.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct DptEpochRecord {
    pub epoch: usize,
    pub l_align: f64,
    /// Query cross-entropy through the frozen engine; absent when the
    /// classification term is disabled (`lambda_icl == 0`).
    pub l_icl: Option<f64>,
    pub l_total: f64,
    /// Accuracy on the validation rows with the epoch's context, when
    /// validation data was provided.
    pub val_acc: Option<f64>,
}

#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct AdapterReport {
    pub epochs: usize,
    pub initial_loss: f64,
    pub final_loss: f64,
    pub records: Vec<DptEpochRecord>,
    /// Held-out alignment error sampled during training, if validation data
    /// was provided: `(epoch, mean per-coordinate L1)`.
    pub val_points: Vec<(usize, f64)>,
}

/// Mean per-coordinate absolute difference between the adapter's output and
/// quantile scores on `eval_x`, with the transform fitted on `fit_x` (the
/// rows that would serve as context at inference time).
pub fn alignment_error(adapter: &Adapter, fit_x: &Tensor, eval_x: &Tensor) -> Result<f64, CoreError> {
    let psi = QuantileTransform::fit(fit_x)?.apply(eval_x);
    let a = adapter.apply_host(eval_x);
    let n = (eval_x.rows() * eval_x.cols()) as f64;
    let sum: f64 = a.values().iter().zip(psi.values()).map(|(&u, &v)| (u - v).abs()).sum();
    Ok(sum / n)
}

/// Per-column mean and standard deviation of `x`, with unit spread for
/// constant columns (their quantile-score target is 0 everywhere, which the
/// centering alone already produces; a tiny clamped spread would instead
/// explode on held-out values).
pub fn column_standardization_stats(x: &Tensor) -> (Vec<f64>, Vec<f64>) {
    let (n, d) = (x.rows(), x.cols());
    let mut means = vec![0.0; d];
    let mut stds = vec![0.0; d];
    for i in 0..n {
        for (j, &v) in x.row(i).iter().enumerate() {
            means[j] += v;
        }
    }
    means.iter_mut().for_each(|m| *m /= n as f64);
    for i in 0..n {
        for (j, &v) in x.row(i).iter().enumerate() {
            stds[j] += (v - means[j]) * (v - means[j]);
        }
    }
    for s in stds.iter_mut() {
        *s = (*s / n as f64).sqrt();
        if *s < 1e-12 {
            *s = 1.0;
        }
    }
    (means, stds)
}

/// Train an adapter against a frozen engine on labeled representation
/// vectors. `val` optionally supplies held-out rows and labels; when present
/// the report carries per-epoch validation accuracy (engine prediction with
/// the epoch's context) and sampled alignment errors.
pub fn train_adapter(
    engine: &Engine,
    x: &Tensor,
    y: &[usize],
    n_classes: usize,
    val: Option<(&Tensor, &[usize])>,
    cfg: &AdapterConfig,
    rng: &SeededRng,
) -> Result<(Adapter, AdapterReport), CoreError> {
    assert_eq!(x.rows(), y.len());
    if cfg.lambda_align < 0.0 || cfg.lambda_icl < 0.0 {
        return Err(CoreError::Format("loss weights must be non-negative".into()));
    }
    if cfg.lambda_align == 0.0 && cfg.lambda_icl == 0.0 {
        return Err(CoreError::Format("at least one loss weight must be positive".into()));
    }
    if !(cfg.support_frac > 0.0 && cfg.support_frac < 1.0) {
        return Err(CoreError::Format("context fraction must lie in (0, 1)".into()));
    }
    let d = x.cols();
    let mut adapter = if cfg.layers >= 2 && cfg.hidden_mult >= 2 {
        // Start at the analytic standardization of the training features —
        // the first-order approximation of the quantile-score target — so
        // the epoch budget is spent on the residual warp.
        let (means, stds) = column_standardization_stats(x);
        Adapter::new_standardizing(d, cfg.layers, cfg.hidden_mult, Some((&means, &stds)), &mut rng.split(0xAD))
    } else {
        Adapter::new(d, d, cfg.layers, cfg.hidden_mult, &mut rng.split(0xAD))
    };
    let mut adam = Adam::new(cfg.lr);
    let mut watch = DivergenceWatch::default();
    let mut records = Vec::with_capacity(cfg.epochs);
    let mut val_points = Vec::new();
    let all: Vec<usize> = (0..x.rows()).collect();
    let val_every = (cfg.epochs / 10).max(1);
    let mut last = f64::NAN;

    for epoch in 0..cfg.epochs {
        let mut ep_rng = if cfg.fixed_episode { rng.split(1) } else { rng.split(2 + epoch as u64) };
        let episode: Vec<usize> = if x.rows() > cfg.episode_cap {
            stratified_sample(y, &all, cfg.episode_cap, &mut ep_rng)
        } else {
            all.clone()
        };
        let (support, query) = stratified_two_way(y, &episode, cfg.support_frac, &mut ep_rng);
        if support.is_empty() || query.is_empty() {
            return Err(CoreError::Format("episode too small to split into context and queries".into()));
        }
        let ordered: Vec<usize> = support.iter().chain(query.iter()).copied().collect();
        let rows = gather_rows_host(x, &ordered);
        let support_y = gather_labels(y, &support);
        let query_y = gather_labels(y, &query);

        // Alignment targets: quantile scores fitted on the context rows.
        let support_rows = gather_rows_host(x, &support);
        let psi = QuantileTransform::fit(&support_rows)?;
        let targets = psi.apply(&rows);

        let mut tape = Tape::new();
        let mut adapter_binding = Binding::trainable();
        let layers = adapter.bind(&mut tape, &mut adapter_binding);
        let input = tape.leaf(&rows);
        let z = adapter.forward_tape(&mut tape, &layers, input);

        let target_leaf = tape.leaf(&targets);
        let diff = tape.sub(z, target_leaf);
        let l1 = tape.abs(diff);
        let sum = tape.sum_all(l1);
        let l_align = tape.scale(sum, 1.0 / ordered.len() as f64);

        let (loss, l_icl) = if cfg.lambda_icl != 0.0 {
            // Route the adapter output through the frozen engine; gradients
            // flow back into the adapter only.
            let mut engine_binding = Binding::frozen();
            let padded = engine.pad_tracked(&mut tape, z)?;
            let logits =
                engine.forward_tracked(&mut tape, &mut engine_binding, padded, &support_y, n_classes)?;
            let query_logits = tape.slice_rows(logits, support_y.len(), query_y.len());
            let l_icl = tape.cross_entropy_logits(query_logits, &query_y);
            let a = tape.scale(l_align, cfg.lambda_align);
            let b = tape.scale(l_icl, cfg.lambda_icl);
            (tape.add(a, b), Some(l_icl))
        } else {
            (tape.scale(l_align, cfg.lambda_align), None)
        };

        let loss_v = tape.scalar_value(loss);
        let align_v = tape.scalar_value(l_align);
        let icl_v = l_icl.map(|t| tape.scalar_value(t));
        watch.observe(epoch, loss_v)?;
        last = loss_v;

        let grads = tape.backward(loss);
        let named = adapter_binding.gradients(&grads);
        adam.step(&mut adapter, &named);

        let val_acc = match val {
            Some((vx, vy)) => {
                let ctx = adapter.apply_host(&support_rows);
                let pred = engine.predict_labels(&ctx, &support_y, &adapter.apply_host(vx), n_classes)?;
                let hit = pred.iter().zip(vy).filter(|(a, b)| a == b).count();
                if epoch % val_every == 0 || epoch + 1 == cfg.epochs {
                    val_points.push((epoch, alignment_error(&adapter, x, vx)?));
                }
                Some(hit as f64 / vy.len().max(1) as f64)
            }
            None => None,
        };
        records.push(DptEpochRecord { epoch, l_align: align_v, l_icl: icl_v, l_total: loss_v, val_acc });
    }

    let report = AdapterReport {
        epochs: cfg.epochs,
        initial_loss: watch.initial().unwrap_or(f64::NAN),
        final_loss: last,
        records,
        val_points,
    };
    Ok((adapter, report))
}

/// The combined objective of one adapter-training episode — exactly the loss
/// `train_adapter` optimizes each epoch — together with the adapter-parameter
/// gradients in visit order. `rows` holds the episode with context rows
/// first; quantile-score targets are fitted on those first
/// `support_y.len()` rows. Setting a weight to zero selects the alignment or
/// classification term alone.
pub fn episode_loss(
    engine: &Engine,
    adapter: &Adapter,
    rows: &Tensor,
    support_y: &[usize],
    query_y: &[usize],
    n_classes: usize,
    lambda_align: f64,
    lambda_icl: f64,
) -> Result<(f64, Vec<(String, Vec<f64>)>), CoreError> {
    assert_eq!(rows.rows(), support_y.len() + query_y.len(), "episode rows must match labels");
    let support_idx: Vec<usize> = (0..support_y.len()).collect();
    let support_rows = gather_rows_host(rows, &support_idx);
    let psi = QuantileTransform::fit(&support_rows)?;
    let targets = psi.apply(rows);

    let mut tape = Tape::new();
    let mut adapter_binding = Binding::trainable();
    let layers = adapter.bind(&mut tape, &mut adapter_binding);
    let input = tape.leaf(rows);
    let z = adapter.forward_tape(&mut tape, &layers, input);

    let target_leaf = tape.leaf(&targets);
    let diff = tape.sub(z, target_leaf);
    let l1 = tape.abs(diff);
    let sum = tape.sum_all(l1);
    let l_align = tape.scale(sum, 1.0 / rows.rows() as f64);

    let loss = if lambda_icl != 0.0 {
        let mut engine_binding = Binding::frozen();
        let padded = engine.pad_tracked(&mut tape, z)?;
        let logits =
            engine.forward_tracked(&mut tape, &mut engine_binding, padded, support_y, n_classes)?;
        let query_logits = tape.slice_rows(logits, support_y.len(), query_y.len());
        let l_icl = tape.cross_entropy_logits(query_logits, query_y);
        let a = tape.scale(l_align, lambda_align);
        let b = tape.scale(l_icl, lambda_icl);
        tape.add(a, b)
    } else {
        tape.scale(l_align, lambda_align)
    };

    let value = tape.scalar_value(loss);
    let grads = tape.backward(loss);
    Ok((value, adapter_binding.gradients(&grads)))
}

/// Engine prediction with quantile preprocessing fitted on the context.
pub fn predict_raw(
    engine: &Engine,
    ctx_x: &Tensor,
    ctx_y: &[usize],
    query_x: &Tensor,
    n_classes: usize,
) -> Result<Tensor, CoreError> {
    let psi = QuantileTransform::fit(ctx_x)?;
    engine.predict(&psi.apply(ctx_x), ctx_y, &psi.apply(query_x), n_classes)
}

/// Engine prediction with the adapter replacing quantile preprocessing.
pub fn predict_adapted(
    engine: &Engine,
    adapter: &Adapter,
    ctx_x: &Tensor,
    ctx_y: &[usize],
    query_x: &Tensor,
    n_classes: usize,
) -> Result<Tensor, CoreError> {
    engine.predict(&adapter.apply_host(ctx_x), ctx_y, &adapter.apply_host(query_x), n_classes)
}
