//! Experiment protocols: context-size sweep, component ablations, and the
//! tabular benchmark comparison.

use crate::adapter::{predict_adapted, predict_raw, train_adapter, Adapter, AdapterConfig};
use crate::data::{
    gather_labels, gather_rows_host, stratified_sample, stratified_two_way, Splits, TabularDataset,
};
use crate::engine::{argmax_rows, Engine};
use crate::metrics::{macro_auc, Confusion};
use crate::quantile::QuantileTransform;
use crate::train::DivergenceWatch;
use crate::CoreError;
use pdx_tensor::{Adam, Binding, Parameterized, SeededRng, Tape, Tensor, Tracked};

/// Context fractions exercised by the sweep, smallest first.
pub const SWEEP_RATIOS: [f64; 5] = [0.01, 0.03, 0.1, 0.3, 1.0];

// ---------------------------------------------------------------------------
// Metric bundle
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct MethodMetrics {
    pub accuracy: f64,
    pub macro_f1: f64,
    pub macro_auc: f64,
    pub sensitivity: f64,
    pub specificity: f64,
    pub confusion: Vec<Vec<usize>>,
}

/// Score predicted class probabilities against true labels.
pub fn evaluate_probs(y_true: &[usize], probs: &Tensor, n_classes: usize) -> MethodMetrics {
    let preds = argmax_rows(probs);
    let confusion = Confusion::from_predictions(y_true, &preds, n_classes);
    MethodMetrics {
        accuracy: confusion.accuracy(),
        macro_f1: confusion.macro_f1(),
        macro_auc: macro_auc(y_true, probs),
        sensitivity: confusion.sensitivity(),
        specificity: confusion.specificity(),
        confusion: confusion.matrix.clone(),
    }
}

/// Mean of each scalar metric over per-seed results (confusions are summed).
pub fn mean_metrics(runs: &[MethodMetrics]) -> MethodMetrics {
    assert!(!runs.is_empty());
    let n = runs.len() as f64;
    let mut confusion = runs[0].confusion.clone();
    for run in &runs[1..] {
        for (row, other) in confusion.iter_mut().zip(&run.confusion) {
            for (a, b) in row.iter_mut().zip(other) {
                *a += b;
            }
        }
    }
    MethodMetrics {
        accuracy: runs.iter().map(|r| r.accuracy).sum::<f64>() / n,
        macro_f1: runs.iter().map(|r| r.macro_f1).sum::<f64>() / n,
        macro_auc: runs.iter().map(|r| r.macro_auc).sum::<f64>() / n,
        sensitivity: runs.iter().map(|r| r.sensitivity).sum::<f64>() / n,
        specificity: runs.iter().map(|r| r.specificity).sum::<f64>() / n,
        confusion,
    }
}

// ---------------------------------------------------------------------------
// Shared inputs
// ---------------------------------------------------------------------------

/// One cohort ready for downstream protocols: representation vectors (or raw
/// tabular features), labels, and the index splits.
#[derive(Debug, Clone)]
pub struct CohortFeatures {
    pub features: Tensor,
    pub labels: Vec<usize>,
    pub splits: Splits,
    pub n_classes: usize,
}

impl CohortFeatures {
    pub fn train_x(&self) -> Tensor {
        gather_rows_host(&self.features, &self.splits.train)
    }

    pub fn train_y(&self) -> Vec<usize> {
        gather_labels(&self.labels, &self.splits.train)
    }

    pub fn test_x(&self) -> Tensor {
        gather_rows_host(&self.features, &self.splits.test)
    }

    pub fn test_y(&self) -> Vec<usize> {
        gather_labels(&self.labels, &self.splits.test)
    }

    pub fn val_x(&self) -> Tensor {
        gather_rows_host(&self.features, &self.splits.val)
    }
}

// ---------------------------------------------------------------------------
// Parametric baseline: a small supervised MLP trained per context subset
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct MlpBaseline {
    w1: Tensor,
    b1: Tensor,
    w2: Tensor,
    b2: Tensor,
}

impl Parameterized for MlpBaseline {
    fn visit(&self, f: &mut dyn FnMut(&str, &Tensor)) {
        f("mlp.w1", &self.w1);
        f("mlp.b1", &self.b1);
        f("mlp.w2", &self.w2);
        f("mlp.b2", &self.b2);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut Tensor)) {
        f("mlp.w1", &mut self.w1);
        f("mlp.b1", &mut self.b1);
        f("mlp.w2", &mut self.w2);
        f("mlp.b2", &mut self.b2);
    }
}

impl MlpBaseline {
    /// Full-batch training on the given rows.
    pub fn fit(
        x: &Tensor,
        y: &[usize],
        n_classes: usize,
        hidden: usize,
        steps: usize,
        lr: f64,
        rng: &mut SeededRng,
    ) -> Result<Self, CoreError> {
        let d = x.cols();
        let mut model = Self {
            w1: Tensor::randn(vec![d, hidden], (1.0 / (d as f64).sqrt()).min(0.5), &mut rng.split(0)),
            b1: Tensor::zeros(vec![1, hidden]),
            w2: Tensor::zeros(vec![hidden, n_classes]),
            b2: Tensor::zeros(vec![1, n_classes]),
        };
        let mut adam = Adam::new(lr);
        let mut watch = DivergenceWatch::default();
        for step in 0..steps {
            let mut tape = Tape::new();
            let mut binding = Binding::trainable();
            let logits = model.forward(&mut tape, &mut binding, x);
            let loss = tape.cross_entropy_logits(logits, y);
            watch.observe(step, tape.scalar_value(loss))?;
            let grads = tape.backward(loss);
            let named = binding.gradients(&grads);
            adam.step(&mut model, &named);
        }
        Ok(model)
    }

    fn forward(&self, tape: &mut Tape, binding: &mut Binding, x: &Tensor) -> Tracked {
        let input = tape.leaf(x);
        let w1 = binding.leaf(tape, "mlp.w1", &self.w1);
        let b1 = binding.leaf(tape, "mlp.b1", &self.b1);
        let w2 = binding.leaf(tape, "mlp.w2", &self.w2);
        let b2 = binding.leaf(tape, "mlp.b2", &self.b2);
        let h = tape.linear(input, w1, b1);
        let h = tape.gelu(h);
        tape.linear(h, w2, b2)
    }

    pub fn predict_probs(&self, x: &Tensor) -> Tensor {
        let mut tape = Tape::new();
        let mut binding = Binding::frozen();
        let logits = self.forward(&mut tape, &mut binding, x);
        let soft = tape.softmax(logits);
        Tensor::matrix(x.rows(), self.w2.cols(), tape.values(soft).to_vec())
    }
}

// ---------------------------------------------------------------------------
// Context-size sweep
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct SweepPoint {
    pub ratio: f64,
    pub context_size: usize,
    pub raw: MethodMetrics,
    pub adapted: MethodMetrics,
    pub parametric: MethodMetrics,
}

/// Shrink the labeled context and compare three ways of using it: the engine
/// on quantile scores, the engine behind the trained adapter, and a
/// parametric model trained on the context alone. The adapter is trained
/// once on the full training split; contexts shrink only at inference.
pub fn context_sweep(
    engine: &Engine,
    cohort: &CohortFeatures,
    adapter_cfg: &AdapterConfig,
    ratios: &[f64],
    rng: &SeededRng,
) -> Result<Vec<SweepPoint>, CoreError> {
    let train_x = cohort.train_x();
    let train_y = cohort.train_y();
    let test_x = cohort.test_x();
    let test_y = cohort.test_y();
    let c = cohort.n_classes;

    let (adapter, _) =
        train_adapter(engine, &train_x, &train_y, c, None, adapter_cfg, &rng.split(0))?;

    let mut points = Vec::with_capacity(ratios.len());
    for (k, &ratio) in ratios.iter().enumerate() {
        let want = ((ratio * cohort.splits.train.len() as f64).round() as usize).max(c);
        let mut ctx_rng = rng.split(100 + k as u64);
        let ctx_idx =
            stratified_sample(&cohort.labels, &cohort.splits.train, want, &mut ctx_rng);
        let ctx_x = gather_rows_host(&cohort.features, &ctx_idx);
        let ctx_y = gather_labels(&cohort.labels, &ctx_idx);

        let raw_probs = predict_raw(engine, &ctx_x, &ctx_y, &test_x, c)?;
        let adapted_probs = predict_adapted(engine, &adapter, &ctx_x, &ctx_y, &test_x, c)?;
        let mlp = MlpBaseline::fit(&ctx_x, &ctx_y, c, 64, 400, 1e-3, &mut rng.split(200 + k as u64))?;
        let mlp_probs = mlp.predict_probs(&test_x);

        points.push(SweepPoint {
            ratio,
            context_size: ctx_idx.len(),
            raw: evaluate_probs(&test_y, &raw_probs, c),
            adapted: evaluate_probs(&test_y, &adapted_probs, c),
            parametric: evaluate_probs(&test_y, &mlp_probs, c),
        });
    }
    Ok(points)
}

// ---------------------------------------------------------------------------
// Ablations
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum AblationVariant {
    /// Pretrained representations, adapter trained with both loss terms.
    Full,
    /// Random-initialization representations instead of pretrained ones.
    WithoutPretrain,
    /// Quantile preprocessing instead of the adapter.
    WithoutAdapter,
    /// Adapter trained without the alignment term.
    WithoutAlign,
    /// Adapter trained without the engine cross-entropy term.
    WithoutIcl,
}

impl AblationVariant {
    pub const ALL: [AblationVariant; 5] = [
        AblationVariant::Full,
        AblationVariant::WithoutPretrain,
        AblationVariant::WithoutAdapter,
        AblationVariant::WithoutAlign,
        AblationVariant::WithoutIcl,
    ];

    pub fn name(self) -> &'static str {
        match self {
            AblationVariant::Full => "full",
            AblationVariant::WithoutPretrain => "without_pretrain",
            AblationVariant::WithoutAdapter => "without_adapter",
            AblationVariant::WithoutAlign => "without_align",
            AblationVariant::WithoutIcl => "without_icl",
        }
    }
}

/// Run one ablation arm. `pretrained` carries representations from the
/// pretrained extractor, `random_init` the same subjects through an
/// untrained extractor; both share labels and splits. The base config uses
/// equal loss weights so removing either term is a meaningful change.
pub fn run_ablation(
    engine: &Engine,
    pretrained: &CohortFeatures,
    random_init: &CohortFeatures,
    variant: AblationVariant,
    base: &AdapterConfig,
    rng: &SeededRng,
) -> Result<MethodMetrics, CoreError> {
    let cohort = match variant {
        AblationVariant::WithoutPretrain => random_init,
        _ => pretrained,
    };
    let train_x = cohort.train_x();
    let train_y = cohort.train_y();
    let test_x = cohort.test_x();
    let test_y = cohort.test_y();
    let c = cohort.n_classes;

    let probs = match variant {
        AblationVariant::WithoutAdapter => predict_raw(engine, &train_x, &train_y, &test_x, c)?,
        _ => {
            let mut cfg = base.clone();
            match variant {
                AblationVariant::WithoutAlign => cfg.lambda_align = 0.0,
                AblationVariant::WithoutIcl => cfg.lambda_icl = 0.0,
                _ => {}
            }
            let (adapter, _) = train_adapter(engine, &train_x, &train_y, c, None, &cfg, rng)?;
            predict_adapted(engine, &adapter, &train_x, &train_y, &test_x, c)?
        }
    };
    Ok(evaluate_probs(&test_y, &probs, c))
}

// ---------------------------------------------------------------------------
// Tabular comparison
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FinetuneConfig {
    pub lr: f64,
    pub epochs: usize,
    pub episode_cap: usize,
    pub support_frac: f64,
}

impl Default for FinetuneConfig {
    fn default() -> Self {
        Self { lr: 1e-4, epochs: 30, episode_cap: 512, support_frac: 0.7 }
    }
}

/// Update every engine weight on episodes drawn from the training split,
/// with quantile scores refitted per episode.
pub fn finetune_engine(
    engine: &mut Engine,
    x: &Tensor,
    y: &[usize],
    n_classes: usize,
    cfg: &FinetuneConfig,
    rng: &SeededRng,
) -> Result<(), CoreError> {
    let all: Vec<usize> = (0..x.rows()).collect();
    let mut adam = Adam::new(cfg.lr);
    let mut watch = DivergenceWatch::default();
    for epoch in 0..cfg.epochs {
        let mut ep_rng = rng.split(epoch as u64);
        let episode = if all.len() > cfg.episode_cap {
            stratified_sample(y, &all, cfg.episode_cap, &mut ep_rng)
        } else {
            all.clone()
        };
        let (support, query) = stratified_two_way(y, &episode, cfg.support_frac, &mut ep_rng);
        if support.is_empty() || query.is_empty() {
            continue;
        }
        let support_rows = gather_rows_host(x, &support);
        let psi = QuantileTransform::fit(&support_rows)?;
        let sx = psi.apply(&support_rows);
        let qx = psi.apply(&gather_rows_host(x, &query));
        let sy = gather_labels(y, &support);
        let qy = gather_labels(y, &query);

        let mut tape = Tape::new();
        let mut binding = Binding::trainable();
        let loss = engine.episode_loss(&mut tape, &mut binding, &sx, &sy, &qx, &qy, n_classes)?;
        watch.observe(epoch, tape.scalar_value(loss))?;
        let grads = tape.backward(loss);
        let named = binding.gradients(&grads);
        adam.step(engine, &named);
    }
    Ok(())
}

#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct TabularComparison {
    pub raw: MethodMetrics,
    pub finetuned: MethodMetrics,
    pub adapted: MethodMetrics,
}

/// Compare the frozen engine on quantile scores, a fully finetuned copy,
/// and the adapter route on one tabular dataset. All three predict the test
/// split from the same stratified context of `context_size` training rows.
pub fn compare_tabular(
    engine: &Engine,
    ds: &TabularDataset,
    adapter_cfg: &AdapterConfig,
    finetune_cfg: &FinetuneConfig,
    rng: &SeededRng,
) -> Result<TabularComparison, CoreError> {
    let c = ds.spec.classes;
    let cohort = CohortFeatures {
        features: ds.x.clone(),
        labels: ds.labels.clone(),
        splits: crate::data::stratified_split(&ds.labels, &mut rng.split(0))?,
        n_classes: c,
    };
    let train_x = cohort.train_x();
    let train_y = cohort.train_y();
    let test_x = cohort.test_x();
    let test_y = cohort.test_y();

    let want = ds.spec.context_size.min(cohort.splits.train.len());
    let ctx_idx = stratified_sample(&cohort.labels, &cohort.splits.train, want, &mut rng.split(1));
    let ctx_x = gather_rows_host(&cohort.features, &ctx_idx);
    let ctx_y = gather_labels(&cohort.labels, &ctx_idx);

    let raw_probs = predict_raw(engine, &ctx_x, &ctx_y, &test_x, c)?;

    let mut tuned = engine.clone();
    finetune_engine(&mut tuned, &train_x, &train_y, c, finetune_cfg, &rng.split(2))?;
    let tuned_probs = predict_raw(&tuned, &ctx_x, &ctx_y, &test_x, c)?;

    let (adapter, _) = train_adapter(engine, &train_x, &train_y, c, None, adapter_cfg, &rng.split(3))?;
    let adapted_probs = predict_adapted(engine, &adapter, &ctx_x, &ctx_y, &test_x, c)?;

    Ok(TabularComparison {
        raw: evaluate_probs(&test_y, &raw_probs, c),
        finetuned: evaluate_probs(&test_y, &tuned_probs, c),
        adapted: evaluate_probs(&test_y, &adapted_probs, c),
    })
}

/// Train an adapter for a tabular dataset on its training split.
pub fn tabular_adapter(
    engine: &Engine,
    cohort: &CohortFeatures,
    adapter_cfg: &AdapterConfig,
    rng: &SeededRng,
) -> Result<Adapter, CoreError> {
    let train_x = cohort.train_x();
    let train_y = cohort.train_y();
    let (adapter, _) =
        train_adapter(engine, &train_x, &train_y, cohort.n_classes, None, adapter_cfg, rng)?;
    Ok(adapter)
}
