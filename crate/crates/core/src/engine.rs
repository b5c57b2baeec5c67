//! Frozen-weights in-context classifier.
//!
//! The engine is a small pre-norm transformer that conditions on a labeled
//! support set and predicts query labels in one forward pass — no per-task
//! weight updates. Each row of an episode is one sample: projected features
//! plus a label embedding (support rows) or a shared query marker (query
//! rows). There are no positional embeddings, so support order cannot affect
//! predictions, and the attention mask lets
//!
//! * support rows attend to support rows only, and
//! * query rows attend to support rows plus themselves,
//!
//! which makes every query's prediction independent of the other queries.

use crate::blocks::BlockStack;
use crate::CoreError;
use pdx_tensor::{Binding, Parameterized, SeededRng, Tape, Tensor, Tracked, MASK_BLOCKED};

#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EngineConfig {
    pub d_model: usize,
    pub layers: usize,
    pub heads: usize,
    /// Maximum feature count; episodes with fewer features are zero-padded.
    pub f_max: usize,
    /// Maximum class count; the label head always has this width.
    pub c_max: usize,
    pub ff_mult: usize,
}

impl Default for EngineConfig {
    fn default() -> Self {
        Self { d_model: 64, layers: 4, heads: 4, f_max: 128, c_max: 10, ff_mult: 4 }
    }
}

#[derive(Debug, Clone)]
pub struct Engine {
    pub config: EngineConfig,
    feat_w: Tensor,
    feat_b: Tensor,
    /// One row per class plus a final query-marker row.
    label_embed: Tensor,
    stack: BlockStack,
    final_gamma: Tensor,
    final_beta: Tensor,
    head_w: Tensor,
    head_b: Tensor,
}

impl Engine {
    pub fn new(config: EngineConfig, rng: &mut SeededRng) -> Self {
        let d = config.d_model;
        let init = rng.split(0x0e);
        Self {
            feat_w: Tensor::randn(vec![config.f_max + 1, d], 0.02, &mut init.split(0)),
            feat_b: Tensor::zeros(vec![1, d]),
            label_embed: Tensor::randn(vec![config.c_max + 1, d], 0.02, &mut init.split(1)),
            stack: BlockStack::new(config.layers, d, config.ff_mult * d, config.heads, &mut init.split(2)),
            final_gamma: Tensor::full(vec![1, d], 1.0),
            final_beta: Tensor::zeros(vec![1, d]),
            // Zero head: before any training the class logits are all equal,
            // so the initial loss on a C-way episode is exactly ln C.
            head_w: Tensor::zeros(vec![d, config.c_max]),
            head_b: Tensor::zeros(vec![1, config.c_max]),
            config,
        }
    }

    /// Zero-pad `[n, f]` features to `f_max` columns and append the
    /// normalized feature count `f / f_max` as a final indicator column.
    pub fn pad_features(&self, x: &Tensor) -> Result<Tensor, CoreError> {
        let (n, f) = (x.rows(), x.cols());
        self.check_features(f)?;
        let width = self.config.f_max + 1;
        let mut out = Tensor::zeros(vec![n, width]);
        let count = f as f64 / self.config.f_max as f64;
        for i in 0..n {
            out.values_mut()[i * width..i * width + f].copy_from_slice(x.row(i));
            out.set2(i, width - 1, count);
        }
        Ok(out)
    }

    /// Tape-side version of [`Self::pad_features`] for differentiable inputs:
    /// multiply by a constant selector matrix and add the indicator column.
    pub fn pad_tracked(&self, tape: &mut Tape, z: Tracked) -> Result<Tracked, CoreError> {
        let f = z.cols;
        self.check_features(f)?;
        let width = self.config.f_max + 1;
        let mut selector = vec![0.0; f * width];
        for j in 0..f {
            selector[j * width + j] = 1.0;
        }
        let sel = tape.leaf_matrix(f, width, selector);
        let padded = tape.matmul(z, sel);
        let mut count_col = vec![0.0; width];
        count_col[width - 1] = f as f64 / self.config.f_max as f64;
        let count = tape.leaf_matrix(1, width, count_col);
        Ok(tape.add_row_broadcast(padded, count))
    }

    fn check_features(&self, f: usize) -> Result<(), CoreError> {
        if f == 0 || f > self.config.f_max {
            return Err(CoreError::FeatureCount { got: f, max: self.config.f_max });
        }
        Ok(())
    }

    fn check_classes(&self, c: usize) -> Result<(), CoreError> {
        if c < 2 || c > self.config.c_max {
            return Err(CoreError::ClassCount { got: c, max: self.config.c_max });
        }
        Ok(())
    }

    /// Additive attention mask: column `c` is visible from row `r` iff `c`
    /// is a support row or `c == r`.
    pub fn support_query_mask(n: usize, n_support: usize) -> Vec<f64> {
        let mut mask = vec![0.0; n * n];
        for r in 0..n {
            for c in 0..n {
                if !(c < n_support || c == r) {
                    mask[r * n + c] = MASK_BLOCKED;
                }
            }
        }
        mask
    }

    /// Run the transformer over one episode already padded to `f_max + 1`
    /// columns, rows ordered support-first. Returns `[n, n_classes]` logits
    /// for every row.
    pub fn forward_tracked(
        &self,
        tape: &mut Tape,
        binding: &mut Binding,
        features: Tracked,
        support_labels: &[usize],
        n_classes: usize,
    ) -> Result<Tracked, CoreError> {
        let n = features.rows;
        let n_support = support_labels.len();
        assert!(n_support < n, "an episode needs at least one query row");
        assert_eq!(features.cols, self.config.f_max + 1, "features must be padded first");
        self.check_classes(n_classes)?;
        if let Some(&bad) = support_labels.iter().find(|&&y| y >= n_classes) {
            return Err(CoreError::LabelOutOfRange { label: bad, classes: n_classes });
        }

        let fw = binding.leaf(tape, "feat_proj.w", &self.feat_w);
        let fb = binding.leaf(tape, "feat_proj.b", &self.feat_b);
        let mut x = tape.linear(features, fw, fb);

        let marker = self.config.c_max;
        let label_idx: Vec<usize> = (0..n)
            .map(|i| if i < n_support { support_labels[i] } else { marker })
            .collect();
        let table = binding.leaf(tape, "label_embed", &self.label_embed);
        let labels = tape.gather_rows(table, &label_idx);
        x = tape.add(x, labels);

        let mask = Self::support_query_mask(n, n_support);
        x = self.stack.forward(tape, binding, "block", x, Some(&mask));

        let gamma = binding.leaf(tape, "final_ln.gamma", &self.final_gamma);
        let beta = binding.leaf(tape, "final_ln.beta", &self.final_beta);
        let x = tape.layer_norm(x, gamma, beta);
        let hw = binding.leaf(tape, "head.w", &self.head_w);
        let hb = binding.leaf(tape, "head.b", &self.head_b);
        let logits_full = tape.linear(x, hw, hb);
        Ok(tape.slice_cols(logits_full, 0, n_classes))
    }

    /// Query cross-entropy for one episode given preprocessed features.
    pub fn episode_loss(
        &self,
        tape: &mut Tape,
        binding: &mut Binding,
        support_x: &Tensor,
        support_y: &[usize],
        query_x: &Tensor,
        query_y: &[usize],
        n_classes: usize,
    ) -> Result<Tracked, CoreError> {
        assert_eq!(support_x.rows(), support_y.len());
        assert_eq!(query_x.rows(), query_y.len());
        let mut rows = self.pad_features(support_x)?;
        let padded_q = self.pad_features(query_x)?;
        let width = rows.cols();
        let mut all = rows.values().to_vec();
        all.extend_from_slice(padded_q.values());
        rows = Tensor::matrix(support_x.rows() + query_x.rows(), width, all);

        let features = tape.leaf(&rows);
        let logits = self.forward_tracked(tape, binding, features, support_y, n_classes)?;
        let query_logits = tape.slice_rows(logits, support_y.len(), query_y.len());
        Ok(tape.cross_entropy_logits(query_logits, query_y))
    }

    /// Class probabilities for queries given a labeled context, chunking
    /// queries so memory stays bounded. Features must already be in the
    /// engine's input space (quantile scores or adapter output).
    pub fn predict(
        &self,
        ctx_x: &Tensor,
        ctx_y: &[usize],
        query_x: &Tensor,
        n_classes: usize,
    ) -> Result<Tensor, CoreError> {
        const CHUNK: usize = 256;
        assert_eq!(ctx_x.rows(), ctx_y.len());
        self.check_classes(n_classes)?;
        let s = ctx_x.rows();
        let q_total = query_x.rows();
        let padded_ctx = self.pad_features(ctx_x)?;
        let width = padded_ctx.cols();
        let mut probs = Tensor::zeros(vec![q_total, n_classes]);

        let mut start = 0;
        while start < q_total {
            let len = CHUNK.min(q_total - start);
            let mut rows = padded_ctx.values().to_vec();
            let chunk = Tensor::matrix(
                len,
                query_x.cols(),
                (start..start + len).flat_map(|i| query_x.row(i).to_vec()).collect(),
            );
            rows.extend_from_slice(self.pad_features(&chunk)?.values());
            let episode = Tensor::matrix(s + len, width, rows);

            let mut tape = Tape::new();
            let mut binding = Binding::frozen();
            let features = tape.leaf(&episode);
            let logits = self.forward_tracked(&mut tape, &mut binding, features, ctx_y, n_classes)?;
            let query_logits = tape.slice_rows(logits, s, len);
            let soft = tape.softmax(query_logits);
            tape.check_finite(soft)?;
            probs.values_mut()[start * n_classes..(start + len) * n_classes]
                .copy_from_slice(tape.values(soft));
            start += len;
        }
        Ok(probs)
    }

    /// Argmax labels from [`Self::predict`].
    pub fn predict_labels(
        &self,
        ctx_x: &Tensor,
        ctx_y: &[usize],
        query_x: &Tensor,
        n_classes: usize,
    ) -> Result<Vec<usize>, CoreError> {
        let probs = self.predict(ctx_x, ctx_y, query_x, n_classes)?;
        Ok(argmax_rows(&probs))
    }
}

pub fn argmax_rows(probs: &Tensor) -> Vec<usize> {
    (0..probs.rows())
        .map(|i| {
            probs
                .row(i)
                .iter()
                .enumerate()
                .max_by(|a, b| a.1.partial_cmp(b.1).expect("finite probabilities"))
                .expect("non-empty row")
                .0
        })
        .collect()
}

impl Parameterized for Engine {
    fn visit(&self, f: &mut dyn FnMut(&str, &Tensor)) {
        f("feat_proj.w", &self.feat_w);
        f("feat_proj.b", &self.feat_b);
        f("label_embed", &self.label_embed);
        self.stack.visit("block", f);
        f("final_ln.gamma", &self.final_gamma);
        f("final_ln.beta", &self.final_beta);
        f("head.w", &self.head_w);
        f("head.b", &self.head_b);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut Tensor)) {
        f("feat_proj.w", &mut self.feat_w);
        f("feat_proj.b", &mut self.feat_b);
        f("label_embed", &mut self.label_embed);
        self.stack.visit_mut("block", f);
        f("final_ln.gamma", &mut self.final_gamma);
        f("final_ln.beta", &mut self.final_beta);
        f("head.w", &mut self.head_w);
        f("head.b", &mut self.head_b);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use pdx_tensor::Tape;

    fn tiny_engine(seed: u64) -> Engine {
        let cfg = EngineConfig { d_model: 16, layers: 2, heads: 2, f_max: 8, c_max: 4, ff_mult: 2 };
        Engine::new(cfg, &mut SeededRng::new(seed))
    }

    fn random_episode(rng: &mut SeededRng, s: usize, q: usize, f: usize, c: usize) -> (Tensor, Vec<usize>, Tensor, Vec<usize>) {
        let sx = Tensor::randn(vec![s, f], 1.0, rng);
        let sy: Vec<usize> = (0..s).map(|i| i % c).collect();
        let qx = Tensor::randn(vec![q, f], 1.0, rng);
        let qy: Vec<usize> = (0..q).map(|i| i % c).collect();
        (sx, sy, qx, qy)
    }

    #[test]
    fn untrained_episode_loss_is_ln_c() {
        let engine = tiny_engine(3);
        let mut rng = SeededRng::new(10);
        for c in [2usize, 3, 4] {
            let (sx, sy, qx, qy) = random_episode(&mut rng, 8, 4, 5, c);
            let mut tape = Tape::new();
            let mut binding = Binding::trainable();
            let loss = engine
                .episode_loss(&mut tape, &mut binding, &sx, &sy, &qx, &qy, c)
                .unwrap();
            let got = tape.scalar_value(loss);
            assert!(
                (got - (c as f64).ln()).abs() < 1e-12,
                "c={c}: loss {got} vs ln {}",
                (c as f64).ln()
            );
        }
    }

    #[test]
    fn support_permutation_does_not_change_predictions() {
        let engine = tiny_engine(4);
        let mut rng = SeededRng::new(11);
        let (sx, sy, qx, _) = random_episode(&mut rng, 10, 5, 6, 3);
        let base = engine.predict(&sx, &sy, &qx, 3).unwrap();

        let mut perm: Vec<usize> = (0..10).collect();
        rng.shuffle(&mut perm);
        let px = Tensor::matrix(10, 6, perm.iter().flat_map(|&i| sx.row(i).to_vec()).collect());
        let py: Vec<usize> = perm.iter().map(|&i| sy[i]).collect();
        let permuted = engine.predict(&px, &py, &qx, 3).unwrap();

        for (a, b) in base.values().iter().zip(permuted.values()) {
            assert!((a - b).abs() < 1e-9, "permutation moved a probability by {}", (a - b).abs());
        }
    }

    #[test]
    fn queries_do_not_influence_each_other() {
        let engine = tiny_engine(5);
        let mut rng = SeededRng::new(12);
        let (sx, sy, qx, _) = random_episode(&mut rng, 10, 4, 6, 3);

        // Predict the first query alone, then alongside three others.
        let solo = Tensor::matrix(1, 6, qx.row(0).to_vec());
        let alone = engine.predict(&sx, &sy, &solo, 3).unwrap();
        let together = engine.predict(&sx, &sy, &qx, 3).unwrap();
        for j in 0..3 {
            assert!(
                (alone.get2(0, j) - together.get2(0, j)).abs() < 1e-9,
                "query prediction depends on other queries"
            );
        }
    }

    #[test]
    fn feature_and_class_limits_are_enforced() {
        let engine = tiny_engine(6);
        let too_wide = Tensor::zeros(vec![4, 9]);
        assert!(matches!(
            engine.pad_features(&too_wide),
            Err(CoreError::FeatureCount { got: 9, max: 8 })
        ));
        let x = Tensor::zeros(vec![4, 3]);
        let y = vec![0, 1, 0, 1];
        let q = Tensor::zeros(vec![2, 3]);
        assert!(matches!(
            engine.predict(&x, &y, &q, 5),
            Err(CoreError::ClassCount { got: 5, max: 4 })
        ));
    }

    #[test]
    fn visit_names_match_binding_names() {
        let engine = tiny_engine(7);
        let mut visited = Vec::new();
        engine.visit(&mut |name, _| visited.push(name.to_string()));

        let mut tape = Tape::new();
        let mut binding = Binding::trainable();
        let x = Tensor::zeros(vec![4, 3]);
        let y = vec![0, 1];
        let q = Tensor::zeros(vec![2, 3]);
        let (sx, qx) = (Tensor::matrix(2, 3, x.values()[..6].to_vec()), q);
        engine
            .episode_loss(&mut tape, &mut binding, &sx, &y, &qx, &[0, 1], 2)
            .unwrap();
        let mut bound = binding.names();
        bound.sort();
        visited.sort();
        assert_eq!(bound, visited);
    }

    #[test]
    fn padding_appends_feature_count_indicator() {
        let engine = tiny_engine(8);
        let x = Tensor::matrix(2, 3, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let padded = engine.pad_features(&x).unwrap();
        assert_eq!(padded.cols(), 9);
        assert_eq!(padded.get2(0, 8), 3.0 / 8.0);
        assert_eq!(padded.get2(1, 3), 0.0); // zero pad
        assert_eq!(padded.get2(1, 2), 6.0);
    }

    #[test]
    fn tape_padding_matches_host_padding() {
        let engine = tiny_engine(9);
        let mut rng = SeededRng::new(2);
        let x = Tensor::randn(vec![3, 5], 1.0, &mut rng);
        let host = engine.pad_features(&x).unwrap();

        let mut tape = Tape::new();
        let z = tape.leaf(&x);
        let padded = engine.pad_tracked(&mut tape, z).unwrap();
        for (a, b) in tape.values(padded).iter().zip(host.values()) {
            assert!((a - b).abs() < 1e-12);
        }
    }
}
