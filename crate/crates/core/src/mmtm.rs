//! Masked multimodal pretraining.
//!
//! Each subject contributes a token sequence: volume patches plus one token
//! per tabular column (continuous columns scale a learned per-column
//! embedding, categorical columns look up a per-value embedding). A random
//! subset of tokens per modality is replaced by a learned mask token
//! *before* the modality encoders; the encoders and a joint fusion stack
//! then reconstruct the masked content from what remains. Reconstruction is
//! penalized only at masked positions: volume patches and continuous values
//! against their (standardized) inputs, categorical tokens against their
//! current embedding vectors treated as constants.
//!
//! After pretraining, [`Mmtm::extract`] mean-pools the fusion output with no
//! masking to produce one representation vector per subject.

use crate::blocks::{BlockStack, BoundBlock};
use crate::data::MultimodalDataset;
use crate::train::{DivergenceWatch, LossCurve};
use crate::CoreError;
use pdx_tensor::{Adam, Binding, Parameterized, SeededRng, Tape, Tensor, Tracked};

#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MmtmConfig {
    pub d_model: usize,
    pub heads: usize,
    pub visual_depth: usize,
    pub tab_depth: usize,
    pub fusion_depth: usize,
    pub ff_mult: usize,
    /// Volume patch side length.
    pub patch: usize,
    pub mask_rate_visual: f64,
    pub mask_rate_tabular: f64,
    pub lr: f64,
    pub batch: usize,
    pub epochs: usize,
}

impl Default for MmtmConfig {
    fn default() -> Self {
        Self {
            d_model: 64,
            heads: 4,
            visual_depth: 4,
            tab_depth: 2,
            fusion_depth: 4,
            ff_mult: 4,
            patch: 8,
            mask_rate_visual: 0.75,
            mask_rate_tabular: 0.05,
            lr: 2e-4,
            batch: 32,
            epochs: 100,
        }
    }
}

/// Data-dependent sizes the model is built for.
#[derive(Debug, Clone, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct MmtmDims {
    pub vis_tokens: usize,
    pub patch_dim: usize,
    pub cont_cols: usize,
    pub cat_cards: Vec<usize>,
}

impl MmtmDims {
    pub fn for_dataset(spec_side: usize, patch: usize, cont_cols: usize, cat_cards: &[usize]) -> Self {
        assert!(spec_side % patch == 0, "patch must tile the volume");
        let grid = spec_side / patch;
        Self {
            vis_tokens: grid * grid * grid,
            patch_dim: patch * patch * patch,
            cont_cols,
            cat_cards: cat_cards.to_vec(),
        }
    }

    pub fn tab_tokens(&self) -> usize {
        self.cont_cols + self.cat_cards.len()
    }

    pub fn cat_total(&self) -> usize {
        self.cat_cards.iter().sum()
    }

    /// Offset of each categorical column's block in the shared value table.
    pub fn cat_offsets(&self) -> Vec<usize> {
        let mut offsets = Vec::with_capacity(self.cat_cards.len());
        let mut acc = 0;
        for &card in &self.cat_cards {
            offsets.push(acc);
            acc += card;
        }
        offsets
    }
}

#[derive(Debug, Clone)]
pub struct Mmtm {
    pub config: MmtmConfig,
    pub dims: MmtmDims,
    patch_w: Tensor,
    patch_b: Tensor,
    vis_pos: Tensor,
    vis_mask_token: Tensor,
    vis_type: Tensor,
    cont_emb: Tensor,
    cont_bias: Tensor,
    cat_emb: Tensor,
    tab_mask_token: Tensor,
    tab_type: Tensor,
    vis_stack: BlockStack,
    tab_stack: BlockStack,
    fusion_stack: BlockStack,
    dec_vis_w1: Tensor,
    dec_vis_b1: Tensor,
    dec_vis_w2: Tensor,
    dec_vis_b2: Tensor,
    dec_cont_w1: Tensor,
    dec_cont_b1: Tensor,
    dec_cont_w2: Tensor,
    dec_cont_b2: Tensor,
    dec_cat_w1: Tensor,
    dec_cat_b1: Tensor,
    dec_cat_w2: Tensor,
    dec_cat_b2: Tensor,
}

struct Handles {
    patch_w: Tracked,
    patch_b: Tracked,
    vis_pos: Tracked,
    vis_mask_token: Tracked,
    vis_type: Tracked,
    cont_emb: Tracked,
    cont_bias: Tracked,
    cat_emb: Tracked,
    tab_mask_token: Tracked,
    tab_type: Tracked,
    vis_blocks: Vec<BoundBlock>,
    tab_blocks: Vec<BoundBlock>,
    fusion_blocks: Vec<BoundBlock>,
    dec_vis: (Tracked, Tracked, Tracked, Tracked),
    dec_cont: (Tracked, Tracked, Tracked, Tracked),
    dec_cat: (Tracked, Tracked, Tracked, Tracked),
}

/// Per-sample mask draw: which token indices are hidden in each modality.
#[derive(Debug, Clone)]
pub struct MaskDraw {
    pub visual: Vec<usize>,
    pub tabular: Vec<usize>,
}

impl Mmtm {
    pub fn new(config: MmtmConfig, dims: MmtmDims, rng: &mut SeededRng) -> Self {
        let d = config.d_model;
        let ff = config.ff_mult * d;
        let r = rng.split(0x33);
        Self {
            patch_w: Tensor::randn(vec![dims.patch_dim, d], 0.02, &mut r.split(0)),
            patch_b: Tensor::zeros(vec![1, d]),
            vis_pos: Tensor::randn(vec![dims.vis_tokens, d], 0.02, &mut r.split(1)),
            vis_mask_token: Tensor::randn(vec![1, d], 0.02, &mut r.split(2)),
            vis_type: Tensor::randn(vec![1, d], 0.02, &mut r.split(3)),
            cont_emb: Tensor::randn(vec![dims.cont_cols, d], 0.02, &mut r.split(4)),
            cont_bias: Tensor::randn(vec![dims.cont_cols, d], 0.02, &mut r.split(5)),
            cat_emb: Tensor::randn(vec![dims.cat_total(), d], 0.02, &mut r.split(6)),
            tab_mask_token: Tensor::randn(vec![1, d], 0.02, &mut r.split(7)),
            tab_type: Tensor::randn(vec![1, d], 0.02, &mut r.split(8)),
            vis_stack: BlockStack::new(config.visual_depth, d, ff, config.heads, &mut r.split(9)),
            tab_stack: BlockStack::new(config.tab_depth, d, ff, config.heads, &mut r.split(10)),
            fusion_stack: BlockStack::new(config.fusion_depth, d, ff, config.heads, &mut r.split(11)),
            dec_vis_w1: Tensor::randn(vec![d, d], 0.02, &mut r.split(12)),
            dec_vis_b1: Tensor::zeros(vec![1, d]),
            dec_vis_w2: Tensor::randn(vec![d, dims.patch_dim], 0.02, &mut r.split(13)),
            dec_vis_b2: Tensor::zeros(vec![1, dims.patch_dim]),
            dec_cont_w1: Tensor::randn(vec![d, d], 0.02, &mut r.split(14)),
            dec_cont_b1: Tensor::zeros(vec![1, d]),
            dec_cont_w2: Tensor::randn(vec![d, 1], 0.02, &mut r.split(15)),
            dec_cont_b2: Tensor::zeros(vec![1, 1]),
            dec_cat_w1: Tensor::randn(vec![d, d], 0.02, &mut r.split(16)),
            dec_cat_b1: Tensor::zeros(vec![1, d]),
            dec_cat_w2: Tensor::randn(vec![d, d], 0.02, &mut r.split(17)),
            dec_cat_b2: Tensor::zeros(vec![1, d]),
            config,
            dims,
        }
    }

    fn bind(&self, tape: &mut Tape, binding: &mut Binding) -> Handles {
        Handles {
            patch_w: binding.leaf(tape, "vis.patch_proj.w", &self.patch_w),
            patch_b: binding.leaf(tape, "vis.patch_proj.b", &self.patch_b),
            vis_pos: binding.leaf(tape, "vis.pos", &self.vis_pos),
            vis_mask_token: binding.leaf(tape, "vis.mask_token", &self.vis_mask_token),
            vis_type: binding.leaf(tape, "vis.type", &self.vis_type),
            cont_emb: binding.leaf(tape, "tab.cont_emb", &self.cont_emb),
            cont_bias: binding.leaf(tape, "tab.cont_bias", &self.cont_bias),
            cat_emb: binding.leaf(tape, "tab.cat_emb", &self.cat_emb),
            tab_mask_token: binding.leaf(tape, "tab.mask_token", &self.tab_mask_token),
            tab_type: binding.leaf(tape, "tab.type", &self.tab_type),
            vis_blocks: self.vis_stack.bind(tape, binding, "vis.block"),
            tab_blocks: self.tab_stack.bind(tape, binding, "tab.block"),
            fusion_blocks: self.fusion_stack.bind(tape, binding, "fusion.block"),
            dec_vis: (
                binding.leaf(tape, "dec.vis.w1", &self.dec_vis_w1),
                binding.leaf(tape, "dec.vis.b1", &self.dec_vis_b1),
                binding.leaf(tape, "dec.vis.w2", &self.dec_vis_w2),
                binding.leaf(tape, "dec.vis.b2", &self.dec_vis_b2),
            ),
            dec_cont: (
                binding.leaf(tape, "dec.cont.w1", &self.dec_cont_w1),
                binding.leaf(tape, "dec.cont.b1", &self.dec_cont_b1),
                binding.leaf(tape, "dec.cont.w2", &self.dec_cont_w2),
                binding.leaf(tape, "dec.cont.b2", &self.dec_cont_b2),
            ),
            dec_cat: (
                binding.leaf(tape, "dec.cat.w1", &self.dec_cat_w1),
                binding.leaf(tape, "dec.cat.b1", &self.dec_cat_b1),
                binding.leaf(tape, "dec.cat.w2", &self.dec_cat_w2),
                binding.leaf(tape, "dec.cat.b2", &self.dec_cat_b2),
            ),
        }
    }

    pub fn draw_masks(&self, rng: &mut SeededRng) -> MaskDraw {
        let n_vis = (self.config.mask_rate_visual * self.dims.vis_tokens as f64).floor() as usize;
        let n_tab = if self.config.mask_rate_tabular > 0.0 {
            ((self.config.mask_rate_tabular * self.dims.tab_tokens() as f64).round() as usize).max(1)
        } else {
            0
        };
        MaskDraw {
            visual: rng.choose_indices(self.dims.vis_tokens, n_vis),
            tabular: rng.choose_indices(self.dims.tab_tokens(), n_tab),
        }
    }

    /// Replace masked rows: zero the content row, add the mask token.
    fn apply_mask(
        tape: &mut Tape,
        tokens: Tracked,
        masked: &[usize],
        mask_token: Tracked,
    ) -> Tracked {
        let n = tokens.rows;
        let mut keep = vec![1.0; n];
        let mut col = vec![0.0; n];
        for &i in masked {
            keep[i] = 0.0;
            col[i] = 1.0;
        }
        let kept = tape.scale_rows(tokens, &keep);
        let col_leaf = tape.leaf_matrix(n, 1, col);
        let fill = tape.matmul(col_leaf, mask_token);
        tape.add(kept, fill)
    }

    /// Modality encoders plus fusion for one sample. `masks: None` runs the
    /// clean path used for representation extraction.
    fn fuse_sample(
        &self,
        tape: &mut Tape,
        h: &Handles,
        patches: &Tensor,
        cont_row: &[f64],
        cat_global: &[usize],
        masks: Option<&MaskDraw>,
    ) -> Tracked {
        // Visual stream.
        let patch_leaf = tape.leaf(patches);
        let mut vis = tape.linear(patch_leaf, h.patch_w, h.patch_b);
        if let Some(m) = masks {
            vis = Self::apply_mask(tape, vis, &m.visual, h.vis_mask_token);
        }
        vis = tape.add(vis, h.vis_pos);
        vis = tape.add_row_broadcast(vis, h.vis_type);
        for block in &h.vis_blocks {
            vis = block.forward(tape, vis, None);
        }

        // Tabular stream: continuous value tokens then categorical lookups.
        let cont_all: Vec<usize> = (0..self.dims.cont_cols).collect();
        let cont_embs = tape.gather_rows(h.cont_emb, &cont_all);
        let scaled = tape.scale_rows(cont_embs, cont_row);
        let cont_biases = tape.gather_rows(h.cont_bias, &cont_all);
        let cont_tokens = tape.add(scaled, cont_biases);
        let cat_tokens = tape.gather_rows(h.cat_emb, cat_global);
        let mut tab = tape.concat_rows(cont_tokens, cat_tokens);
        if let Some(m) = masks {
            let tab_masked: Vec<usize> = m.tabular.clone();
            tab = Self::apply_mask(tape, tab, &tab_masked, h.tab_mask_token);
        }
        tab = tape.add_row_broadcast(tab, h.tab_type);
        for block in &h.tab_blocks {
            tab = block.forward(tape, tab, None);
        }

        // Fusion over the concatenated sequence.
        let mut fused = tape.concat_rows(vis, tab);
        for block in &h.fusion_blocks {
            fused = block.forward(tape, fused, None);
        }
        fused
    }

    fn decode3(
        tape: &mut Tape,
        x: Tracked,
        (w1, b1, w2, b2): (Tracked, Tracked, Tracked, Tracked),
    ) -> Tracked {
        let hdn = tape.linear(x, w1, b1);
        let hdn = tape.gelu(hdn);
        tape.linear(hdn, w2, b2)
    }

    /// Masked reconstruction loss for one sample (scalar node).
    ///
    /// `cat_targets` optionally pins the categorical regression targets to
    /// externally supplied values (laid out as the gathered embedding rows);
    /// `None` reads the current embedding table. Either way the targets are
    /// data, not tape nodes — see the comment at the target construction.
    fn sample_loss(
        &self,
        tape: &mut Tape,
        h: &Handles,
        patches: &Tensor,
        cont_row: &[f64],
        cat_global: &[usize],
        masks: &MaskDraw,
        cat_targets: Option<&[f64]>,
    ) -> Tracked {
        let dims = &self.dims;
        let d = self.config.d_model;
        let fused = self.fuse_sample(tape, h, patches, cont_row, cat_global, Some(masks));

        // Visual reconstruction at masked patches.
        let vis_rows = tape.slice_rows(fused, 0, dims.vis_tokens);
        let vis_hat = Self::decode3(tape, vis_rows, h.dec_vis);
        let vis_target = tape.leaf(patches);
        let vis_diff = tape.sub(vis_hat, vis_target);
        let vis_sq = tape.mul_elem(vis_diff, vis_diff);
        let mut w_vis = vec![0.0; dims.vis_tokens];
        let vis_norm = (masks.visual.len() * dims.patch_dim) as f64;
        for &i in &masks.visual {
            w_vis[i] = 1.0 / vis_norm;
        }
        let vis_weighted = tape.scale_rows(vis_sq, &w_vis);
        let mut loss = tape.sum_all(vis_weighted);

        let n_masked_tab = masks.tabular.len();
        if n_masked_tab > 0 {
            // Continuous reconstruction at masked continuous tokens.
            let masked_cont: Vec<usize> =
                masks.tabular.iter().copied().filter(|&t| t < dims.cont_cols).collect();
            if !masked_cont.is_empty() {
                let cont_rows = tape.slice_rows(fused, dims.vis_tokens, dims.cont_cols);
                let cont_hat = Self::decode3(tape, cont_rows, h.dec_cont);
                let target = tape.leaf_matrix(dims.cont_cols, 1, cont_row.to_vec());
                let diff = tape.sub(cont_hat, target);
                let sq = tape.mul_elem(diff, diff);
                let mut w = vec![0.0; dims.cont_cols];
                for &t in &masked_cont {
                    w[t] = 1.0 / n_masked_tab as f64;
                }
                let weighted = tape.scale_rows(sq, &w);
                let cont_loss = tape.sum_all(weighted);
                loss = tape.add(loss, cont_loss);
            }

            // Categorical reconstruction against frozen embedding targets.
            let masked_cat: Vec<usize> =
                masks.tabular.iter().copied().filter(|&t| t >= dims.cont_cols).collect();
            if !masked_cat.is_empty() {
                let n_cat = dims.cat_cards.len();
                let cat_rows = tape.slice_rows(fused, dims.vis_tokens + dims.cont_cols, n_cat);
                let cat_hat = Self::decode3(tape, cat_rows, h.dec_cat);
                // Targets are embedding values as data (by default the
                // *current* table), so no gradient flows into the table
                // through the target side — a stop-gradient that keeps the
                // trivial "shrink all embeddings" solution out of reach.
                let target_values: Vec<f64> = match cat_targets {
                    Some(pinned) => pinned.to_vec(),
                    None => cat_global
                        .iter()
                        .flat_map(|&g| self.cat_emb.row(g).to_vec())
                        .collect(),
                };
                let target = tape.leaf_matrix(n_cat, d, target_values);
                let diff = tape.sub(cat_hat, target);
                let sq = tape.mul_elem(diff, diff);
                let mut w = vec![0.0; n_cat];
                for &t in &masked_cat {
                    w[t - dims.cont_cols] = 1.0 / (n_masked_tab * d) as f64;
                }
                let weighted = tape.scale_rows(sq, &w);
                let cat_loss = tape.sum_all(weighted);
                loss = tape.add(loss, cat_loss);
            }
        }
        loss
    }

    /// Masked-reconstruction loss of one sample together with parameter
    /// gradients in visit order — the per-sample term `pretrain` averages
    /// over each batch, exposed for external harnesses (finite-difference
    /// verification, custom loops). At least one mask set must be non-empty.
    pub fn sample_loss_and_grads(
        &self,
        patches: &Tensor,
        cont_row: &[f64],
        cat_global: &[usize],
        masks: &MaskDraw,
        cat_targets: Option<&[f64]>,
    ) -> (f64, Vec<(String, Vec<f64>)>) {
        assert!(
            !masks.visual.is_empty() || !masks.tabular.is_empty(),
            "masked loss needs at least one masked token"
        );
        let mut tape = Tape::new();
        let mut binding = Binding::trainable();
        let handles = self.bind(&mut tape, &mut binding);
        let loss =
            self.sample_loss(&mut tape, &handles, patches, cont_row, cat_global, masks, cat_targets);
        let value = tape.scalar_value(loss);
        let grads = tape.backward(loss);
        (value, binding.gradients(&grads))
    }

    /// The detached categorical regression targets for `cat_global` under the
    /// current embedding table, laid out row-major as one `d_model` block per
    /// categorical column. The training objective treats these as data; a
    /// finite-difference harness must therefore pin them while perturbing
    /// parameters, via the `cat_targets` argument of
    /// [`Mmtm::sample_loss_and_grads`].
    pub fn cat_targets(&self, cat_global: &[usize]) -> Vec<f64> {
        cat_global.iter().flat_map(|&g| self.cat_emb.row(g).to_vec()).collect()
    }

    /// Train on the given subject indices.
    pub fn pretrain(
        &mut self,
        prep: &PreparedCohort,
        train_idx: &[usize],
        rng: &SeededRng,
    ) -> Result<MmtmReport, CoreError> {
        assert!(!train_idx.is_empty());
        let mut adam = Adam::new(self.config.lr);
        let mut watch = DivergenceWatch::default();
        let steps_per_epoch = train_idx.len().div_ceil(self.config.batch);
        let total_steps = steps_per_epoch * self.config.epochs;
        let mut curve = LossCurve::with_stride((total_steps / 60).max(1));
        let mut step = 0;
        let mut last = f64::NAN;

        for epoch in 0..self.config.epochs {
            let mut order = train_idx.to_vec();
            rng.split(epoch as u64).shuffle(&mut order);
            let mut mask_rng = rng.split(1_000_000 + epoch as u64);

            for chunk in order.chunks(self.config.batch) {
                let mut tape = Tape::new();
                let mut binding = Binding::trainable();
                let handles = self.bind(&mut tape, &mut binding);
                let mut acc: Option<Tracked> = None;
                for &i in chunk {
                    let masks = self.draw_masks(&mut mask_rng);
                    let li = self.sample_loss(
                        &mut tape,
                        &handles,
                        &prep.patches[i],
                        prep.cont.row(i),
                        &prep.cat_global[i],
                        &masks,
                        None,
                    );
                    acc = Some(match acc {
                        None => li,
                        Some(a) => tape.add(a, li),
                    });
                }
                let loss = tape.scale(acc.expect("non-empty chunk"), 1.0 / chunk.len() as f64);
                let loss_v = tape.scalar_value(loss);
                watch.observe(step, loss_v)?;
                curve.push(step, loss_v);
                last = loss_v;

                let grads = tape.backward(loss);
                let named = binding.gradients(&grads);
                adam.step(self, &named);
                step += 1;
            }
        }
        curve.push_final(step.saturating_sub(1), last);
        Ok(MmtmReport {
            epochs: self.config.epochs,
            steps: step,
            initial_loss: watch.initial().unwrap_or(f64::NAN),
            final_loss: last,
            curve,
        })
    }

    /// Masked reconstruction error of the model and of a constant-mean
    /// predictor on identical mask draws.
    pub fn masked_eval(
        &self,
        prep: &PreparedCohort,
        indices: &[usize],
        rng: &mut SeededRng,
    ) -> Result<MaskedEval, CoreError> {
        let dims = &self.dims;
        let d = self.config.d_model;
        let mut model_total = 0.0;
        let mut baseline_total = 0.0;

        // Constant-mean predictions per element type, from training stats.
        let vis_mean = prep.stats.vis_mean;
        let cont_means = &prep.stats.cont_mean_z;
        let cat_mean_emb: Vec<Vec<f64>> = prep
            .stats
            .cat_freqs
            .iter()
            .enumerate()
            .map(|(j, freqs)| {
                let offset = dims.cat_offsets()[j];
                let mut mean = vec![0.0; d];
                for (v, &p) in freqs.iter().enumerate() {
                    for (m, &e) in mean.iter_mut().zip(self.cat_emb.row(offset + v)) {
                        *m += p * e;
                    }
                }
                mean
            })
            .collect();

        for &i in indices {
            let masks = self.draw_masks(rng);

            // Model error: the training loss node on a frozen binding.
            let mut tape = Tape::new();
            let mut binding = Binding::frozen();
            let handles = self.bind(&mut tape, &mut binding);
            let loss = self.sample_loss(
                &mut tape,
                &handles,
                &prep.patches[i],
                prep.cont.row(i),
                &prep.cat_global[i],
                &masks,
                None,
            );
            tape.check_finite(loss)?;
            model_total += tape.scalar_value(loss);

            // Constant-mean error on the same masks.
            let mut base = 0.0;
            let vis_norm = (masks.visual.len() * dims.patch_dim) as f64;
            for &t in &masks.visual {
                for &v in prep.patches[i].row(t) {
                    let e = v - vis_mean;
                    base += e * e / vis_norm;
                }
            }
            let n_masked_tab = masks.tabular.len() as f64;
            for &t in &masks.tabular {
                if t < dims.cont_cols {
                    let e = prep.cont.get2(i, t) - cont_means[t];
                    base += e * e / n_masked_tab;
                } else {
                    let col = t - dims.cont_cols;
                    let emb = self.cat_emb.row(prep.cat_global[i][col]);
                    let mean = &cat_mean_emb[col];
                    let sq: f64 = emb.iter().zip(mean).map(|(&a, &b)| (a - b) * (a - b)).sum();
                    base += sq / (n_masked_tab * d as f64);
                }
            }
            baseline_total += base;
        }

        let n = indices.len() as f64;
        Ok(MaskedEval { model_mse: model_total / n, baseline_mse: baseline_total / n })
    }

    /// Mean-pooled fusion output per subject, no masking.
    pub fn extract(&self, prep: &PreparedCohort, indices: &[usize]) -> Result<Tensor, CoreError> {
        let d = self.config.d_model;
        let mut out = Tensor::zeros(vec![indices.len(), d]);
        let mut row = 0;
        for chunk in indices.chunks(16) {
            let mut tape = Tape::new();
            let mut binding = Binding::frozen();
            let handles = self.bind(&mut tape, &mut binding);
            for &i in chunk {
                let fused = self.fuse_sample(
                    &mut tape,
                    &handles,
                    &prep.patches[i],
                    prep.cont.row(i),
                    &prep.cat_global[i],
                    None,
                );
                let pooled = tape.mean_rows(fused);
                tape.check_finite(pooled)?;
                out.values_mut()[row * d..(row + 1) * d].copy_from_slice(tape.values(pooled));
                row += 1;
            }
        }
        Ok(out)
    }
}

#[derive(Debug, Clone, Copy)]
pub struct MaskedEval {
    pub model_mse: f64,
    pub baseline_mse: f64,
}

#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct MmtmReport {
    pub epochs: usize,
    pub steps: usize,
    pub initial_loss: f64,
    pub final_loss: f64,
    pub curve: LossCurve,
}

impl Parameterized for Mmtm {
    fn visit(&self, f: &mut dyn FnMut(&str, &Tensor)) {
        f("vis.patch_proj.w", &self.patch_w);
        f("vis.patch_proj.b", &self.patch_b);
        f("vis.pos", &self.vis_pos);
        f("vis.mask_token", &self.vis_mask_token);
        f("vis.type", &self.vis_type);
        f("tab.cont_emb", &self.cont_emb);
        f("tab.cont_bias", &self.cont_bias);
        f("tab.cat_emb", &self.cat_emb);
        f("tab.mask_token", &self.tab_mask_token);
        f("tab.type", &self.tab_type);
        self.vis_stack.visit("vis.block", f);
        self.tab_stack.visit("tab.block", f);
        self.fusion_stack.visit("fusion.block", f);
        f("dec.vis.w1", &self.dec_vis_w1);
        f("dec.vis.b1", &self.dec_vis_b1);
        f("dec.vis.w2", &self.dec_vis_w2);
        f("dec.vis.b2", &self.dec_vis_b2);
        f("dec.cont.w1", &self.dec_cont_w1);
        f("dec.cont.b1", &self.dec_cont_b1);
        f("dec.cont.w2", &self.dec_cont_w2);
        f("dec.cont.b2", &self.dec_cont_b2);
        f("dec.cat.w1", &self.dec_cat_w1);
        f("dec.cat.b1", &self.dec_cat_b1);
        f("dec.cat.w2", &self.dec_cat_w2);
        f("dec.cat.b2", &self.dec_cat_b2);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut Tensor)) {
        f("vis.patch_proj.w", &mut self.patch_w);
        f("vis.patch_proj.b", &mut self.patch_b);
        f("vis.pos", &mut self.vis_pos);
        f("vis.mask_token", &mut self.vis_mask_token);
        f("vis.type", &mut self.vis_type);
        f("tab.cont_emb", &mut self.cont_emb);
        f("tab.cont_bias", &mut self.cont_bias);
        f("tab.cat_emb", &mut self.cat_emb);
        f("tab.mask_token", &mut self.tab_mask_token);
        f("tab.type", &mut self.tab_type);
        self.vis_stack.visit_mut("vis.block", f);
        self.tab_stack.visit_mut("tab.block", f);
        self.fusion_stack.visit_mut("fusion.block", f);
        f("dec.vis.w1", &mut self.dec_vis_w1);
        f("dec.vis.b1", &mut self.dec_vis_b1);
        f("dec.vis.w2", &mut self.dec_vis_w2);
        f("dec.vis.b2", &mut self.dec_vis_b2);
        f("dec.cont.w1", &mut self.dec_cont_w1);
        f("dec.cont.b1", &mut self.dec_cont_b1);
        f("dec.cont.w2", &mut self.dec_cont_w2);
        f("dec.cont.b2", &mut self.dec_cont_b2);
        f("dec.cat.w1", &mut self.dec_cat_w1);
        f("dec.cat.b1", &mut self.dec_cat_b1);
        f("dec.cat.w2", &mut self.dec_cat_w2);
        f("dec.cat.b2", &mut self.dec_cat_b2);
    }
}

// ---------------------------------------------------------------------------
// Cohort preparation: imputation, standardization, patch extraction.
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct PrepStats {
    /// Raw-space voxel mean/std over training volumes.
    pub vox_mean: f64,
    pub vox_std: f64,
    /// Raw-space per-column mean/std over *observed* training cells.
    pub cont_mean_raw: Vec<f64>,
    pub cont_std_raw: Vec<f64>,
    /// Standardized-space per-column mean over training rows (imputed cells
    /// included) — the constant predictor's target.
    pub cont_mean_z: Vec<f64>,
    /// Standardized-space voxel mean over training patches.
    pub vis_mean: f64,
    /// Training category frequencies per categorical column.
    pub cat_freqs: Vec<Vec<f64>>,
}

/// Model-ready cohort: standardized patch matrices, imputed standardized
/// continuous columns, and categorical values as global table offsets.
#[derive(Debug, Clone)]
pub struct PreparedCohort {
    pub patches: Vec<Tensor>,
    pub cont: Tensor,
    pub cat_global: Vec<Vec<usize>>,
    pub labels: Vec<usize>,
    pub stats: PrepStats,
}

/// Split a flattened cubic volume into non-overlapping cubic patches in
/// raster order; one row per patch.
pub fn patchify(volume: &[f32], side: usize, patch: usize, scale: impl Fn(f64) -> f64) -> Tensor {
    assert!(side % patch == 0);
    let grid = side / patch;
    let patch_dim = patch * patch * patch;
    let mut out = Tensor::zeros(vec![grid * grid * grid, patch_dim]);
    let mut token = 0;
    for bz in 0..grid {
        for by in 0..grid {
            for bx in 0..grid {
                let mut e = 0;
                for dz in 0..patch {
                    for dy in 0..patch {
                        for dx in 0..patch {
                            let z = bz * patch + dz;
                            let y = by * patch + dy;
                            let x = bx * patch + dx;
                            let v = volume[(z * side + y) * side + x] as f64;
                            out.set2(token, e, scale(v));
                            e += 1;
                        }
                    }
                }
                token += 1;
            }
        }
    }
    out
}

/// Fit imputation and standardization on `train_idx`, apply to the whole
/// cohort, and extract patch matrices.
pub fn prepare_cohort(
    ds: &MultimodalDataset,
    train_idx: &[usize],
    patch: usize,
) -> Result<PreparedCohort, CoreError> {
    let spec = &ds.spec;
    let n = spec.n;
    let dims = MmtmDims::for_dataset(spec.vol_side, patch, spec.cont_cols, &spec.cat_cards);

    // Voxel statistics over training volumes.
    let mut sum = 0.0;
    let mut sumsq = 0.0;
    let mut count = 0.0;
    for &i in train_idx {
        for &v in &ds.volumes[i] {
            sum += v as f64;
            sumsq += (v as f64) * (v as f64);
            count += 1.0;
        }
    }
    let vox_mean = sum / count;
    let vox_std = ((sumsq / count - vox_mean * vox_mean).max(1e-12)).sqrt();

    // Observed-cell statistics per continuous column (training rows only).
    let c = spec.cont_cols;
    let mut cont_mean_raw = vec![0.0; c];
    let mut cont_std_raw = vec![1.0; c];
    for j in 0..c {
        let mut s = 0.0;
        let mut s2 = 0.0;
        let mut m = 0.0;
        for &i in train_idx {
            if !ds.missing[i][j] {
                let v = ds.continuous.get2(i, j);
                s += v;
                s2 += v * v;
                m += 1.0;
            }
        }
        if m > 0.0 {
            cont_mean_raw[j] = s / m;
            cont_std_raw[j] = ((s2 / m - cont_mean_raw[j] * cont_mean_raw[j]).max(1e-12)).sqrt();
        }
    }

    // Standardize with mean imputation: missing cells land exactly at 0.
    let mut cont = Tensor::zeros(vec![n, c]);
    for i in 0..n {
        for j in 0..c {
            let z = if ds.missing[i][j] {
                0.0
            } else {
                (ds.continuous.get2(i, j) - cont_mean_raw[j]) / cont_std_raw[j]
            };
            cont.set2(i, j, z);
        }
    }
    let mut cont_mean_z = vec![0.0; c];
    for j in 0..c {
        let mut s = 0.0;
        for &i in train_idx {
            s += cont.get2(i, j);
        }
        cont_mean_z[j] = s / train_idx.len() as f64;
    }

    // Category offsets and training frequencies.
    let offsets = dims.cat_offsets();
    let cat_global: Vec<Vec<usize>> = (0..n)
        .map(|i| {
            ds.categorical[i]
                .iter()
                .enumerate()
                .map(|(j, &v)| offsets[j] + v)
                .collect()
        })
        .collect();
    let mut cat_freqs: Vec<Vec<f64>> = spec.cat_cards.iter().map(|&card| vec![0.0; card]).collect();
    for &i in train_idx {
        for (j, &v) in ds.categorical[i].iter().enumerate() {
            cat_freqs[j][v] += 1.0;
        }
    }
    for freqs in cat_freqs.iter_mut() {
        let total: f64 = freqs.iter().sum();
        if total > 0.0 {
            freqs.iter_mut().for_each(|f| *f /= total);
        }
    }

    // Patch matrices in standardized voxel space.
    let patches: Vec<Tensor> = ds
        .volumes
        .iter()
        .map(|vol| patchify(vol, spec.vol_side, patch, |v| (v - vox_mean) / vox_std))
        .collect();
    let mut vis_sum = 0.0;
    let mut vis_count = 0.0;
    for &i in train_idx {
        for &v in patches[i].values() {
            vis_sum += v;
            vis_count += 1.0;
        }
    }

    Ok(PreparedCohort {
        patches,
        cont,
        cat_global,
        labels: ds.labels.clone(),
        stats: PrepStats {
            vox_mean,
            vox_std,
            cont_mean_raw,
            cont_std_raw,
            cont_mean_z,
            vis_mean: vis_sum / vis_count,
            cat_freqs,
        },
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_multimodal, MultimodalSpec};

    fn tiny_setup(seed: u64) -> (MultimodalDataset, PreparedCohort, Mmtm) {
        let spec = MultimodalSpec {
            n: 24,
            vol_side: 8,
            cont_cols: 5,
            cat_cards: vec![2, 3],
            ..Default::default()
        };
        let ds = generate_multimodal(&spec, &mut SeededRng::new(seed));
        let train: Vec<usize> = (0..16).collect();
        let prep = prepare_cohort(&ds, &train, 4).unwrap();
        let cfg = MmtmConfig {
            d_model: 16,
            heads: 2,
            visual_depth: 1,
            tab_depth: 1,
            fusion_depth: 1,
            ff_mult: 2,
            patch: 4,
            batch: 8,
            epochs: 2,
            ..Default::default()
        };
        let dims = MmtmDims::for_dataset(8, 4, 5, &[2, 3]);
        let model = Mmtm::new(cfg, dims, &mut SeededRng::new(seed + 1));
        (ds, prep, model)
    }

    #[test]
    fn patchify_reassembles_the_volume() {
        let side = 4;
        let volume: Vec<f32> = (0..side * side * side).map(|i| i as f32).collect();
        let patches = patchify(&volume, side, 2, |v| v);
        assert_eq!(patches.shape(), &[8, 8]);
        // Token 0 covers the corner block (z,y,x) in 0..2 each.
        let expect: Vec<f64> = [(0, 0, 0), (0, 0, 1), (0, 1, 0), (0, 1, 1), (1, 0, 0), (1, 0, 1), (1, 1, 0), (1, 1, 1)]
            .iter()
            .map(|&(z, y, x)| ((z * side + y) * side + x) as f64)
            .collect();
        assert_eq!(patches.row(0), expect.as_slice());
        // All values present exactly once.
        let mut all: Vec<f64> = patches.values().to_vec();
        all.sort_by(|a, b| a.partial_cmp(b).unwrap());
        assert_eq!(all, (0..64).map(|v| v as f64).collect::<Vec<_>>());
    }

    #[test]
    fn imputed_cells_are_exactly_zero() {
        let (ds, prep, _) = tiny_setup(3);
        for i in 0..ds.spec.n {
            for j in 0..ds.spec.cont_cols {
                if ds.missing[i][j] {
                    assert_eq!(prep.cont.get2(i, j), 0.0);
                }
            }
        }
    }

    #[test]
    fn mask_counts_follow_the_rates() {
        let (_, _, model) = tiny_setup(4);
        let mut rng = SeededRng::new(0);
        let draw = model.draw_masks(&mut rng);
        // 8 visual tokens at rate 0.75 -> 6 masked; 7 tabular tokens at 0.05
        // -> max(1, round(0.35)) = 1.
        assert_eq!(draw.visual.len(), 6);
        assert_eq!(draw.tabular.len(), 1);
    }

    #[test]
    fn masked_content_gets_no_gradient() {
        // Build a sample loss, backprop, and confirm the patch content of a
        // masked token influences nothing (its pathway was zeroed).
        let (_, prep, model) = tiny_setup(5);
        let masks = MaskDraw { visual: vec![0, 3, 5], tabular: vec![1] };

        let loss_for = |patch_override: Option<(usize, f64)>| -> f64 {
            let mut patches = prep.patches[0].clone();
            if let Some((token, delta)) = patch_override {
                let v = patches.get2(token, 0);
                patches.set2(token, 0, v + delta);
            }
            let mut tape = Tape::new();
            let mut binding = Binding::frozen();
            let handles = model.bind(&mut tape, &mut binding);
            let loss = model.sample_loss(
                &mut tape,
                &handles,
                &patches,
                prep.cont.row(0),
                &prep.cat_global[0],
                &masks,
                None,
            );
            tape.scalar_value(loss)
        };

        let base = loss_for(None);
        // Moving a masked token's *input* changes only its reconstruction
        // target, never the encoding; moving an unmasked token changes the
        // encoding too. Check the encoder path is provably cut: perturbing
        // masked-token content must shift the loss purely through the target
        // term, which is linear in the perturbed element — verify by
        // symmetry: +delta and -delta around the decoded value give equal
        // shifts only if the encoding is unchanged.
        let up = loss_for(Some((0, 1e-2)));
        let down = loss_for(Some((0, -1e-2)));
        // Second difference of a pure quadratic target term: up + down - 2*base
        // = 2 * delta^2 / norm — tiny and positive; encoder leakage would
        // break this identity at much larger magnitude.
        let second_diff = up + down - 2.0 * base;
        let norm = (masks.visual.len() * model.dims.patch_dim) as f64;
        let expect = 2.0 * 1e-4 / norm;
        assert!(
            (second_diff - expect).abs() < expect * 1e-3,
            "masked token content leaked into the encoder: {second_diff:.3e} vs {expect:.3e}"
        );
    }

    #[test]
    fn short_training_reduces_reconstruction_loss() {
        // Paired comparison on identical mask draws: per-step training
        // losses fluctuate with each fresh mask, so measure the same fixed
        // evaluation before and after instead.
        let (_, prep, mut model) = tiny_setup(6);
        let train: Vec<usize> = (0..16).collect();
        let before = model.masked_eval(&prep, &train, &mut SeededRng::new(77)).unwrap();
        model.config.epochs = 20;
        model.config.lr = 2e-3;
        model.pretrain(&prep, &train, &SeededRng::new(0)).unwrap();
        let after = model.masked_eval(&prep, &train, &mut SeededRng::new(77)).unwrap();
        assert!(
            after.model_mse < before.model_mse,
            "reconstruction did not improve: {} -> {}",
            before.model_mse,
            after.model_mse
        );
    }

    #[test]
    fn extract_is_deterministic_and_shaped() {
        let (_, prep, model) = tiny_setup(7);
        let idx: Vec<usize> = (0..10).collect();
        let a = model.extract(&prep, &idx).unwrap();
        let b = model.extract(&prep, &idx).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.shape(), &[10, 16]);
    }

    #[test]
    fn visit_names_match_binding_names() {
        let (_, _, model) = tiny_setup(8);
        let mut visited = Vec::new();
        model.visit(&mut |name, _| visited.push(name.to_string()));
        let mut tape = Tape::new();
        let mut binding = Binding::trainable();
        model.bind(&mut tape, &mut binding);
        assert_eq!(binding.names(), visited);
    }

    #[test]
    fn masked_eval_uses_identical_masks_for_both_predictors() {
        let (_, prep, model) = tiny_setup(9);
        let idx: Vec<usize> = (16..24).collect();
        let a = model.masked_eval(&prep, &idx, &mut SeededRng::new(5)).unwrap();
        let b = model.masked_eval(&prep, &idx, &mut SeededRng::new(5)).unwrap();
        assert_eq!(a.model_mse, b.model_mse);
        assert_eq!(a.baseline_mse, b.baseline_mse);
        assert!(a.model_mse > 0.0 && a.baseline_mse > 0.0);
    }
}
