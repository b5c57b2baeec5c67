//! Dynamic reverse-mode autodiff over matrices.
//!
//! A [`Tape`] records every operation as it executes (define-by-run). All tape
//! tensors are rank-2 `[rows, cols]`; scalars are `[1, 1]` and vectors are
//! single-row matrices. [`Tape::backward`] walks the recorded graph in reverse
//! and returns per-node gradients without mutating the tape, so calling it
//! twice yields identical results.
//!
//! Attention is a single primitive that stores only its output; the backward
//! pass recomputes the per-head score matrices on the fly, which keeps stored
//! state per call at O(n·d) instead of O(heads·n²).

use crate::ops;
use crate::tensor::Tensor;
use crate::TensorError;

/// Handle to a node on a [`Tape`]. Cheap to copy; valid only for the tape that
/// created it.
#[derive(Debug, Clone, Copy)]
pub struct Tracked {
    id: usize,
    pub rows: usize,
    pub cols: usize,
}

impl Tracked {
    pub fn len(&self) -> usize {
        self.rows * self.cols
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Additive attention mask: `0.0` where attending is allowed, a large negative
/// where it is not. Shared across heads.
pub const MASK_BLOCKED: f64 = -1.0e30;

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul { a: usize, b: usize },
    Add { a: usize, b: usize },
    AddRowBroadcast { a: usize, bias: usize },
    Sub { a: usize, b: usize },
    MulElem { a: usize, b: usize },
    Scale { a: usize, factor: f64 },
    ScaleRows { a: usize, factors: Vec<f64> },
    SumAll { a: usize },
    MeanAll { a: usize },
    MeanRows { a: usize },
    Softmax { a: usize },
    LayerNorm { a: usize, gamma: usize, beta: usize },
    Gelu { a: usize },
    Relu { a: usize },
    Abs { a: usize },
    GatherRows { table: usize, indices: Vec<usize> },
    ConcatRows { a: usize, b: usize },
    SliceRows { a: usize, start: usize },
    SliceCols { a: usize, start: usize },
    Reshape { a: usize },
    Attention { q: usize, k: usize, v: usize, heads: usize, mask: Option<Vec<f64>> },
    CrossEntropyLogits { logits: usize, targets: Vec<usize> },
}

fn op_name(op: &Op) -> &'static str {
    match op {
        Op::Leaf => "leaf",
        Op::MatMul { .. } => "matmul",
        Op::Add { .. } => "add",
        Op::AddRowBroadcast { .. } => "add_row_broadcast",
        Op::Sub { .. } => "sub",
        Op::MulElem { .. } => "mul_elem",
        Op::Scale { .. } => "scale",
        Op::ScaleRows { .. } => "scale_rows",
        Op::SumAll { .. } => "sum_all",
        Op::MeanAll { .. } => "mean_all",
        Op::MeanRows { .. } => "mean_rows",
        Op::Softmax { .. } => "softmax",
        Op::LayerNorm { .. } => "layer_norm",
        Op::Gelu { .. } => "gelu",
        Op::Relu { .. } => "relu",
        Op::Abs { .. } => "abs",
        Op::GatherRows { .. } => "gather_rows",
        Op::ConcatRows { .. } => "concat_rows",
        Op::SliceRows { .. } => "slice_rows",
        Op::SliceCols { .. } => "slice_cols",
        Op::Reshape { .. } => "reshape",
        Op::Attention { .. } => "attention",
        Op::CrossEntropyLogits { .. } => "cross_entropy_logits",
    }
}

struct Node {
    rows: usize,
    cols: usize,
    values: Vec<f64>,
    op: Op,
}

const LAYER_NORM_EPS: f64 = 1e-5;

/// Per-node gradients produced by [`Tape::backward`].
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    /// Gradient of the root with respect to `t`, or `None` if the root does
    /// not depend on `t`.
    pub fn wrt(&self, t: Tracked) -> Option<&[f64]> {
        self.grads[t.id].as_deref()
    }
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, rows: usize, cols: usize, values: Vec<f64>, op: Op) -> Tracked {
        debug_assert_eq!(values.len(), rows * cols);
        let id = self.nodes.len();
        self.nodes.push(Node { rows, cols, values, op });
        Tracked { id, rows, cols }
    }

    pub fn values(&self, t: Tracked) -> &[f64] {
        &self.nodes[t.id].values
    }

    pub fn scalar_value(&self, t: Tracked) -> f64 {
        assert_eq!(t.len(), 1, "scalar_value on a non-scalar node");
        self.nodes[t.id].values[0]
    }

    /// Copy a node's values back into a host tensor.
    pub fn to_tensor(&self, t: Tracked) -> Tensor {
        Tensor::matrix(t.rows, t.cols, self.values(t).to_vec())
    }

    pub fn check_finite(&self, t: Tracked) -> Result<(), TensorError> {
        if self.values(t).iter().all(|v| v.is_finite()) {
            Ok(())
        } else {
            Err(TensorError::NonFinite {
                context: format!("output of {}", op_name(&self.nodes[t.id].op)),
            })
        }
    }

    // ---- leaves ------------------------------------------------------------

    /// Record a host tensor as a graph leaf. Rank-1 tensors enter as a single
    /// row; rank-2 keep their shape.
    pub fn leaf(&mut self, t: &Tensor) -> Tracked {
        let (rows, cols) = match t.shape() {
            [n] => (1, *n),
            [r, c] => (*r, *c),
            other => panic!("tape leaves must be rank 1 or 2, got {other:?}"),
        };
        self.push(rows, cols, t.values().to_vec(), Op::Leaf)
    }

    pub fn leaf_matrix(&mut self, rows: usize, cols: usize, values: Vec<f64>) -> Tracked {
        self.push(rows, cols, values, Op::Leaf)
    }

    pub fn scalar(&mut self, value: f64) -> Tracked {
        self.push(1, 1, vec![value], Op::Leaf)
    }

    // ---- arithmetic --------------------------------------------------------

    pub fn matmul(&mut self, a: Tracked, b: Tracked) -> Tracked {
        assert_eq!(a.cols, b.rows, "matmul inner dims: {}x{} . {}x{}", a.rows, a.cols, b.rows, b.cols);
        let values = ops::matmul(self.values(a), self.values(b), a.rows, a.cols, b.cols);
        self.push(a.rows, b.cols, values, Op::MatMul { a: a.id, b: b.id })
    }

    pub fn add(&mut self, a: Tracked, b: Tracked) -> Tracked {
        assert_eq!((a.rows, a.cols), (b.rows, b.cols), "add shape mismatch");
        let values = self
            .values(a)
            .iter()
            .zip(self.values(b))
            .map(|(&x, &y)| x + y)
            .collect();
        self.push(a.rows, a.cols, values, Op::Add { a: a.id, b: b.id })
    }

    /// `a + bias` with `bias` a single row broadcast over every row of `a`.
    pub fn add_row_broadcast(&mut self, a: Tracked, bias: Tracked) -> Tracked {
        assert_eq!(bias.rows, 1, "bias must be a single row");
        assert_eq!(a.cols, bias.cols, "bias width mismatch");
        let bv = self.values(bias).to_vec();
        let mut values = self.values(a).to_vec();
        for row in values.chunks_mut(a.cols) {
            for (v, &b) in row.iter_mut().zip(&bv) {
                *v += b;
            }
        }
        self.push(a.rows, a.cols, values, Op::AddRowBroadcast { a: a.id, bias: bias.id })
    }

    pub fn sub(&mut self, a: Tracked, b: Tracked) -> Tracked {
        assert_eq!((a.rows, a.cols), (b.rows, b.cols), "sub shape mismatch");
        let values = self
            .values(a)
            .iter()
            .zip(self.values(b))
            .map(|(&x, &y)| x - y)
            .collect();
        self.push(a.rows, a.cols, values, Op::Sub { a: a.id, b: b.id })
    }

    pub fn mul_elem(&mut self, a: Tracked, b: Tracked) -> Tracked {
        assert_eq!((a.rows, a.cols), (b.rows, b.cols), "mul_elem shape mismatch");
        let values = self
            .values(a)
            .iter()
            .zip(self.values(b))
            .map(|(&x, &y)| x * y)
            .collect();
        self.push(a.rows, a.cols, values, Op::MulElem { a: a.id, b: b.id })
    }

    pub fn scale(&mut self, a: Tracked, factor: f64) -> Tracked {
        let values = self.values(a).iter().map(|&x| x * factor).collect();
        self.push(a.rows, a.cols, values, Op::Scale { a: a.id, factor })
    }

    /// Multiply row `i` of `a` by the constant `factors[i]`. The factors are
    /// data, not graph nodes; gradients flow only to `a`.
    pub fn scale_rows(&mut self, a: Tracked, factors: &[f64]) -> Tracked {
        assert_eq!(factors.len(), a.rows, "one factor per row");
        let mut values = self.values(a).to_vec();
        for (row, &f) in values.chunks_mut(a.cols).zip(factors) {
            for v in row.iter_mut() {
                *v *= f;
            }
        }
        self.push(a.rows, a.cols, values, Op::ScaleRows { a: a.id, factors: factors.to_vec() })
    }

    // ---- reductions --------------------------------------------------------

    pub fn sum_all(&mut self, a: Tracked) -> Tracked {
        let s: f64 = self.values(a).iter().sum();
        self.push(1, 1, vec![s], Op::SumAll { a: a.id })
    }

    pub fn mean_all(&mut self, a: Tracked) -> Tracked {
        let s: f64 = self.values(a).iter().sum();
        let n = a.len() as f64;
        self.push(1, 1, vec![s / n], Op::MeanAll { a: a.id })
    }

    /// Column means: `[r, c] -> [1, c]`.
    pub fn mean_rows(&mut self, a: Tracked) -> Tracked {
        let mut out = vec![0.0; a.cols];
        for row in self.values(a).chunks(a.cols) {
            for (o, &v) in out.iter_mut().zip(row) {
                *o += v;
            }
        }
        let inv = 1.0 / a.rows as f64;
        for o in out.iter_mut() {
            *o *= inv;
        }
        self.push(1, a.cols, out, Op::MeanRows { a: a.id })
    }

    // ---- nonlinearities ----------------------------------------------------

    pub fn softmax(&mut self, a: Tracked) -> Tracked {
        let mut values = self.values(a).to_vec();
        ops::softmax_rows(&mut values, a.rows, a.cols);
        self.push(a.rows, a.cols, values, Op::Softmax { a: a.id })
    }

    /// Row-wise layer normalization with learned scale and shift (single-row
    /// `gamma` and `beta`).
    pub fn layer_norm(&mut self, a: Tracked, gamma: Tracked, beta: Tracked) -> Tracked {
        assert_eq!(gamma.rows, 1, "gamma must be a single row");
        assert_eq!(beta.rows, 1, "beta must be a single row");
        assert_eq!(gamma.cols, a.cols, "gamma width mismatch");
        assert_eq!(beta.cols, a.cols, "beta width mismatch");
        let g = self.values(gamma).to_vec();
        let b = self.values(beta).to_vec();
        let mut values = self.values(a).to_vec();
        for row in values.chunks_mut(a.cols) {
            let (mu, var) = mean_var(row);
            let inv = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            for (j, v) in row.iter_mut().enumerate() {
                *v = (*v - mu) * inv * g[j] + b[j];
            }
        }
        self.push(a.rows, a.cols, values, Op::LayerNorm { a: a.id, gamma: gamma.id, beta: beta.id })
    }

    pub fn gelu(&mut self, a: Tracked) -> Tracked {
        let values = self.values(a).iter().map(|&x| ops::gelu(x)).collect();
        self.push(a.rows, a.cols, values, Op::Gelu { a: a.id })
    }

    pub fn relu(&mut self, a: Tracked) -> Tracked {
        let values = self.values(a).iter().map(|&x| x.max(0.0)).collect();
        self.push(a.rows, a.cols, values, Op::Relu { a: a.id })
    }

    pub fn abs(&mut self, a: Tracked) -> Tracked {
        let values = self.values(a).iter().map(|&x| x.abs()).collect();
        self.push(a.rows, a.cols, values, Op::Abs { a: a.id })
    }

    // ---- structure ---------------------------------------------------------

    /// Select rows of `table` by index (embedding lookup). Gradients
    /// scatter-add back into the table; repeated indices accumulate.
    pub fn gather_rows(&mut self, table: Tracked, indices: &[usize]) -> Tracked {
        let c = table.cols;
        let tv = self.values(table);
        let mut values = Vec::with_capacity(indices.len() * c);
        for &ix in indices {
            assert!(ix < table.rows, "gather index {ix} out of {} rows", table.rows);
            values.extend_from_slice(&tv[ix * c..(ix + 1) * c]);
        }
        self.push(indices.len(), c, values, Op::GatherRows { table: table.id, indices: indices.to_vec() })
    }

    pub fn concat_rows(&mut self, a: Tracked, b: Tracked) -> Tracked {
        assert_eq!(a.cols, b.cols, "concat_rows width mismatch");
        let mut values = self.values(a).to_vec();
        values.extend_from_slice(self.values(b));
        self.push(a.rows + b.rows, a.cols, values, Op::ConcatRows { a: a.id, b: b.id })
    }

    pub fn slice_rows(&mut self, a: Tracked, start: usize, len: usize) -> Tracked {
        assert!(start + len <= a.rows, "slice_rows {start}+{len} out of {} rows", a.rows);
        let c = a.cols;
        let values = self.values(a)[start * c..(start + len) * c].to_vec();
        self.push(len, c, values, Op::SliceRows { a: a.id, start })
    }

    pub fn slice_cols(&mut self, a: Tracked, start: usize, width: usize) -> Tracked {
        assert!(start + width <= a.cols, "slice_cols {start}+{width} out of {} cols", a.cols);
        let av = self.values(a);
        let mut values = Vec::with_capacity(a.rows * width);
        for r in 0..a.rows {
            values.extend_from_slice(&av[r * a.cols + start..r * a.cols + start + width]);
        }
        self.push(a.rows, width, values, Op::SliceCols { a: a.id, start })
    }

    pub fn reshape(&mut self, a: Tracked, rows: usize, cols: usize) -> Tracked {
        assert_eq!(rows * cols, a.len(), "reshape must preserve element count");
        let values = self.values(a).to_vec();
        self.push(rows, cols, values, Op::Reshape { a: a.id })
    }

    // ---- attention ---------------------------------------------------------

    /// Multi-head scaled dot-product attention over `[n, d]` inputs.
    ///
    /// `mask`, when present, is an `[n, n]` additive matrix applied to every
    /// head's scores (use [`MASK_BLOCKED`] to forbid a pair). Only the output
    /// is stored; backward recomputes scores per head.
    pub fn attention(&mut self, q: Tracked, k: Tracked, v: Tracked, heads: usize, mask: Option<&[f64]>) -> Tracked {
        let (n, d) = (q.rows, q.cols);
        assert_eq!((k.rows, k.cols), (n, d), "attention k shape");
        assert_eq!((v.rows, v.cols), (n, d), "attention v shape");
        assert!(heads > 0 && d % heads == 0, "head count {heads} must divide width {d}");
        if let Some(m) = mask {
            assert_eq!(m.len(), n * n, "mask must be [n, n]");
        }
        let dh = d / heads;
        let inv_sqrt = 1.0 / (dh as f64).sqrt();
        let mut out = vec![0.0; n * d];
        for h in 0..heads {
            let qh = gather_cols(self.values(q), n, d, h * dh, dh);
            let kh = gather_cols(self.values(k), n, d, h * dh, dh);
            let vh = gather_cols(self.values(v), n, d, h * dh, dh);
            let probs = head_probs(&qh, &kh, n, dh, inv_sqrt, mask);
            let oh = ops::matmul(&probs, &vh, n, n, dh);
            scatter_cols_add(&mut out, n, d, h * dh, dh, &oh, 1.0);
        }
        self.push(
            n,
            d,
            out,
            Op::Attention { q: q.id, k: k.id, v: v.id, heads, mask: mask.map(|m| m.to_vec()) },
        )
    }

    // ---- losses ------------------------------------------------------------

    /// Mean cross-entropy of row-wise logits against integer targets.
    /// Numerically stable (max-subtracted log-sum-exp).
    pub fn cross_entropy_logits(&mut self, logits: Tracked, targets: &[usize]) -> Tracked {
        assert_eq!(targets.len(), logits.rows, "one target per row");
        let c = logits.cols;
        let mut total = 0.0;
        for (row, &t) in self.values(logits).chunks(c).zip(targets) {
            assert!(t < c, "target {t} out of {c} classes");
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|&z| (z - max).exp()).sum::<f64>().ln();
            total += lse - row[t];
        }
        let mean = total / targets.len() as f64;
        self.push(1, 1, vec![mean], Op::CrossEntropyLogits { logits: logits.id, targets: targets.to_vec() })
    }

    // ---- composites --------------------------------------------------------

    /// `x · w + b` with a broadcast row bias.
    pub fn linear(&mut self, x: Tracked, w: Tracked, b: Tracked) -> Tracked {
        let xw = self.matmul(x, w);
        self.add_row_broadcast(xw, b)
    }

    // ---- backward ----------------------------------------------------------

    /// Reverse pass from a scalar root. Does not mutate the tape; repeated
    /// calls return identical gradients.
    pub fn backward(&self, root: Tracked) -> Gradients {
        assert_eq!(root.len(), 1, "backward root must be a scalar");
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[root.id] = Some(vec![1.0]);

        for id in (0..=root.id).rev() {
            if grads[id].is_none() {
                continue;
            }
            let node = &self.nodes[id];
            // Inputs always precede outputs on the tape, so the split is safe.
            let (lower, upper) = grads.split_at_mut(id);
            let g = upper[0].as_ref().expect("checked above").clone();
            self.accumulate(node, &g, lower);
        }
        Gradients { grads }
    }

    fn accumulate(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let val = |id: usize| -> &[f64] { &self.nodes[id].values };
        let shape = |id: usize| -> (usize, usize) { (self.nodes[id].rows, self.nodes[id].cols) };
        match &node.op {
            Op::Leaf => {}
            Op::MatMul { a, b } => {
                let (m, k) = shape(*a);
                let n = shape(*b).1;
                let da = ops::matmul_nt(g, val(*b), m, n, k);
                ops::axpy(1.0, &da, slot(grads, *a, m * k));
                let db = ops::matmul_tn(val(*a), g, m, k, n);
                ops::axpy(1.0, &db, slot(grads, *b, k * n));
            }
            Op::Add { a, b } => {
                ops::axpy(1.0, g, slot(grads, *a, g.len()));
                ops::axpy(1.0, g, slot(grads, *b, g.len()));
            }
            Op::AddRowBroadcast { a, bias } => {
                ops::axpy(1.0, g, slot(grads, *a, g.len()));
                let c = node.cols;
                let db = slot(grads, *bias, c);
                for row in g.chunks(c) {
                    for (d, &gv) in db.iter_mut().zip(row) {
                        *d += gv;
                    }
                }
            }
            Op::Sub { a, b } => {
                ops::axpy(1.0, g, slot(grads, *a, g.len()));
                ops::axpy(-1.0, g, slot(grads, *b, g.len()));
            }
            Op::MulElem { a, b } => {
                {
                    let da = slot(grads, *a, g.len());
                    for ((d, &gv), &bv) in da.iter_mut().zip(g).zip(val(*b)) {
                        *d += gv * bv;
                    }
                }
                let db = slot(grads, *b, g.len());
                for ((d, &gv), &av) in db.iter_mut().zip(g).zip(val(*a)) {
                    *d += gv * av;
                }
            }
            Op::Scale { a, factor } => {
                ops::axpy(*factor, g, slot(grads, *a, g.len()));
            }
            Op::ScaleRows { a, factors } => {
                let c = node.cols;
                let da = slot(grads, *a, g.len());
                for (r, &f) in factors.iter().enumerate() {
                    ops::axpy(f, &g[r * c..(r + 1) * c], &mut da[r * c..(r + 1) * c]);
                }
            }
            Op::SumAll { a } => {
                let (r, c) = shape(*a);
                let da = slot(grads, *a, r * c);
                for d in da.iter_mut() {
                    *d += g[0];
                }
            }
            Op::MeanAll { a } => {
                let (r, c) = shape(*a);
                let gv = g[0] / (r * c) as f64;
                let da = slot(grads, *a, r * c);
                for d in da.iter_mut() {
                    *d += gv;
                }
            }
            Op::MeanRows { a } => {
                let (r, c) = shape(*a);
                let inv = 1.0 / r as f64;
                let da = slot(grads, *a, r * c);
                for row in da.chunks_mut(c) {
                    for (d, &gv) in row.iter_mut().zip(g) {
                        *d += gv * inv;
                    }
                }
            }
            Op::Softmax { a } => {
                let c = node.cols;
                let y = &node.values;
                let da = slot(grads, *a, g.len());
                for r in 0..node.rows {
                    let yr = &y[r * c..(r + 1) * c];
                    let gr = &g[r * c..(r + 1) * c];
                    let s = ops::dot(gr, yr);
                    let dr = &mut da[r * c..(r + 1) * c];
                    for ((d, &yv), &gv) in dr.iter_mut().zip(yr).zip(gr) {
                        *d += yv * (gv - s);
                    }
                }
            }
            Op::LayerNorm { a, gamma, beta } => {
                let (r, c) = shape(*a);
                let x = val(*a);
                let gam = val(*gamma);
                let mut dgam = vec![0.0; c];
                let mut dbet = vec![0.0; c];
                {
                    let da = slot(grads, *a, r * c);
                    for row in 0..r {
                        let xr = &x[row * c..(row + 1) * c];
                        let gr = &g[row * c..(row + 1) * c];
                        let (mu, var) = mean_var(xr);
                        let inv = 1.0 / (var + LAYER_NORM_EPS).sqrt();
                        let mut m1 = 0.0;
                        let mut m2 = 0.0;
                        for j in 0..c {
                            let xh = (xr[j] - mu) * inv;
                            let h = gr[j] * gam[j];
                            m1 += h;
                            m2 += h * xh;
                            dgam[j] += gr[j] * xh;
                            dbet[j] += gr[j];
                        }
                        m1 /= c as f64;
                        m2 /= c as f64;
                        let dr = &mut da[row * c..(row + 1) * c];
                        for j in 0..c {
                            let xh = (xr[j] - mu) * inv;
                            dr[j] += (gr[j] * gam[j] - m1 - xh * m2) * inv;
                        }
                    }
                }
                ops::axpy(1.0, &dgam, slot(grads, *gamma, c));
                ops::axpy(1.0, &dbet, slot(grads, *beta, c));
            }
            Op::Gelu { a } => {
                let x = val(*a);
                let da = slot(grads, *a, g.len());
                for ((d, &gv), &xv) in da.iter_mut().zip(g).zip(x) {
                    *d += gv * ops::gelu_grad(xv);
                }
            }
            Op::Relu { a } => {
                let x = val(*a);
                let da = slot(grads, *a, g.len());
                for ((d, &gv), &xv) in da.iter_mut().zip(g).zip(x) {
                    if xv > 0.0 {
                        *d += gv;
                    }
                }
            }
            Op::Abs { a } => {
                let x = val(*a);
                let da = slot(grads, *a, g.len());
                for ((d, &gv), &xv) in da.iter_mut().zip(g).zip(x) {
                    *d += gv * if xv > 0.0 { 1.0 } else if xv < 0.0 { -1.0 } else { 0.0 };
                }
            }
            Op::GatherRows { table, indices } => {
                let (tr, c) = shape(*table);
                let dt = slot(grads, *table, tr * c);
                for (r, &ix) in indices.iter().enumerate() {
                    ops::axpy(1.0, &g[r * c..(r + 1) * c], &mut dt[ix * c..(ix + 1) * c]);
                }
            }
            Op::ConcatRows { a, b } => {
                let alen = {
                    let (r, c) = shape(*a);
                    r * c
                };
                ops::axpy(1.0, &g[..alen], slot(grads, *a, alen));
                let blen = g.len() - alen;
                ops::axpy(1.0, &g[alen..], slot(grads, *b, blen));
            }
            Op::SliceRows { a, start } => {
                let (r, c) = shape(*a);
                let da = slot(grads, *a, r * c);
                ops::axpy(1.0, g, &mut da[start * c..start * c + g.len()]);
            }
            Op::SliceCols { a, start } => {
                let (r, ca) = shape(*a);
                let w = node.cols;
                let da = slot(grads, *a, r * ca);
                for row in 0..r {
                    ops::axpy(1.0, &g[row * w..(row + 1) * w], &mut da[row * ca + start..row * ca + start + w]);
                }
            }
            Op::Reshape { a } => {
                ops::axpy(1.0, g, slot(grads, *a, g.len()));
            }
            Op::Attention { q, k, v, heads, mask } => {
                let (n, d) = shape(*q);
                let heads = *heads;
                let dh = d / heads;
                let inv_sqrt = 1.0 / (dh as f64).sqrt();
                let mut dq = vec![0.0; n * d];
                let mut dk = vec![0.0; n * d];
                let mut dv = vec![0.0; n * d];
                for h in 0..heads {
                    let qh = gather_cols(val(*q), n, d, h * dh, dh);
                    let kh = gather_cols(val(*k), n, d, h * dh, dh);
                    let vh = gather_cols(val(*v), n, d, h * dh, dh);
                    let probs = head_probs(&qh, &kh, n, dh, inv_sqrt, mask.as_deref());
                    let goh = gather_cols(g, n, d, h * dh, dh);

                    let dvh = ops::matmul_tn(&probs, &goh, n, n, dh);
                    let dp = ops::matmul_nt(&goh, &vh, n, dh, n);
                    // Softmax backward on each score row.
                    let mut ds = vec![0.0; n * n];
                    for r in 0..n {
                        let pr = &probs[r * n..(r + 1) * n];
                        let dpr = &dp[r * n..(r + 1) * n];
                        let s = ops::dot(pr, dpr);
                        let dsr = &mut ds[r * n..(r + 1) * n];
                        for j in 0..n {
                            dsr[j] = pr[j] * (dpr[j] - s);
                        }
                    }
                    let dqh = ops::matmul(&ds, &kh, n, n, dh);
                    let dkh = ops::matmul_tn(&ds, &qh, n, n, dh);
                    scatter_cols_add(&mut dq, n, d, h * dh, dh, &dqh, inv_sqrt);
                    scatter_cols_add(&mut dk, n, d, h * dh, dh, &dkh, inv_sqrt);
                    scatter_cols_add(&mut dv, n, d, h * dh, dh, &dvh, 1.0);
                }
                ops::axpy(1.0, &dq, slot(grads, *q, n * d));
                ops::axpy(1.0, &dk, slot(grads, *k, n * d));
                ops::axpy(1.0, &dv, slot(grads, *v, n * d));
            }
            Op::CrossEntropyLogits { logits, targets } => {
                let (r, c) = shape(*logits);
                let z = val(*logits);
                let scale = g[0] / r as f64;
                let dz = slot(grads, *logits, r * c);
                let mut p = z.to_vec();
                ops::softmax_rows(&mut p, r, c);
                for (row, &t) in (0..r).zip(targets) {
                    let pr = &p[row * c..(row + 1) * c];
                    let dr = &mut dz[row * c..(row + 1) * c];
                    for j in 0..c {
                        let ind = if j == t { 1.0 } else { 0.0 };
                        dr[j] += scale * (pr[j] - ind);
                    }
                }
            }
        }
    }
}

fn slot<'g>(grads: &'g mut [Option<Vec<f64>>], id: usize, len: usize) -> &'g mut Vec<f64> {
    grads[id].get_or_insert_with(|| vec![0.0; len])
}

fn mean_var(row: &[f64]) -> (f64, f64) {
    let n = row.len() as f64;
    let mu = row.iter().sum::<f64>() / n;
    let var = row.iter().map(|&v| (v - mu) * (v - mu)).sum::<f64>() / n;
    (mu, var)
}

fn gather_cols(x: &[f64], rows: usize, cols: usize, start: usize, width: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(rows * width);
    for r in 0..rows {
        out.extend_from_slice(&x[r * cols + start..r * cols + start + width]);
    }
    out
}

fn scatter_cols_add(dst: &mut [f64], rows: usize, cols: usize, start: usize, width: usize, src: &[f64], alpha: f64) {
    for r in 0..rows {
        ops::axpy(alpha, &src[r * width..(r + 1) * width], &mut dst[r * cols + start..r * cols + start + width]);
    }
}

/// Softmax attention probabilities for one head: rows of
/// `softmax(Q·Kᵀ/√dh + mask)`.
fn head_probs(qh: &[f64], kh: &[f64], n: usize, dh: usize, inv_sqrt: f64, mask: Option<&[f64]>) -> Vec<f64> {
    let mut scores = ops::matmul_nt(qh, kh, n, dh, n);
    for s in scores.iter_mut() {
        *s *= inv_sqrt;
    }
    if let Some(m) = mask {
        for (s, &mv) in scores.iter_mut().zip(m) {
            *s += mv;
        }
    }
    ops::softmax_rows(&mut scores, n, n);
    scores
}
