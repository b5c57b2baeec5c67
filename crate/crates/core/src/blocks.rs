//! Pre-norm transformer block shared by the in-context engine and the
//! multimodal encoder/fusion stacks.

use pdx_tensor::{Binding, SeededRng, Tape, Tensor, Tracked};

const INIT_STD: f64 = 0.02;

/// One pre-norm block: `x + attn(ln(x))` then `x + ff(ln(x))`.
#[derive(Debug, Clone)]
pub struct Block {
    pub heads: usize,
    ln1_gamma: Tensor,
    ln1_beta: Tensor,
    wq: Tensor,
    bq: Tensor,
    wk: Tensor,
    bk: Tensor,
    wv: Tensor,
    bv: Tensor,
    wo: Tensor,
    bo: Tensor,
    ln2_gamma: Tensor,
    ln2_beta: Tensor,
    ff_w1: Tensor,
    ff_b1: Tensor,
    ff_w2: Tensor,
    ff_b2: Tensor,
}

/// Tape handles for one block's parameters, produced by [`Block::bind`].
pub struct BoundBlock {
    heads: usize,
    ln1_gamma: Tracked,
    ln1_beta: Tracked,
    wq: Tracked,
    bq: Tracked,
    wk: Tracked,
    bk: Tracked,
    wv: Tracked,
    bv: Tracked,
    wo: Tracked,
    bo: Tracked,
    ln2_gamma: Tracked,
    ln2_beta: Tracked,
    ff_w1: Tracked,
    ff_b1: Tracked,
    ff_w2: Tracked,
    ff_b2: Tracked,
}

impl Block {
    pub fn new(d_model: usize, ff_width: usize, heads: usize, rng: &mut SeededRng) -> Self {
        assert!(d_model % heads == 0, "heads must divide model width");
        Self {
            heads,
            ln1_gamma: Tensor::full(vec![1, d_model], 1.0),
            ln1_beta: Tensor::zeros(vec![1, d_model]),
            wq: Tensor::randn(vec![d_model, d_model], INIT_STD, rng),
            bq: Tensor::zeros(vec![1, d_model]),
            wk: Tensor::randn(vec![d_model, d_model], INIT_STD, rng),
            bk: Tensor::zeros(vec![1, d_model]),
            wv: Tensor::randn(vec![d_model, d_model], INIT_STD, rng),
            bv: Tensor::zeros(vec![1, d_model]),
            wo: Tensor::randn(vec![d_model, d_model], INIT_STD, rng),
            bo: Tensor::zeros(vec![1, d_model]),
            ln2_gamma: Tensor::full(vec![1, d_model], 1.0),
            ln2_beta: Tensor::zeros(vec![1, d_model]),
            ff_w1: Tensor::randn(vec![d_model, ff_width], INIT_STD, rng),
            ff_b1: Tensor::zeros(vec![1, ff_width]),
            ff_w2: Tensor::randn(vec![ff_width, d_model], INIT_STD, rng),
            ff_b2: Tensor::zeros(vec![1, d_model]),
        }
    }

    fn fields(&self) -> [(&'static str, &Tensor); 16] {
        [
            ("ln1.gamma", &self.ln1_gamma),
            ("ln1.beta", &self.ln1_beta),
            ("attn.wq", &self.wq),
            ("attn.bq", &self.bq),
            ("attn.wk", &self.wk),
            ("attn.bk", &self.bk),
            ("attn.wv", &self.wv),
            ("attn.bv", &self.bv),
            ("attn.wo", &self.wo),
            ("attn.bo", &self.bo),
            ("ln2.gamma", &self.ln2_gamma),
            ("ln2.beta", &self.ln2_beta),
            ("ff.w1", &self.ff_w1),
            ("ff.b1", &self.ff_b1),
            ("ff.w2", &self.ff_w2),
            ("ff.b2", &self.ff_b2),
        ]
    }

    fn fields_mut(&mut self) -> [(&'static str, &mut Tensor); 16] {
        [
            ("ln1.gamma", &mut self.ln1_gamma),
            ("ln1.beta", &mut self.ln1_beta),
            ("attn.wq", &mut self.wq),
            ("attn.bq", &mut self.bq),
            ("attn.wk", &mut self.wk),
            ("attn.bk", &mut self.bk),
            ("attn.wv", &mut self.wv),
            ("attn.bv", &mut self.bv),
            ("attn.wo", &mut self.wo),
            ("attn.bo", &mut self.bo),
            ("ln2.gamma", &mut self.ln2_gamma),
            ("ln2.beta", &mut self.ln2_beta),
            ("ff.w1", &mut self.ff_w1),
            ("ff.b1", &mut self.ff_b1),
            ("ff.w2", &mut self.ff_w2),
            ("ff.b2", &mut self.ff_b2),
        ]
    }

    pub fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor)) {
        for (name, t) in self.fields() {
            f(&format!("{prefix}.{name}"), t);
        }
    }

    pub fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor)) {
        for (name, t) in self.fields_mut() {
            f(&format!("{prefix}.{name}"), t);
        }
    }

    pub fn bind(&self, tape: &mut Tape, binding: &mut Binding, prefix: &str) -> BoundBlock {
        let mut leaf = |name: &str, t: &Tensor| binding.leaf(tape, format!("{prefix}.{name}"), t);
        BoundBlock {
            heads: self.heads,
            ln1_gamma: leaf("ln1.gamma", &self.ln1_gamma),
            ln1_beta: leaf("ln1.beta", &self.ln1_beta),
            wq: leaf("attn.wq", &self.wq),
            bq: leaf("attn.bq", &self.bq),
            wk: leaf("attn.wk", &self.wk),
            bk: leaf("attn.bk", &self.bk),
            wv: leaf("attn.wv", &self.wv),
            bv: leaf("attn.bv", &self.bv),
            wo: leaf("attn.wo", &self.wo),
            bo: leaf("attn.bo", &self.bo),
            ln2_gamma: leaf("ln2.gamma", &self.ln2_gamma),
            ln2_beta: leaf("ln2.beta", &self.ln2_beta),
            ff_w1: leaf("ff.w1", &self.ff_w1),
            ff_b1: leaf("ff.b1", &self.ff_b1),
            ff_w2: leaf("ff.w2", &self.ff_w2),
            ff_b2: leaf("ff.b2", &self.ff_b2),
        }
    }
}

impl BoundBlock {
    pub fn forward(&self, tape: &mut Tape, x: Tracked, mask: Option<&[f64]>) -> Tracked {
        let normed = tape.layer_norm(x, self.ln1_gamma, self.ln1_beta);
        let q = tape.linear(normed, self.wq, self.bq);
        let k = tape.linear(normed, self.wk, self.bk);
        let v = tape.linear(normed, self.wv, self.bv);
        let att = tape.attention(q, k, v, self.heads, mask);
        let proj = tape.linear(att, self.wo, self.bo);
        let x = tape.add(x, proj);

        let normed = tape.layer_norm(x, self.ln2_gamma, self.ln2_beta);
        let h = tape.linear(normed, self.ff_w1, self.ff_b1);
        let h = tape.gelu(h);
        let h = tape.linear(h, self.ff_w2, self.ff_b2);
        tape.add(x, h)
    }
}

/// A stack of blocks sharing one name prefix (`{prefix}.{i}.…`).
#[derive(Debug, Clone)]
pub struct BlockStack {
    blocks: Vec<Block>,
}

impl BlockStack {
    pub fn new(depth: usize, d_model: usize, ff_width: usize, heads: usize, rng: &mut SeededRng) -> Self {
        let blocks = (0..depth)
            .map(|i| Block::new(d_model, ff_width, heads, &mut rng.split(i as u64)))
            .collect();
        Self { blocks }
    }

    pub fn depth(&self) -> usize {
        self.blocks.len()
    }

    pub fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor)) {
        for (i, b) in self.blocks.iter().enumerate() {
            b.visit(&format!("{prefix}.{i}"), f);
        }
    }

    pub fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor)) {
        for (i, b) in self.blocks.iter_mut().enumerate() {
            b.visit_mut(&format!("{prefix}.{i}"), f);
        }
    }

    pub fn bind(&self, tape: &mut Tape, binding: &mut Binding, prefix: &str) -> Vec<BoundBlock> {
        self.blocks
            .iter()
            .enumerate()
            .map(|(i, b)| b.bind(tape, binding, &format!("{prefix}.{i}")))
            .collect()
    }

    /// Bind and run the whole stack.
    pub fn forward(
        &self,
        tape: &mut Tape,
        binding: &mut Binding,
        prefix: &str,
        mut x: Tracked,
        mask: Option<&[f64]>,
    ) -> Tracked {
        for bound in self.bind(tape, binding, prefix) {
            x = bound.forward(tape, x, mask);
        }
        x
    }
}
