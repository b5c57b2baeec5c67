//! Finite-difference gradient verification.
//!
//! Central differences with a configurable step, compared coordinate-wise
//! against analytic gradients via `|a - fd| / max(1, |a|)`. The module also
//! carries a registry that exercises every differentiable tape operation
//! end-to-end, used by the crate's own tests and by the top-level
//! verification suite.

use crate::rng::SeededRng;
use crate::tape::{Tape, Tracked, MASK_BLOCKED};
use crate::TensorError;

/// Step-size bounds outside which central differences are numerically
/// meaningless for f64 losses of order one.
pub const EPSILON_MIN: f64 = 1e-7;
pub const EPSILON_MAX: f64 = 1e-3;

#[derive(Debug, Clone, Copy)]
pub struct GradCheck {
    pub epsilon: f64,
    pub tolerance: f64,
}

impl Default for GradCheck {
    fn default() -> Self {
        Self { epsilon: 1e-5, tolerance: 1e-4 }
    }
}

impl GradCheck {
    pub fn validate(&self) -> Result<(), TensorError> {
        if !(EPSILON_MIN..=EPSILON_MAX).contains(&self.epsilon) {
            return Err(TensorError::BadEpsilon { epsilon: self.epsilon });
        }
        Ok(())
    }

    /// Compare analytic gradients against central differences of `f` at `x`.
    /// Returns the worst relative error; `Err` if it exceeds the tolerance.
    pub fn run(
        &self,
        x: &[f64],
        analytic: &[f64],
        mut f: impl FnMut(&[f64]) -> f64,
    ) -> Result<f64, TensorError> {
        self.validate()?;
        assert_eq!(x.len(), analytic.len(), "one analytic gradient per coordinate");
        let fd = central_difference(&mut f, x, self.epsilon);
        let (max_rel, coord) = worst_relative_error(analytic, &fd);
        if max_rel > self.tolerance {
            return Err(TensorError::GradCheckFailed {
                max_rel_err: max_rel,
                coord,
                tolerance: self.tolerance,
            });
        }
        Ok(max_rel)
    }
}

/// Central-difference gradient of a scalar function.
pub fn central_difference(f: &mut impl FnMut(&[f64]) -> f64, x: &[f64], epsilon: f64) -> Vec<f64> {
    let mut probe = x.to_vec();
    let mut out = Vec::with_capacity(x.len());
    for i in 0..x.len() {
        probe[i] = x[i] + epsilon;
        let plus = f(&probe);
        probe[i] = x[i] - epsilon;
        let minus = f(&probe);
        probe[i] = x[i];
        out.push((plus - minus) / (2.0 * epsilon));
    }
    out
}

/// Worst `|a - fd| / max(1, |a|)` over all coordinates, plus its index.
pub fn worst_relative_error(analytic: &[f64], fd: &[f64]) -> (f64, usize) {
    let mut worst = 0.0;
    let mut at = 0;
    for (i, (&a, &f)) in analytic.iter().zip(fd).enumerate() {
        let rel = (a - f).abs() / f64::max(1.0, a.abs());
        if rel > worst {
            worst = rel;
            at = i;
        }
    }
    (worst, at)
}

// ---------------------------------------------------------------------------
// Registry: one scalar-loss probe per differentiable operation.
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct OpGradReport {
    pub name: &'static str,
    /// Worst relative error across all checked points and coordinates.
    pub max_rel_err: f64,
}

struct OpCase {
    name: &'static str,
    dim: usize,
    /// Keep inputs away from non-differentiable points (relu/abs at zero).
    kink_margin: f64,
    build: Box<dyn Fn(&mut Tape, &[f64]) -> (Tracked, Vec<Tracked>)>,
}

/// Reduce an arbitrary output node to a scalar through a fixed random
/// weighting, so the check exercises the full Jacobian rather than just its
/// row sums.
fn weighted_loss(tape: &mut Tape, out: Tracked, case_name: &str) -> Tracked {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in case_name.bytes() {
        h = (h ^ b as u64).wrapping_mul(0x1000_0000_01b3);
    }
    let mut rng = SeededRng::new(h);
    let weights: Vec<f64> = (0..out.len()).map(|_| rng.normal()).collect();
    let w = tape.leaf_matrix(out.rows, out.cols, weights);
    let prod = tape.mul_elem(out, w);
    tape.sum_all(prod)
}

fn split2(x: &[f64], a: usize) -> (&[f64], &[f64]) {
    x.split_at(a)
}

fn cases() -> Vec<OpCase> {
    let mut cases: Vec<OpCase> = Vec::new();
    let mut push = |name: &'static str,
                    dim: usize,
                    kink_margin: f64,
                    build: Box<dyn Fn(&mut Tape, &[f64]) -> (Tracked, Vec<Tracked>)>| {
        cases.push(OpCase { name, dim, kink_margin, build });
    };

    push(
        "matmul",
        3 * 4 + 4 * 2,
        0.0,
        Box::new(|tape, x| {
            let (xa, xb) = split2(x, 12);
            let a = tape.leaf_matrix(3, 4, xa.to_vec());
            let b = tape.leaf_matrix(4, 2, xb.to_vec());
            let out = tape.matmul(a, b);
            (weighted_loss(tape, out, "matmul"), vec![a, b])
        }),
    );

    push(
        "add",
        24,
        0.0,
        Box::new(|tape, x| {
            let (xa, xb) = split2(x, 12);
            let a = tape.leaf_matrix(3, 4, xa.to_vec());
            let b = tape.leaf_matrix(3, 4, xb.to_vec());
            let out = tape.add(a, b);
            (weighted_loss(tape, out, "add"), vec![a, b])
        }),
    );

    push(
        "add_row_broadcast",
        16,
        0.0,
        Box::new(|tape, x| {
            let (xa, xb) = split2(x, 12);
            let a = tape.leaf_matrix(3, 4, xa.to_vec());
            let bias = tape.leaf_matrix(1, 4, xb.to_vec());
            let out = tape.add_row_broadcast(a, bias);
            (weighted_loss(tape, out, "add_row_broadcast"), vec![a, bias])
        }),
    );

    push(
        "sub",
        24,
        0.0,
        Box::new(|tape, x| {
            let (xa, xb) = split2(x, 12);
            let a = tape.leaf_matrix(3, 4, xa.to_vec());
            let b = tape.leaf_matrix(3, 4, xb.to_vec());
            let out = tape.sub(a, b);
            (weighted_loss(tape, out, "sub"), vec![a, b])
        }),
    );

    push(
        "mul_elem",
        24,
        0.0,
        Box::new(|tape, x| {
            let (xa, xb) = split2(x, 12);
            let a = tape.leaf_matrix(3, 4, xa.to_vec());
            let b = tape.leaf_matrix(3, 4, xb.to_vec());
            let out = tape.mul_elem(a, b);
            (weighted_loss(tape, out, "mul_elem"), vec![a, b])
        }),
    );

    push(
        "scale",
        12,
        0.0,
        Box::new(|tape, x| {
            let a = tape.leaf_matrix(3, 4, x.to_vec());
            let out = tape.scale(a, -1.7);
            (weighted_loss(tape, out, "scale"), vec![a])
        }),
    );

    push(
        "scale_rows",
        12,
        0.0,
        Box::new(|tape, x| {
            let a = tape.leaf_matrix(3, 4, x.to_vec());
            let out = tape.scale_rows(a, &[0.5, -1.25, 2.0]);
            (weighted_loss(tape, out, "scale_rows"), vec![a])
        }),
    );

    push(
        "sum_all",
        12,
        0.0,
        Box::new(|tape, x| {
            let a = tape.leaf_matrix(3, 4, x.to_vec());
            let out = tape.sum_all(a);
            (out, vec![a])
        }),
    );

    push(
        "mean_all",
        12,
        0.0,
        Box::new(|tape, x| {
            let a = tape.leaf_matrix(3, 4, x.to_vec());
            let out = tape.mean_all(a);
            (out, vec![a])
        }),
    );

    push(
        "mean_rows",
        12,
        0.0,
        Box::new(|tape, x| {
            let a = tape.leaf_matrix(3, 4, x.to_vec());
            let out = tape.mean_rows(a);
            (weighted_loss(tape, out, "mean_rows"), vec![a])
        }),
    );

    push(
        "softmax",
        12,
        0.0,
        Box::new(|tape, x| {
            let a = tape.leaf_matrix(3, 4, x.to_vec());
            let out = tape.softmax(a);
            (weighted_loss(tape, out, "softmax"), vec![a])
        }),
    );

    push(
        "layer_norm",
        15 + 5 + 5,
        0.0,
        Box::new(|tape, x| {
            let a = tape.leaf_matrix(3, 5, x[..15].to_vec());
            let gamma = tape.leaf_matrix(1, 5, x[15..20].to_vec());
            let beta = tape.leaf_matrix(1, 5, x[20..].to_vec());
            let out = tape.layer_norm(a, gamma, beta);
            (weighted_loss(tape, out, "layer_norm"), vec![a, gamma, beta])
        }),
    );

    push(
        "gelu",
        12,
        0.0,
        Box::new(|tape, x| {
            let a = tape.leaf_matrix(3, 4, x.to_vec());
            let out = tape.gelu(a);
            (weighted_loss(tape, out, "gelu"), vec![a])
        }),
    );

    push(
        "relu",
        12,
        0.05,
        Box::new(|tape, x| {
            let a = tape.leaf_matrix(3, 4, x.to_vec());
            let out = tape.relu(a);
            (weighted_loss(tape, out, "relu"), vec![a])
        }),
    );

    push(
        "abs",
        12,
        0.05,
        Box::new(|tape, x| {
            let a = tape.leaf_matrix(3, 4, x.to_vec());
            let out = tape.abs(a);
            (weighted_loss(tape, out, "abs"), vec![a])
        }),
    );

    push(
        "gather_rows",
        15,
        0.0,
        Box::new(|tape, x| {
            let table = tape.leaf_matrix(5, 3, x.to_vec());
            let out = tape.gather_rows(table, &[1, 1, 4, 0]);
            (weighted_loss(tape, out, "gather_rows"), vec![table])
        }),
    );

    push(
        "concat_rows",
        15,
        0.0,
        Box::new(|tape, x| {
            let (xa, xb) = split2(x, 6);
            let a = tape.leaf_matrix(2, 3, xa.to_vec());
            let b = tape.leaf_matrix(3, 3, xb.to_vec());
            let out = tape.concat_rows(a, b);
            (weighted_loss(tape, out, "concat_rows"), vec![a, b])
        }),
    );

    push(
        "slice_rows",
        12,
        0.0,
        Box::new(|tape, x| {
            let a = tape.leaf_matrix(4, 3, x.to_vec());
            let out = tape.slice_rows(a, 1, 2);
            (weighted_loss(tape, out, "slice_rows"), vec![a])
        }),
    );

    push(
        "slice_cols",
        15,
        0.0,
        Box::new(|tape, x| {
            let a = tape.leaf_matrix(3, 5, x.to_vec());
            let out = tape.slice_cols(a, 1, 3);
            (weighted_loss(tape, out, "slice_cols"), vec![a])
        }),
    );

    push(
        "reshape",
        12,
        0.0,
        Box::new(|tape, x| {
            let a = tape.leaf_matrix(3, 4, x.to_vec());
            let out = tape.reshape(a, 2, 6);
            (weighted_loss(tape, out, "reshape"), vec![a])
        }),
    );

    push(
        "attention",
        3 * 16,
        0.0,
        Box::new(|tape, x| {
            let q = tape.leaf_matrix(4, 4, x[..16].to_vec());
            let k = tape.leaf_matrix(4, 4, x[16..32].to_vec());
            let v = tape.leaf_matrix(4, 4, x[32..].to_vec());
            let out = tape.attention(q, k, v, 2, None);
            (weighted_loss(tape, out, "attention"), vec![q, k, v])
        }),
    );

    push(
        "attention_masked",
        3 * 16,
        0.0,
        Box::new(|tape, x| {
            // Rows 0-1 see only rows 0-1; rows 2-3 see rows 0-1 plus themselves.
            let n = 4;
            let mut mask = vec![0.0; n * n];
            for r in 0..n {
                for c in 0..n {
                    let allowed = c < 2 || (r >= 2 && c == r);
                    if !allowed {
                        mask[r * n + c] = MASK_BLOCKED;
                    }
                }
            }
            let q = tape.leaf_matrix(4, 4, x[..16].to_vec());
            let k = tape.leaf_matrix(4, 4, x[16..32].to_vec());
            let v = tape.leaf_matrix(4, 4, x[32..].to_vec());
            let out = tape.attention(q, k, v, 2, Some(&mask));
            (weighted_loss(tape, out, "attention_masked"), vec![q, k, v])
        }),
    );

    push(
        "cross_entropy_logits",
        12,
        0.0,
        Box::new(|tape, x| {
            let logits = tape.leaf_matrix(4, 3, x.to_vec());
            let out = tape.cross_entropy_logits(logits, &[0, 2, 1, 1]);
            (out, vec![logits])
        }),
    );

    push(
        "linear",
        3 * 4 + 4 * 2 + 2,
        0.0,
        Box::new(|tape, x| {
            let xi = tape.leaf_matrix(3, 4, x[..12].to_vec());
            let w = tape.leaf_matrix(4, 2, x[12..20].to_vec());
            let b = tape.leaf_matrix(1, 2, x[20..].to_vec());
            let out = tape.linear(xi, w, b);
            (weighted_loss(tape, out, "linear"), vec![xi, w, b])
        }),
    );

    cases
}

/// Check every registered operation at `points` random inputs each.
/// Reports the worst relative error seen per operation.
pub fn verify_op_gradients(
    seed: u64,
    points: usize,
    check: GradCheck,
) -> Result<Vec<OpGradReport>, TensorError> {
    check.validate()?;
    let mut reports = Vec::new();
    for case in cases() {
        let mut rng = SeededRng::new(seed ^ case.name.len() as u64);
        let mut worst = 0.0_f64;
        for _ in 0..points {
            let mut x: Vec<f64> = (0..case.dim).map(|_| 0.8 * rng.normal()).collect();
            if case.kink_margin > 0.0 {
                for v in x.iter_mut() {
                    if v.abs() < case.kink_margin {
                        *v += if *v >= 0.0 { 2.0 * case.kink_margin } else { -2.0 * case.kink_margin };
                    }
                }
            }

            let analytic = {
                let mut tape = Tape::new();
                let (loss, leaves) = (case.build)(&mut tape, &x);
                let grads = tape.backward(loss);
                let mut flat = Vec::with_capacity(case.dim);
                for leaf in leaves {
                    match grads.wrt(leaf) {
                        Some(g) => flat.extend_from_slice(g),
                        None => flat.extend(std::iter::repeat(0.0).take(leaf.len())),
                    }
                }
                flat
            };

            let mut value = |probe: &[f64]| -> f64 {
                let mut tape = Tape::new();
                let (loss, _) = (case.build)(&mut tape, probe);
                tape.scalar_value(loss)
            };
            let fd = central_difference(&mut value, &x, check.epsilon);
            let (rel, _) = worst_relative_error(&analytic, &fd);
            worst = worst.max(rel);
        }
        reports.push(OpGradReport { name: case.name, max_rel_err: worst });
    }
    Ok(reports)
}
