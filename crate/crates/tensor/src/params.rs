//! Named-parameter plumbing: models expose their tensors by name, and a
//! [`Binding`] connects them to a tape for one forward/backward pass.

use crate::tape::{Tape, Tracked};
use crate::tape::Gradients;
use crate::tensor::Tensor;

/// A model whose parameters can be walked by name.
///
/// Names must be stable across calls — they key optimizer state and
/// checkpoint entries.
pub trait Parameterized {
    fn visit(&self, f: &mut dyn FnMut(&str, &Tensor));
    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut Tensor));

    fn parameter_count(&self) -> usize {
        let mut n = 0;
        self.visit(&mut |_, t| n += t.len());
        n
    }

    fn parameter_names(&self) -> Vec<String> {
        let mut names = Vec::new();
        self.visit(&mut |name, _| names.push(name.to_string()));
        names
    }
}

/// Records which tape leaves correspond to which named parameters.
///
/// A trainable binding collects `(name, handle)` pairs for gradient
/// extraction; a frozen binding places leaves on the tape without recording
/// them, so a frozen submodel participates in the forward pass (and lets
/// gradients flow *through* it) without receiving updates.
pub struct Binding {
    entries: Vec<(String, Tracked)>,
    trainable: bool,
}

impl Binding {
    pub fn trainable() -> Self {
        Self { entries: Vec::new(), trainable: true }
    }

    pub fn frozen() -> Self {
        Self { entries: Vec::new(), trainable: false }
    }

    /// Put `tensor` on the tape as a leaf, recording it when trainable.
    pub fn leaf(&mut self, tape: &mut Tape, name: impl Into<String>, tensor: &Tensor) -> Tracked {
        let t = tape.leaf(tensor);
        if self.trainable {
            self.entries.push((name.into(), t));
        }
        t
    }

    pub fn names(&self) -> Vec<String> {
        self.entries.iter().map(|(n, _)| n.clone()).collect()
    }

    /// Per-parameter gradients in binding order. Parameters the loss never
    /// touched get explicit zeros, so the optimizer sees every name.
    pub fn gradients(&self, grads: &Gradients) -> Vec<(String, Vec<f64>)> {
        self.entries
            .iter()
            .map(|(name, t)| {
                let g = grads
                    .wrt(*t)
                    .map(|s| s.to_vec())
                    .unwrap_or_else(|| vec![0.0; t.len()]);
                (name.clone(), g)
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    struct Pair {
        w: Tensor,
        b: Tensor,
    }

    impl Parameterized for Pair {
        fn visit(&self, f: &mut dyn FnMut(&str, &Tensor)) {
            f("w", &self.w);
            f("b", &self.b);
        }
        fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut Tensor)) {
            f("w", &mut self.w);
            f("b", &mut self.b);
        }
    }

    #[test]
    fn trainable_binding_reports_zero_grads_for_untouched_params() {
        let model = Pair {
            w: Tensor::scalar(2.0),
            b: Tensor::scalar(7.0),
        };
        let mut tape = Tape::new();
        let mut binding = Binding::trainable();
        let w = binding.leaf(&mut tape, "w", &model.w);
        let _b = binding.leaf(&mut tape, "b", &model.b);
        let loss = tape.mul_elem(w, w);
        let grads = tape.backward(loss);
        let named = binding.gradients(&grads);
        assert_eq!(named[0], ("w".to_string(), vec![4.0]));
        assert_eq!(named[1], ("b".to_string(), vec![0.0]));
    }

    #[test]
    fn frozen_binding_records_nothing() {
        let model = Pair {
            w: Tensor::scalar(1.0),
            b: Tensor::scalar(1.0),
        };
        let mut tape = Tape::new();
        let mut binding = Binding::frozen();
        binding.leaf(&mut tape, "w", &model.w);
        assert!(binding.names().is_empty());
    }

    #[test]
    fn parameter_count_sums_all_tensors() {
        let model = Pair {
            w: Tensor::zeros(vec![3, 4]),
            b: Tensor::zeros(vec![1, 4]),
        };
        assert_eq!(model.parameter_count(), 16);
        assert_eq!(model.parameter_names(), vec!["w", "b"]);
    }
}
