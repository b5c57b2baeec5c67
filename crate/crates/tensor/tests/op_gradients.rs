//! Finite-difference verification of every tape operation, plus property
//! tests for the pieces where randomized inputs add coverage.

use pdx_tensor::gradcheck::{verify_op_gradients, GradCheck};
use pdx_tensor::{SeededRng, Tape, Tensor};
use proptest::prelude::*;

#[test]
fn every_op_matches_finite_differences() {
    let reports = verify_op_gradients(2024, 4, GradCheck::default()).unwrap();
    assert!(reports.len() >= 20, "registry lost cases: {}", reports.len());
    for r in &reports {
        assert!(
            r.max_rel_err < 1e-4,
            "{}: max relative error {:.3e}",
            r.name,
            r.max_rel_err
        );
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn softmax_rows_are_distributions(seed in 0u64..1000) {
        let mut rng = SeededRng::new(seed);
        let x = Tensor::randn(vec![4, 6], 3.0, &mut rng);
        let mut tape = Tape::new();
        let t = tape.leaf(&x);
        let s = tape.softmax(t);
        for row in tape.values(s).chunks(6) {
            let sum: f64 = row.iter().sum();
            prop_assert!((sum - 1.0).abs() < 1e-9);
            prop_assert!(row.iter().all(|&p| (0.0..=1.0).contains(&p)));
        }
    }

    #[test]
    fn matmul_associates_with_identity(seed in 0u64..1000, n in 2usize..6) {
        let mut rng = SeededRng::new(seed);
        let x = Tensor::randn(vec![n, n], 1.0, &mut rng);
        let mut eye = Tensor::zeros(vec![n, n]);
        for i in 0..n {
            eye.set2(i, i, 1.0);
        }
        let mut tape = Tape::new();
        let tx = tape.leaf(&x);
        let te = tape.leaf(&eye);
        let prod = tape.matmul(tx, te);
        prop_assert_eq!(tape.values(prod), x.values());
    }

    #[test]
    fn cross_entropy_is_nonnegative(seed in 0u64..1000) {
        let mut rng = SeededRng::new(seed);
        let logits = Tensor::randn(vec![5, 4], 2.0, &mut rng);
        let targets: Vec<usize> = (0..5).map(|_| rng.below(4)).collect();
        let mut tape = Tape::new();
        let t = tape.leaf(&logits);
        let ce = tape.cross_entropy_logits(t, &targets);
        prop_assert!(tape.scalar_value(ce) >= 0.0);
    }

    #[test]
    fn layer_norm_output_rows_are_standardized_when_identity_affine(seed in 0u64..1000) {
        let mut rng = SeededRng::new(seed);
        let x = Tensor::randn(vec![3, 16], 2.5, &mut rng);
        let gamma = Tensor::full(vec![1, 16], 1.0);
        let beta = Tensor::zeros(vec![1, 16]);
        let mut tape = Tape::new();
        let (tx, tg, tb) = (tape.leaf(&x), tape.leaf(&gamma), tape.leaf(&beta));
        let y = tape.layer_norm(tx, tg, tb);
        for row in tape.values(y).chunks(16) {
            let mean: f64 = row.iter().sum::<f64>() / 16.0;
            let var: f64 = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<f64>() / 16.0;
            prop_assert!(mean.abs() < 1e-9);
            prop_assert!((var - 1.0).abs() < 1e-3); // eps shifts variance slightly below 1
        }
    }
}
