//! Dense f64 tensors, a dynamic reverse-mode autodiff tape, named-parameter
//! utilities, Adam, and finite-difference gradient checking.

pub mod adam;
pub mod gradcheck;
pub mod ops;
pub mod params;
pub mod rng;
pub mod tape;
pub mod tensor;

pub use adam::Adam;
pub use params::{Binding, Parameterized};
pub use rng::SeededRng;
pub use tape::{Gradients, Tape, Tracked, MASK_BLOCKED};
pub use tensor::Tensor;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum TensorError {
    #[error("non-finite value in {context}")]
    NonFinite { context: String },

    #[error(
        "gradient check failed: max relative error {max_rel_err:.3e} at coordinate {coord} \
         (tolerance {tolerance:.1e})"
    )]
    GradCheckFailed {
        max_rel_err: f64,
        coord: usize,
        tolerance: f64,
    },

    #[error("finite-difference step {epsilon:.3e} outside [{min:.0e}, {max:.0e}]",
        min = crate::gradcheck::EPSILON_MIN, max = crate::gradcheck::EPSILON_MAX)]
    BadEpsilon { epsilon: f64 },
}
