//! Dense 64-bit tensors, a reverse-mode tape, and an adaptive-moment optimizer.
//!
//! Every trainable network in the crate is built from the primitives here.
//! Forward values are computed eagerly while the tape records enough structure
//! to replay the computation backwards once.

pub mod gradcheck;
pub mod kernels;
mod optim;
mod params;
pub mod rng;
mod tape;
mod tensor;

pub use optim::{clip_global_norm, Adam, AdamConfig, StepStats};
pub use params::{Bound, ParamId, ParamSet};
pub use tape::{Gradients, Tape, Var};
pub use tensor::Tensor;

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NumericsError {
    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },
    #[error("backward requires a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
    #[error("variable does not belong to this tape")]
    ForeignVar,
    #[error("non-finite gradient in parameter {0}")]
    NonFiniteGradient(usize),
    #[error("parameter count mismatch: {params} parameters, {grads} gradients")]
    ParamCount { params: usize, grads: usize },
}

pub type Result<T> = std::result::Result<T, NumericsError>;

/// Numerically safe logistic function `1 / (1 + e^{-u})`.
pub fn logistic(u: f64) -> f64 {
    if u >= 0.0 {
        1.0 / (1.0 + (-u).exp())
    } else {
        let e = u.exp();
        e / (1.0 + e)
    }
}

/// `ln(1 + e^u)` without overflow.
pub fn softplus(u: f64) -> f64 {
    if u > 0.0 {
        u + (-u).exp().ln_1p()
    } else {
        u.exp().ln_1p()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn logistic_fixed_points() {
        assert_eq!(logistic(0.0), 0.5);
        assert!((logistic(50.0) - 1.0).abs() < 1e-12);
        assert!((logistic(3f64.ln()) - 0.75).abs() < 1e-15);
        assert!(logistic(-800.0) >= 0.0);
        assert!(logistic(800.0) <= 1.0);
    }

    #[test]
    fn softplus_is_stable() {
        assert!((softplus(0.0) - 2f64.ln()).abs() < 1e-15);
        assert_eq!(softplus(1000.0), 1000.0);
        assert!(softplus(-1000.0) >= 0.0);
    }

    proptest! {
        #[test]
        fn logistic_symmetry(u in -700.0f64..700.0) {
            prop_assert!((logistic(u) + logistic(-u) - 1.0).abs() <= 1e-12);
        }

        #[test]
        fn logistic_monotone(a in -50.0f64..50.0, d in 1e-3f64..10.0) {
            prop_assert!(logistic(a + d) >= logistic(a));
        }
    }
}
