//! Stacked capsule autoencoder workbench: model, evasion attacks, adversarial
//! training regimes, unsupervised classifiers, and a robustness evaluation
//! harness.
//!
//! Everything is generic over the scalar type through [`Real`]; the concrete
//! aliases at the crate root pin the precision used by the CLI and tests.

pub mod autodiff;
pub mod attack;
pub mod checkpoint;
pub mod classifiers;
pub mod data;
pub mod defense;
pub mod error;
pub mod eval;
pub mod model;
pub mod scalar;
pub mod tensor;

pub use error::{Error, Result};
pub use scalar::Real;
pub use tensor::Tensor;

/// Default scalar used by the command-line tools.
pub type Scalar = f64;
/// Tensor in the default precision.
pub type TensorD = Tensor<f64>;
/// Single-precision tensor alias.
pub type TensorS = Tensor<f32>;
