//! Machine unlearning by distribution-level feature distancing.
//!
//! - [`nn`]: a small multilayer perceptron with exact gradients.
//! - [`ot`]: entropic optimal transport between feature batches.
//! - [`unlearn`]: the dynamic forgetting loop and baseline methods.
//! - [`eval`]: membership inference, forgetting score and NoMUS.
//! - [`synth`]: synthetic data with tunable task/identity entanglement.

pub mod error;
pub mod eval;
pub mod matrix;
pub mod nn;
pub mod ot;
pub mod synth;
pub mod unlearn;

pub use error::{Error, Result};
pub use matrix::Matrix;
