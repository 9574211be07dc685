//! Training and adversarial-attack workbench around the tent activation
//! `f(x; delta) = max(0, delta - |x|)`.
//!
//! The crate covers the full experiment loop: dense f32 tensors with
//! deterministic kernels, a fixed-sequence convolutional network with
//! reverse-mode gradients for parameters and inputs, the tent activation
//! with learnable clamped sizes, Adam training (plain and adversarial via
//! inner PGD), six white-box adversaries, MNIST ingestion, open-space-risk
//! analyses, and checkpoint/report plumbing for the CLI.

pub mod attack;
pub mod checkpoint;
pub mod data;
pub mod error;
pub mod harness;
pub mod nn;
pub mod optim;
pub mod report;
pub mod rng;
pub mod risk;
pub mod tensor;
pub mod tent;

pub use error::{Error, Result};
pub use tensor::Tensor;
