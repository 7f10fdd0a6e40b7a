//! Knowledge-distillation-stabilized data augmentation.
//!
//! The crate is organized bottom-up:
//!
//! * [`imageops`] – pixel-exact augmentation kernels and the magnitude → parameter mapping.
//! * [`policy`] – RandAugment and sub-policy sampling, the 14-dimensional transform vector.
//! * [`smallnet`] – a fixed two-stage conv net with hand-written backpropagation.
//! * [`distill`] – softmax, cross-entropy, top-K truncated KL and the combined KD objective.
//! * [`trainer`] – optimizers, learning-rate schedules and the training loop.
//! * [`harness`] – dataset loaders, JSON configuration, magnitude sweeps, CSV and SVG output.

pub mod distill;
pub mod error;
pub mod harness;
pub mod imageops;
pub mod policy;
pub mod smallnet;
pub mod trainer;

pub use error::{Error, Result};
