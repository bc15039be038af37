//! Object-region mining by adversarial erasing, plus prohibitive
//! segmentation learning, on top of a small f64 reverse-mode autodiff
//! engine.
//!
//! The crate is sans-IO: everything operates on in-memory buffers and is
//! deterministic given a seed. File formats, the CLI and artifact
//! emission live in the `erasemine-cli` companion crate.
//!
//! Module map:
//!
//! - [`tensor`] / [`graph`]: dense f64 tensors and the recorded
//!   computation graph with reverse-mode gradients.
//! - [`models`]: the classification network (conv trunk, global average
//!   pooling, FC head), the two-branch segmentation network, and the
//!   SGD training loop.
//! - [`cam`]: class activation maps and threshold-based region
//!   extraction.
//! - [`saliency`]: border-contrast saliency and background cues.
//! - [`ae`]: the iterative train / mine / erase loop.
//! - [`fusion`]: supervision-mask assembly with ignore rules.
//! - [`psl`]: confidence-weighted auxiliary masks, the prohibitive
//!   segmentation trainer, prohibitive inference and the extra
//!   self-training round.
//! - [`synth`]: the deterministic synthetic scene generator.
//! - [`eval`]: confusion matrix, per-class IoU and mean IoU.

#![cfg_attr(not(feature = "std"), no_std)]

extern crate alloc;

pub mod ae;
pub mod cam;
pub mod dataset;
pub mod error;
pub mod eval;
pub mod fusion;
pub mod graph;
pub mod gradcheck;
pub mod image;
pub mod mask;
pub mod models;
pub mod psl;
pub mod saliency;
pub mod synth;
pub mod tensor;

pub use error::{CoreError, Result};
pub use tensor::Tensor;
