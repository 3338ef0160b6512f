//! Unsupervised language-vision prompt pre-training for query-based
//! instance segmentation heads.
//!
//! The pipeline runs in this order:
//!
//! 1. [`encoders`] supplies per-pixel features, a text bank and FPN-like
//!    features (loaded from `.ten` fixtures or synthesised).
//! 2. [`proposals`] aligns pixel and text features into a per-class score
//!    map and splits it into instance-level pseudo masks.
//! 3. [`prompts`] pools each pseudo mask's box into a prompt vector and
//!    injects the best-matching prompt into every kernel.
//! 4. [`head`] predicts masks and iteratively updates kernels.
//! 5. [`losses`] Hungarian-matches predictions against pseudo masks and
//!    evaluates the composite loss.
//! 6. [`train`] runs the pre-training loop with AdamW.
//! 7. [`eval`] scores class-agnostic boxes and summarises kernel activations.

pub mod encoders;
pub mod error;
pub mod eval;
pub mod head;
pub mod losses;
pub mod numerics;
pub mod pgm;
pub mod prompts;
pub mod proposals;
pub mod train;

pub use error::{Error, Result};
pub use numerics::{NormMode, Tape, Tensor, Var};
pub use proposals::BBox;
