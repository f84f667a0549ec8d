//! Function-aware structured pruning on a minimal decoder-only transformer.
//!
//! The crate is organized bottom-up: `numcore` holds dense linear algebra and
//! the tensor archive format, `model` the toy transformer with hand-derived
//! forward/backward passes, `calib` calibration capture, `grouping` context
//! clustering and neuron-to-group assignment, `pruners` the OBC and FLAP
//! pruning math, `allocate` block-wise sparsity allocation, and `pipeline`
//! the end-to-end orchestration behind the CLI.

pub mod allocate;
pub mod calib;
pub mod error;
pub mod grouping;
pub mod model;
pub mod numcore;
pub mod pipeline;
pub mod pruners;

pub use error::{Error, Result};
