//! Spatial-temporal augmentation model for micro-video popularity prediction.
//!
//! The crate is organized by pathway: [`temporal`] turns frame sequences into
//! a fused visual representation, [`spatial`] routes queries through a
//! popularity-by-topic prototype memory, and [`predictor`] combines both with
//! text and metadata into a popularity estimate. Every differentiable piece
//! carries a hand-written backward pass checked by [`numerics::gradcheck`].

// Index loops mirror the math in the kernels, and `!(x > 0.0)` is how the
// validators reject NaN along with out-of-range values.
#![allow(
    clippy::needless_range_loop,
    clippy::neg_cmp_op_on_partial_ord,
    clippy::too_many_arguments
)]

pub mod checks;
pub mod error;
pub mod harness;
pub mod numerics;
pub mod predictor;
pub mod spatial;
pub mod synth;
pub mod temporal;

pub use error::{Result, StapError};
