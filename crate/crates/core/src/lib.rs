//! Vicinity attention and the VVT pyramid backbone.
//!
//! Vicinity attention is a linear-complexity self-attention whose ReLU-kernel
//! similarity is re-weighted by `cos(a_i - a_j) + cos(b_i - b_j)`, where `a`
//! and `b` encode each token's row and column on the 2D token grid. The
//! re-weighting factorizes per token, so the usual key-value summary trick
//! still applies and cost grows linearly with the number of tokens.
//!
//! Layout:
//!
//! * [`attention`]: angle encoding, the linearized attention with its
//!   backward pass, and the explicit quadratic oracles used for testing.
//! * [`block`]: the vicinity attention block (feature reduction, multi-head
//!   assembly, feature preserving connection, FFN).
//! * [`backbone`]: the four-stage pyramid, classification head, parameter
//!   accounting and checkpoints.
//! * [`bench`]: analytic FLOP model and resolution sweeps.
//! * [`train`]: datasets, AdamW with warmup + cosine decay, training loop.
//! * [`gradcheck`]: finite-difference verification of every backward pass.

// `!(x > 0.0)` is used on purpose so NaN fails validation.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod attention;
pub mod backbone;
pub mod bench;
pub mod block;
pub mod error;
pub mod gradcheck;
pub mod nn;
pub mod params;
pub mod scalar;
pub mod train;
pub mod verify;

pub use attention::{AttentionMode, PositionGrid, TokenGrid};
pub use backbone::{Model, ModelSpec, VariantSpec};
pub use block::{BlockConfig, BlockParams};
pub use error::{Error, Result};
pub use params::ParamSet;
pub use scalar::Real;
