//! Dense building blocks with explicit forward/backward passes.

mod activation;
mod conv;
mod init;
mod linear;
mod norm;

pub use activation::{gelu, gelu_backward, Activation};
pub use conv::{Conv2d, ConvGeometry, FeatureMap};
pub use init::TruncatedNormal;
pub use linear::Linear;
pub use norm::{LayerNorm, LayerNormCache};
