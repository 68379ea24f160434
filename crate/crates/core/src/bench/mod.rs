//! Analytic cost model and resolution sweeps.

mod flops;
mod sweep;

pub use flops::*;
pub use sweep::*;
