//! Minimal dense-prediction network toolkit.
//!
//! Everything runs on `f64` CPU arrays with explicit, hand-derived backward
//! passes (no autodiff). Convolutions lower to im2col + a single matrix
//! multiply; all other ops are simple array transforms. Each forward function
//! has a matching backward that is verified against finite differences in the
//! test suite.
//!
//! Arrays are channel-major: `[channels, *spatial]`, spatial rank 2 or 3.

pub mod ops;
pub mod store;

pub use ops::*;
pub use store::{AdamState, GradBuffer, ParamId, ParamStore};
