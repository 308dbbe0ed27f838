//! Learning a distribution of plausible future lesion appearances from two
//! past observations.
//!
//! The crate provides the full experiment stack at desk scale:
//!
//! * [`synthgrowth`] — a seeded synthetic longitudinal lesion generator whose
//!   conditional future distribution can be re-sampled exactly, serving as a
//!   ground-truth oracle.
//! * [`datapipe`] — normalization, case construction, subject-level folds,
//!   patching and augmentation.
//! * [`model`] — the conditional segmentation network: a U-shaped backbone
//!   plus prior/posterior Gaussian encoders and a latent-injection head.
//! * [`training`] — the cross-entropy + KL objective and the optimization loop.
//! * [`evaluation`] — volume-query and surprise metrics, change-group
//!   stratification, and rank-sum statistics.
//! * [`reporting`] — contour overlays, latent-grid montages, summary tables.
//! * [`pipeline`] — config-driven orchestration of the whole lifecycle.

pub mod config;
pub mod datapipe;
pub mod error;
pub mod evaluation;
pub mod exec;
pub mod model;
pub mod nn;
pub mod pipeline;
pub mod reporting;
pub mod rng;
pub mod synthgrowth;
pub mod training;
pub mod volume;

pub use error::{Error, Result};
