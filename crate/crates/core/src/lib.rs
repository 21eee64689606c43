//! Location-based driving volatility from connected-vehicle messages, and
//! crash-frequency models that use it.
//!
//! The pipeline: [`ingest`] raw messages, [`geomatch`] them to intersection
//! sites, compute per-site [`volatility`], fit [`countmodel`] and
//! [`randparam`] regressions, and screen sites with [`hotspot`].
//! [`synth`] generates data with known ground truth.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod countmodel;
pub mod error;
pub mod geomatch;
pub mod hotspot;
pub mod ingest;
pub mod optim;
pub mod pipeline;
pub mod randparam;
pub mod stats;
pub mod synth;
pub mod volatility;

pub use error::{Error, Result};
