//! Physics-guided intrinsic image decomposition at desk scale.
//!
//! The crate bundles everything needed to train and evaluate a scaled
//! edge-guided decomposition network on procedurally generated scenes:
//!
//! * [`image`], [`ccr`], [`synth`], [`edges`]: pixel containers, cross
//!   color ratios, scene generation and ground-truth edges.
//! * [`tensor`]: a small reverse-mode autodiff engine over dense `f64` tensors.
//! * [`network`], [`losses`], [`trainer`]: the model, its objective and the
//!   optimisation loop with checkpoints.
//! * [`metrics`]: MSE, scale-invariant MSE, LMSE, DSSIM and WHDR.
//! * [`io`]: 16-bit image files and dataset manifests.

pub mod ccr;
pub mod edges;
pub mod error;
pub mod gradcheck;
pub mod image;
pub mod io;
pub mod losses;
pub mod metrics;
pub mod network;
pub mod synth;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
