//! Class anchor margin (CAM) metric learning and anchor-pruned retrieval.
//!
//! The crate is organized bottom-up:
//!
//! - [`numeric`]: vectors, row-major matrices, distances and the seeded RNG.
//! - [`loss`]: attractor, repeller and minimum-norm losses with analytic gradients.
//! - [`encoder`]: a small feed-forward encoder with explicit forward/backward passes.
//! - [`optim`]: SGD and Adam updates over flat parameter slices.
//! - [`trainer`]: anchor initialization, few-shot subsampling and the training loop.
//! - [`retrieval`]: brute-force and two-stage (anchor-bucketed) search.
//! - [`metrics`]: precision@k, average precision, mAP, accuracy and [`metrics::evaluate`].
//! - [`data`] and [`store`]: synthetic blobs, CSV interchange and the `CAMR` binary format.
//!
//! Batch work (per-example forward/backward, per-query evaluation) runs through
//! [`exec::Exec`], which uses rayon when the `parallel` feature is enabled and
//! falls back to a plain loop otherwise. Both modes produce bit-identical results.

// `!(x > 0.0)` is used on purpose: it also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod data;
pub mod encoder;
pub mod error;
pub mod exec;
pub mod loss;
pub mod metrics;
pub mod numeric;
pub mod optim;
pub mod retrieval;
pub mod store;
pub mod trainer;

pub use error::{Error, Result};
pub use exec::Exec;
pub use numeric::{l2_distance, l2_norm, relative_error, seeded_gaussian, Matrix, RngSeed, SeededRng};
