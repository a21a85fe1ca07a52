//! Sparse semantic landmark maps and Monte Carlo global localization.
//!
//! The crate is organized bottom-up:
//!
//! - [`geometry`]: SE(3) poses, Euler angles, weighted and circular means.
//! - [`sim`]: synthetic worlds, trajectories and detection streams.
//! - [`mapping`]: association and fusion of detections into a [`mapping::SparseMap`].
//! - [`localization`]: the particle filter.
//! - [`late_opt`]: post-convergence refinement over a history window.
//! - [`metrics`]: pose errors, success rates and map statistics.
//! - [`io`] and [`config`]: file formats and experiment configuration.
//! - [`pipeline`]: end-to-end runs used by the CLI and the acceptance suite.

// `!(x > 0.0)` rejects NaN along with nonpositive values.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod config;
pub mod geometry;
pub mod io;
pub mod late_opt;
pub mod localization;
pub mod mapping;
pub mod metrics;
pub mod pipeline;
pub mod sim;
