//! Differentiable inverse shape morphing: an MLS-MPM solver coupled to a
//! Gaussian-splat renderer through a deformation-aware upsampling bridge.
// Range checks are written as negated comparisons so NaN fails them.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod app;
pub mod bridge;
pub mod config;
pub mod covariance;
pub mod error;
pub mod fusion;
pub mod gradcheck;
pub mod io;
pub mod linalg;
pub mod metrics;
pub mod mpm;
pub mod objective;
pub mod par;
pub mod physics;
pub mod render;
pub mod scene;
pub mod shape;
pub mod train;

pub use error::{Error, Result};
