//! Keypoint heatmap regression with structured context fusion.
//!
//! The crate is organized bottom-up: [`tensor`], [`ops`] and [`autograd`]
//! provide a small differentiable tensor layer; [`directionmax`], [`scm`] and
//! [`cmls`] build the network blocks; [`model`] assembles and trains the full
//! network; [`metrics`] covers keypoint aggregation and evaluation; [`data`]
//! generates and loads datasets.

// Comparisons like `!(x > 0.0)` are written that way to reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod autograd;
pub mod checkpoint;
pub mod cmls;
pub mod config;
pub mod data;
pub mod directionmax;
pub mod error;
pub mod eval;
pub mod gradcheck;
pub mod gradsuite;
pub mod heatmap;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod ops;
pub mod optim;
pub mod pipeline;
pub mod scm;
pub mod tensor;
pub mod train;

pub use autograd::{Elementwise, Tape, Var};
pub use error::{Error, Result};
pub use tensor::{Shape, Tensor};
