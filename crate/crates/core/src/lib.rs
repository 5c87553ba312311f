//! Core library for crowd counting by density-map regression.
//!
//! The pieces, bottom to top: [`tensor`] and [`ops`] provide dense f64
//! tensors and the forward/backward kernels over them, [`graph`] ties the
//! kernels into a reverse-mode autodiff tape, [`densitymap`] turns head
//! annotations into Gaussian density targets, [`model`] builds the counting
//! network (encoder, stacked scale-pyramid/attention modules, prediction
//! head), [`losses`] implements the pixel and windowed region losses,
//! [`train`]/[`eval`] run optimization and scoring, and [`synthdata`]
//! fabricates small labeled scenes so the whole pipeline is testable without
//! any external dataset.
//!
//! Everything is deterministic: given the same seeds and inputs, forward
//! values, gradients, checkpoints, and logs are bit-identical, with or
//! without the `parallel` feature and at any thread count.

// Validation deliberately writes `!(x > 0.0)` instead of `x <= 0.0`: the
// negated form also rejects NaN, which must never pass a bounds check.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod densitymap;
pub mod error;
pub mod eval;
pub mod graph;
pub mod imgio;
pub mod losses;
pub mod model;
pub mod ops;
pub mod synthdata;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use graph::{grad_check, Graph, NodeId};
pub use tensor::Tensor;
