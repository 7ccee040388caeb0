//! Geometric scattering attention networks for semi-supervised node
//! classification.
//!
//! The crate is layered bottom-up: [`graph`] builds sparse propagation
//! operators, [`scattering`] applies diffusion wavelets with them,
//! [`autodiff`] differentiates through both, [`model`] assembles the network,
//! [`train`] fits it and [`data`] loads the node-classification datasets it
//! is trained on. [`cli`] ties these together behind the `gsan` binary.

// `!(x > 0.0)` is used deliberately so that NaN is rejected.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod autodiff;
pub mod checkpoint;
pub mod cli;
pub mod data;
pub mod error;
pub mod gradcheck;
pub mod graph;
pub mod model;
pub mod scattering;
pub mod train;

pub use error::{GsanError, Result};
