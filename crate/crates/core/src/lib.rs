//! Contrastive learning between scene graphs and images.

// `!(x > 0.0)` is used on purpose so NaN is rejected too.
#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::too_many_arguments)]

pub mod autodiff;
pub mod dataset;
pub mod encoder;
pub mod error;
pub mod eval;
pub mod gradcheck;
pub mod graph;
pub mod graph_encoder;
pub mod image_encoder;
pub mod imaging;
pub mod loss;
pub mod manifest;
pub mod model;
pub mod optim;
pub mod params;
pub mod rng;
pub mod synth;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
