//! Heat-diffusion image retrieval.
//!
//! Local convolutional features of an image are weighted by how strongly
//! they heat a dissipative similarity graph when used as a heat source
//! ([`diffusion`]), then summed and power-normalized into one global
//! descriptor ([`aggregation`]). Descriptors are PCA-whitened
//! ([`whitening`]), searched by cosine similarity with optional query
//! expansion and heat re-ranking ([`retrieval`]), and scored with
//! trapezoidal mAP ([`evaluation`]).

// `!(x > 0.0)` style checks are used on purpose so NaN is rejected too.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod aggregation;
pub mod diffusion;
pub mod evaluation;
pub mod exec;
pub mod retrieval;
pub mod synthetic;
pub mod tensor_io;
pub mod whitening;

pub use exec::Execution;
