//! Channel-independent convolutional encoders for multiplex single-cell image
//! patches: a small reverse-mode autodiff engine, the CIM backbone and an
//! early-fusion baseline, self-supervised pretraining, evaluation, and
//! relevance-based label-free phenotyping.

pub mod autodiff;
pub mod data;
pub mod diagnostics;
pub mod error;
pub mod eval;
pub mod lrp;
pub mod model;
pub mod params;
pub mod seeding;
pub mod ssl;
pub mod tensor;

pub use error::{CimError, Result};
pub use tensor::Tensor;
