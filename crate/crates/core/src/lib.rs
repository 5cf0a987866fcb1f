//! Siamese single-object tracker with dual-feature anchor proposals,
//! self/cross attentional aggregation and multi-branch heads, built on a
//! small `f64` reverse-mode autodiff core.

pub mod aan;
pub mod apn;
pub mod autodiff;
pub mod backbone;
pub mod bbox;
pub mod checkpoint;
pub mod config;
pub mod error;
pub mod gradcheck;
pub mod heads;
pub mod image;
pub mod kernels;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod param;
pub mod seqio;
pub mod synth;
pub mod tensor;
pub mod tracker;
pub mod train;

pub use autodiff::{Gradients, Tape, Var};
pub use bbox::BBox;
pub use config::Config;
pub use error::{Error, Result};
pub use model::SiamModel;
pub use param::{Param, ParamId, ParamStore};
pub use tensor::Tensor;
