//! Multi-phase autoregressive region proposal network for pedestrian
//! detection, implemented from scratch over a small reverse-mode
//! differentiation core and trained on synthetic scenes.

pub mod autodiff;
pub mod backbone;
pub mod cli;
pub mod config;
pub mod deencoder;
pub mod error;
pub mod eval;
pub mod ppm;
pub mod pipeline;
pub mod rpn;
pub mod second_stage;
pub mod synth;
pub mod targets;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::Tensor;
