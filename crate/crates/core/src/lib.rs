//! Selective state-space OCR.
//!
//! A CNN encoder with 2-D positional encoding feeds a bidirectional Mamba
//! connector, followed by one of three Mamba decoding heads (CTC,
//! autoregressive, non-autoregressive). Everything runs on a small
//! reverse-mode tensor engine in this crate.

pub mod autodiff;
pub mod bench;
pub mod checkpoint;
pub mod config;
pub mod decoders;
pub mod error;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod optim;
pub mod parallel;
pub mod ssm;
pub mod synth;
pub mod tensor;
pub mod train;
pub mod vision;

pub use autodiff::{Gradients, Tape, Var};
pub use error::{Error, Result};
pub use tensor::{DType, Float, Tensor};
