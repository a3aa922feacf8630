pub mod autograd;
pub mod config;
pub mod dsp;
pub mod error;
pub mod eval;
pub mod filter;
pub mod gradcheck;
pub mod network;
pub mod nn;
pub mod synth;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use tensor::Tensor;
