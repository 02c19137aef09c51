//! Training, decoding, and evaluation loops on top of the model and codec.

pub mod decode;
pub mod eval;
pub mod train;
