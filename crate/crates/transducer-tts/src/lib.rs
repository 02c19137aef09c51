//! Text-to-speech transducer over a residual-quantized toy codec.
//!
//! A neural transducer predicts first-codebook codec tokens from text while
//! learning a monotonic text–audio alignment; a non-autoregressive residual
//! head fills in the remaining codebooks from that alignment. The crate also
//! bundles the synthetic codec/corpus, a byte-pair tokenizer, training and
//! decoding loops, and the `ttst` command-line tool.

pub mod checkpoint;
pub mod cli;
pub mod codec;
pub mod config;
pub mod error;
pub mod io;
pub mod model;
pub mod numerics;
pub mod rnnt;
pub mod runtime;
pub mod text;
pub mod util;

pub use error::{Error, Result};
