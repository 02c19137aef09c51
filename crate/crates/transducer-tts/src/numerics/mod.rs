//! Differentiable numerics: parameters, reverse-mode tape, layers,
//! optimizer, and a finite-difference gradient checker.

pub mod gradcheck;
pub mod layers;
pub mod optim;
pub mod params;
pub mod tape;

pub use gradcheck::{grad_check, GradCheckOptions, GradCheckReport};
pub use layers::{
    positional_encoding, AttnCache, BlockCache, CondLayerNorm, FeedForward, GruCell, LayerNorm,
    Linear, MultiHeadAttention, Norm, TransformerBlock, LN_EPS,
};
pub use optim::{adamw_step, lr_at, AdamWState, LrSchedule};
pub use params::{ParamId, ParamSet};
pub use tape::{log_softmax_row, softmax_rows, Gradients, NodeId, Tape};
