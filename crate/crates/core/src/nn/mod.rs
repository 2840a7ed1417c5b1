//! Minimal neural building blocks: tensors, a gradient tape, attention and
//! feedforward/norm blocks, a parameter store and the Adam optimizer.

mod adam;
mod layers;
mod params;
mod tape;
mod tensor;

pub use adam::{Adam, StepOutcome};
pub use layers::{
    attention, attention_values, positional_encoding, positional_encoding_from, AttnMask, Block, FeedForward,
    ForwardCtx, LayerNorm, Linear, MultiHead, NetConfig,
};
pub use params::{ParamId, ParamStore, ParamTensor};
pub use tape::{kl_diag_value, Gradients, Tape, Var};
pub use tensor::Tensor;

pub(crate) use tape::{log_softmax as log_softmax_row, log_sum_exp};
