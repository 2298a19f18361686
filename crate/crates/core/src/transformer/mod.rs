//! Transformer encoder for next-token prediction with explicit
//! forward/backward passes.
//!
//! Layout is pre-layernorm with causal self-attention and a learned
//! positional embedding. Logits are scored against every vocabulary entry
//! through the token embedding (`logits = h·Eᵀ`) when sharing is on, or a
//! separate output matrix when it is off. [`backward`] records a
//! [`GradTape`] with enough per-sample information to compute per-sample
//! gradient norms without ever forming a per-sample gradient.

mod backward;
mod checkpoint;
mod config;
mod forward;
mod gradcheck;
mod loss;
mod params;

pub use backward::{backward, backward_tape, GradTape, TapeEntry};
pub use checkpoint::{load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint};
pub use config::{Activation, ModelConfig};
pub use forward::{
    forward, forward_hidden, forward_replay, AttentionCorrection, BlockCache, DropoutMasks, ForwardCache,
    LnCache, Mode, MAX_CORRECTION_EXPONENT,
};
pub use gradcheck::{compare_with_finite_differences, finite_difference_check, GradCheckReport};
pub use loss::{loss_next_token, LossOutput};
pub use params::{init_params, BlockParam, BlockParams, LayerNormParams, ModelParams, ParamId};

pub(crate) use forward::{forward_prefix, layer_norm, layer_norm_row};
#[cfg(test)]
pub(crate) use forward::gelu;
