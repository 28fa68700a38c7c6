//! The decoder-only transformer: parameters, forward and backward passes,
//! and the whitespace tokenizer.

pub mod backward;
pub mod config;
pub mod forward;
pub mod tokenizer;
pub mod weights;

pub use backward::{accumulate_gradients, accumulate_weighted_gradients, loss_and_gradients, loss_and_gradients_at};
pub use config::ModelConfig;
pub use forward::{forward, forward_step, DecodeState, ForwardOutput, KvBlock, LayerKv, TokenSequence};
pub use tokenizer::Vocab;
pub use weights::{ModelWeights, Weights};
