//! Deterministic numerical core: tensors, reverse-mode differentiation,
//! a small transformer encoder, recurrent layers, optimizers and schedules.

mod adam;
mod checkpoint;
mod gradcheck;
mod graph;
mod layers;
mod params;
mod schedule;
mod tensor;
mod transformer;

pub use adam::{adam_step, AdamConfig, AdamState};
pub use checkpoint::{read_checkpoint, write_checkpoint, TrainingLog, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use gradcheck::{compare_gradients, gradient_check, numeric_gradients, GradCheckOptions, GradCheckReport};
pub use graph::{CustomOp, Gradients, Graph, Var};
pub use layers::{birnn_layer, gru_pass, init_gru, layer_norm, pool_subwords, scalar_mix, Direction, GruParams};
pub use params::{Bound, ParamSet};
pub use schedule::Schedule;
pub use tensor::Tensor;
pub use transformer::{
    forward_transformer, init_transformer, mlm_logits, mlm_loss, mlm_loss_value, TransformerConfig, TransformerOutput,
};

pub(crate) use graph::log_sum_exp;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum NeuralError {
    #[error("index out of bounds: {0}")]
    Bounds(String),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("non-finite gradient in parameter `{param}`")]
    NonFiniteGradient { param: String },
    #[error("non-finite loss")]
    NonFiniteLoss,
    #[error("malformed checkpoint: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}
