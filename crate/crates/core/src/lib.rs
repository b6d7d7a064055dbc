//! Collinear constrained attention (CoCA) next to a standard RoPE baseline,
//! inside a small causal transformer, with the tooling to train it, probe its
//! length extrapolation and check the theory behind it numerically.

// `!(x > 0.0)` is used on purpose so NaN fails validation.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod attention;
pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod data;
pub mod diagnostics;
pub mod error;
pub mod evaluation;
pub mod gradcheck;
pub mod model;
pub mod real;
pub mod rotary;
pub mod tensor;
pub mod tokenizer;
pub mod training;
pub mod workspace;

pub use attention::{
    attention_forward, causal_mask_softmax, coca_scores_fused, coca_scores_naive, fold_relu_t, rope_scores_baseline,
    AttentionCache, AttentionParams, FoldedT, Variant,
};
pub use error::{CocaError, Result};
pub use model::{init_model, next_token_loss, Model, ModelConfig, ModelParams};
pub use real::Real;
pub use rotary::{apply_rotation, ntk_rescale, RotaryTable};
pub use tensor::{HeadTensor, ScoreTensor};
