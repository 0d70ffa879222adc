//! Miniature early-fusion grounding detector with learnable vocabulary
//! extensions.
//!
//! The crate is organized around the training story: a frozen base
//! detector, new word-embedding rows learned through it from a handful
//! of labeled scenes, and evaluation protocols that measure whether the
//! new tokens behave like ordinary vocabulary.
//!
//! - [`tensor`]: float32 reverse-mode autodiff with row-level freezing
//! - [`text`]: tokenizer, extensible vocabulary, embedding bank, prompts
//! - [`detector`]: text/visual encoders, cross-attention fusion, heads
//! - [`train`]: pretraining, token inversion, prompt tuning, EMA
//! - [`eval`]: COCO-style AP, curves, distractor and context protocols
//! - [`synth`]: deterministic synthetic scene corpus
//! - [`model`]: the bundle tying config, weights, vocabulary together
//! - [`checkpoint`]: binary containers for weights and token banks

pub mod checkpoint;
pub mod detector;
pub mod eval;
pub mod model;
pub mod synth;
pub mod tensor;
pub mod text;
pub mod train;

pub use model::Model;
pub use tensor::{Graph, GradMask, Tensor, Var};
