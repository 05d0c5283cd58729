//! cloze-forge: a desk-scale workbench for bidirectional cloze language
//! modeling and seq2seq distillation.
//!
//! The pieces: a small reverse-mode autodiff engine, attention mask builders
//! with symbolic and numeric correctness oracles, the COR cloze model and its
//! unidirectional ablation, the LST distillation loss, a toy encoder/decoder
//! student over synthetic acoustics, data generators, and a deterministic
//! training loop with checkpoint averaging.

pub mod autodiff;
pub mod block;
pub mod checkpoint;
pub mod cor;
pub mod data;
pub mod decode;
pub mod error;
pub mod loss;
pub mod mask;
pub mod probe;
pub mod s2s;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use tensor::{ComputeConfig, Precision, Tensor};
