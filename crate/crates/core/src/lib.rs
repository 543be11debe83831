//! Vision Mamba image classification: tensors with reverse-mode
//! differentiation, the bidirectional selective-scan encoder, data
//! ingestion and splitting, training with transfer-learning strategies,
//! and the evaluation/complexity reporting suite.

pub mod data;
pub mod error;
pub mod eval;
mod fsutil;
pub mod model;
pub mod ssm;
pub mod tensor;
pub mod train;

pub use error::{CheckpointError, DataError, Result, VimError};
pub use fsutil::write_atomic;
pub use tensor::{Float, Tape, Tensor, Var};
