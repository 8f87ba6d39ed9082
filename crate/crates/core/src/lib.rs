//! Open-vocabulary scene graph generation toolkit: data model, node matching,
//! relation alignment with distillation, open-vocabulary splits, recall
//! evaluation, caption-based weak supervision and prompt construction.

pub mod alignment;
pub mod error;
pub mod evaluation;
pub mod geometry;
pub mod linalg;
pub mod matching;
pub mod prompt;
pub mod retention;
pub mod splits;
pub mod types;
pub mod weak;

pub use error::{Error, Result};
pub use types::*;
