//! Zero-shot evaluators over projected embeddings.

mod classify;
mod retrieval;
mod segment;

pub use classify::*;
pub use retrieval::*;
pub use segment::*;

use alloc::string::String;

use thiserror::Error;

use crate::projector::ProjectorError;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum EvalError {
    #[error("label {0:?} is not a known class")]
    UnknownLabel(String),
    #[error("class id {0} has no text prompts")]
    UnknownClass(u32),
    #[error("need at least 2 classes, got {0}")]
    TooFewClasses(usize),
    #[error("class {0:?} has no prompts")]
    EmptyClass(String),
    #[error("{what}: expected {expected}, got {actual}")]
    LengthMismatch {
        what: &'static str,
        expected: usize,
        actual: usize,
    },
    #[error("ground truth has no foreground class")]
    NoForegroundClass,
    #[error("target size {target:?} is smaller than the patch grid {grid:?}")]
    TargetTooSmall {
        target: (usize, usize),
        grid: (usize, usize),
    },
    #[error(transparent)]
    Projector(#[from] ProjectorError),
}
