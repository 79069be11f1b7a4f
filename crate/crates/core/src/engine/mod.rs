//! Minimal reverse-mode gradient engine.
//!
//! A [`Tape`] records a fixed set of dense and sparse primitives as they are
//! evaluated eagerly; [`Tape::backward`] walks the record in reverse. Trainable
//! values live in a [`ParamStore`] together with their Adam moments.

mod adam;
mod checkpoint;
mod gradcheck;
mod init;
mod params;
mod sparse;
mod tape;
mod tensor;

pub use adam::{adam_step, AdamConfig};
pub use checkpoint::{
    read_checkpoint, write_checkpoint, Checkpoint, CheckpointError, CHECKPOINT_MAGIC,
};
pub use gradcheck::{grad_check, GradCheckReport, GRAD_CHECK_DENOM_FLOOR};
pub use init::{glorot_uniform, normal_init};
pub use params::{Param, ParamStore};
pub use sparse::Csr;
pub use tape::{Axis, Gradients, Tape, Var};
pub use tensor::Tensor;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum EngineError {
    #[error("{op}: incompatible shapes {left:?} and {right:?}")]
    ShapeMismatch {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },
    #[error("invalid shape {0:?}")]
    InvalidShape(Vec<usize>),
    #[error("shape {shape:?} needs {} values, got {len}", shape.iter().product::<usize>())]
    DataLength { shape: Vec<usize>, len: usize },
    #[error("{op}: {msg}")]
    BadArgument { op: &'static str, msg: String },
    #[error("{op} produced a non-finite value (first at flat index {index})")]
    NonFinite { op: &'static str, index: usize },
    #[error("unknown parameter `{0}`")]
    UnknownParam(String),
    #[error("duplicate parameter `{0}`")]
    DuplicateParam(String),
    #[error("backward called on a non-scalar of shape {0:?}")]
    NonScalarLoss(Vec<usize>),
}
