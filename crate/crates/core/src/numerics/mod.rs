//! Dense tensors and reverse-mode differentiation for the small, fixed op set
//! used by the detector and the scoring classifiers.

pub mod gradcheck;
mod params;
mod tape;
mod tensor;

pub use params::{ParamSet, Sgd, CHECKPOINT_VERSION};
pub use tape::{NodeId, RecordEntry, Tape, SQRT_GRAD_FLOOR};
pub use tensor::{Scalar, Tensor};

use thiserror::Error;

#[derive(Debug, Error)]
pub enum NumericsError {
    #[error("invalid shape {0:?}")]
    InvalidShape(Vec<usize>),
    #[error("shape {shape:?} needs {} elements, got {len}", shape.iter().product::<usize>())]
    DataLength { shape: Vec<usize>, len: usize },
    #[error("cannot reshape {from:?} to {to:?}")]
    ReshapeMismatch { from: Vec<usize>, to: Vec<usize> },
    #[error("{op}: shape mismatch {left:?} vs {right:?}")]
    ShapeMismatch {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },
    #[error("{what}: expected {expected}, got {actual}")]
    Dimension {
        what: &'static str,
        expected: usize,
        actual: usize,
    },
    #[error("maxpool2 needs even {dim}, got {extent}")]
    OddPoolExtent { dim: &'static str, extent: usize },
    #[error("concat of zero tensors")]
    EmptyConcat,
    #[error("backward needs a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
    #[error("missing parameter {0}")]
    MissingParam(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl NumericsError {
    pub(crate) fn dim(what: &'static str, expected: usize, actual: usize) -> Self {
        Self::Dimension {
            what,
            expected,
            actual,
        }
    }
}
