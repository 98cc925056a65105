use thiserror::Error;

use crate::field::GridShape;

/// Errors produced by the solver library.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("shape mismatch: {left} vs {right}")]
    ShapeMismatch { left: GridShape, right: GridShape },

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("stencil of subdomain {subdomain} reads pixel ({row}, {col}) outside its essential domain")]
    StencilEscape {
        subdomain: usize,
        row: usize,
        col: usize,
    },
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn ensure_same(left: GridShape, right: GridShape) -> Result<()> {
    if left == right {
        Ok(())
    } else {
        Err(Error::ShapeMismatch { left, right })
    }
}
