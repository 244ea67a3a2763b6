//! Differentiable dense-tensor substrate.

mod checkpoint;
mod gradcheck;
mod graph;
pub mod nn;
mod params;
mod rng;
mod tensor;

pub use checkpoint::{Checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use gradcheck::{grad_check, GradCheckOptions, GradCheckReport, ParamGradError};
pub use graph::{Graph, Var, LAYER_NORM_EPS};
pub use params::{normal_init, ParamId, ParamStore, Parameter};
pub use rng::RngState;
pub use tensor::Tensor;

pub(crate) use graph::softmax_row;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum NumericsError {
    #[error("{op}: shape mismatch between {lhs:?} and {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("invalid shape {shape:?}: dimensions must be positive")]
    InvalidShape { shape: Vec<usize> },
    #[error("shape {shape:?} needs {} values, got {len}", shape.iter().product::<usize>())]
    DataLength { shape: Vec<usize>, len: usize },
    #[error("{op}: axis {axis} out of range for rank {rank}")]
    InvalidAxis {
        op: &'static str,
        axis: usize,
        rank: usize,
    },
    #[error("{op}: {detail}")]
    OutOfRange { op: &'static str, detail: String },
    #[error("configuration error: {0}")]
    Config(String),
    #[error("expected a scalar (1x1) value, got shape {shape:?}")]
    NotScalar { shape: Vec<usize> },
    #[error("parameter {0:?} registered twice")]
    DuplicateParam(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("{path}: {source}")]
    Path {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Softmax of a plain slice, outside any graph.
pub fn softmax(x: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; x.len()];
    softmax_row(x, &mut out);
    out
}

#[cfg(test)]
mod tests;
