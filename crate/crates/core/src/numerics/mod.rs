//! Dense `f64` arrays with tape-based reverse-mode differentiation.

mod params;
mod tape;
mod tensor;

pub use params::{Param, ParamId, ParamSet};
pub use tape::{sigmoid, Gradients, Tape, Var, BCE_CLAMP, SIGMOID_CEIL, SIGMOID_FLOOR};
pub use tensor::Tensor;

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NumericsError {
    #[error("{op}: dimension mismatch between {left:?} and {right:?}")]
    Shape {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },
    #[error("{op}: expected rank {expected}, got shape {shape:?}")]
    Rank {
        op: &'static str,
        expected: usize,
        shape: Vec<usize>,
    },
    #[error("{op}: index {index} out of range for extent {bound}")]
    Index {
        op: &'static str,
        index: usize,
        bound: usize,
    },
    #[error("backward needs a one-element loss, got shape {0:?}")]
    NotScalar(Vec<usize>),
    #[error("{0}")]
    Contract(String),
}

/// Central-difference gradient of `f` at `theta`, one coordinate at a time.
pub fn finite_diff_grad<F>(mut f: F, theta: &[f64], eps: f64) -> Vec<f64>
where
    F: FnMut(&[f64]) -> f64,
{
    assert!(eps > 0.0, "finite_diff_grad: eps must be positive");
    let mut point = theta.to_vec();
    (0..theta.len())
        .map(|i| {
            point[i] = theta[i] + eps;
            let up = f(&point);
            point[i] = theta[i] - eps;
            let down = f(&point);
            point[i] = theta[i];
            (up - down) / (2.0 * eps)
        })
        .collect()
}

/// `|a − b| / max(|a| + |b|, floor)`.
pub fn relative_error(a: f64, b: f64, floor: f64) -> f64 {
    (a - b).abs() / (a.abs() + b.abs()).max(floor)
}
