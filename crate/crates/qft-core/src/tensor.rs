//! Dense row-major f32 tensors.
//!
//! The whole toolkit works on desk-scale networks, so the representation is
//! deliberately plain: a shape vector plus a flat `Vec<f32>`. All numeric
//! state is 32-bit; the few places that need wider arithmetic (recode
//! rounding, test oracles) widen locally and store back as f32.

use serde::{Deserialize, Serialize};

use crate::error::TensorError;

/// Dense row-major tensor. Invariant: `data.len() == shape.iter().product()`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

impl Tensor {
    pub fn zeros(shape: &[usize]) -> Self {
        let n: usize = shape.iter().product();
        Tensor { shape: shape.to_vec(), data: vec![0.0; n] }
    }

    pub fn filled(shape: &[usize], v: f32) -> Self {
        let n: usize = shape.iter().product();
        Tensor { shape: shape.to_vec(), data: vec![v; n] }
    }

    pub fn scalar(v: f32) -> Self {
        Tensor { shape: vec![1], data: vec![v] }
    }

    /// Construct from external data; shape must match and values must be finite.
    pub fn from_vec(shape: &[usize], data: Vec<f32>) -> Result<Self, TensorError> {
        let n: usize = shape.iter().product();
        if data.len() != n {
            return Err(TensorError::ShapeDataMismatch { expected: n, got: data.len() });
        }
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(TensorError::NonFinite { index: i });
        }
        Ok(Tensor { shape: shape.to_vec(), data })
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn is_scalar(&self) -> bool {
        self.numel() == 1
    }

    /// Size of one dimension, or 1 past the rank (broadcast convention).
    pub fn dim(&self, axis: usize) -> usize {
        self.shape.get(axis).copied().unwrap_or(1)
    }

    /// Product of dimensions before `axis` / after `axis`. Used by the
    /// per-channel broadcast kernels.
    pub fn split_at_axis(&self, axis: usize) -> (usize, usize, usize) {
        let outer: usize = self.shape[..axis].iter().product();
        let ch = self.shape[axis];
        let inner: usize = self.shape[axis + 1..].iter().product();
        (outer, ch, inner)
    }
}

/// Round half away from zero. This is the single rounding rule of the whole
/// toolkit; every quantizer and the integer pipeline must agree on it.
#[inline]
pub fn round_half_away(x: f64) -> f64 {
    if x >= 0.0 {
        (x + 0.5).floor()
    } else {
        (x - 0.5).ceil()
    }
}

#[inline]
pub fn round_half_away_f32(x: f32) -> f32 {
    round_half_away(x as f64) as f32
}
