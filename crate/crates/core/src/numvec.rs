//! Flat parameter vectors and the tensor layout that slices them.
//!
//! Every model parameter, client update, stored table slot and pseudo-gradient
//! in the simulator is a [`ParamVector`]. All arithmetic is 64-bit; the quant
//! module is the only place precision is reduced on purpose.

use std::ops::{Deref, Index};
use std::slice::SliceIndex;

use serde::{Deserialize, Serialize};

use crate::error::{FedError, Result};

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ParamVector(Vec<f64>);

impl ParamVector {
    pub fn new(values: Vec<f64>) -> Self {
        ParamVector(values)
    }

    pub fn zeros(len: usize) -> Self {
        ParamVector(vec![0.0; len])
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.0
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().all(|v| v.is_finite())
    }

    pub fn check_len(&self, expected: usize) -> Result<()> {
        if self.0.len() != expected {
            return Err(FedError::Dimension {
                expected,
                found: self.0.len(),
            });
        }
        Ok(())
    }

    /// Returns `self * factor` as a new vector.
    pub fn scaled(&self, factor: f64) -> ParamVector {
        ParamVector(self.0.iter().map(|v| v * factor).collect())
    }

    /// Returns `self - other`.
    pub fn sub(&self, other: &ParamVector) -> Result<ParamVector> {
        axpy(-1.0, other, self)
    }

    /// In-place `self += a * x`, for accumulation loops where the length was
    /// validated up front.
    pub fn add_scaled(&mut self, a: f64, x: &[f64]) {
        debug_assert_eq!(self.0.len(), x.len());
        for (s, v) in self.0.iter_mut().zip(x) {
            *s += a * v;
        }
    }

    pub fn max_abs_diff(&self, other: &ParamVector) -> f64 {
        self.0
            .iter()
            .zip(&other.0)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    pub fn sum(&self) -> f64 {
        self.0.iter().sum()
    }
}

impl From<Vec<f64>> for ParamVector {
    fn from(values: Vec<f64>) -> Self {
        ParamVector(values)
    }
}

impl Deref for ParamVector {
    type Target = [f64];

    fn deref(&self) -> &[f64] {
        &self.0
    }
}

impl<I: SliceIndex<[f64]>> Index<I> for ParamVector {
    type Output = I::Output;

    fn index(&self, i: I) -> &I::Output {
        &self.0[i]
    }
}

fn same_len(x: &[f64], y: &[f64]) -> Result<()> {
    if x.len() != y.len() {
        return Err(FedError::Dimension {
            expected: x.len(),
            found: y.len(),
        });
    }
    Ok(())
}

/// `a * x + y`, elementwise.
pub fn axpy(a: f64, x: &ParamVector, y: &ParamVector) -> Result<ParamVector> {
    same_len(x, y)?;
    Ok(ParamVector(
        x.iter().zip(y.iter()).map(|(xi, yi)| a * xi + yi).collect(),
    ))
}

/// Euclidean norm.
pub fn norm2(x: &ParamVector) -> f64 {
    x.iter().map(|v| v * v).sum::<f64>().sqrt()
}

pub fn hadamard(x: &ParamVector, y: &ParamVector) -> Result<ParamVector> {
    same_len(x, y)?;
    Ok(ParamVector(
        x.iter().zip(y.iter()).map(|(a, b)| a * b).collect(),
    ))
}

/// Shapes of the individual tensors packed into a flat [`ParamVector`].
///
/// Per-tensor quantization scales are computed over these slices.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TensorLayout {
    shapes: Vec<Vec<usize>>,
    offsets: Vec<usize>,
    total: usize,
}

impl TensorLayout {
    pub fn new(shapes: Vec<Vec<usize>>) -> Result<Self> {
        if shapes.is_empty() {
            return Err(FedError::invalid("layout needs at least one tensor"));
        }
        let mut offsets = Vec::with_capacity(shapes.len());
        let mut total = 0usize;
        for shape in &shapes {
            let count: usize = shape.iter().product();
            if shape.is_empty() || count == 0 {
                return Err(FedError::invalid(format!(
                    "tensor shape {shape:?} has no elements"
                )));
            }
            offsets.push(total);
            total += count;
        }
        Ok(TensorLayout {
            shapes,
            offsets,
            total,
        })
    }

    /// A single rank-1 tensor covering the whole vector.
    pub fn flat(len: usize) -> Result<Self> {
        Self::new(vec![vec![len]])
    }

    pub fn len(&self) -> usize {
        self.total
    }

    pub fn is_empty(&self) -> bool {
        self.total == 0
    }

    pub fn num_tensors(&self) -> usize {
        self.shapes.len()
    }

    pub fn shapes(&self) -> &[Vec<usize>] {
        &self.shapes
    }

    pub fn offsets(&self) -> &[usize] {
        &self.offsets
    }

    /// Element range of tensor `i` inside the flat vector.
    pub fn range(&self, i: usize) -> std::ops::Range<usize> {
        let start = self.offsets[i];
        let end = self
            .offsets
            .get(i + 1)
            .copied()
            .unwrap_or(self.total);
        start..end
    }
}
