use serde::{Deserialize, Serialize};

use super::AutodiffError;
use crate::scalar::Scalar;

/// Dense row-major array. A scalar has shape `[1]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor<S> {
    shape: Vec<usize>,
    data: Vec<S>,
}

impl<S: Scalar> Tensor<S> {
    pub fn new(shape: Vec<usize>, data: Vec<S>) -> Result<Self, AutodiffError> {
        if shape.is_empty() || shape.contains(&0) {
            return Err(AutodiffError::ShapeMismatch(format!(
                "shape {shape:?} must be a non-empty list of positive extents"
            )));
        }
        let len: usize = shape.iter().product();
        if len != data.len() {
            return Err(AutodiffError::ShapeMismatch(format!(
                "shape {shape:?} holds {len} entries but {} were given",
                data.len()
            )));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let len = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![S::zero(); len],
        }
    }

    pub fn scalar(value: S) -> Self {
        Self {
            shape: vec![1],
            data: vec![value],
        }
    }

    pub fn vector(data: Vec<S>) -> Self {
        assert!(!data.is_empty(), "vector tensors need at least one entry");
        Self {
            shape: vec![data.len()],
            data,
        }
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<S>) -> Result<Self, AutodiffError> {
        Self::new(vec![rows, cols], data)
    }

    /// Builds a `(rows, width)` matrix from equal-length rows.
    pub fn from_rows<'a, I>(rows: I) -> Result<Self, AutodiffError>
    where
        I: IntoIterator<Item = &'a [S]>,
    {
        let mut data = Vec::new();
        let mut width = None;
        let mut count = 0;
        for row in rows {
            match width {
                None => width = Some(row.len()),
                Some(w) if w != row.len() => {
                    return Err(AutodiffError::ShapeMismatch(format!(
                        "row {count} has {} entries, expected {w}",
                        row.len()
                    )))
                }
                _ => {}
            }
            data.extend_from_slice(row);
            count += 1;
        }
        Self::new(vec![count, width.unwrap_or(0)], data)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[S] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [S] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<S> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1
    }

    /// Value of a one-element tensor.
    pub fn item(&self) -> S {
        debug_assert!(self.is_scalar());
        self.data[0]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn same_shape(&self, other: &Self) -> bool {
        self.shape == other.shape
    }

    pub fn map(&self, f: impl Fn(S) -> S) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn add_assign(&mut self, other: &Self) {
        debug_assert_eq!(self.shape, other.shape);
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub fn fill_zero(&mut self) {
        self.data.iter_mut().for_each(|v| *v = S::zero());
    }

    /// Converts every entry to another scalar type.
    pub fn cast<T: Scalar>(&self) -> Tensor<T> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|v| T::lit(v.widen())).collect(),
        }
    }
}
