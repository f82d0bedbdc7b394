//! Dense row-major `f64` tensors.
//!
//! Tensors are immutable values: every operation returns a new tensor and
//! checks its output for NaN/Inf, so non-finite numbers surface as errors
//! at the operation that produced them instead of propagating silently.

use serde::{Deserialize, Deserializer, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TensorError {
    #[error("{op}: shape {got:?} does not match {expected:?}")]
    ShapeMismatch {
        op: &'static str,
        expected: Vec<usize>,
        got: Vec<usize>,
    },
    #[error("matmul: inner dimensions differ ({m}x{k} by {k2}x{n})")]
    InnerDimMismatch { m: usize, k: usize, k2: usize, n: usize },
    #[error("{op}: expected a matrix, got shape {shape:?}")]
    NotAMatrix { op: &'static str, shape: Vec<usize> },
    #[error("{op}: expected {expected} values for shape {shape:?}, got {got}")]
    DataLength {
        op: &'static str,
        shape: Vec<usize>,
        expected: usize,
        got: usize,
    },
    #[error("{op}: produced a non-finite value")]
    NonFinite { op: &'static str },
    #[error("{op}: domain error on input {value}")]
    Domain { op: &'static str, value: f64 },
    #[error("{op}: expected a scalar, got shape {shape:?}")]
    NotScalar { op: &'static str, shape: Vec<usize> },
    #[error("column {col} out of bounds for {cols} columns")]
    ColumnOutOfBounds { col: usize, cols: usize },
}

/// Dense tensor: a shape and row-major values.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    /// Build a tensor after validating that the value count matches the shape.
    pub fn from_vec(shape: Vec<usize>, data: Vec<f64>) -> Result<Self, TensorError> {
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(TensorError::DataLength {
                op: "from_vec",
                expected,
                got: data.len(),
                shape,
            });
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape,
            data: vec![0.0; n],
        }
    }

    pub fn scalar(v: f64) -> Self {
        Tensor {
            shape: vec![1],
            data: vec![v],
        }
    }

    /// n x 1 column from a slice.
    pub fn column(values: &[f64]) -> Self {
        Tensor {
            shape: vec![values.len(), 1],
            data: values.to_vec(),
        }
    }

    /// Matrix from rows; all rows must share a length.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self, TensorError> {
        let n = rows.len();
        let d = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(n * d);
        for row in rows {
            if row.len() != d {
                return Err(TensorError::DataLength {
                    op: "from_rows",
                    shape: vec![n, d],
                    expected: d,
                    got: row.len(),
                });
            }
            data.extend_from_slice(row);
        }
        Ok(Tensor {
            shape: vec![n, d],
            data,
        })
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1
    }

    /// Value of a scalar tensor.
    pub fn scalar_value(&self) -> Result<f64, TensorError> {
        if self.is_scalar() {
            Ok(self.data[0])
        } else {
            Err(TensorError::NotScalar {
                op: "scalar_value",
                shape: self.shape.clone(),
            })
        }
    }

    /// Rows of a 2-D tensor (scalars and vectors are not matrices).
    pub fn rows(&self) -> Result<usize, TensorError> {
        match self.shape.as_slice() {
            [r, _] => Ok(*r),
            _ => Err(TensorError::NotAMatrix {
                op: "rows",
                shape: self.shape.clone(),
            }),
        }
    }

    pub fn cols(&self) -> Result<usize, TensorError> {
        match self.shape.as_slice() {
            [_, c] => Ok(*c),
            _ => Err(TensorError::NotAMatrix {
                op: "cols",
                shape: self.shape.clone(),
            }),
        }
    }

    pub fn get2(&self, i: usize, j: usize) -> f64 {
        let c = self.shape[1];
        self.data[i * c + j]
    }

    /// Row `i` of a matrix as a slice.
    pub fn row(&self, i: usize) -> &[f64] {
        let c = self.shape[1];
        &self.data[i * c..(i + 1) * c]
    }

    pub fn ensure_finite(&self, op: &'static str) -> Result<(), TensorError> {
        if self.data.iter().all(|v| v.is_finite()) {
            Ok(())
        } else {
            Err(TensorError::NonFinite { op })
        }
    }

    /// Matrix product. Inner dimensions must agree.
    pub fn matmul(&self, other: &Tensor) -> Result<Tensor, TensorError> {
        let (m, k) = (self.rows()?, self.cols()?);
        let (k2, n) = (other.rows()?, other.cols()?);
        if k != k2 {
            return Err(TensorError::InnerDimMismatch { m, k, k2, n });
        }
        let mut out = vec![0.0; m * n];
        matmul_into(&self.data, &other.data, &mut out, m, k, n);
        let t = Tensor {
            shape: vec![m, n],
            data: out,
        };
        t.ensure_finite("matmul")?;
        Ok(t)
    }

    pub fn transpose(&self) -> Result<Tensor, TensorError> {
        let (m, n) = (self.rows()?, self.cols()?);
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = self.data[i * n + j];
            }
        }
        Ok(Tensor {
            shape: vec![n, m],
            data: out,
        })
    }

    /// Element-wise binary op on same-shape tensors.
    pub fn zip(&self, other: &Tensor, op: &'static str, mut f: impl FnMut(f64, f64) -> f64) -> Result<Tensor, TensorError> {
        if self.shape != other.shape {
            return Err(TensorError::ShapeMismatch {
                op,
                expected: self.shape.clone(),
                got: other.shape.clone(),
            });
        }
        let data = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| f(*a, *b))
            .collect();
        let t = Tensor {
            shape: self.shape.clone(),
            data,
        };
        t.ensure_finite(op)?;
        Ok(t)
    }

    pub fn add(&self, other: &Tensor) -> Result<Tensor, TensorError> {
        self.zip(other, "add", |a, b| a + b)
    }

    pub fn sub(&self, other: &Tensor) -> Result<Tensor, TensorError> {
        self.zip(other, "sub", |a, b| a - b)
    }

    pub fn mul(&self, other: &Tensor) -> Result<Tensor, TensorError> {
        self.zip(other, "mul", |a, b| a * b)
    }

    /// Element-wise unary map with finiteness check.
    pub fn map(&self, op: &'static str, mut f: impl FnMut(f64) -> f64) -> Result<Tensor, TensorError> {
        let t = Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|v| f(*v)).collect(),
        };
        t.ensure_finite(op)?;
        Ok(t)
    }

    pub fn scale(&self, c: f64) -> Result<Tensor, TensorError> {
        self.map("scale", |v| c * v)
    }

    /// Euclidean norm of all values.
    pub fn norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }
}

fn deserialize_tensor<'de, D: Deserializer<'de>>(d: D) -> Result<Tensor, D::Error> {
    #[derive(Deserialize)]
    struct Raw {
        shape: Vec<usize>,
        data: Vec<f64>,
    }
    let raw = Raw::deserialize(d)?;
    Tensor::from_vec(raw.shape, raw.data).map_err(serde::de::Error::custom)
}

impl<'de> Deserialize<'de> for Tensor {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        deserialize_tensor(d)
    }
}

/// `out += / =` is the caller's job: this always overwrites `out`.
/// Loop order is i-k-j so the inner loop runs over contiguous rows.
pub(crate) fn matmul_into(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    out.fill(0.0);
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        let out_row = &mut out[i * n..(i + 1) * n];
        for (p, &a_ip) in a_row.iter().enumerate() {
            if a_ip == 0.0 {
                continue;
            }
            let b_row = &b[p * n..(p + 1) * n];
            for (o, &b_pj) in out_row.iter_mut().zip(b_row) {
                *o += a_ip * b_pj;
            }
        }
    }
}
