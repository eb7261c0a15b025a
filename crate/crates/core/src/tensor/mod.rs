//! Dense row-major `f64` tensors, a tape for reverse-mode differentiation and
//! seeded counter-based random streams.
//!
//! Everything above this module (the quadratic simulators excepted) computes
//! on these types. Tensors are immutable once built; a [`Tape`] records one
//! forward computation and is owned by a single thread.

mod gradcheck;
mod rng;
mod tape;

pub use gradcheck::{finite_diff_check, finite_diff_report, GradCheckReport};
pub use rng::{streams, RngStream};
pub use tape::{Gradients, ParamId, RowRotation, Tape, Var};

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TensorError {
    #[error("shape error in {op}: {detail}")]
    Shape { op: &'static str, detail: String },
    #[error("non-finite value produced by {op}")]
    NonFinite { op: &'static str },
    #[error("tape invariant violated: node {node} references later node {parent}")]
    Cycle { node: usize, parent: usize },
    #[error("loss function is not deterministic: {first} != {second}")]
    Determinism { first: f64, second: f64 },
    #[error("finite-difference step {0} outside (0, 1e-2]")]
    InvalidStep(f64),
}

pub(crate) fn shape_err(op: &'static str, detail: impl Into<String>) -> TensorError {
    TensorError::Shape {
        op,
        detail: detail.into(),
    }
}

/// Row-major dense tensor of `f64` values.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
    requires_grad: bool,
}

impl Tensor {
    /// Builds a tensor, checking that the shape matches the data length and
    /// that all values are finite.
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self, TensorError> {
        if shape.contains(&0) {
            return Err(shape_err(
                "new",
                format!("zero-sized dimension in {shape:?}"),
            ));
        }
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(shape_err(
                "new",
                format!("shape {shape:?} needs {n} values, got {}", data.len()),
            ));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(TensorError::NonFinite { op: "new" });
        }
        Ok(Self {
            shape,
            data,
            requires_grad: false,
        })
    }

    pub fn scalar(value: f64) -> Self {
        Self {
            shape: vec![1],
            data: vec![value],
            requires_grad: false,
        }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![0.0; n],
            requires_grad: false,
        }
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for c in 0..cols {
                data.push(f(r, c));
            }
        }
        Self {
            shape: vec![rows, cols],
            data,
            requires_grad: false,
        }
    }

    /// Matrix whose entries are standard normal draws times `scale`.
    pub fn randn(rows: usize, cols: usize, scale: f64, rng: &mut RngStream) -> Self {
        Self::from_fn(rows, cols, |_, _| scale * rng.normal())
    }

    /// Marks the tensor as a trainable leaf.
    pub fn with_grad(mut self) -> Self {
        self.requires_grad = true;
        self
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
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

    /// Rows of a 2-D tensor (1-D tensors count as a single row).
    pub fn rows(&self) -> usize {
        match self.shape.len() {
            1 => 1,
            _ => self.shape[0],
        }
    }

    pub fn cols(&self) -> usize {
        *self.shape.last().unwrap_or(&1)
    }

    pub fn at(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols() + c]
    }

    pub fn row(&self, r: usize) -> &[f64] {
        let c = self.cols();
        &self.data[r * c..(r + 1) * c]
    }

    pub fn reshape(&self, shape: Vec<usize>) -> Result<Self, TensorError> {
        let n: usize = shape.iter().product();
        if n != self.data.len() {
            return Err(shape_err(
                "reshape",
                format!("{:?} -> {shape:?}", self.shape),
            ));
        }
        Ok(Self {
            shape,
            data: self.data.clone(),
            requires_grad: self.requires_grad,
        })
    }

    /// Same shape, new values.
    pub fn with_data(&self, data: Vec<f64>) -> Result<Self, TensorError> {
        let mut t = Tensor::new(self.shape.clone(), data)?;
        t.requires_grad = self.requires_grad;
        Ok(t)
    }

    pub fn norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn scale(&self, c: f64) -> Self {
        let mut out = self.clone();
        out.data.iter_mut().for_each(|v| *v *= c);
        out
    }

    pub fn add(&self, other: &Tensor) -> Result<Self, TensorError> {
        self.zip(other, "add", |a, b| a + b)
    }

    pub fn sub(&self, other: &Tensor) -> Result<Self, TensorError> {
        self.zip(other, "sub", |a, b| a - b)
    }

    fn zip(
        &self,
        other: &Tensor,
        op: &'static str,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Self, TensorError> {
        if self.shape != other.shape {
            return Err(shape_err(
                op,
                format!("{:?} vs {:?}", self.shape, other.shape),
            ));
        }
        Ok(Self {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
            requires_grad: false,
        })
    }

    /// `self · other` for 2-D operands.
    pub fn matmul(&self, other: &Tensor) -> Result<Self, TensorError> {
        let (m, k) = (self.rows(), self.cols());
        let (k2, n) = (other.rows(), other.cols());
        if k != k2 {
            return Err(shape_err(
                "matmul",
                format!("{:?} x {:?}", self.shape, other.shape),
            ));
        }
        Ok(Self {
            shape: vec![m, n],
            data: kernels::matmul(&self.data, &other.data, m, k, n),
            requires_grad: false,
        })
    }

    /// `self · otherᵀ` for 2-D operands.
    pub fn matmul_nt(&self, other: &Tensor) -> Result<Self, TensorError> {
        let (m, k) = (self.rows(), self.cols());
        let (n, k2) = (other.rows(), other.cols());
        if k != k2 {
            return Err(shape_err(
                "matmul_nt",
                format!("{:?} x {:?}ᵀ", self.shape, other.shape),
            ));
        }
        Ok(Self {
            shape: vec![m, n],
            data: kernels::matmul_nt(&self.data, &other.data, m, k, n),
            requires_grad: false,
        })
    }

    pub fn transpose(&self) -> Self {
        let (r, c) = (self.rows(), self.cols());
        Self {
            shape: vec![c, r],
            data: kernels::transpose(&self.data, r, c),
            requires_grad: false,
        }
    }

    /// Stacks 2-D tensors with equal column counts on top of each other.
    pub fn concat_rows(parts: &[&Tensor]) -> Result<Self, TensorError> {
        let first = parts
            .first()
            .ok_or_else(|| shape_err("concat_rows", "no parts"))?;
        let cols = first.cols();
        let mut data = Vec::new();
        let mut rows = 0;
        for p in parts {
            if p.cols() != cols {
                return Err(shape_err("concat_rows", "column mismatch"));
            }
            rows += p.rows();
            data.extend_from_slice(&p.data);
        }
        Ok(Self {
            shape: vec![rows, cols],
            data,
            requires_grad: false,
        })
    }

    /// Rows `idx` of a 2-D tensor, in the given order.
    pub fn gather_rows(&self, idx: &[usize]) -> Result<Self, TensorError> {
        let cols = self.cols();
        if idx.is_empty() {
            return Err(shape_err("gather_rows", "empty row selection"));
        }
        let mut data = Vec::with_capacity(idx.len() * cols);
        for &r in idx {
            if r >= self.rows() {
                return Err(shape_err("gather_rows", format!("row {r} out of range")));
            }
            data.extend_from_slice(self.row(r));
        }
        Ok(Self {
            shape: vec![idx.len(), cols],
            data,
            requires_grad: false,
        })
    }
}

pub(crate) mod kernels {
    pub fn matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let orow = &mut out[i * n..(i + 1) * n];
            for p in 0..k {
                let av = a[i * k + p];
                if av == 0.0 {
                    continue;
                }
                let brow = &b[p * n..(p + 1) * n];
                for (o, &bv) in orow.iter_mut().zip(brow) {
                    *o += av * bv;
                }
            }
        }
        out
    }

    pub fn matmul_nt(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let arow = &a[i * k..(i + 1) * k];
            for j in 0..n {
                let brow = &b[j * k..(j + 1) * k];
                out[i * n + j] = arow.iter().zip(brow).map(|(x, y)| x * y).sum();
            }
        }
        out
    }

    /// `aᵀ · b` where `a` is m×k and `b` is m×n.
    pub fn matmul_tn(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
        let mut out = vec![0.0; k * n];
        for i in 0..m {
            let brow = &b[i * n..(i + 1) * n];
            for p in 0..k {
                let av = a[i * k + p];
                if av == 0.0 {
                    continue;
                }
                let orow = &mut out[p * n..(p + 1) * n];
                for (o, &bv) in orow.iter_mut().zip(brow) {
                    *o += av * bv;
                }
            }
        }
        out
    }

    pub fn transpose(a: &[f64], r: usize, c: usize) -> Vec<f64> {
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = a[i * c + j];
            }
        }
        out
    }
}
