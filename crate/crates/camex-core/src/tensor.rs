//! Dense n-dimensional `f64` tensors with row-major storage.
//!
//! `Tensor` is a plain value type: cloning copies the buffer and instances are
//! freely movable across threads. The autodiff graph (see [`crate::autodiff`])
//! stores tensors by value; parameters owned by a model carry an optional
//! gradient buffer that optimizers accumulate into.
//!
//! Shape conventions used throughout the crate:
//! - scalars have shape `[]` (one element),
//! - matrices are `[rows, cols]`,
//! - reshape and permute never reorder the underlying row-major layout except
//!   as implied by the axis permutation itself.

use crate::error::{CamexError, Result};
use rand::Rng;

/// Dense row-major tensor of `f64` values.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
    /// Whether gradients should be tracked when this tensor is registered as a
    /// graph leaf.
    pub requires_grad: bool,
    /// Accumulated gradient for parameter tensors; same length as `data`.
    pub grad: Option<Vec<f64>>,
}

fn numel_of(shape: &[usize]) -> usize {
    shape.iter().product()
}

impl Tensor {
    /// Builds a tensor from a shape and row-major data buffer.
    pub fn from_vec(shape: Vec<usize>, data: Vec<f64>) -> Result<Tensor> {
        if numel_of(&shape) != data.len() {
            return Err(CamexError::InvalidShape {
                op: "from_vec",
                shape,
                detail: format!("data length {} does not match shape volume", data.len()),
            });
        }
        Ok(Tensor {
            shape,
            data,
            requires_grad: false,
            grad: None,
        })
    }

    /// All-zero tensor of the given shape.
    pub fn zeros(shape: Vec<usize>) -> Tensor {
        let n = numel_of(&shape);
        Tensor {
            shape,
            data: vec![0.0; n],
            requires_grad: false,
            grad: None,
        }
    }

    /// All-one tensor of the given shape.
    pub fn ones(shape: Vec<usize>) -> Tensor {
        Tensor::full(shape, 1.0)
    }

    /// Constant-filled tensor of the given shape.
    pub fn full(shape: Vec<usize>, value: f64) -> Tensor {
        let n = numel_of(&shape);
        Tensor {
            shape,
            data: vec![value; n],
            requires_grad: false,
            grad: None,
        }
    }

    /// Rank-0 scalar.
    pub fn scalar(value: f64) -> Tensor {
        Tensor {
            shape: vec![],
            data: vec![value],
            requires_grad: false,
            grad: None,
        }
    }

    /// Identity matrix of size `n`.
    pub fn eye(n: usize) -> Tensor {
        let mut t = Tensor::zeros(vec![n, n]);
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        t
    }

    /// Tensor with entries drawn i.i.d. from a normal distribution with the
    /// given standard deviation. Sampling uses the Box-Muller transform so the
    /// stream depends only on the supplied generator.
    pub fn randn<R: Rng>(shape: Vec<usize>, std: f64, rng: &mut R) -> Tensor {
        let n = numel_of(&shape);
        let mut data = Vec::with_capacity(n);
        while data.len() < n {
            let u1: f64 = rng.gen_range(f64::EPSILON..1.0);
            let u2: f64 = rng.gen_range(0.0..1.0);
            let r = (-2.0 * u1.ln()).sqrt();
            let theta = 2.0 * std::f64::consts::PI * u2;
            data.push(std * r * theta.cos());
            if data.len() < n {
                data.push(std * r * theta.sin());
            }
        }
        Tensor {
            shape,
            data,
            requires_grad: false,
            grad: None,
        }
    }

    /// Tensor with entries drawn i.i.d. uniformly from `[lo, hi)`.
    pub fn rand_uniform<R: Rng>(shape: Vec<usize>, lo: f64, hi: f64, rng: &mut R) -> Tensor {
        let n = numel_of(&shape);
        let data = (0..n).map(|_| rng.gen_range(lo..hi)).collect();
        Tensor {
            shape,
            data,
            requires_grad: false,
            grad: None,
        }
    }

    /// Marks the tensor as a trainable parameter.
    pub fn with_grad(mut self) -> Tensor {
        self.requires_grad = true;
        self
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

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    /// True when the tensor holds exactly one element.
    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1
    }

    /// The single element of a one-element tensor.
    pub fn scalar_value(&self) -> Result<f64> {
        if !self.is_scalar() {
            return Err(CamexError::InvalidShape {
                op: "scalar_value",
                shape: self.shape.clone(),
                detail: "expected exactly one element".into(),
            });
        }
        Ok(self.data[0])
    }

    /// Element accessor for rank-2 tensors.
    pub fn at2(&self, i: usize, j: usize) -> f64 {
        debug_assert_eq!(self.rank(), 2);
        self.data[i * self.shape[1] + j]
    }

    /// True when every element is finite.
    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Returns a reshaped copy; the row-major element order is preserved.
    pub fn reshape(&self, shape: Vec<usize>) -> Result<Tensor> {
        if numel_of(&shape) != self.data.len() {
            return Err(CamexError::InvalidShape {
                op: "reshape",
                shape,
                detail: format!("cannot hold {} elements", self.data.len()),
            });
        }
        Ok(Tensor {
            shape,
            data: self.data.clone(),
            requires_grad: false,
            grad: None,
        })
    }

    /// Row-major strides for this shape.
    fn strides(&self) -> Vec<usize> {
        strides_of(&self.shape)
    }

    /// Permutes the axes; `axes` must be a permutation of `0..rank`.
    pub fn permute(&self, axes: &[usize]) -> Result<Tensor> {
        let r = self.rank();
        if axes.len() != r || !is_permutation(axes, r) {
            return Err(CamexError::InvalidShape {
                op: "permute",
                shape: self.shape.clone(),
                detail: format!("axes {axes:?} is not a permutation of 0..{r}"),
            });
        }
        let out_shape: Vec<usize> = axes.iter().map(|&a| self.shape[a]).collect();
        let in_strides = self.strides();
        // Stride of output axis k in the input buffer.
        let mapped: Vec<usize> = axes.iter().map(|&a| in_strides[a]).collect();
        let mut out = Tensor::zeros(out_shape.clone());
        let n = self.data.len();
        let mut idx = vec![0usize; r];
        for lin in 0..n {
            let mut src = 0;
            for k in 0..r {
                src += idx[k] * mapped[k];
            }
            out.data[lin] = self.data[src];
            // Advance the output multi-index in row-major order.
            for k in (0..r).rev() {
                idx[k] += 1;
                if idx[k] < out_shape[k] {
                    break;
                }
                idx[k] = 0;
            }
        }
        Ok(out)
    }

    /// Matrix transpose for rank-2 tensors.
    pub fn transpose(&self) -> Result<Tensor> {
        if self.rank() != 2 {
            return Err(CamexError::InvalidShape {
                op: "transpose",
                shape: self.shape.clone(),
                detail: "expected a rank-2 tensor".into(),
            });
        }
        self.permute(&[1, 0])
    }

    /// Matrix product of two rank-2 tensors.
    pub fn matmul(&self, other: &Tensor) -> Result<Tensor> {
        if self.rank() != 2 || other.rank() != 2 || self.shape[1] != other.shape[0] {
            return Err(CamexError::ShapeMismatch {
                op: "matmul",
                lhs: self.shape.clone(),
                rhs: other.shape.clone(),
            });
        }
        let (m, k) = (self.shape[0], self.shape[1]);
        let n = other.shape[1];
        let mut out = Tensor::zeros(vec![m, n]);
        for i in 0..m {
            for p in 0..k {
                let a = self.data[i * k + p];
                if a == 0.0 {
                    continue;
                }
                let row = &other.data[p * n..(p + 1) * n];
                let dst = &mut out.data[i * n..(i + 1) * n];
                for j in 0..n {
                    dst[j] += a * row[j];
                }
            }
        }
        Ok(out)
    }

    /// Elementwise binary map over same-shape tensors.
    pub fn zip(&self, other: &Tensor, op: &'static str, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        if self.shape != other.shape {
            return Err(CamexError::ShapeMismatch {
                op,
                lhs: self.shape.clone(),
                rhs: other.shape.clone(),
            });
        }
        let data = self
            .data
            .iter()
            .zip(other.data.iter())
            .map(|(&a, &b)| f(a, b))
            .collect();
        Ok(Tensor {
            shape: self.shape.clone(),
            data,
            requires_grad: false,
            grad: None,
        })
    }

    /// Elementwise unary map.
    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&a| f(a)).collect(),
            requires_grad: false,
            grad: None,
        }
    }

    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        self.zip(other, "add", |a, b| a + b)
    }

    pub fn sub(&self, other: &Tensor) -> Result<Tensor> {
        self.zip(other, "sub", |a, b| a - b)
    }

    pub fn mul(&self, other: &Tensor) -> Result<Tensor> {
        self.zip(other, "mul", |a, b| a * b)
    }

    pub fn scale(&self, c: f64) -> Tensor {
        self.map(|a| a * c)
    }

    /// Sum of all elements.
    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    /// Sum along one axis of a rank-2 tensor, producing a rank-1 tensor.
    pub fn sum_axis(&self, axis: usize) -> Result<Tensor> {
        if self.rank() != 2 || axis > 1 {
            return Err(CamexError::InvalidShape {
                op: "sum_axis",
                shape: self.shape.clone(),
                detail: format!("axis {axis} on a rank-{} tensor", self.rank()),
            });
        }
        let (r, c) = (self.shape[0], self.shape[1]);
        if axis == 0 {
            let mut out = Tensor::zeros(vec![c]);
            for i in 0..r {
                for j in 0..c {
                    out.data[j] += self.data[i * c + j];
                }
            }
            Ok(out)
        } else {
            let mut out = Tensor::zeros(vec![r]);
            for i in 0..r {
                for j in 0..c {
                    out.data[i] += self.data[i * c + j];
                }
            }
            Ok(out)
        }
    }

    /// Softmax along the last axis. Inputs must be finite.
    pub fn softmax_last(&self) -> Result<Tensor> {
        if self.rank() == 0 {
            return Err(CamexError::InvalidShape {
                op: "softmax",
                shape: self.shape.clone(),
                detail: "requires rank >= 1".into(),
            });
        }
        if !self.all_finite() {
            return Err(CamexError::Numeric {
                op: "softmax",
                detail: "non-finite input".into(),
            });
        }
        let width = *self.shape.last().unwrap();
        if width == 0 {
            return Err(CamexError::InvalidShape {
                op: "softmax",
                shape: self.shape.clone(),
                detail: "last axis has zero extent".into(),
            });
        }
        let mut out = self.clone();
        out.requires_grad = false;
        out.grad = None;
        for slice in out.data.chunks_mut(width) {
            let max = slice.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut total = 0.0;
            for v in slice.iter_mut() {
                *v = (*v - max).exp();
                total += *v;
            }
            for v in slice.iter_mut() {
                *v /= total;
            }
        }
        Ok(out)
    }

    /// Selects rows of a rank-2 tensor: `out[t, :] = self[idx[t], :]`.
    pub fn gather_rows(&self, idx: &[usize]) -> Result<Tensor> {
        if self.rank() != 2 {
            return Err(CamexError::InvalidShape {
                op: "gather_rows",
                shape: self.shape.clone(),
                detail: "expected a rank-2 tensor".into(),
            });
        }
        let (r, c) = (self.shape[0], self.shape[1]);
        let mut out = Tensor::zeros(vec![idx.len(), c]);
        for (t, &i) in idx.iter().enumerate() {
            if i >= r {
                return Err(CamexError::IndexOutOfBounds {
                    op: "gather_rows",
                    index: i,
                    bound: r,
                });
            }
            out.data[t * c..(t + 1) * c].copy_from_slice(&self.data[i * c..(i + 1) * c]);
        }
        Ok(out)
    }

    /// Picks one element per row: `out[t] = self[t, idx[t]]`.
    pub fn gather_per_row(&self, idx: &[usize]) -> Result<Tensor> {
        if self.rank() != 2 || self.shape[0] != idx.len() {
            return Err(CamexError::InvalidShape {
                op: "gather_per_row",
                shape: self.shape.clone(),
                detail: format!("expected [{}, cols]", idx.len()),
            });
        }
        let c = self.shape[1];
        let mut out = Tensor::zeros(vec![idx.len()]);
        for (t, &j) in idx.iter().enumerate() {
            if j >= c {
                return Err(CamexError::IndexOutOfBounds {
                    op: "gather_per_row",
                    index: j,
                    bound: c,
                });
            }
            out.data[t] = self.data[t * c + j];
        }
        Ok(out)
    }

    /// Indices of the `k` largest entries of a rank-1 tensor, in descending
    /// value order. Ties are broken toward the lowest index.
    pub fn topk_indices(&self, k: usize) -> Result<Vec<usize>> {
        if self.rank() != 1 {
            return Err(CamexError::InvalidShape {
                op: "topk_indices",
                shape: self.shape.clone(),
                detail: "expected a rank-1 tensor".into(),
            });
        }
        topk_slice(&self.data, k, self.data.len())
    }

    /// Row-wise top-k indices for a rank-2 tensor.
    pub fn topk_rows(&self, k: usize) -> Result<Vec<Vec<usize>>> {
        if self.rank() != 2 {
            return Err(CamexError::InvalidShape {
                op: "topk_rows",
                shape: self.shape.clone(),
                detail: "expected a rank-2 tensor".into(),
            });
        }
        let c = self.shape[1];
        self.data
            .chunks(c)
            .map(|row| topk_slice(row, k, c))
            .collect()
    }

    /// Largest absolute elementwise difference; shapes must match.
    pub fn max_abs_diff(&self, other: &Tensor) -> Result<f64> {
        if self.shape != other.shape {
            return Err(CamexError::ShapeMismatch {
                op: "max_abs_diff",
                lhs: self.shape.clone(),
                rhs: other.shape.clone(),
            });
        }
        Ok(self
            .data
            .iter()
            .zip(other.data.iter())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max))
    }

    /// True when both tensors hold bit-identical data and equal shapes.
    pub fn bits_eq(&self, other: &Tensor) -> bool {
        self.shape == other.shape
            && self
                .data
                .iter()
                .zip(other.data.iter())
                .all(|(a, b)| a.to_bits() == b.to_bits())
    }

    /// Lazily allocates the gradient buffer and accumulates into it.
    pub fn accumulate_grad(&mut self, contribution: &[f64]) {
        let grad = self.grad.get_or_insert_with(|| vec![0.0; self.data.len()]);
        debug_assert_eq!(grad.len(), contribution.len());
        for (g, c) in grad.iter_mut().zip(contribution) {
            *g += c;
        }
    }

    /// Clears the gradient buffer to zeros (allocating it if absent).
    pub fn zero_grad(&mut self) {
        match &mut self.grad {
            Some(g) => g.iter_mut().for_each(|v| *v = 0.0),
            None => self.grad = Some(vec![0.0; self.data.len()]),
        }
    }
}

/// Row-major strides for a shape.
pub fn strides_of(shape: &[usize]) -> Vec<usize> {
    let mut strides = vec![1usize; shape.len()];
    for k in (0..shape.len().saturating_sub(1)).rev() {
        strides[k] = strides[k + 1] * shape[k + 1];
    }
    strides
}

fn is_permutation(axes: &[usize], rank: usize) -> bool {
    let mut seen = vec![false; rank];
    for &a in axes {
        if a >= rank || seen[a] {
            return false;
        }
        seen[a] = true;
    }
    true
}

fn topk_slice(values: &[f64], k: usize, width: usize) -> Result<Vec<usize>> {
    if k == 0 || k > width {
        return Err(CamexError::Contract {
            detail: format!("top-k requires 1 <= k <= {width}, got k = {k}"),
        });
    }
    let mut idx: Vec<usize> = (0..width).collect();
    // Descending by value, ascending by index among ties.
    idx.sort_by(|&a, &b| {
        values[b]
            .partial_cmp(&values[a])
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.cmp(&b))
    });
    idx.truncate(k);
    Ok(idx)
}
