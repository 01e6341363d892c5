//! Reverse-mode automatic differentiation over a recorded operation graph.
//!
//! A [`Graph`] is a single-threaded arena of nodes recorded in execution
//! order; [`Var`] is an index into that arena. Backward walks the tape once in
//! reverse, accumulating gradients with `+=` semantics: repeated `backward`
//! calls keep accumulating until [`Graph::zero_grad`] clears the buffers.
//!
//! The primitive set is closed and deliberately small. Everything else
//! (activations, losses, pooling) is composed from these primitives, so a
//! finite-difference check of the primitives covers the compositions too.
//! Broadcasting is limited to scalars and one trailing/leading-axis form each:
//! [`Graph::add_rowvec`] (bias add) and [`Graph::scale_rows`] (per-row gate).

use crate::error::{CamexError, Result};
use crate::tensor::{strides_of, Tensor};

/// Handle to a node in a [`Graph`]. Only valid for the graph that created it.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(pub(crate) usize);

// Every op records its operands so the tape stays self-describing in debug
// output, even for the few rules (detach, sign, add-scalar) whose backward
// pass never consults them.
#[allow(dead_code)]
#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Detach(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddScalar(Var, f64),
    MulScalar(Var, f64),
    /// Elementwise product with a one-element graph value.
    Scale(Var, Var),
    /// `[r, c] + [c]`, the vector added to every row.
    AddRowVec(Var, Var),
    /// `[r, c]` with row `i` multiplied by `v[i]`.
    ScaleRows(Var, Var),
    Matmul(Var, Var),
    Reshape(Var),
    Permute(Var, Vec<usize>),
    SumAll(Var),
    SumAxis(Var, usize),
    MeanAxis(Var, usize),
    /// Softmax along the last axis.
    Softmax(Var),
    Log(Var),
    Exp(Var),
    Sign(Var),
    Abs(Var),
    GatherRows(Var, Vec<usize>),
    GatherPerRow(Var, Vec<usize>),
}

#[derive(Debug)]
struct Node {
    op: Op,
    value: Tensor,
    needs_grad: bool,
}

/// Recorded computation for one forward pass.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
}

impl Graph {
    pub fn new() -> Graph {
        Graph::default()
    }

    /// Number of recorded nodes.
    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, op: Op, value: Tensor, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            op,
            value,
            needs_grad,
        });
        self.grads.push(None);
        Var(self.nodes.len() - 1)
    }

    fn check(&self, v: Var) {
        assert!(
            v.0 < self.nodes.len(),
            "Var({}) does not belong to this graph (len {})",
            v.0,
            self.nodes.len()
        );
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// Registers a leaf. Gradients are tracked when `t.requires_grad` is set.
    pub fn leaf(&mut self, t: Tensor) -> Var {
        let needs = t.requires_grad;
        self.push(Op::Leaf, t, needs)
    }

    /// Registers a trainable leaf (a copy of `t` with gradients tracked).
    pub fn param(&mut self, t: &Tensor) -> Var {
        let mut c = t.clone();
        c.requires_grad = true;
        self.leaf(c)
    }

    /// Registers a non-trainable leaf.
    pub fn constant(&mut self, t: Tensor) -> Var {
        let mut c = t;
        c.requires_grad = false;
        self.leaf(c)
    }

    /// Non-trainable scalar leaf.
    pub fn scalar(&mut self, v: f64) -> Var {
        self.constant(Tensor::scalar(v))
    }

    /// The forward value of a node.
    pub fn value(&self, v: Var) -> &Tensor {
        self.check(v);
        &self.nodes[v.0].value
    }

    /// Accumulated gradient of a node as a tensor, if any was produced.
    pub fn grad(&self, v: Var) -> Option<Tensor> {
        self.check(v);
        self.grads[v.0].as_ref().map(|g| {
            Tensor::from_vec(self.nodes[v.0].value.shape().to_vec(), g.clone())
                .expect("gradient buffer matches value shape")
        })
    }

    /// Clears every gradient buffer.
    pub fn zero_grad(&mut self) {
        for g in &mut self.grads {
            *g = None;
        }
    }

    // ----- primitives -------------------------------------------------------

    /// Copy of `a` severed from the tape: contributes zero to all upstream
    /// gradients.
    pub fn detach(&mut self, a: Var) -> Var {
        self.check(a);
        let value = self.nodes[a.0].value.clone();
        self.push(Op::Detach(a), value, false)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check(a);
        self.check(b);
        let value = self.nodes[a.0].value.add(&self.nodes[b.0].value)?;
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(Op::Add(a, b), value, needs))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check(a);
        self.check(b);
        let value = self.nodes[a.0].value.sub(&self.nodes[b.0].value)?;
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(Op::Sub(a, b), value, needs))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check(a);
        self.check(b);
        let value = self.nodes[a.0].value.mul(&self.nodes[b.0].value)?;
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(Op::Mul(a, b), value, needs))
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        self.check(a);
        let value = self.nodes[a.0].value.map(|v| v + c);
        let needs = self.needs(a);
        self.push(Op::AddScalar(a, c), value, needs)
    }

    pub fn mul_scalar(&mut self, a: Var, c: f64) -> Var {
        self.check(a);
        let value = self.nodes[a.0].value.scale(c);
        let needs = self.needs(a);
        self.push(Op::MulScalar(a, c), value, needs)
    }

    /// Multiplies every element of `a` by the one-element value `s`.
    pub fn scale(&mut self, a: Var, s: Var) -> Result<Var> {
        self.check(a);
        self.check(s);
        if !self.nodes[s.0].value.is_scalar() {
            return Err(CamexError::InvalidShape {
                op: "scale",
                shape: self.nodes[s.0].value.shape().to_vec(),
                detail: "scale factor must hold exactly one element".into(),
            });
        }
        let sv = self.nodes[s.0].value.data()[0];
        let value = self.nodes[a.0].value.scale(sv);
        let needs = self.needs(a) || self.needs(s);
        Ok(self.push(Op::Scale(a, s), value, needs))
    }

    /// `[r, c] + [c]`: adds `v` to every row of `m`.
    pub fn add_rowvec(&mut self, m: Var, v: Var) -> Result<Var> {
        self.check(m);
        self.check(v);
        let (mt, vt) = (&self.nodes[m.0].value, &self.nodes[v.0].value);
        if mt.rank() != 2 || vt.rank() != 1 || mt.shape()[1] != vt.shape()[0] {
            return Err(CamexError::ShapeMismatch {
                op: "add_rowvec",
                lhs: mt.shape().to_vec(),
                rhs: vt.shape().to_vec(),
            });
        }
        let c = mt.shape()[1];
        let mut value = mt.clone();
        value.requires_grad = false;
        value.grad = None;
        for (i, x) in value.data_mut().iter_mut().enumerate() {
            *x += vt.data()[i % c];
        }
        let needs = self.needs(m) || self.needs(v);
        Ok(self.push(Op::AddRowVec(m, v), value, needs))
    }

    /// `[r, c]` with row `i` scaled by `v[i]`.
    pub fn scale_rows(&mut self, m: Var, v: Var) -> Result<Var> {
        self.check(m);
        self.check(v);
        let (mt, vt) = (&self.nodes[m.0].value, &self.nodes[v.0].value);
        if mt.rank() != 2 || vt.rank() != 1 || mt.shape()[0] != vt.shape()[0] {
            return Err(CamexError::ShapeMismatch {
                op: "scale_rows",
                lhs: mt.shape().to_vec(),
                rhs: vt.shape().to_vec(),
            });
        }
        let c = mt.shape()[1];
        let mut value = mt.clone();
        value.requires_grad = false;
        value.grad = None;
        for (i, x) in value.data_mut().iter_mut().enumerate() {
            *x *= vt.data()[i / c];
        }
        let needs = self.needs(m) || self.needs(v);
        Ok(self.push(Op::ScaleRows(m, v), value, needs))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check(a);
        self.check(b);
        let value = self.nodes[a.0].value.matmul(&self.nodes[b.0].value)?;
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(Op::Matmul(a, b), value, needs))
    }

    /// Reshape; preserves row-major element order.
    pub fn reshape(&mut self, a: Var, shape: Vec<usize>) -> Result<Var> {
        self.check(a);
        let value = self.nodes[a.0].value.reshape(shape)?;
        let needs = self.needs(a);
        Ok(self.push(Op::Reshape(a), value, needs))
    }

    /// Axis permutation; generalizes matrix transpose to any rank.
    pub fn permute(&mut self, a: Var, axes: &[usize]) -> Result<Var> {
        self.check(a);
        let value = self.nodes[a.0].value.permute(axes)?;
        let needs = self.needs(a);
        Ok(self.push(Op::Permute(a, axes.to_vec()), value, needs))
    }

    /// Matrix transpose of a rank-2 value.
    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        self.check(a);
        if self.nodes[a.0].value.rank() != 2 {
            return Err(CamexError::InvalidShape {
                op: "transpose",
                shape: self.nodes[a.0].value.shape().to_vec(),
                detail: "expected a rank-2 tensor".into(),
            });
        }
        self.permute(a, &[1, 0])
    }

    /// Sum of all elements, producing a rank-0 scalar.
    pub fn sum(&mut self, a: Var) -> Var {
        self.check(a);
        let value = Tensor::scalar(self.nodes[a.0].value.sum());
        let needs = self.needs(a);
        self.push(Op::SumAll(a), value, needs)
    }

    /// Sum along one axis of a rank-2 value.
    pub fn sum_axis(&mut self, a: Var, axis: usize) -> Result<Var> {
        self.check(a);
        let value = self.nodes[a.0].value.sum_axis(axis)?;
        let needs = self.needs(a);
        Ok(self.push(Op::SumAxis(a, axis), value, needs))
    }

    /// Mean along one axis of a rank-2 value.
    pub fn mean_axis(&mut self, a: Var, axis: usize) -> Result<Var> {
        self.check(a);
        let t = &self.nodes[a.0].value;
        let extent = if t.rank() == 2 {
            t.shape()[if axis == 0 { 0 } else { 1 }]
        } else {
            0
        };
        let summed = t.sum_axis(axis)?;
        if extent == 0 {
            return Err(CamexError::InvalidShape {
                op: "mean_axis",
                shape: t.shape().to_vec(),
                detail: "axis has zero extent".into(),
            });
        }
        let value = summed.scale(1.0 / extent as f64);
        let needs = self.needs(a);
        Ok(self.push(Op::MeanAxis(a, axis), value, needs))
    }

    /// Softmax along the last axis. Rejects non-finite inputs.
    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        self.check(a);
        let value = self.nodes[a.0].value.softmax_last()?;
        let needs = self.needs(a);
        Ok(self.push(Op::Softmax(a), value, needs))
    }

    pub fn log(&mut self, a: Var) -> Var {
        self.check(a);
        let value = self.nodes[a.0].value.map(f64::ln);
        let needs = self.needs(a);
        self.push(Op::Log(a), value, needs)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.check(a);
        let value = self.nodes[a.0].value.map(f64::exp);
        let needs = self.needs(a);
        self.push(Op::Exp(a), value, needs)
    }

    /// Elementwise sign with `sign(0) = 0`; derivative is zero everywhere.
    pub fn sign(&mut self, a: Var) -> Var {
        self.check(a);
        let value = self.nodes[a.0].value.map(signum0);
        self.push(Op::Sign(a), value, false)
    }

    pub fn abs(&mut self, a: Var) -> Var {
        self.check(a);
        let value = self.nodes[a.0].value.map(f64::abs);
        let needs = self.needs(a);
        self.push(Op::Abs(a), value, needs)
    }

    /// Row lookup: `out[t, :] = m[idx[t], :]`. The backward pass scatter-adds.
    pub fn gather_rows(&mut self, m: Var, idx: &[usize]) -> Result<Var> {
        self.check(m);
        let value = self.nodes[m.0].value.gather_rows(idx)?;
        let needs = self.needs(m);
        Ok(self.push(Op::GatherRows(m, idx.to_vec()), value, needs))
    }

    /// One element per row: `out[t] = m[t, idx[t]]`.
    pub fn gather_per_row(&mut self, m: Var, idx: &[usize]) -> Result<Var> {
        self.check(m);
        let value = self.nodes[m.0].value.gather_per_row(idx)?;
        let needs = self.needs(m);
        Ok(self.push(Op::GatherPerRow(m, idx.to_vec()), value, needs))
    }

    // ----- compositions -----------------------------------------------------

    pub fn neg(&mut self, a: Var) -> Var {
        self.mul_scalar(a, -1.0)
    }

    /// Mean of all elements.
    pub fn mean(&mut self, a: Var) -> Result<Var> {
        self.check(a);
        let n = self.nodes[a.0].value.numel();
        if n == 0 {
            return Err(CamexError::InvalidShape {
                op: "mean",
                shape: self.nodes[a.0].value.shape().to_vec(),
                detail: "empty tensor".into(),
            });
        }
        let s = self.sum(a);
        Ok(self.mul_scalar(s, 1.0 / n as f64))
    }

    /// Numerically stable `log(1 + exp(z))`, composed from primitives as
    /// `max(z, 0) + log(1 + exp(-|z|))`.
    pub fn softplus(&mut self, z: Var) -> Result<Var> {
        let az = self.abs(z);
        let half = self.mul_scalar(z, 0.5);
        let half_abs = self.mul_scalar(az, 0.5);
        let max0 = self.add(half, half_abs)?;
        let neg_abs = self.neg(az);
        let e = self.exp(neg_abs);
        let e1 = self.add_scalar(e, 1.0);
        let l = self.log(e1);
        self.add(max0, l)
    }

    /// Logistic sigmoid, composed as `exp(z - softplus(z))`.
    pub fn sigmoid(&mut self, z: Var) -> Result<Var> {
        let sp = self.softplus(z)?;
        let d = self.sub(z, sp)?;
        Ok(self.exp(d))
    }

    /// Hyperbolic tangent, composed as `2*sigmoid(2z) - 1`.
    pub fn tanh(&mut self, z: Var) -> Result<Var> {
        let z2 = self.mul_scalar(z, 2.0);
        let s = self.sigmoid(z2)?;
        let s2 = self.mul_scalar(s, 2.0);
        Ok(self.add_scalar(s2, -1.0))
    }

    /// Smooth GELU-style gate using the tanh approximation
    /// `0.5 * x * (1 + tanh(sqrt(2/pi) * (x + 0.044715 * x^3)))`.
    pub fn gelu(&mut self, x: Var) -> Result<Var> {
        const SQRT_2_OVER_PI: f64 = 0.797_884_560_802_865_4;
        const CUBIC: f64 = 0.044_715;
        let x2 = self.mul(x, x)?;
        let x3 = self.mul(x2, x)?;
        let inner = self.mul_scalar(x3, CUBIC);
        let inner = self.add(x, inner)?;
        let inner = self.mul_scalar(inner, SQRT_2_OVER_PI);
        let t = self.tanh(inner)?;
        let gate = self.add_scalar(t, 1.0);
        let half_x = self.mul_scalar(x, 0.5);
        self.mul(half_x, gate)
    }

    /// `log(softmax(x))` along the last axis.
    pub fn log_softmax(&mut self, a: Var) -> Result<Var> {
        let s = self.softmax(a)?;
        Ok(self.log(s))
    }

    /// Extracts element `i` of a rank-1 value as a rank-0 scalar.
    pub fn index_scalar(&mut self, v: Var, i: usize) -> Result<Var> {
        self.check(v);
        let t = &self.nodes[v.0].value;
        if t.rank() != 1 {
            return Err(CamexError::InvalidShape {
                op: "index_scalar",
                shape: t.shape().to_vec(),
                detail: "expected a rank-1 tensor".into(),
            });
        }
        let n = t.shape()[0];
        let row = self.reshape(v, vec![1, n])?;
        let picked = self.gather_per_row(row, &[i])?;
        self.reshape(picked, vec![])
    }

    /// Mean over rows of a rank-2 value, producing a rank-1 value.
    pub fn mean_rows(&mut self, m: Var) -> Result<Var> {
        self.mean_axis(m, 0)
    }

    // ----- backward ---------------------------------------------------------

    /// Reverse-mode sweep from a scalar loss. Visits each node at most once,
    /// in reverse execution order. Each call computes the gradients of this
    /// loss on fresh working buffers and then folds them `+=` into the
    /// persistent per-node accumulators, so repeated calls without
    /// [`Graph::zero_grad`] accumulate. Every tracked leaf ends up with a
    /// gradient buffer (zeros if untouched).
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        self.check(loss);
        if !self.nodes[loss.0].value.is_scalar() {
            return Err(CamexError::NonScalarLoss {
                shape: self.nodes[loss.0].value.shape().to_vec(),
            });
        }
        // Allocate buffers for everything that participates in gradients so
        // untouched tracked leaves read back as zero.
        for i in 0..self.nodes.len() {
            if self.nodes[i].needs_grad && self.grads[i].is_none() {
                self.grads[i] = Some(vec![0.0; self.nodes[i].value.numel()]);
            }
        }
        if !self.nodes[loss.0].needs_grad {
            return Ok(());
        }
        let mut work: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        work[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].needs_grad {
                continue;
            }
            let g = match work[i].take() {
                Some(g) => g,
                None => continue,
            };
            self.propagate(i, &g, &mut work)?;
            if let Some(buf) = self.grads[i].as_mut() {
                for (b, c) in buf.iter_mut().zip(&g) {
                    *b += c;
                }
            }
        }
        Ok(())
    }

    fn acc(&self, work: &mut [Option<Vec<f64>>], v: Var, contribution: &[f64]) {
        if !self.nodes[v.0].needs_grad {
            return;
        }
        let n = self.nodes[v.0].value.numel();
        let buf = work[v.0].get_or_insert_with(|| vec![0.0; n]);
        for (b, c) in buf.iter_mut().zip(contribution) {
            *b += c;
        }
    }

    fn propagate(&self, i: usize, g: &[f64], work: &mut [Option<Vec<f64>>]) -> Result<()> {
        let op = self.nodes[i].op.clone();
        match op {
            Op::Leaf | Op::Detach(_) => {}
            Op::Add(a, b) => {
                self.acc(work, a, g);
                self.acc(work, b, g);
            }
            Op::Sub(a, b) => {
                self.acc(work, a, g);
                let neg: Vec<f64> = g.iter().map(|v| -v).collect();
                self.acc(work, b, &neg);
            }
            Op::Mul(a, b) => {
                if self.needs(a) {
                    let da: Vec<f64> = g
                        .iter()
                        .zip(self.nodes[b.0].value.data())
                        .map(|(g, b)| g * b)
                        .collect();
                    self.acc(work, a, &da);
                }
                if self.needs(b) {
                    let db: Vec<f64> = g
                        .iter()
                        .zip(self.nodes[a.0].value.data())
                        .map(|(g, a)| g * a)
                        .collect();
                    self.acc(work, b, &db);
                }
            }
            Op::AddScalar(a, _) => self.acc(work, a, g),
            Op::MulScalar(a, c) => {
                let da: Vec<f64> = g.iter().map(|v| v * c).collect();
                self.acc(work, a, &da);
            }
            Op::Scale(a, s) => {
                if self.needs(a) {
                    let sv = self.nodes[s.0].value.data()[0];
                    let da: Vec<f64> = g.iter().map(|v| v * sv).collect();
                    self.acc(work, a, &da);
                }
                if self.needs(s) {
                    let ds: f64 = g
                        .iter()
                        .zip(self.nodes[a.0].value.data())
                        .map(|(g, a)| g * a)
                        .sum();
                    self.acc(work, s, &[ds]);
                }
            }
            Op::AddRowVec(m, v) => {
                self.acc(work, m, g);
                if self.needs(v) {
                    let c = self.nodes[v.0].value.numel();
                    let mut dv = vec![0.0; c];
                    for (i, gv) in g.iter().enumerate() {
                        dv[i % c] += gv;
                    }
                    self.acc(work, v, &dv);
                }
            }
            Op::ScaleRows(m, v) => {
                let c = self.nodes[m.0].value.shape()[1];
                if self.needs(m) {
                    let vv = self.nodes[v.0].value.data();
                    let dm: Vec<f64> = g.iter().enumerate().map(|(i, g)| g * vv[i / c]).collect();
                    self.acc(work, m, &dm);
                }
                if self.needs(v) {
                    let mv = self.nodes[m.0].value.data();
                    let r = self.nodes[v.0].value.numel();
                    let mut dv = vec![0.0; r];
                    for (i, gv) in g.iter().enumerate() {
                        dv[i / c] += gv * mv[i];
                    }
                    self.acc(work, v, &dv);
                }
            }
            Op::Matmul(a, b) => {
                let (m, k) = {
                    let s = self.nodes[a.0].value.shape();
                    (s[0], s[1])
                };
                let n = self.nodes[b.0].value.shape()[1];
                if self.needs(a) {
                    // dA = g . B^T
                    let bv = self.nodes[b.0].value.data();
                    let mut da = vec![0.0; m * k];
                    for i in 0..m {
                        for j in 0..n {
                            let gv = g[i * n + j];
                            if gv == 0.0 {
                                continue;
                            }
                            for p in 0..k {
                                da[i * k + p] += gv * bv[p * n + j];
                            }
                        }
                    }
                    self.acc(work, a, &da);
                }
                if self.needs(b) {
                    // dB = A^T . g
                    let av = self.nodes[a.0].value.data();
                    let mut db = vec![0.0; k * n];
                    for i in 0..m {
                        for p in 0..k {
                            let avv = av[i * k + p];
                            if avv == 0.0 {
                                continue;
                            }
                            for j in 0..n {
                                db[p * n + j] += avv * g[i * n + j];
                            }
                        }
                    }
                    self.acc(work, b, &db);
                }
            }
            Op::Reshape(a) => self.acc(work, a, g),
            Op::Permute(a, axes) => {
                // Route each output-position gradient back to its source slot.
                let out_shape = self.nodes[i].value.shape().to_vec();
                let in_strides = strides_of(self.nodes[a.0].value.shape());
                let mapped: Vec<usize> = axes.iter().map(|&ax| in_strides[ax]).collect();
                let mut da = vec![0.0; self.nodes[a.0].value.numel()];
                let r = out_shape.len();
                let mut idx = vec![0usize; r];
                for gv in g {
                    let mut src = 0;
                    for k in 0..r {
                        src += idx[k] * mapped[k];
                    }
                    da[src] += gv;
                    for k in (0..r).rev() {
                        idx[k] += 1;
                        if idx[k] < out_shape[k] {
                            break;
                        }
                        idx[k] = 0;
                    }
                }
                self.acc(work, a, &da);
            }
            Op::SumAll(a) => {
                let da = vec![g[0]; self.nodes[a.0].value.numel()];
                self.acc(work, a, &da);
            }
            Op::SumAxis(a, axis) | Op::MeanAxis(a, axis) => {
                let shape = self.nodes[a.0].value.shape().to_vec();
                let (r, c) = (shape[0], shape[1]);
                let scale = match self.nodes[i].op {
                    Op::MeanAxis(_, 0) => 1.0 / r as f64,
                    Op::MeanAxis(_, 1) => 1.0 / c as f64,
                    _ => 1.0,
                };
                let mut da = vec![0.0; r * c];
                if axis == 0 {
                    for i2 in 0..r {
                        for j in 0..c {
                            da[i2 * c + j] = g[j] * scale;
                        }
                    }
                } else {
                    for i2 in 0..r {
                        for j in 0..c {
                            da[i2 * c + j] = g[i2] * scale;
                        }
                    }
                }
                self.acc(work, a, &da);
            }
            Op::Softmax(a) => {
                let y = self.nodes[i].value.data();
                let width = *self.nodes[i].value.shape().last().unwrap();
                let mut da = vec![0.0; y.len()];
                for s in 0..y.len() / width {
                    let lo = s * width;
                    let hi = lo + width;
                    let dot: f64 = (lo..hi).map(|j| g[j] * y[j]).sum();
                    for j in lo..hi {
                        da[j] = y[j] * (g[j] - dot);
                    }
                }
                self.acc(work, a, &da);
            }
            Op::Log(a) => {
                let xv = self.nodes[a.0].value.data();
                let da: Vec<f64> = g.iter().zip(xv).map(|(g, x)| g / x).collect();
                self.acc(work, a, &da);
            }
            Op::Exp(a) => {
                let y = self.nodes[i].value.data();
                let da: Vec<f64> = g.iter().zip(y).map(|(g, y)| g * y).collect();
                self.acc(work, a, &da);
            }
            Op::Sign(_) => {}
            Op::Abs(a) => {
                let xv = self.nodes[a.0].value.data();
                let da: Vec<f64> = g.iter().zip(xv).map(|(g, x)| g * signum0(*x)).collect();
                self.acc(work, a, &da);
            }
            Op::GatherRows(m, idx) => {
                if self.needs(m) {
                    let c = self.nodes[m.0].value.shape()[1];
                    let mut dm = vec![0.0; self.nodes[m.0].value.numel()];
                    for (t, &row) in idx.iter().enumerate() {
                        for j in 0..c {
                            dm[row * c + j] += g[t * c + j];
                        }
                    }
                    self.acc(work, m, &dm);
                }
            }
            Op::GatherPerRow(m, idx) => {
                if self.needs(m) {
                    let c = self.nodes[m.0].value.shape()[1];
                    let mut dm = vec![0.0; self.nodes[m.0].value.numel()];
                    for (t, &col) in idx.iter().enumerate() {
                        dm[t * c + col] += g[t];
                    }
                    self.acc(work, m, &dm);
                }
            }
        }
        Ok(())
    }
}

/// Sign with `sign(0) = 0`, unlike `f64::signum`.
pub fn signum0(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}
