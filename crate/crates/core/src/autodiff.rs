//! Tape-based reverse-mode automatic differentiation over dense `f64` tensors.
//!
//! A [`Tape`] records every operation applied to its [`Var`] handles during the
//! forward pass. Calling [`Var::backward`] on a scalar replays the tape in
//! reverse and returns a [`Gradients`] table indexed by `Var`.
//!
//! The operator set is deliberately small: it covers the MLP forward pass and
//! the contrastive / cross-entropy objectives used by the trainer, nothing
//! more. Tapes are built fresh for every training step and dropped afterwards.
//!
//! ```
//! use clda::autodiff::{Tape, Tensor};
//!
//! let tape = Tape::new();
//! let w = tape.param(Tensor::from_vec(vec![3], vec![1.0, -2.0, 3.0]).unwrap());
//! let loss = w.square().sum();
//! let grads = loss.backward().unwrap();
//! assert_eq!(grads.get(&w).unwrap().data(), &[2.0, -4.0, 6.0]);
//! ```

use std::cell::{Ref, RefCell};
use std::fmt;

use thiserror::Error;

/// Rows whose L2 norm falls below this floor are rejected by the cosine kernel.
pub const NORM_FLOOR: f64 = 1e-12;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AutodiffError {
    #[error("{op}: incompatible shapes {left:?} and {right:?}")]
    ShapeMismatch {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },
    #[error("tensor shape {shape:?} holds {expected} values but {actual} were given")]
    BadLength {
        shape: Vec<usize>,
        expected: usize,
        actual: usize,
    },
    #[error("{op} expects a 2-D tensor, got shape {shape:?}")]
    NotMatrix { op: &'static str, shape: Vec<usize> },
    #[error("degenerate vector: row {row} of the {side} operand has L2 norm {norm:e} below {NORM_FLOOR:e}")]
    DegenerateVector {
        side: &'static str,
        row: usize,
        norm: f64,
    },
    #[error("backward requires a scalar loss, got shape {shape:?}")]
    NonScalarLoss { shape: Vec<usize> },
    #[error("index {index} out of range for axis of length {len} in {op}")]
    IndexOutOfRange {
        op: &'static str,
        index: usize,
        len: usize,
    },
    #[error("non-finite loss {value} while evaluating parameter {param} coordinate {coord}")]
    NonFiniteEvaluation {
        param: usize,
        coord: usize,
        value: f64,
    },
    #[error("finite-difference step {0} outside (0, 1e-2]")]
    InvalidStep(f64),
}

pub type Result<T, E = AutodiffError> = std::result::Result<T, E>;

/// Dense row-major tensor of `f64`.
#[derive(Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tensor")
            .field("shape", &self.shape)
            .field("data", &self.data)
            .finish()
    }
}

impl Tensor {
    pub fn from_vec(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if expected != data.len() || shape.iter().any(|&d| d == 0) {
            return Err(AutodiffError::BadLength {
                shape,
                expected,
                actual: data.len(),
            });
        }
        Ok(Self { shape, data })
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        Self::from_vec(vec![rows, cols], data)
    }

    /// Builds a matrix from equally sized rows.
    pub fn from_rows<R: AsRef<[f64]>>(rows: &[R]) -> Result<Self> {
        let cols = rows.first().map(|r| r.as_ref().len()).unwrap_or(0);
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            let r = r.as_ref();
            if r.len() != cols {
                return Err(AutodiffError::ShapeMismatch {
                    op: "from_rows",
                    left: vec![cols],
                    right: vec![r.len()],
                });
            }
            data.extend_from_slice(r);
        }
        Self::matrix(rows.len(), cols, data)
    }

    pub fn scalar(value: f64) -> Self {
        Self {
            shape: vec![1],
            data: vec![value],
        }
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Self {
            shape,
            data: vec![0.0; n],
        }
    }

    pub fn full(shape: Vec<usize>, value: f64) -> Self {
        let n = shape.iter().product();
        Self {
            shape,
            data: vec![value; n],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut t = Self::zeros(vec![n, n]);
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        t
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

    /// Number of rows; a 1-D tensor counts as a single row.
    pub fn rows(&self) -> usize {
        if self.shape.len() >= 2 {
            self.shape[0]
        } else {
            1
        }
    }

    /// Length of the last axis.
    pub fn cols(&self) -> usize {
        *self.shape.last().unwrap_or(&1)
    }

    pub fn row(&self, r: usize) -> &[f64] {
        let c = self.cols();
        &self.data[r * c..(r + 1) * c]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        let c = self.cols();
        &mut self.data[r * c..(r + 1) * c]
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols() + c]
    }

    pub fn item(&self) -> f64 {
        self.data[0]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    /// Copies the listed rows, in order, into a new matrix.
    pub fn select_rows(&self, idx: &[usize]) -> Result<Tensor> {
        let n = self.rows();
        let c = self.cols();
        let mut data = Vec::with_capacity(idx.len() * c);
        for &i in idx {
            if i >= n {
                return Err(AutodiffError::IndexOutOfRange {
                    op: "select_rows",
                    index: i,
                    len: n,
                });
            }
            data.extend_from_slice(self.row(i));
        }
        Tensor::matrix(idx.len(), c, data)
    }

    fn as_matrix(&self, op: &'static str) -> Result<(usize, usize)> {
        match self.shape.as_slice() {
            [r, c] => Ok((*r, *c)),
            [c] => Ok((1, *c)),
            _ => Err(AutodiffError::NotMatrix {
                op,
                shape: self.shape.clone(),
            }),
        }
    }
}

// Dense kernels shared by forward and backward passes.

fn matmul_raw(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
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

/// a [m×k] · bᵀ where b is [n×k].
fn matmul_bt(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
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

/// aᵀ · b where a is [m×k] and b is [m×n].
fn matmul_at(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
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

/// Row-normalizes `data` [rows×cols], returning unit rows and the norms.
fn normalize_rows(
    data: &[f64],
    rows: usize,
    cols: usize,
    side: &'static str,
) -> Result<(Vec<f64>, Vec<f64>)> {
    let mut unit = vec![0.0; rows * cols];
    let mut norms = Vec::with_capacity(rows);
    for r in 0..rows {
        let row = &data[r * cols..(r + 1) * cols];
        let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
        if !(norm >= NORM_FLOOR) {
            return Err(AutodiffError::DegenerateVector { side, row: r, norm });
        }
        for (u, v) in unit[r * cols..(r + 1) * cols].iter_mut().zip(row) {
            *u = v / norm;
        }
        norms.push(norm);
    }
    Ok((unit, norms))
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul(usize, usize),
    AddRowVector(usize, usize),
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Scale(usize, f64),
    Relu(usize),
    Exp(usize),
    Ln(usize),
    Abs(usize),
    Square(usize),
    LogSoftmax(usize),
    Softmax(usize),
    Sum(usize),
    Mean(usize),
    SumRows(usize),
    SelectRows(usize, Vec<usize>),
    PickPerRow(usize, Vec<usize>),
    ConcatRows(usize, usize),
    Cosine {
        a: usize,
        b: usize,
        a_unit: Vec<f64>,
        a_norm: Vec<f64>,
        b_unit: Vec<f64>,
        b_norm: Vec<f64>,
    },
    StopGradient,
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Gradient tape. Nodes are appended in evaluation order, so parents always
/// precede their children.
#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
    relu_inputs: RefCell<Vec<Tensor>>,
}

impl fmt::Debug for Tape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Tape {{ nodes: {} }}", self.len())
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Registers a trainable tensor.
    pub fn param(&self, value: Tensor) -> Var<'_> {
        self.push(value, Op::Leaf, true)
    }

    /// Registers a tensor that never receives a gradient.
    pub fn constant(&self, value: Tensor) -> Var<'_> {
        self.push(value, Op::Leaf, false)
    }

    /// Inputs seen by every `relu` recorded so far, in evaluation order.
    pub fn relu_inputs(&self) -> Vec<Tensor> {
        self.relu_inputs.borrow().clone()
    }

    fn push(&self, value: Tensor, op: Op, requires_grad: bool) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    fn requires_grad(&self, id: usize) -> bool {
        self.nodes.borrow()[id].requires_grad
    }
}

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    id: usize,
}

impl fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Var#{}{:?}", self.id, self.shape())
    }
}

impl<'t> Var<'t> {
    pub fn id(&self) -> usize {
        self.id
    }

    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn value(&self) -> Ref<'t, Tensor> {
        Ref::map(self.tape.nodes.borrow(), |n| &n[self.id].value)
    }

    pub fn to_tensor(&self) -> Tensor {
        self.value().clone()
    }

    pub fn shape(&self) -> Vec<usize> {
        self.value().shape.clone()
    }

    pub fn item(&self) -> f64 {
        self.value().item()
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.requires_grad(self.id)
    }

    fn unary(&self, op: Op, value: Tensor) -> Var<'t> {
        let rg = self.requires_grad();
        self.tape.push(value, op, rg)
    }

    fn binary(&self, other: &Var<'t>, op: Op, value: Tensor) -> Var<'t> {
        let rg = self.requires_grad() || other.requires_grad();
        self.tape.push(value, op, rg)
    }

    fn same_shape(&self, other: &Var<'t>, op: &'static str) -> Result<(Tensor, Tensor)> {
        let a = self.to_tensor();
        let b = other.to_tensor();
        if a.shape != b.shape {
            return Err(AutodiffError::ShapeMismatch {
                op,
                left: a.shape,
                right: b.shape,
            });
        }
        Ok((a, b))
    }

    pub fn matmul(&self, other: &Var<'t>) -> Result<Var<'t>> {
        let a = self.value();
        let b = other.value();
        let (m, k) = a.as_matrix("matmul")?;
        let (k2, n) = b.as_matrix("matmul")?;
        if k != k2 || a.shape.len() != 2 || b.shape.len() != 2 {
            return Err(AutodiffError::ShapeMismatch {
                op: "matmul",
                left: a.shape.clone(),
                right: b.shape.clone(),
            });
        }
        let out = Tensor {
            shape: vec![m, n],
            data: matmul_raw(&a.data, &b.data, m, k, n),
        };
        drop((a, b));
        Ok(self.binary(other, Op::MatMul(self.id, other.id), out))
    }

    /// Adds a length-`n` vector to every row of an `[m×n]` matrix.
    pub fn add_row_vector(&self, bias: &Var<'t>) -> Result<Var<'t>> {
        let a = self.value();
        let b = bias.value();
        let (_, n) = a.as_matrix("add_row_vector")?;
        if b.len() != n {
            return Err(AutodiffError::ShapeMismatch {
                op: "add_row_vector",
                left: a.shape.clone(),
                right: b.shape.clone(),
            });
        }
        let mut out = a.clone();
        for row in out.data.chunks_mut(n) {
            for (o, bv) in row.iter_mut().zip(&b.data) {
                *o += bv;
            }
        }
        drop((a, b));
        Ok(self.binary(bias, Op::AddRowVector(self.id, bias.id), out))
    }

    pub fn add(&self, other: &Var<'t>) -> Result<Var<'t>> {
        let (mut a, b) = self.same_shape(other, "add")?;
        a.data.iter_mut().zip(&b.data).for_each(|(x, y)| *x += y);
        Ok(self.binary(other, Op::Add(self.id, other.id), a))
    }

    pub fn sub(&self, other: &Var<'t>) -> Result<Var<'t>> {
        let (mut a, b) = self.same_shape(other, "sub")?;
        a.data.iter_mut().zip(&b.data).for_each(|(x, y)| *x -= y);
        Ok(self.binary(other, Op::Sub(self.id, other.id), a))
    }

    /// Elementwise product.
    pub fn mul(&self, other: &Var<'t>) -> Result<Var<'t>> {
        let (mut a, b) = self.same_shape(other, "mul")?;
        a.data.iter_mut().zip(&b.data).for_each(|(x, y)| *x *= y);
        Ok(self.binary(other, Op::Mul(self.id, other.id), a))
    }

    pub fn scale(&self, c: f64) -> Var<'t> {
        let out = self.value().map(|v| v * c);
        self.unary(Op::Scale(self.id, c), out)
    }

    pub fn relu(&self) -> Var<'t> {
        let input = self.to_tensor();
        let out = input.map(|v| if v > 0.0 { v } else { 0.0 });
        self.tape.relu_inputs.borrow_mut().push(input);
        self.unary(Op::Relu(self.id), out)
    }

    pub fn exp(&self) -> Var<'t> {
        let out = self.value().map(f64::exp);
        self.unary(Op::Exp(self.id), out)
    }

    pub fn ln(&self) -> Var<'t> {
        let out = self.value().map(f64::ln);
        self.unary(Op::Ln(self.id), out)
    }

    pub fn abs(&self) -> Var<'t> {
        let out = self.value().map(f64::abs);
        self.unary(Op::Abs(self.id), out)
    }

    pub fn square(&self) -> Var<'t> {
        let out = self.value().map(|v| v * v);
        self.unary(Op::Square(self.id), out)
    }

    /// Max-shifted log-softmax along the last axis.
    pub fn log_softmax(&self) -> Var<'t> {
        let mut out = self.to_tensor();
        let k = out.cols();
        for row in out.data.chunks_mut(k) {
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            row.iter_mut().for_each(|v| *v -= lse);
        }
        self.unary(Op::LogSoftmax(self.id), out)
    }

    pub fn softmax(&self) -> Var<'t> {
        let mut out = self.to_tensor();
        let k = out.cols();
        for row in out.data.chunks_mut(k) {
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            row.iter_mut().for_each(|v| *v = (*v - max).exp());
            let z: f64 = row.iter().sum();
            row.iter_mut().for_each(|v| *v /= z);
        }
        self.unary(Op::Softmax(self.id), out)
    }

    pub fn sum(&self) -> Var<'t> {
        let s: f64 = self.value().data.iter().sum();
        self.unary(Op::Sum(self.id), Tensor::scalar(s))
    }

    pub fn mean(&self) -> Var<'t> {
        let v = self.value();
        let m = v.data.iter().sum::<f64>() / v.len() as f64;
        drop(v);
        self.unary(Op::Mean(self.id), Tensor::scalar(m))
    }

    /// Sums each row, producing an `[m×1]` column.
    pub fn sum_rows(&self) -> Result<Var<'t>> {
        let v = self.value();
        let (m, n) = v.as_matrix("sum_rows")?;
        let data = v.data.chunks(n).map(|r| r.iter().sum()).collect();
        drop(v);
        Ok(self.unary(
            Op::SumRows(self.id),
            Tensor {
                shape: vec![m, 1],
                data,
            },
        ))
    }

    pub fn select_rows(&self, idx: &[usize]) -> Result<Var<'t>> {
        let out = self.value().select_rows(idx)?;
        Ok(self.unary(Op::SelectRows(self.id, idx.to_vec()), out))
    }

    /// Gathers `self[i, cols[i]]` for each row into an `[m×1]` column.
    pub fn pick_per_row(&self, cols: &[usize]) -> Result<Var<'t>> {
        let v = self.value();
        let (m, n) = v.as_matrix("pick_per_row")?;
        if cols.len() != m {
            return Err(AutodiffError::ShapeMismatch {
                op: "pick_per_row",
                left: v.shape.clone(),
                right: vec![cols.len()],
            });
        }
        let mut data = Vec::with_capacity(m);
        for (i, &c) in cols.iter().enumerate() {
            if c >= n {
                return Err(AutodiffError::IndexOutOfRange {
                    op: "pick_per_row",
                    index: c,
                    len: n,
                });
            }
            data.push(v.data[i * n + c]);
        }
        drop(v);
        Ok(self.unary(
            Op::PickPerRow(self.id, cols.to_vec()),
            Tensor {
                shape: vec![m, 1],
                data,
            },
        ))
    }

    pub fn concat_rows(&self, other: &Var<'t>) -> Result<Var<'t>> {
        let a = self.value();
        let b = other.value();
        let (ma, na) = a.as_matrix("concat_rows")?;
        let (mb, nb) = b.as_matrix("concat_rows")?;
        if na != nb {
            return Err(AutodiffError::ShapeMismatch {
                op: "concat_rows",
                left: a.shape.clone(),
                right: b.shape.clone(),
            });
        }
        let mut data = a.data.clone();
        data.extend_from_slice(&b.data);
        drop((a, b));
        Ok(self.binary(
            other,
            Op::ConcatRows(self.id, other.id),
            Tensor {
                shape: vec![ma + mb, na],
                data,
            },
        ))
    }

    /// Pairwise cosine similarities between rows of `self` [m×d] and `other` [n×d].
    pub fn cosine_similarity_matrix(&self, other: &Var<'t>) -> Result<Var<'t>> {
        let a = self.value();
        let b = other.value();
        let (m, d) = a.as_matrix("cosine_similarity_matrix")?;
        let (n, d2) = b.as_matrix("cosine_similarity_matrix")?;
        if d != d2 {
            return Err(AutodiffError::ShapeMismatch {
                op: "cosine_similarity_matrix",
                left: a.shape.clone(),
                right: b.shape.clone(),
            });
        }
        let (a_unit, a_norm) = normalize_rows(&a.data, m, d, "left")?;
        let (b_unit, b_norm) = normalize_rows(&b.data, n, d, "right")?;
        drop((a, b));
        let data = matmul_bt(&a_unit, &b_unit, m, d, n);
        let out = Tensor {
            shape: vec![m, n],
            data,
        };
        Ok(self.binary(
            other,
            Op::Cosine {
                a: self.id,
                b: other.id,
                a_unit,
                a_norm,
                b_unit,
                b_norm,
            },
            out,
        ))
    }

    /// Identity in the forward pass; blocks every gradient flowing back through it.
    pub fn stop_gradient(&self) -> Var<'t> {
        let out = self.to_tensor();
        self.tape.push(out, Op::StopGradient, false)
    }

    /// Reverse pass from a scalar.
    pub fn backward(&self) -> Result<Gradients> {
        let nodes = self.tape.nodes.borrow();
        let root = &nodes[self.id];
        if !root.value.is_scalar() {
            return Err(AutodiffError::NonScalarLoss {
                shape: root.value.shape.clone(),
            });
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.id + 1];
        grads[self.id] = Some(vec![1.0]);

        for id in (0..=self.id).rev() {
            let node = &nodes[id];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            backprop_node(&nodes, node, &g, &mut grads);
            grads[id] = Some(g);
        }

        let grads = grads
            .into_iter()
            .enumerate()
            .map(|(id, g)| {
                let node = &nodes[id];
                match (&node.op, node.requires_grad, g) {
                    (Op::Leaf, true, Some(data)) => Some(Tensor {
                        shape: node.value.shape.clone(),
                        data,
                    }),
                    (Op::Leaf, true, None) => Some(Tensor::zeros(node.value.shape.clone())),
                    _ => None,
                }
            })
            .collect();
        Ok(Gradients { grads })
    }
}

fn accumulate(grads: &mut [Option<Vec<f64>>], nodes: &[Node], id: usize, g: Vec<f64>) {
    if !nodes[id].requires_grad {
        return;
    }
    match &mut grads[id] {
        Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
        slot @ None => *slot = Some(g),
    }
}

fn backprop_node(nodes: &[Node], node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
    let val = |id: usize| &nodes[id].value;
    match &node.op {
        Op::Leaf | Op::StopGradient => {}
        Op::MatMul(a, b) => {
            let (av, bv) = (val(*a), val(*b));
            let (m, k) = (av.shape[0], av.shape[1]);
            let n = bv.shape[1];
            if nodes[*a].requires_grad {
                accumulate(grads, nodes, *a, matmul_bt(g, &bv.data, m, n, k));
            }
            if nodes[*b].requires_grad {
                accumulate(grads, nodes, *b, matmul_at(&av.data, g, m, k, n));
            }
        }
        Op::AddRowVector(a, b) => {
            accumulate(grads, nodes, *a, g.to_vec());
            if nodes[*b].requires_grad {
                let n = val(*b).len();
                let mut gb = vec![0.0; n];
                for row in g.chunks(n) {
                    gb.iter_mut().zip(row).for_each(|(x, y)| *x += y);
                }
                accumulate(grads, nodes, *b, gb);
            }
        }
        Op::Add(a, b) => {
            accumulate(grads, nodes, *a, g.to_vec());
            accumulate(grads, nodes, *b, g.to_vec());
        }
        Op::Sub(a, b) => {
            accumulate(grads, nodes, *a, g.to_vec());
            accumulate(grads, nodes, *b, g.iter().map(|v| -v).collect());
        }
        Op::Mul(a, b) => {
            let (av, bv) = (val(*a), val(*b));
            if nodes[*a].requires_grad {
                let ga = g.iter().zip(&bv.data).map(|(x, y)| x * y).collect();
                accumulate(grads, nodes, *a, ga);
            }
            if nodes[*b].requires_grad {
                let gb = g.iter().zip(&av.data).map(|(x, y)| x * y).collect();
                accumulate(grads, nodes, *b, gb);
            }
        }
        Op::Scale(a, c) => accumulate(grads, nodes, *a, g.iter().map(|v| v * c).collect()),
        Op::Relu(a) => {
            let ga = g
                .iter()
                .zip(&val(*a).data)
                .map(|(gv, x)| if *x > 0.0 { *gv } else { 0.0 })
                .collect();
            accumulate(grads, nodes, *a, ga);
        }
        Op::Exp(a) => {
            let ga = g.iter().zip(&node.value.data).map(|(x, y)| x * y).collect();
            accumulate(grads, nodes, *a, ga);
        }
        Op::Ln(a) => {
            let ga = g.iter().zip(&val(*a).data).map(|(x, y)| x / y).collect();
            accumulate(grads, nodes, *a, ga);
        }
        Op::Abs(a) => {
            let ga = g
                .iter()
                .zip(&val(*a).data)
                .map(|(gv, x)| if *x > 0.0 { *gv } else if *x < 0.0 { -gv } else { 0.0 })
                .collect();
            accumulate(grads, nodes, *a, ga);
        }
        Op::Square(a) => {
            let ga = g.iter().zip(&val(*a).data).map(|(x, y)| 2.0 * x * y).collect();
            accumulate(grads, nodes, *a, ga);
        }
        Op::LogSoftmax(a) => {
            // d/dx_j = g_j - softmax_j * sum(g)
            let k = node.value.cols();
            let mut ga = Vec::with_capacity(g.len());
            for (grow, yrow) in g.chunks(k).zip(node.value.data.chunks(k)) {
                let s: f64 = grow.iter().sum();
                ga.extend(grow.iter().zip(yrow).map(|(gv, y)| gv - y.exp() * s));
            }
            accumulate(grads, nodes, *a, ga);
        }
        Op::Softmax(a) => {
            let k = node.value.cols();
            let mut ga = Vec::with_capacity(g.len());
            for (grow, prow) in g.chunks(k).zip(node.value.data.chunks(k)) {
                let dot: f64 = grow.iter().zip(prow).map(|(x, y)| x * y).sum();
                ga.extend(grow.iter().zip(prow).map(|(gv, p)| p * (gv - dot)));
            }
            accumulate(grads, nodes, *a, ga);
        }
        Op::Sum(a) => accumulate(grads, nodes, *a, vec![g[0]; val(*a).len()]),
        Op::Mean(a) => {
            let n = val(*a).len();
            accumulate(grads, nodes, *a, vec![g[0] / n as f64; n]);
        }
        Op::SumRows(a) => {
            let n = val(*a).cols();
            let ga = g.iter().flat_map(|&gv| std::iter::repeat(gv).take(n)).collect();
            accumulate(grads, nodes, *a, ga);
        }
        Op::SelectRows(a, idx) => {
            let src = val(*a);
            let c = src.cols();
            let mut ga = vec![0.0; src.len()];
            for (out_row, &i) in idx.iter().enumerate() {
                for j in 0..c {
                    ga[i * c + j] += g[out_row * c + j];
                }
            }
            accumulate(grads, nodes, *a, ga);
        }
        Op::PickPerRow(a, cols) => {
            let src = val(*a);
            let n = src.cols();
            let mut ga = vec![0.0; src.len()];
            for (i, &c) in cols.iter().enumerate() {
                ga[i * n + c] = g[i];
            }
            accumulate(grads, nodes, *a, ga);
        }
        Op::ConcatRows(a, b) => {
            let split = val(*a).len();
            accumulate(grads, nodes, *a, g[..split].to_vec());
            accumulate(grads, nodes, *b, g[split..].to_vec());
        }
        Op::Cosine {
            a,
            b,
            a_unit,
            a_norm,
            b_unit,
            b_norm,
        } => {
            let m = a_norm.len();
            let n = b_norm.len();
            let d = val(*a).cols();
            // C = Â B̂ᵀ;  dÂ = G B̂,  dB̂ = Gᵀ Â;  dX_i = (dX̂_i - (dX̂_i·X̂_i) X̂_i) / ‖X_i‖
            let project = |d_unit: Vec<f64>, unit: &[f64], norm: &[f64]| -> Vec<f64> {
                let mut out = d_unit;
                for (r, nrm) in norm.iter().enumerate() {
                    let u = &unit[r * d..(r + 1) * d];
                    let row = &mut out[r * d..(r + 1) * d];
                    let dot: f64 = row.iter().zip(u).map(|(x, y)| x * y).sum();
                    row.iter_mut().zip(u).for_each(|(x, y)| *x = (*x - dot * y) / nrm);
                }
                out
            };
            if nodes[*a].requires_grad {
                let da = matmul_raw(g, b_unit, m, n, d);
                accumulate(grads, nodes, *a, project(da, a_unit, a_norm));
            }
            if nodes[*b].requires_grad {
                let db = matmul_at(g, a_unit, m, n, d);
                accumulate(grads, nodes, *b, project(db, b_unit, b_norm));
            }
        }
    }
}

/// Gradients of every trainable leaf reachable from the loss.
#[derive(Debug, Clone)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient for a leaf registered with [`Tape::param`]. Leaves the loss
    /// does not depend on get an all-zero tensor; constants and interior
    /// nodes return `None`.
    pub fn get(&self, var: &Var<'_>) -> Option<&Tensor> {
        self.grads.get(var.id).and_then(|g| g.as_ref())
    }
}

/// Outcome of [`grad_check`].
#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// `(param index, flat coordinate)` of the worst coordinate.
    pub worst: Option<(usize, usize)>,
    pub checked: usize,
    /// Coordinates skipped because a relu input within `10·eps` of the kink moved.
    pub excluded: usize,
}

impl GradCheckReport {
    pub fn passes(&self, tol: f64) -> bool {
        self.max_rel_error < tol
    }
}

/// Compares tape gradients with central finite differences for every
/// coordinate of every parameter.
///
/// `f` receives a fresh tape and the parameters registered on it, and must
/// return a scalar loss. The relative error of a coordinate is
/// `|g_fd - g_ad| / max(|g_fd|, |g_ad|, 1e-8)`.
pub fn grad_check<F>(f: F, params: &[Tensor], eps: f64) -> Result<GradCheckReport>
where
    F: for<'t> Fn(&'t Tape, &[Var<'t>]) -> Result<Var<'t>>,
{
    if !(eps > 0.0 && eps <= 1e-2) {
        return Err(AutodiffError::InvalidStep(eps));
    }
    let tape = Tape::new();
    let vars: Vec<Var<'_>> = params.iter().map(|p| tape.param(p.clone())).collect();
    let loss = f(&tape, &vars)?;
    let grads = loss.backward()?;
    let analytic: Vec<Tensor> = vars
        .iter()
        .map(|v| grads.get(v).cloned().unwrap_or_else(|| Tensor::zeros(v.shape())))
        .collect();

    let evaluate = |perturbed: &[Tensor], param: usize, coord: usize| -> Result<(f64, Vec<Tensor>)> {
        let tape = Tape::new();
        let vars: Vec<Var<'_>> = perturbed.iter().map(|p| tape.param(p.clone())).collect();
        let value = f(&tape, &vars)?.item();
        if !value.is_finite() {
            return Err(AutodiffError::NonFiniteEvaluation {
                param,
                coord,
                value,
            });
        }
        Ok((value, tape.relu_inputs()))
    };

    let band = 10.0 * eps;
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: None,
        checked: 0,
        excluded: 0,
    };
    let mut work: Vec<Tensor> = params.to_vec();
    for p in 0..params.len() {
        for c in 0..params[p].len() {
            let orig = params[p].data[c];
            work[p].data[c] = orig + eps;
            let (plus, relu_plus) = evaluate(&work, p, c)?;
            work[p].data[c] = orig - eps;
            let (minus, relu_minus) = evaluate(&work, p, c)?;
            work[p].data[c] = orig;

            if near_kink(&relu_plus, &relu_minus, band) {
                report.excluded += 1;
                continue;
            }
            let fd = (plus - minus) / (2.0 * eps);
            let ad = analytic[p].data[c];
            let rel = (fd - ad).abs() / fd.abs().max(ad.abs()).max(1e-8);
            report.checked += 1;
            if rel > report.max_rel_error || report.worst.is_none() {
                report.max_rel_error = rel;
                report.worst = Some((p, c));
            }
        }
    }
    Ok(report)
}

/// True when some relu input moved under the perturbation while sitting
/// within `band` of zero at either end.
fn near_kink(plus: &[Tensor], minus: &[Tensor], band: f64) -> bool {
    plus.iter().zip(minus).any(|(p, m)| {
        p.data
            .iter()
            .zip(&m.data)
            .any(|(x, y)| x != y && (x.abs() < band || y.abs() < band))
    })
}
