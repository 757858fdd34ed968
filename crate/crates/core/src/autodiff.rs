//! Minimal reverse-mode automatic differentiation over dense `f64` tensors.
//!
//! A [`Tape`] records every operation of a forward pass as a node holding its
//! value and the ids of its inputs. [`Tape::backward`] consumes the tape and
//! walks it in reverse, accumulating vector-Jacobian products into a
//! [`Gradients`] table keyed by [`Var`].
//!
//! Binary elementwise ops broadcast numpy-style (shapes aligned from the
//! right, size-1 dimensions stretch). Reductions act on a single named axis.
//! Everything is float-64.

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AutodiffError {
    #[error("{op}: shape mismatch between {lhs:?} and {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("shape {shape:?} does not describe {len} values")]
    InvalidShape { shape: Vec<usize>, len: usize },
    #[error("{op}: value {value} at index {index} is outside the domain")]
    Domain {
        op: &'static str,
        index: usize,
        value: f64,
    },
    #[error("{op}: axis {axis} out of range for rank {rank}")]
    AxisOutOfRange {
        op: &'static str,
        axis: usize,
        rank: usize,
    },
    #[error("{op}: reduction over an empty axis")]
    EmptyAxis { op: &'static str },
    #[error("{op}: expected {expected} inputs, got {got}")]
    Arity {
        op: &'static str,
        expected: usize,
        got: usize,
    },
    #[error("backward requires a scalar loss, got shape {shape:?}")]
    NonScalarLoss { shape: Vec<usize> },
    #[error("backward called on an empty tape")]
    EmptyTape,
    #[error("gradient norm requested for an empty parameter group")]
    EmptyGroup,
    #[error("parameter `{name}` has no gradient")]
    MissingGradient { name: String },
}

pub type Result<T> = std::result::Result<T, AutodiffError>;

/// Dense row-major tensor with an optional gradient slot.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
    #[serde(skip)]
    grad: Option<Vec<f64>>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let len: usize = shape.iter().product();
        if len != data.len() || shape.contains(&0) {
            return Err(AutodiffError::InvalidShape {
                shape,
                len: data.len(),
            });
        }
        Ok(Self {
            shape,
            data,
            grad: None,
        })
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        let len = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![value; len],
            grad: None,
        }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn ones(shape: &[usize]) -> Self {
        Self::full(shape, 1.0)
    }

    pub fn scalar(value: f64) -> Self {
        Self::full(&[1], value)
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> f64) -> Self {
        let len: usize = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: (0..len).map(&mut f).collect(),
            grad: None,
        }
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

    pub fn grad(&self) -> Option<&[f64]> {
        self.grad.as_deref()
    }

    pub fn grad_mut(&mut self) -> Option<&mut [f64]> {
        self.grad.as_deref_mut()
    }

    pub fn set_grad(&mut self, grad: Vec<f64>) -> Result<()> {
        if grad.len() != self.data.len() {
            return Err(AutodiffError::InvalidShape {
                shape: self.shape.clone(),
                len: grad.len(),
            });
        }
        self.grad = Some(grad);
        Ok(())
    }

    pub fn clear_grad(&mut self) {
        self.grad = None;
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Single value of a one-element tensor.
    pub fn item(&self) -> Option<f64> {
        (self.data.len() == 1).then(|| self.data[0])
    }
}

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum UnaryKind {
    Neg,
    Tanh,
    Relu,
    Sigmoid,
    Sqrt,
    Log,
    Exp,
    Softplus,
    Abs,
    Square,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BinaryKind {
    Add,
    Sub,
    Mul,
    Div,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ReduceKind {
    Sum,
    Mean,
    /// Population variance (divide by n).
    Variance,
}

/// Every operation the tape can record, for dispatch through [`Tape::apply`].
#[derive(Clone, Debug, PartialEq)]
pub enum OpKind {
    Unary(UnaryKind),
    Binary(BinaryKind),
    /// `[..., k] x [k, n] -> [..., n]`
    MatMul,
    ConcatLast,
    Reduce {
        kind: ReduceKind,
        axis: usize,
        keepdim: bool,
    },
    SumAll,
    MeanAll,
    /// `mean((a - b)^2)` over all elements, shapes must match.
    SquaredError,
    Scale(f64),
    AddScalar(f64),
    Reshape(Vec<usize>),
}

impl OpKind {
    pub fn name(&self) -> &'static str {
        match self {
            OpKind::Unary(k) => match k {
                UnaryKind::Neg => "neg",
                UnaryKind::Tanh => "tanh",
                UnaryKind::Relu => "relu",
                UnaryKind::Sigmoid => "sigmoid",
                UnaryKind::Sqrt => "sqrt",
                UnaryKind::Log => "log",
                UnaryKind::Exp => "exp",
                UnaryKind::Softplus => "softplus",
                UnaryKind::Abs => "abs",
                UnaryKind::Square => "square",
            },
            OpKind::Binary(k) => match k {
                BinaryKind::Add => "add",
                BinaryKind::Sub => "sub",
                BinaryKind::Mul => "mul",
                BinaryKind::Div => "div",
            },
            OpKind::MatMul => "matmul",
            OpKind::ConcatLast => "concat_last",
            OpKind::Reduce { kind, .. } => match kind {
                ReduceKind::Sum => "sum_axis",
                ReduceKind::Mean => "mean_axis",
                ReduceKind::Variance => "variance_axis",
            },
            OpKind::SumAll => "sum_all",
            OpKind::MeanAll => "mean_all",
            OpKind::SquaredError => "squared_error",
            OpKind::Scale(_) => "scale",
            OpKind::AddScalar(_) => "add_scalar",
            OpKind::Reshape(_) => "reshape",
        }
    }

    fn arity(&self) -> usize {
        match self {
            OpKind::Binary(_) | OpKind::MatMul | OpKind::ConcatLast | OpKind::SquaredError => 2,
            _ => 1,
        }
    }
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Unary(UnaryKind, Var),
    Binary(BinaryKind, Var, Var),
    MatMul(Var, Var),
    ConcatLast(Var, Var),
    Reduce(ReduceKind, Var, usize),
    SumAll(Var),
    MeanAll(Var),
    SquaredError(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Reshape(Var),
}

#[derive(Clone, Debug)]
struct Node {
    shape: Vec<usize>,
    data: Vec<f64>,
    op: Op,
    requires_grad: bool,
}

/// Ordered record of a forward pass. Inputs always precede the ops using them.
#[derive(Clone, Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Result of [`Tape::backward`]: one gradient slot per tape node.
#[derive(Clone, Debug)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    /// Gradient of the loss w.r.t. `var`, or `None` when `var` does not
    /// influence the loss (or does not require gradients).
    pub fn get(&self, var: Var) -> Option<&[f64]> {
        self.grads.get(var.0).and_then(|g| g.as_deref())
    }

    /// Like [`get`](Self::get) but zero-filled for unreachable nodes.
    pub fn get_or_zeros(&self, var: Var, len: usize) -> Vec<f64> {
        self.get(var)
            .map(|g| g.to_vec())
            .unwrap_or_else(|| vec![0.0; len])
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Records a leaf that receives gradients.
    pub fn param(&mut self, tensor: &Tensor) -> Var {
        self.leaf(tensor.shape.clone(), tensor.data.clone(), true)
    }

    /// Records a leaf that never receives gradients.
    pub fn constant(&mut self, tensor: Tensor) -> Var {
        self.leaf(tensor.shape, tensor.data, false)
    }

    /// Copies the value of `x` into a fresh constant leaf.
    pub fn detach(&mut self, x: Var) -> Var {
        let n = &self.nodes[x.0];
        self.leaf(n.shape.clone(), n.data.clone(), false)
    }

    fn leaf(&mut self, shape: Vec<usize>, data: Vec<f64>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            shape,
            data,
            op: Op::Leaf,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn shape(&self, x: Var) -> &[usize] {
        &self.nodes[x.0].shape
    }

    pub fn data(&self, x: Var) -> &[f64] {
        &self.nodes[x.0].data
    }

    pub fn value(&self, x: Var) -> Tensor {
        let n = &self.nodes[x.0];
        Tensor {
            shape: n.shape.clone(),
            data: n.data.clone(),
            grad: None,
        }
    }

    /// Value of a single-element node.
    pub fn scalar(&self, x: Var) -> f64 {
        self.nodes[x.0].data[0]
    }

    fn push(&mut self, shape: Vec<usize>, data: Vec<f64>, op: Op, inputs: &[Var]) -> Var {
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            shape,
            data,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Generic dispatcher over [`OpKind`].
    pub fn apply(&mut self, kind: &OpKind, inputs: &[Var]) -> Result<Var> {
        if inputs.len() != kind.arity() {
            return Err(AutodiffError::Arity {
                op: kind.name(),
                expected: kind.arity(),
                got: inputs.len(),
            });
        }
        let a = inputs[0];
        match kind {
            OpKind::Unary(k) => self.unary(*k, a),
            OpKind::Binary(k) => self.binary(*k, a, inputs[1]),
            OpKind::MatMul => self.matmul(a, inputs[1]),
            OpKind::ConcatLast => self.concat_last(a, inputs[1]),
            OpKind::Reduce { kind, axis, keepdim } => self.reduce(*kind, a, *axis, *keepdim),
            OpKind::SumAll => Ok(self.sum_all(a)),
            OpKind::MeanAll => Ok(self.mean_all(a)),
            OpKind::SquaredError => self.squared_error(a, inputs[1]),
            OpKind::Scale(c) => Ok(self.scale(a, *c)),
            OpKind::AddScalar(c) => Ok(self.add_scalar(a, *c)),
            OpKind::Reshape(shape) => self.reshape(a, shape),
        }
    }

    // ---- unary ----------------------------------------------------------

    pub fn unary(&mut self, kind: UnaryKind, x: Var) -> Result<Var> {
        let src = &self.nodes[x.0].data;
        let data: Vec<f64> = match kind {
            UnaryKind::Neg => src.iter().map(|v| -v).collect(),
            UnaryKind::Tanh => src.iter().map(|v| v.tanh()).collect(),
            UnaryKind::Relu => src.iter().map(|&v| if v < 0.0 { 0.0 } else { v }).collect(),
            UnaryKind::Sigmoid => src.iter().map(|&v| sigmoid(v)).collect(),
            UnaryKind::Sqrt => {
                if let Some((index, &value)) = src.iter().enumerate().find(|(_, v)| **v < 0.0) {
                    return Err(AutodiffError::Domain {
                        op: "sqrt",
                        index,
                        value,
                    });
                }
                src.iter().map(|v| v.sqrt()).collect()
            }
            UnaryKind::Log => {
                if let Some((index, &value)) = src.iter().enumerate().find(|(_, v)| **v <= 0.0) {
                    return Err(AutodiffError::Domain {
                        op: "log",
                        index,
                        value,
                    });
                }
                src.iter().map(|v| v.ln()).collect()
            }
            UnaryKind::Exp => src.iter().map(|v| v.exp()).collect(),
            UnaryKind::Softplus => src.iter().map(|&v| softplus(v)).collect(),
            UnaryKind::Abs => src.iter().map(|v| v.abs()).collect(),
            UnaryKind::Square => src.iter().map(|v| v * v).collect(),
        };
        let shape = self.nodes[x.0].shape.clone();
        Ok(self.push(shape, data, Op::Unary(kind, x), &[x]))
    }

    pub fn neg(&mut self, x: Var) -> Var {
        self.unary(UnaryKind::Neg, x).expect("neg is total")
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        self.unary(UnaryKind::Tanh, x).expect("tanh is total")
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.unary(UnaryKind::Relu, x).expect("relu is total")
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(UnaryKind::Sigmoid, x).expect("sigmoid is total")
    }

    pub fn exp(&mut self, x: Var) -> Var {
        self.unary(UnaryKind::Exp, x).expect("exp is total")
    }

    pub fn softplus(&mut self, x: Var) -> Var {
        self.unary(UnaryKind::Softplus, x).expect("softplus is total")
    }

    pub fn abs(&mut self, x: Var) -> Var {
        self.unary(UnaryKind::Abs, x).expect("abs is total")
    }

    pub fn square(&mut self, x: Var) -> Var {
        self.unary(UnaryKind::Square, x).expect("square is total")
    }

    pub fn sqrt(&mut self, x: Var) -> Result<Var> {
        self.unary(UnaryKind::Sqrt, x)
    }

    pub fn log(&mut self, x: Var) -> Result<Var> {
        self.unary(UnaryKind::Log, x)
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let n = &self.nodes[x.0];
        let data = n.data.iter().map(|v| v * c).collect();
        let shape = n.shape.clone();
        self.push(shape, data, Op::Scale(x, c), &[x])
    }

    pub fn add_scalar(&mut self, x: Var, c: f64) -> Var {
        let n = &self.nodes[x.0];
        let data = n.data.iter().map(|v| v + c).collect();
        let shape = n.shape.clone();
        self.push(shape, data, Op::AddScalar(x), &[x])
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let n = &self.nodes[x.0];
        if shape.iter().product::<usize>() != n.data.len() || shape.contains(&0) {
            return Err(AutodiffError::ShapeMismatch {
                op: "reshape",
                lhs: n.shape.clone(),
                rhs: shape.to_vec(),
            });
        }
        let data = n.data.clone();
        Ok(self.push(shape.to_vec(), data, Op::Reshape(x), &[x]))
    }

    // ---- binary ---------------------------------------------------------

    pub fn binary(&mut self, kind: BinaryKind, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (&self.nodes[a.0].shape, &self.nodes[b.0].shape);
        let out_shape = broadcast_shape(sa, sb).ok_or_else(|| AutodiffError::ShapeMismatch {
            op: OpKind::Binary(kind).name(),
            lhs: sa.clone(),
            rhs: sb.clone(),
        })?;
        let (da, db) = (&self.nodes[a.0].data, &self.nodes[b.0].data);
        let f = |x: f64, y: f64| match kind {
            BinaryKind::Add => x + y,
            BinaryKind::Sub => x - y,
            BinaryKind::Mul => x * y,
            BinaryKind::Div => x / y,
        };
        let data: Vec<f64> = if sa == sb {
            da.iter().zip(db).map(|(&x, &y)| f(x, y)).collect()
        } else {
            let ia = broadcast_index(&out_shape, sa);
            let ib = broadcast_index(&out_shape, sb);
            ia.iter().zip(&ib).map(|(&i, &j)| f(da[i], db[j])).collect()
        };
        Ok(self.push(out_shape, data, Op::Binary(kind, a, b), &[a, b]))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryKind::Add, a, b)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryKind::Sub, a, b)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryKind::Mul, a, b)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryKind::Div, a, b)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (&self.nodes[a.0].shape, &self.nodes[b.0].shape);
        let k = *sa.last().expect("non-empty shape");
        if sb.len() != 2 || sb[0] != k {
            return Err(AutodiffError::ShapeMismatch {
                op: "matmul",
                lhs: sa.clone(),
                rhs: sb.clone(),
            });
        }
        let n = sb[1];
        let m = self.nodes[a.0].data.len() / k;
        let (da, db) = (&self.nodes[a.0].data, &self.nodes[b.0].data);
        let mut data = vec![0.0; m * n];
        for i in 0..m {
            let row = &da[i * k..(i + 1) * k];
            let out = &mut data[i * n..(i + 1) * n];
            for (p, &x) in row.iter().enumerate() {
                if x == 0.0 {
                    continue;
                }
                let brow = &db[p * n..(p + 1) * n];
                for (o, &w) in out.iter_mut().zip(brow) {
                    *o += x * w;
                }
            }
        }
        let mut shape = sa.clone();
        *shape.last_mut().expect("non-empty shape") = n;
        Ok(self.push(shape, data, Op::MatMul(a, b), &[a, b]))
    }

    pub fn concat_last(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (&self.nodes[a.0].shape, &self.nodes[b.0].shape);
        if sa.len() != sb.len() || sa[..sa.len() - 1] != sb[..sb.len() - 1] {
            return Err(AutodiffError::ShapeMismatch {
                op: "concat_last",
                lhs: sa.clone(),
                rhs: sb.clone(),
            });
        }
        let (ka, kb) = (*sa.last().unwrap(), *sb.last().unwrap());
        let rows = self.nodes[a.0].data.len() / ka;
        let (da, db) = (&self.nodes[a.0].data, &self.nodes[b.0].data);
        let mut data = Vec::with_capacity(rows * (ka + kb));
        for r in 0..rows {
            data.extend_from_slice(&da[r * ka..(r + 1) * ka]);
            data.extend_from_slice(&db[r * kb..(r + 1) * kb]);
        }
        let mut shape = sa.clone();
        *shape.last_mut().unwrap() = ka + kb;
        Ok(self.push(shape, data, Op::ConcatLast(a, b), &[a, b]))
    }

    // ---- reductions -----------------------------------------------------

    pub fn reduce(&mut self, kind: ReduceKind, x: Var, axis: usize, keepdim: bool) -> Result<Var> {
        let op = OpKind::Reduce {
            kind,
            axis,
            keepdim,
        }
        .name();
        let shape = &self.nodes[x.0].shape;
        if axis >= shape.len() {
            return Err(AutodiffError::AxisOutOfRange {
                op,
                axis,
                rank: shape.len(),
            });
        }
        let (outer, n, inner) = split_axis(shape, axis);
        if n == 0 {
            return Err(AutodiffError::EmptyAxis { op });
        }
        let src = &self.nodes[x.0].data;
        let mut data = vec![0.0; outer * inner];
        for o in 0..outer {
            for i in 0..inner {
                let at = |j: usize| src[(o * n + j) * inner + i];
                let sum: f64 = (0..n).map(at).sum();
                data[o * inner + i] = match kind {
                    ReduceKind::Sum => sum,
                    ReduceKind::Mean => sum / n as f64,
                    ReduceKind::Variance => {
                        let mean = sum / n as f64;
                        (0..n).map(|j| (at(j) - mean).powi(2)).sum::<f64>() / n as f64
                    }
                };
            }
        }
        let mut out_shape = shape.clone();
        if keepdim || shape.len() == 1 {
            out_shape[axis] = 1;
        } else {
            out_shape.remove(axis);
        }
        Ok(self.push(out_shape, data, Op::Reduce(kind, x, axis), &[x]))
    }

    pub fn sum_axis(&mut self, x: Var, axis: usize, keepdim: bool) -> Result<Var> {
        self.reduce(ReduceKind::Sum, x, axis, keepdim)
    }

    pub fn mean_axis(&mut self, x: Var, axis: usize, keepdim: bool) -> Result<Var> {
        self.reduce(ReduceKind::Mean, x, axis, keepdim)
    }

    pub fn variance_axis(&mut self, x: Var, axis: usize, keepdim: bool) -> Result<Var> {
        self.reduce(ReduceKind::Variance, x, axis, keepdim)
    }

    pub fn sum_all(&mut self, x: Var) -> Var {
        let s = self.nodes[x.0].data.iter().sum();
        self.push(vec![1], vec![s], Op::SumAll(x), &[x])
    }

    pub fn mean_all(&mut self, x: Var) -> Var {
        let d = &self.nodes[x.0].data;
        let m = d.iter().sum::<f64>() / d.len() as f64;
        self.push(vec![1], vec![m], Op::MeanAll(x), &[x])
    }

    pub fn squared_error(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (&self.nodes[a.0].shape, &self.nodes[b.0].shape);
        if sa != sb {
            return Err(AutodiffError::ShapeMismatch {
                op: "squared_error",
                lhs: sa.clone(),
                rhs: sb.clone(),
            });
        }
        let (da, db) = (&self.nodes[a.0].data, &self.nodes[b.0].data);
        let s: f64 = da.iter().zip(db).map(|(x, y)| (x - y).powi(2)).sum();
        let m = s / da.len() as f64;
        Ok(self.push(vec![1], vec![m], Op::SquaredError(a, b), &[a, b]))
    }

    /// Index of the last axis of `x`.
    pub fn last_axis(&self, x: Var) -> usize {
        self.nodes[x.0].shape.len() - 1
    }

    /// Smallest `|x|` over every input of a `relu` or `abs` node: the
    /// distance of the recorded point from the nearest kink. Infinite when
    /// the tape has no such node.
    pub fn kink_margin(&self) -> f64 {
        self.nodes
            .iter()
            .filter_map(|n| match n.op {
                Op::Unary(UnaryKind::Relu | UnaryKind::Abs, x) => Some(x),
                _ => None,
            })
            .flat_map(|x| self.nodes[x.0].data.iter())
            .fold(f64::INFINITY, |m, v| m.min(v.abs()))
    }

    // ---- backward -------------------------------------------------------

    /// Reverse sweep from a scalar `loss`. Consumes the tape.
    pub fn backward(self, loss: Var) -> Result<Gradients> {
        if self.nodes.is_empty() {
            return Err(AutodiffError::EmptyTape);
        }
        let root = &self.nodes[loss.0];
        if root.data.len() != 1 {
            return Err(AutodiffError::NonScalarLoss {
                shape: root.shape.clone(),
            });
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);

        for id in (0..=loss.0).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &self.nodes[id];
            if !node.requires_grad {
                continue;
            }
            match &node.op {
                Op::Leaf => {}
                Op::Unary(kind, x) => {
                    let xd = &self.nodes[x.0].data;
                    let y = &node.data;
                    let local: Vec<f64> = (0..g.len())
                        .map(|i| {
                            let d = match kind {
                                UnaryKind::Neg => -1.0,
                                UnaryKind::Tanh => 1.0 - y[i] * y[i],
                                UnaryKind::Relu => {
                                    if xd[i] > 0.0 {
                                        1.0
                                    } else {
                                        0.0
                                    }
                                }
                                UnaryKind::Sigmoid => y[i] * (1.0 - y[i]),
                                UnaryKind::Sqrt => 0.5 / y[i],
                                UnaryKind::Log => 1.0 / xd[i],
                                UnaryKind::Exp => y[i],
                                UnaryKind::Softplus => sigmoid(xd[i]),
                                UnaryKind::Abs => {
                                    if xd[i] > 0.0 {
                                        1.0
                                    } else if xd[i] < 0.0 {
                                        -1.0
                                    } else {
                                        0.0
                                    }
                                }
                                UnaryKind::Square => 2.0 * xd[i],
                            };
                            g[i] * d
                        })
                        .collect();
                    accumulate(&mut grads, &self.nodes, *x, &local);
                }
                Op::Scale(x, c) => {
                    let local: Vec<f64> = g.iter().map(|v| v * c).collect();
                    accumulate(&mut grads, &self.nodes, *x, &local);
                }
                Op::AddScalar(x) | Op::Reshape(x) => {
                    accumulate(&mut grads, &self.nodes, *x, &g);
                }
                Op::Binary(kind, a, b) => {
                    let (na, nb) = (&self.nodes[a.0], &self.nodes[b.0]);
                    let ia = broadcast_index(&node.shape, &na.shape);
                    let ib = broadcast_index(&node.shape, &nb.shape);
                    let mut ga = vec![0.0; na.data.len()];
                    let mut gb = vec![0.0; nb.data.len()];
                    for (i, &gi) in g.iter().enumerate() {
                        let (x, y) = (na.data[ia[i]], nb.data[ib[i]]);
                        let (dx, dy) = match kind {
                            BinaryKind::Add => (1.0, 1.0),
                            BinaryKind::Sub => (1.0, -1.0),
                            BinaryKind::Mul => (y, x),
                            BinaryKind::Div => (1.0 / y, -x / (y * y)),
                        };
                        ga[ia[i]] += gi * dx;
                        gb[ib[i]] += gi * dy;
                    }
                    accumulate(&mut grads, &self.nodes, *a, &ga);
                    accumulate(&mut grads, &self.nodes, *b, &gb);
                }
                Op::MatMul(a, b) => {
                    let (na, nb) = (&self.nodes[a.0], &self.nodes[b.0]);
                    let (k, n) = (nb.shape[0], nb.shape[1]);
                    let m = na.data.len() / k;
                    if na.requires_grad {
                        // dA = dC . B^T
                        let mut ga = vec![0.0; m * k];
                        for i in 0..m {
                            let grow = &g[i * n..(i + 1) * n];
                            for p in 0..k {
                                let brow = &nb.data[p * n..(p + 1) * n];
                                ga[i * k + p] = grow.iter().zip(brow).map(|(x, y)| x * y).sum();
                            }
                        }
                        accumulate(&mut grads, &self.nodes, *a, &ga);
                    }
                    if nb.requires_grad {
                        // dB = A^T . dC
                        let mut gb = vec![0.0; k * n];
                        for i in 0..m {
                            let arow = &na.data[i * k..(i + 1) * k];
                            let grow = &g[i * n..(i + 1) * n];
                            for (p, &x) in arow.iter().enumerate() {
                                if x == 0.0 {
                                    continue;
                                }
                                for (o, &gv) in gb[p * n..(p + 1) * n].iter_mut().zip(grow) {
                                    *o += x * gv;
                                }
                            }
                        }
                        accumulate(&mut grads, &self.nodes, *b, &gb);
                    }
                }
                Op::ConcatLast(a, b) => {
                    let ka = *self.nodes[a.0].shape.last().unwrap();
                    let kb = *self.nodes[b.0].shape.last().unwrap();
                    let rows = g.len() / (ka + kb);
                    let mut ga = Vec::with_capacity(rows * ka);
                    let mut gb = Vec::with_capacity(rows * kb);
                    for r in 0..rows {
                        let row = &g[r * (ka + kb)..(r + 1) * (ka + kb)];
                        ga.extend_from_slice(&row[..ka]);
                        gb.extend_from_slice(&row[ka..]);
                    }
                    accumulate(&mut grads, &self.nodes, *a, &ga);
                    accumulate(&mut grads, &self.nodes, *b, &gb);
                }
                Op::Reduce(kind, x, axis) => {
                    let nx = &self.nodes[x.0];
                    let (outer, n, inner) = split_axis(&nx.shape, *axis);
                    let mut gx = vec![0.0; nx.data.len()];
                    for o in 0..outer {
                        for i in 0..inner {
                            let go = g[o * inner + i];
                            let idx = |j: usize| (o * n + j) * inner + i;
                            match kind {
                                ReduceKind::Sum => (0..n).for_each(|j| gx[idx(j)] = go),
                                ReduceKind::Mean => {
                                    (0..n).for_each(|j| gx[idx(j)] = go / n as f64)
                                }
                                ReduceKind::Variance => {
                                    let mean =
                                        (0..n).map(|j| nx.data[idx(j)]).sum::<f64>() / n as f64;
                                    for j in 0..n {
                                        gx[idx(j)] =
                                            go * 2.0 * (nx.data[idx(j)] - mean) / n as f64;
                                    }
                                }
                            }
                        }
                    }
                    accumulate(&mut grads, &self.nodes, *x, &gx);
                }
                Op::SumAll(x) => {
                    let gx = vec![g[0]; self.nodes[x.0].data.len()];
                    accumulate(&mut grads, &self.nodes, *x, &gx);
                }
                Op::MeanAll(x) => {
                    let len = self.nodes[x.0].data.len();
                    let gx = vec![g[0] / len as f64; len];
                    accumulate(&mut grads, &self.nodes, *x, &gx);
                }
                Op::SquaredError(a, b) => {
                    let (da, db) = (&self.nodes[a.0].data, &self.nodes[b.0].data);
                    let c = 2.0 * g[0] / da.len() as f64;
                    let ga: Vec<f64> = da.iter().zip(db).map(|(x, y)| c * (x - y)).collect();
                    let gb: Vec<f64> = ga.iter().map(|v| -v).collect();
                    accumulate(&mut grads, &self.nodes, *a, &ga);
                    accumulate(&mut grads, &self.nodes, *b, &gb);
                }
            }
            // Only leaves keep their gradient; intermediates are released.
            if matches!(node.op, Op::Leaf) {
                grads[id] = Some(g);
            }
        }
        Ok(Gradients { grads })
    }
}

fn accumulate(grads: &mut [Option<Vec<f64>>], nodes: &[Node], target: Var, g: &[f64]) {
    if !nodes[target.0].requires_grad {
        return;
    }
    match &mut grads[target.0] {
        Some(acc) => acc.iter_mut().zip(g).for_each(|(a, b)| *a += b),
        slot @ None => *slot = Some(g.to_vec()),
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

fn broadcast_shape(a: &[usize], b: &[usize]) -> Option<Vec<usize>> {
    let rank = a.len().max(b.len());
    let mut out = vec![0; rank];
    for i in 0..rank {
        let da = if i < rank - a.len() { 1 } else { a[i - (rank - a.len())] };
        let db = if i < rank - b.len() { 1 } else { b[i - (rank - b.len())] };
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => return None,
        };
    }
    Some(out)
}

/// For each flat index of `out`, the flat index into a tensor of shape
/// `input` that broadcasts to it.
fn broadcast_index(out: &[usize], input: &[usize]) -> Vec<usize> {
    let len: usize = out.iter().product();
    if out == input {
        return (0..len).collect();
    }
    let offset = out.len() - input.len();
    let mut in_strides = vec![0usize; out.len()];
    let mut stride = 1;
    for d in (0..input.len()).rev() {
        in_strides[d + offset] = if input[d] == 1 { 0 } else { stride };
        stride *= input[d];
    }
    let mut idx = Vec::with_capacity(len);
    let mut counter = vec![0usize; out.len()];
    let mut flat = 0usize;
    for _ in 0..len {
        idx.push(flat);
        for d in (0..out.len()).rev() {
            counter[d] += 1;
            flat += in_strides[d];
            if counter[d] < out[d] {
                break;
            }
            flat -= in_strides[d] * counter[d];
            counter[d] = 0;
        }
    }
    idx
}

/// How the per-tensor gradients of a parameter group are summarised.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GradNormMode {
    /// Arithmetic mean of each tensor's L2 norm.
    #[default]
    MeanOfNorms,
    /// One L2 norm over the concatenation of all tensors.
    NormOfAll,
}

/// Gradient norm of a parameter group. Tensors without a gradient slot are
/// a contract violation.
pub fn grad_norm<'a>(
    tensors: impl IntoIterator<Item = (&'a str, &'a Tensor)>,
    mode: GradNormMode,
) -> Result<f64> {
    let mut count = 0usize;
    let mut acc = 0.0;
    for (name, t) in tensors {
        let g = t.grad().ok_or_else(|| AutodiffError::MissingGradient {
            name: name.to_string(),
        })?;
        let sq: f64 = g.iter().map(|v| v * v).sum();
        acc += match mode {
            GradNormMode::MeanOfNorms => sq.sqrt(),
            GradNormMode::NormOfAll => sq,
        };
        count += 1;
    }
    if count == 0 {
        return Err(AutodiffError::EmptyGroup);
    }
    Ok(match mode {
        GradNormMode::MeanOfNorms => acc / count as f64,
        GradNormMode::NormOfAll => acc.sqrt(),
    })
}

/// Per-tensor outcome of [`finite_diff_check`].
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct FiniteDiffEntry {
    pub index: usize,
    pub max_rel_err: f64,
    pub max_abs_err: f64,
    pub flagged: bool,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct FiniteDiffReport {
    pub h: f64,
    pub tol: f64,
    pub entries: Vec<FiniteDiffEntry>,
}

impl FiniteDiffReport {
    pub fn max_rel_err(&self) -> f64 {
        self.entries.iter().map(|e| e.max_rel_err).fold(0.0, f64::max)
    }

    pub fn passed(&self) -> bool {
        self.entries.iter().all(|e| !e.flagged)
    }

    pub fn flagged(&self) -> impl Iterator<Item = &FiniteDiffEntry> {
        self.entries.iter().filter(|e| e.flagged)
    }
}

/// Gradients smaller than this are compared in absolute terms.
pub const REL_ERR_FLOOR: f64 = 1e-6;

/// Relative error between an analytic and a numeric derivative.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    let denom = analytic.abs().max(numeric.abs()).max(REL_ERR_FLOOR);
    (analytic - numeric).abs() / denom
}

/// Compares the analytic gradients stored in each tensor's grad slot with
/// central differences of `loss`. `loss` must be deterministic; it receives
/// the (perturbed) parameter values. Entries with error `>= tol` are flagged.
pub fn finite_diff_check<F>(mut loss: F, params: &[Tensor], h: f64, tol: f64) -> FiniteDiffReport
where
    F: FnMut(&[Tensor]) -> f64,
{
    let mut work: Vec<Tensor> = params.to_vec();
    let mut entries = Vec::with_capacity(params.len());
    for (index, p) in params.iter().enumerate() {
        let zeros = vec![0.0; p.len()];
        let analytic = p.grad().unwrap_or(&zeros).to_vec();
        let mut max_rel_err: f64 = 0.0;
        let mut max_abs_err: f64 = 0.0;
        for j in 0..p.len() {
            let orig = work[index].data[j];
            work[index].data[j] = orig + h;
            let plus = loss(&work);
            work[index].data[j] = orig - h;
            let minus = loss(&work);
            work[index].data[j] = orig;
            let numeric = (plus - minus) / (2.0 * h);
            let rel = relative_error(analytic[j], numeric);
            max_rel_err = max_rel_err.max(if rel.is_nan() { f64::INFINITY } else { rel });
            max_abs_err = max_abs_err.max((analytic[j] - numeric).abs());
        }
        entries.push(FiniteDiffEntry {
            index,
            max_rel_err,
            max_abs_err,
            flagged: max_rel_err >= tol,
        });
    }
    FiniteDiffReport { h, tol, entries }
}
