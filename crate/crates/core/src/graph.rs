//! Dynamic tape for reverse-mode differentiation.
//!
//! Every op appends a node whose inputs already exist, so node order is a
//! topological order and `backward` is a single reverse sweep. A graph is
//! built per forward pass and dropped afterwards.

use alloc::vec;
use alloc::vec::Vec;

use crate::float::Float;
use crate::kernels;
use crate::tensor::{numel, Tensor, TensorError};

type Result<T> = core::result::Result<T, TensorError>;

const LN_EPS: f64 = 1e-5;
const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

/// Handle to a node in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OpKind {
    Leaf,
    Add,
    Sub,
    Mul,
    Neg,
    Scale,
    Exp,
    Log,
    Sigmoid,
    Gelu,
    Softplus,
    MatMul,
    MatMulNt,
    AddBias,
    LayerNorm,
    GatherRows,
    SliceCols,
    ConcatCols,
    ConcatRows,
    CausalSoftmax,
    Reshape,
    Sum,
    Mean,
    SumAxis,
    MeanAxis,
    SoftmaxCrossEntropy,
    TokenLogprobs,
}

enum Op<T> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Neg(Var),
    Scale(Var, T),
    Exp(Var),
    Log(Var),
    Sigmoid(Var),
    Gelu(Var),
    Softplus(Var),
    MatMul(Var, Var),
    MatMulNt(Var, Var),
    AddBias(Var, Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<T>,
        rstd: Vec<T>,
    },
    GatherRows {
        table: Var,
        rows: Vec<usize>,
    },
    SliceCols {
        x: Var,
        start: usize,
    },
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    CausalSoftmax(Var),
    Reshape(Var),
    Sum(Var),
    Mean(Var),
    SumAxis {
        x: Var,
        axis: usize,
    },
    MeanAxis {
        x: Var,
        axis: usize,
    },
    SoftmaxCrossEntropy {
        logits: Var,
        targets: Vec<u32>,
        mask: Vec<bool>,
        lse: Vec<f64>,
        count: usize,
    },
    TokenLogprobs {
        logits: Var,
        rows: Vec<usize>,
        targets: Vec<u32>,
        lse: Vec<f64>,
    },
}

impl<T> Op<T> {
    fn kind(&self) -> OpKind {
        match self {
            Op::Leaf => OpKind::Leaf,
            Op::Add(..) => OpKind::Add,
            Op::Sub(..) => OpKind::Sub,
            Op::Mul(..) => OpKind::Mul,
            Op::Neg(..) => OpKind::Neg,
            Op::Scale(..) => OpKind::Scale,
            Op::Exp(..) => OpKind::Exp,
            Op::Log(..) => OpKind::Log,
            Op::Sigmoid(..) => OpKind::Sigmoid,
            Op::Gelu(..) => OpKind::Gelu,
            Op::Softplus(..) => OpKind::Softplus,
            Op::MatMul(..) => OpKind::MatMul,
            Op::MatMulNt(..) => OpKind::MatMulNt,
            Op::AddBias(..) => OpKind::AddBias,
            Op::LayerNorm { .. } => OpKind::LayerNorm,
            Op::GatherRows { .. } => OpKind::GatherRows,
            Op::SliceCols { .. } => OpKind::SliceCols,
            Op::ConcatCols(..) => OpKind::ConcatCols,
            Op::ConcatRows(..) => OpKind::ConcatRows,
            Op::CausalSoftmax(..) => OpKind::CausalSoftmax,
            Op::Reshape(..) => OpKind::Reshape,
            Op::Sum(..) => OpKind::Sum,
            Op::Mean(..) => OpKind::Mean,
            Op::SumAxis { .. } => OpKind::SumAxis,
            Op::MeanAxis { .. } => OpKind::MeanAxis,
            Op::SoftmaxCrossEntropy { .. } => OpKind::SoftmaxCrossEntropy,
            Op::TokenLogprobs { .. } => OpKind::TokenLogprobs,
        }
    }

    fn inputs(&self) -> Vec<Var> {
        match self {
            Op::Leaf => Vec::new(),
            Op::Add(a, b)
            | Op::Sub(a, b)
            | Op::Mul(a, b)
            | Op::MatMul(a, b)
            | Op::MatMulNt(a, b)
            | Op::AddBias(a, b) => vec![*a, *b],
            Op::Neg(x)
            | Op::Scale(x, _)
            | Op::Exp(x)
            | Op::Log(x)
            | Op::Sigmoid(x)
            | Op::Gelu(x)
            | Op::Softplus(x)
            | Op::CausalSoftmax(x)
            | Op::Reshape(x)
            | Op::Sum(x)
            | Op::Mean(x)
            | Op::SumAxis { x, .. }
            | Op::MeanAxis { x, .. }
            | Op::SliceCols { x, .. } => vec![*x],
            Op::LayerNorm { x, gamma, beta, .. } => vec![*x, *gamma, *beta],
            Op::GatherRows { table, .. } => vec![*table],
            Op::ConcatCols(xs) | Op::ConcatRows(xs) => xs.clone(),
            Op::SoftmaxCrossEntropy { logits, .. } | Op::TokenLogprobs { logits, .. } => {
                vec![*logits]
            }
        }
    }
}

struct Node<T> {
    shape: Vec<usize>,
    value: Vec<T>,
    grad: Option<Vec<T>>,
    requires_grad: bool,
    op: Op<T>,
}

/// Recorded computation. `T` is `f32` for training and `f64` for gradient
/// verification.
pub struct Graph<T: Float = f32> {
    nodes: Vec<Node<T>>,
    backward_done: bool,
    backward_calls: usize,
}

impl<T: Float> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn check_rank2(op: &'static str, shape: &[usize]) -> Result<(usize, usize)> {
    match shape {
        [r, c] => Ok((*r, *c)),
        _ => Err(TensorError::Rank {
            op,
            expected: "rank 2",
            shape: shape.to_vec(),
        }),
    }
}

fn accumulate<T: Float>(node: &mut Node<T>, contrib: Vec<T>) {
    match &mut node.grad {
        Some(g) => {
            for (gi, ci) in g.iter_mut().zip(contrib) {
                *gi += ci;
            }
        }
        None => node.grad = Some(contrib),
    }
}

impl<T: Float> Graph<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            backward_done: false,
            backward_calls: 0,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Number of backward rules executed so far.
    pub fn backward_calls(&self) -> usize {
        self.backward_calls
    }

    pub fn op_kind(&self, v: Var) -> OpKind {
        self.nodes[v.0].op.kind()
    }

    pub fn inputs_of(&self, v: Var) -> Vec<Var> {
        self.nodes[v.0].op.inputs()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn value(&self, v: Var) -> &[T] {
        &self.nodes[v.0].value
    }

    pub fn grad(&self, v: Var) -> Option<&[T]> {
        self.nodes[v.0].grad.as_deref()
    }

    /// Value of a one-element node.
    pub fn item(&self, v: Var) -> T {
        self.nodes[v.0].value[0]
    }

    pub fn to_tensor(&self, v: Var) -> Tensor {
        let n = &self.nodes[v.0];
        Tensor::new(n.shape.clone(), n.value.iter().map(|x| x.to_f32()).collect())
            .expect("node shape is consistent")
    }

    pub fn grad_tensor(&self, v: Var) -> Option<Tensor> {
        let n = &self.nodes[v.0];
        n.grad.as_ref().map(|g| {
            Tensor::new(n.shape.clone(), g.iter().map(|x| x.to_f32()).collect())
                .expect("grad shape is consistent")
        })
    }

    fn push(&mut self, shape: Vec<usize>, value: Vec<T>, op: Op<T>) -> Var {
        debug_assert_eq!(numel(&shape), value.len());
        let requires_grad = op
            .inputs()
            .iter()
            .any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            shape,
            value,
            grad: None,
            requires_grad,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    fn leaf(&mut self, shape: Vec<usize>, value: Vec<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            shape,
            value,
            grad: None,
            requires_grad,
            op: Op::Leaf,
        });
        Var(self.nodes.len() - 1)
    }

    /// Trainable leaf initialised from an `f32` tensor.
    pub fn param(&mut self, t: &Tensor) -> Var {
        let value = t.data().iter().map(|&x| T::from_f32(x)).collect();
        self.leaf(t.shape().to_vec(), value, true)
    }

    /// Constant leaf initialised from an `f32` tensor.
    pub fn constant(&mut self, t: &Tensor) -> Var {
        let value = t.data().iter().map(|&x| T::from_f32(x)).collect();
        self.leaf(t.shape().to_vec(), value, false)
    }

    /// Leaf from raw values of the graph's own precision.
    pub fn leaf_raw(&mut self, shape: Vec<usize>, value: Vec<T>, requires_grad: bool) -> Result<Var> {
        if numel(&shape) != value.len() {
            return Err(TensorError::Length {
                len: value.len(),
                shape,
            });
        }
        Ok(self.leaf(shape, value, requires_grad))
    }

    pub fn scalar(&mut self, value: T) -> Var {
        self.leaf(Vec::new(), vec![value], false)
    }

    // ---------------------------------------------------------------- binary

    fn broadcast_shape(&self, op: &'static str, a: Var, b: Var) -> Result<Vec<usize>> {
        let (sa, sb) = (&self.nodes[a.0].shape, &self.nodes[b.0].shape);
        if sa == sb || numel(sb) == 1 {
            Ok(sa.clone())
        } else if numel(sa) == 1 {
            Ok(sb.clone())
        } else {
            Err(TensorError::Shape {
                op,
                lhs: sa.clone(),
                rhs: sb.clone(),
            })
        }
    }

    fn binary(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(T, T) -> T,
        op: Op<T>,
    ) -> Result<Var> {
        let shape = self.broadcast_shape(name, a, b)?;
        let n = numel(&shape);
        let (va, vb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        let value = (0..n)
            .map(|i| {
                let x = if va.len() == 1 { va[0] } else { va[i] };
                let y = if vb.len() == 1 { vb[0] } else { vb[i] };
                f(x, y)
            })
            .collect();
        Ok(self.push(shape, value, op))
    }

    /// Elementwise sum; either operand may be a one-element scalar.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    // ----------------------------------------------------------------- unary

    fn unary(&mut self, x: Var, f: impl Fn(T) -> T, op: Op<T>) -> Var {
        let node = &self.nodes[x.0];
        let value = node.value.iter().map(|&v| f(v)).collect();
        let shape = node.shape.clone();
        self.push(shape, value, op)
    }

    pub fn neg(&mut self, x: Var) -> Var {
        self.unary(x, |v| -v, Op::Neg(x))
    }

    pub fn scale(&mut self, x: Var, c: T) -> Var {
        self.unary(x, |v| v * c, Op::Scale(x, c))
    }

    /// `x / c`. The value is an exact division; the gradient scales by `1/c`.
    pub fn div_scalar(&mut self, x: Var, c: T) -> Var {
        self.unary(x, |v| v / c, Op::Scale(x, T::ONE / c))
    }

    pub fn exp(&mut self, x: Var) -> Var {
        self.unary(x, |v| v.exp(), Op::Exp(x))
    }

    /// Natural log. Non-positive inputs are rejected rather than producing NaN.
    pub fn log(&mut self, x: Var) -> Result<Var> {
        if let Some((index, &value)) = self.nodes[x.0]
            .value
            .iter()
            .enumerate()
            .find(|(_, v)| v.partial_cmp(&&T::ZERO) != Some(core::cmp::Ordering::Greater))
        {
            return Err(TensorError::Domain {
                index,
                value: value.to_f64(),
            });
        }
        Ok(self.unary(x, |v| v.ln(), Op::Log(x)))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(x, sigmoid, Op::Sigmoid(x))
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, x: Var) -> Var {
        self.unary(x, gelu, Op::Gelu(x))
    }

    /// `ln(1 + e^x)`, computed without overflow.
    pub fn softplus(&mut self, x: Var) -> Var {
        self.unary(x, softplus, Op::Softplus(x))
    }

    // ---------------------------------------------------------------- linalg

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (&self.nodes[a.0].shape, &self.nodes[b.0].shape);
        let mismatch = || TensorError::Shape {
            op: "matmul",
            lhs: sa.clone(),
            rhs: sb.clone(),
        };
        let (m, k) = check_rank2("matmul", sa).map_err(|_| mismatch())?;
        let (k2, n) = check_rank2("matmul", sb).map_err(|_| mismatch())?;
        if k != k2 {
            return Err(mismatch());
        }
        let mut out = vec![T::ZERO; m * n];
        kernels::matmul_acc(&self.nodes[a.0].value, &self.nodes[b.0].value, &mut out, m, k, n);
        Ok(self.push(vec![m, n], out, Op::MatMul(a, b)))
    }

    /// `a · bᵀ` for `a: [m,k]`, `b: [n,k]`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (&self.nodes[a.0].shape, &self.nodes[b.0].shape);
        let mismatch = || TensorError::Shape {
            op: "matmul_nt",
            lhs: sa.clone(),
            rhs: sb.clone(),
        };
        let (m, k) = check_rank2("matmul_nt", sa).map_err(|_| mismatch())?;
        let (n, k2) = check_rank2("matmul_nt", sb).map_err(|_| mismatch())?;
        if k != k2 {
            return Err(mismatch());
        }
        let mut out = vec![T::ZERO; m * n];
        kernels::matmul_nt_acc(&self.nodes[a.0].value, &self.nodes[b.0].value, &mut out, m, k, n);
        Ok(self.push(vec![m, n], out, Op::MatMulNt(a, b)))
    }

    /// Adds a length-`n` bias to every row of an `[m,n]` matrix.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (m, n) = check_rank2("add_bias", &self.nodes[x.0].shape)?;
        if self.nodes[bias.0].value.len() != n {
            return Err(TensorError::Shape {
                op: "add_bias",
                lhs: self.nodes[x.0].shape.clone(),
                rhs: self.nodes[bias.0].shape.clone(),
            });
        }
        let mut out = self.nodes[x.0].value.clone();
        let b = &self.nodes[bias.0].value;
        for row in out.chunks_exact_mut(n) {
            for (o, &bj) in row.iter_mut().zip(b) {
                *o += bj;
            }
        }
        Ok(self.push(vec![m, n], out, Op::AddBias(x, bias)))
    }

    /// Row-wise layer normalization with affine `gamma`, `beta` of length `n`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let (m, n) = check_rank2("layer_norm", &self.nodes[x.0].shape)?;
        for p in [gamma, beta] {
            if self.nodes[p.0].value.len() != n {
                return Err(TensorError::Shape {
                    op: "layer_norm",
                    lhs: self.nodes[x.0].shape.clone(),
                    rhs: self.nodes[p.0].shape.clone(),
                });
            }
        }
        let xv = &self.nodes[x.0].value;
        let gv = &self.nodes[gamma.0].value;
        let bv = &self.nodes[beta.0].value;
        let mut xhat = vec![T::ZERO; m * n];
        let mut rstd = vec![T::ZERO; m];
        let mut out = vec![T::ZERO; m * n];
        for i in 0..m {
            let row = &xv[i * n..(i + 1) * n];
            let mean = row.iter().map(|v| v.to_f64()).sum::<f64>() / n as f64;
            let var = row
                .iter()
                .map(|v| {
                    let d = v.to_f64() - mean;
                    d * d
                })
                .sum::<f64>()
                / n as f64;
            let r = 1.0 / libm::sqrt(var + LN_EPS);
            rstd[i] = T::from_f64(r);
            for j in 0..n {
                let h = T::from_f64((row[j].to_f64() - mean) * r);
                xhat[i * n + j] = h;
                out[i * n + j] = h * gv[j] + bv[j];
            }
        }
        Ok(self.push(
            vec![m, n],
            out,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            },
        ))
    }

    // ------------------------------------------------------------- structure

    /// Selects rows of a `[r,c]` matrix (embedding lookup when `table` is a
    /// parameter).
    pub fn gather_rows(&mut self, table: Var, rows: &[usize]) -> Result<Var> {
        let (r, c) = check_rank2("gather_rows", &self.nodes[table.0].shape)?;
        let tv = &self.nodes[table.0].value;
        let mut out = Vec::with_capacity(rows.len() * c);
        for &i in rows {
            if i >= r {
                return Err(TensorError::Index {
                    op: "gather_rows",
                    index: i,
                    size: r,
                });
            }
            out.extend_from_slice(&tv[i * c..(i + 1) * c]);
        }
        Ok(self.push(
            vec![rows.len(), c],
            out,
            Op::GatherRows {
                table,
                rows: rows.to_vec(),
            },
        ))
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (m, n) = check_rank2("slice_cols", &self.nodes[x.0].shape)?;
        if start + len > n {
            return Err(TensorError::Index {
                op: "slice_cols",
                index: start + len,
                size: n,
            });
        }
        let xv = &self.nodes[x.0].value;
        let mut out = Vec::with_capacity(m * len);
        for i in 0..m {
            out.extend_from_slice(&xv[i * n + start..i * n + start + len]);
        }
        Ok(self.push(vec![m, len], out, Op::SliceCols { x, start }))
    }

    pub fn concat_cols(&mut self, xs: &[Var]) -> Result<Var> {
        let first = *xs.first().ok_or(TensorError::Rank {
            op: "concat_cols",
            expected: "at least one input",
            shape: Vec::new(),
        })?;
        let (m, _) = check_rank2("concat_cols", &self.nodes[first.0].shape)?;
        let mut widths = Vec::with_capacity(xs.len());
        for &x in xs {
            let (mi, ni) = check_rank2("concat_cols", &self.nodes[x.0].shape)?;
            if mi != m {
                return Err(TensorError::Shape {
                    op: "concat_cols",
                    lhs: self.nodes[first.0].shape.clone(),
                    rhs: self.nodes[x.0].shape.clone(),
                });
            }
            widths.push(ni);
        }
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(m * total);
        for i in 0..m {
            for (&x, &w) in xs.iter().zip(&widths) {
                out.extend_from_slice(&self.nodes[x.0].value[i * w..(i + 1) * w]);
            }
        }
        Ok(self.push(vec![m, total], out, Op::ConcatCols(xs.to_vec())))
    }

    pub fn concat_rows(&mut self, xs: &[Var]) -> Result<Var> {
        let first = *xs.first().ok_or(TensorError::Rank {
            op: "concat_rows",
            expected: "at least one input",
            shape: Vec::new(),
        })?;
        let (_, n) = check_rank2("concat_rows", &self.nodes[first.0].shape)?;
        let mut rows = 0;
        let mut out = Vec::new();
        for &x in xs {
            let (mi, ni) = check_rank2("concat_rows", &self.nodes[x.0].shape)?;
            if ni != n {
                return Err(TensorError::Shape {
                    op: "concat_rows",
                    lhs: self.nodes[first.0].shape.clone(),
                    rhs: self.nodes[x.0].shape.clone(),
                });
            }
            rows += mi;
            out.extend_from_slice(&self.nodes[x.0].value);
        }
        Ok(self.push(vec![rows, n], out, Op::ConcatRows(xs.to_vec())))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        if numel(shape) != self.nodes[x.0].value.len() {
            return Err(TensorError::Shape {
                op: "reshape",
                lhs: self.nodes[x.0].shape.clone(),
                rhs: shape.to_vec(),
            });
        }
        let value = self.nodes[x.0].value.clone();
        Ok(self.push(shape.to_vec(), value, Op::Reshape(x)))
    }

    /// Softmax over each row of a square score matrix, where row `i` only
    /// sees columns `0..=i`. Masked entries are exactly zero.
    pub fn causal_softmax(&mut self, x: Var) -> Result<Var> {
        let (m, n) = check_rank2("causal_softmax", &self.nodes[x.0].shape)?;
        if m != n {
            return Err(TensorError::Rank {
                op: "causal_softmax",
                expected: "square matrix",
                shape: self.nodes[x.0].shape.clone(),
            });
        }
        let xv = &self.nodes[x.0].value;
        let mut out = vec![T::ZERO; m * n];
        for i in 0..m {
            let row = &xv[i * n..i * n + i + 1];
            let mx = row.iter().copied().fold(row[0], T::max);
            let mut z = T::ZERO;
            for j in 0..=i {
                let e = (row[j] - mx).exp();
                out[i * n + j] = e;
                z += e;
            }
            let inv = T::ONE / z;
            for o in &mut out[i * n..i * n + i + 1] {
                *o *= inv;
            }
        }
        Ok(self.push(vec![m, n], out, Op::CausalSoftmax(x)))
    }

    // ------------------------------------------------------------ reductions

    pub fn sum(&mut self, x: Var) -> Var {
        let s: f64 = self.nodes[x.0].value.iter().map(|v| v.to_f64()).sum();
        self.push(Vec::new(), vec![T::from_f64(s)], Op::Sum(x))
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let v = &self.nodes[x.0].value;
        let s: f64 = v.iter().map(|v| v.to_f64()).sum::<f64>() / v.len().max(1) as f64;
        self.push(Vec::new(), vec![T::from_f64(s)], Op::Mean(x))
    }

    fn axis_reduce(&mut self, x: Var, axis: usize, mean: bool) -> Result<Var> {
        let name = if mean { "mean_axis" } else { "sum_axis" };
        let (m, n) = check_rank2(name, &self.nodes[x.0].shape)?;
        let xv = &self.nodes[x.0].value;
        let (shape, out) = match axis {
            0 => {
                let mut acc = vec![0.0f64; n];
                for i in 0..m {
                    for j in 0..n {
                        acc[j] += xv[i * n + j].to_f64();
                    }
                }
                let d = if mean { m as f64 } else { 1.0 };
                (vec![n], acc.into_iter().map(|s| T::from_f64(s / d)).collect())
            }
            1 => {
                let d = if mean { n as f64 } else { 1.0 };
                let out = (0..m)
                    .map(|i| {
                        let s: f64 = xv[i * n..(i + 1) * n].iter().map(|v| v.to_f64()).sum();
                        T::from_f64(s / d)
                    })
                    .collect();
                (vec![m], out)
            }
            _ => {
                return Err(TensorError::Index {
                    op: name,
                    index: axis,
                    size: 2,
                })
            }
        };
        let op = if mean {
            Op::MeanAxis { x, axis }
        } else {
            Op::SumAxis { x, axis }
        };
        Ok(self.push(shape, out, op))
    }

    pub fn sum_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.axis_reduce(x, axis, false)
    }

    pub fn mean_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.axis_reduce(x, axis, true)
    }

    /// Mean over unmasked rows of `-log softmax(logits)[t, target_t]`.
    pub fn softmax_cross_entropy(&mut self, logits: Var, targets: &[u32], mask: &[bool]) -> Result<Var> {
        let (t, v) = check_rank2("softmax_cross_entropy", &self.nodes[logits.0].shape)?;
        if targets.len() != t || mask.len() != t {
            return Err(TensorError::Shape {
                op: "softmax_cross_entropy",
                lhs: self.nodes[logits.0].shape.clone(),
                rhs: vec![targets.len(), mask.len()],
            });
        }
        let count = mask.iter().filter(|&&m| m).count();
        if count == 0 {
            return Err(TensorError::EmptyLoss);
        }
        let lv = &self.nodes[logits.0].value;
        let mut lse = vec![0.0f64; t];
        let mut total = 0.0f64;
        for i in 0..t {
            if !mask[i] {
                continue;
            }
            let tgt = targets[i] as usize;
            if tgt >= v {
                return Err(TensorError::Index {
                    op: "softmax_cross_entropy",
                    index: tgt,
                    size: v,
                });
            }
            let row = &lv[i * v..(i + 1) * v];
            lse[i] = log_sum_exp(row);
            total += lse[i] - row[tgt].to_f64();
        }
        let loss = T::from_f64(total / count as f64);
        Ok(self.push(
            Vec::new(),
            vec![loss],
            Op::SoftmaxCrossEntropy {
                logits,
                targets: targets.to_vec(),
                mask: mask.to_vec(),
                lse,
                count,
            },
        ))
    }

    /// `log softmax(logits[rows[i]])[targets[i]]` for each `i`, as a vector.
    pub fn token_logprobs(&mut self, logits: Var, rows: &[usize], targets: &[u32]) -> Result<Var> {
        let (t, v) = check_rank2("token_logprobs", &self.nodes[logits.0].shape)?;
        if rows.len() != targets.len() {
            return Err(TensorError::Shape {
                op: "token_logprobs",
                lhs: vec![rows.len()],
                rhs: vec![targets.len()],
            });
        }
        let lv = &self.nodes[logits.0].value;
        let mut lse = Vec::with_capacity(rows.len());
        let mut out = Vec::with_capacity(rows.len());
        for (&r, &tgt) in rows.iter().zip(targets) {
            if r >= t {
                return Err(TensorError::Index {
                    op: "token_logprobs",
                    index: r,
                    size: t,
                });
            }
            if tgt as usize >= v {
                return Err(TensorError::Index {
                    op: "token_logprobs",
                    index: tgt as usize,
                    size: v,
                });
            }
            let row = &lv[r * v..(r + 1) * v];
            let l = log_sum_exp(row);
            lse.push(l);
            out.push(T::from_f64(row[tgt as usize].to_f64() - l));
        }
        Ok(self.push(
            vec![rows.len()],
            out,
            Op::TokenLogprobs {
                logits,
                rows: rows.to_vec(),
                targets: targets.to_vec(),
                lse,
            },
        ))
    }

    // -------------------------------------------------------------- backward

    /// Populates gradients of every `requires_grad` node reachable from
    /// `loss`. A second call without [`Graph::zero_grad`] is an error.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.backward_done {
            return Err(TensorError::BackwardTwice);
        }
        let shape = &self.nodes[loss.0].shape;
        if numel(shape) != 1 {
            return Err(TensorError::Rank {
                op: "backward",
                expected: "scalar loss",
                shape: shape.clone(),
            });
        }
        self.backward_done = true;
        if !self.nodes[loss.0].requires_grad {
            return Ok(());
        }
        self.nodes[loss.0].grad = Some(vec![T::ONE]);
        for id in (0..=loss.0).rev() {
            if self.nodes[id].grad.is_none() || matches!(self.nodes[id].op, Op::Leaf) {
                continue;
            }
            self.backward_node(id);
            self.backward_calls += 1;
        }
        Ok(())
    }

    /// Clears all gradients so `backward` may run again.
    pub fn zero_grad(&mut self) {
        for n in &mut self.nodes {
            n.grad = None;
        }
        self.backward_done = false;
    }

    fn backward_node(&mut self, id: usize) {
        let (before, rest) = self.nodes.split_at_mut(id);
        let node = &rest[0];
        let g = node.grad.as_deref().expect("checked by caller");

        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) | Op::Sub(a, b) => {
                let sign = if matches!(node.op, Op::Sub(..)) {
                    -T::ONE
                } else {
                    T::ONE
                };
                if before[a.0].requires_grad {
                    let c = reduce_broadcast(g, before[a.0].value.len());
                    accumulate(&mut before[a.0], c);
                }
                if before[b.0].requires_grad {
                    let mut c = reduce_broadcast(g, before[b.0].value.len());
                    for x in &mut c {
                        *x *= sign;
                    }
                    accumulate(&mut before[b.0], c);
                }
            }
            Op::Mul(a, b) => {
                for (this, other) in [(*a, *b), (*b, *a)] {
                    if !before[this.0].requires_grad {
                        continue;
                    }
                    let ov = &before[other.0].value;
                    let full: Vec<T> = g
                        .iter()
                        .enumerate()
                        .map(|(i, &gi)| gi * if ov.len() == 1 { ov[0] } else { ov[i] })
                        .collect();
                    let c = reduce_broadcast(&full, before[this.0].value.len());
                    accumulate(&mut before[this.0], c);
                }
            }
            Op::Neg(x) => {
                if before[x.0].requires_grad {
                    accumulate(&mut before[x.0], g.iter().map(|&v| -v).collect());
                }
            }
            Op::Scale(x, c) => {
                if before[x.0].requires_grad {
                    accumulate(&mut before[x.0], g.iter().map(|&v| v * *c).collect());
                }
            }
            Op::Exp(x) => {
                if before[x.0].requires_grad {
                    let c = g.iter().zip(&node.value).map(|(&gi, &y)| gi * y).collect();
                    accumulate(&mut before[x.0], c);
                }
            }
            Op::Log(x) => {
                if before[x.0].requires_grad {
                    let xv = &before[x.0].value;
                    let c = g.iter().zip(xv).map(|(&gi, &xi)| gi / xi).collect();
                    accumulate(&mut before[x.0], c);
                }
            }
            Op::Sigmoid(x) => {
                if before[x.0].requires_grad {
                    let c = g
                        .iter()
                        .zip(&node.value)
                        .map(|(&gi, &y)| gi * y * (T::ONE - y))
                        .collect();
                    accumulate(&mut before[x.0], c);
                }
            }
            Op::Gelu(x) => {
                if before[x.0].requires_grad {
                    let xv = &before[x.0].value;
                    let c = g.iter().zip(xv).map(|(&gi, &xi)| gi * gelu_grad(xi)).collect();
                    accumulate(&mut before[x.0], c);
                }
            }
            Op::Softplus(x) => {
                if before[x.0].requires_grad {
                    let xv = &before[x.0].value;
                    let c = g.iter().zip(xv).map(|(&gi, &xi)| gi * sigmoid(xi)).collect();
                    accumulate(&mut before[x.0], c);
                }
            }
            Op::MatMul(a, b) => {
                let (m, k) = (before[a.0].shape[0], before[a.0].shape[1]);
                let n = before[b.0].shape[1];
                if before[a.0].requires_grad {
                    let mut c = vec![T::ZERO; m * k];
                    kernels::matmul_nt_acc(g, &before[b.0].value, &mut c, m, n, k);
                    accumulate(&mut before[a.0], c);
                }
                if before[b.0].requires_grad {
                    let mut c = vec![T::ZERO; k * n];
                    kernels::matmul_tn_acc(&before[a.0].value, g, &mut c, m, k, n);
                    accumulate(&mut before[b.0], c);
                }
            }
            Op::MatMulNt(a, b) => {
                let (m, k) = (before[a.0].shape[0], before[a.0].shape[1]);
                let n = before[b.0].shape[0];
                if before[a.0].requires_grad {
                    let mut c = vec![T::ZERO; m * k];
                    kernels::matmul_acc(g, &before[b.0].value, &mut c, m, n, k);
                    accumulate(&mut before[a.0], c);
                }
                if before[b.0].requires_grad {
                    let mut c = vec![T::ZERO; n * k];
                    kernels::matmul_tn_acc(g, &before[a.0].value, &mut c, m, n, k);
                    accumulate(&mut before[b.0], c);
                }
            }
            Op::AddBias(x, bias) => {
                let n = before[x.0].shape[1];
                if before[x.0].requires_grad {
                    accumulate(&mut before[x.0], g.to_vec());
                }
                if before[bias.0].requires_grad {
                    let mut c = vec![T::ZERO; n];
                    for row in g.chunks_exact(n) {
                        for (cj, &gj) in c.iter_mut().zip(row) {
                            *cj += gj;
                        }
                    }
                    accumulate(&mut before[bias.0], c);
                }
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            } => {
                let n = before[x.0].shape[1];
                let m = before[x.0].shape[0];
                if before[gamma.0].requires_grad {
                    let mut c = vec![T::ZERO; n];
                    for i in 0..m {
                        for j in 0..n {
                            c[j] += g[i * n + j] * xhat[i * n + j];
                        }
                    }
                    accumulate(&mut before[gamma.0], c);
                }
                if before[beta.0].requires_grad {
                    let mut c = vec![T::ZERO; n];
                    for row in g.chunks_exact(n) {
                        for (cj, &gj) in c.iter_mut().zip(row) {
                            *cj += gj;
                        }
                    }
                    accumulate(&mut before[beta.0], c);
                }
                if before[x.0].requires_grad {
                    let gv = &before[gamma.0].value;
                    let mut c = vec![T::ZERO; m * n];
                    let inv_n = 1.0 / n as f64;
                    for i in 0..m {
                        let mut s1 = 0.0f64;
                        let mut s2 = 0.0f64;
                        for j in 0..n {
                            let dh = (g[i * n + j] * gv[j]).to_f64();
                            s1 += dh;
                            s2 += dh * xhat[i * n + j].to_f64();
                        }
                        let (m1, m2) = (s1 * inv_n, s2 * inv_n);
                        let r = rstd[i].to_f64();
                        for j in 0..n {
                            let dh = (g[i * n + j] * gv[j]).to_f64();
                            c[i * n + j] = T::from_f64(r * (dh - m1 - xhat[i * n + j].to_f64() * m2));
                        }
                    }
                    accumulate(&mut before[x.0], c);
                }
            }
            Op::GatherRows { table, rows } => {
                if before[table.0].requires_grad {
                    let c_cols = before[table.0].shape[1];
                    let mut c = vec![T::ZERO; before[table.0].value.len()];
                    for (k, &r) in rows.iter().enumerate() {
                        let src = &g[k * c_cols..(k + 1) * c_cols];
                        for (dst, &s) in c[r * c_cols..(r + 1) * c_cols].iter_mut().zip(src) {
                            *dst += s;
                        }
                    }
                    accumulate(&mut before[table.0], c);
                }
            }
            Op::SliceCols { x, start } => {
                if before[x.0].requires_grad {
                    let (m, n) = (before[x.0].shape[0], before[x.0].shape[1]);
                    let len = node.shape[1];
                    let mut c = vec![T::ZERO; m * n];
                    for i in 0..m {
                        c[i * n + start..i * n + start + len].copy_from_slice(&g[i * len..(i + 1) * len]);
                    }
                    accumulate(&mut before[x.0], c);
                }
            }
            Op::ConcatCols(xs) => {
                let m = node.shape[0];
                let total = node.shape[1];
                let mut offset = 0;
                for x in xs {
                    let w = before[x.0].shape[1];
                    if before[x.0].requires_grad {
                        let mut c = Vec::with_capacity(m * w);
                        for i in 0..m {
                            c.extend_from_slice(&g[i * total + offset..i * total + offset + w]);
                        }
                        accumulate(&mut before[x.0], c);
                    }
                    offset += w;
                }
            }
            Op::ConcatRows(xs) => {
                let mut offset = 0;
                for x in xs {
                    let len = before[x.0].value.len();
                    if before[x.0].requires_grad {
                        accumulate(&mut before[x.0], g[offset..offset + len].to_vec());
                    }
                    offset += len;
                }
            }
            Op::CausalSoftmax(x) => {
                if before[x.0].requires_grad {
                    let n = node.shape[1];
                    let y = &node.value;
                    let mut c = vec![T::ZERO; n * n];
                    for i in 0..n {
                        let mut s = T::ZERO;
                        for j in 0..=i {
                            s += y[i * n + j] * g[i * n + j];
                        }
                        for j in 0..=i {
                            c[i * n + j] = y[i * n + j] * (g[i * n + j] - s);
                        }
                    }
                    accumulate(&mut before[x.0], c);
                }
            }
            Op::Reshape(x) => {
                if before[x.0].requires_grad {
                    accumulate(&mut before[x.0], g.to_vec());
                }
            }
            Op::Sum(x) => {
                if before[x.0].requires_grad {
                    let len = before[x.0].value.len();
                    accumulate(&mut before[x.0], vec![g[0]; len]);
                }
            }
            Op::Mean(x) => {
                if before[x.0].requires_grad {
                    let len = before[x.0].value.len();
                    let v = T::from_f64(g[0].to_f64() / len as f64);
                    accumulate(&mut before[x.0], vec![v; len]);
                }
            }
            Op::SumAxis { x, axis } | Op::MeanAxis { x, axis } => {
                if before[x.0].requires_grad {
                    let (m, n) = (before[x.0].shape[0], before[x.0].shape[1]);
                    let is_mean = matches!(node.op, Op::MeanAxis { .. });
                    let mut c = vec![T::ZERO; m * n];
                    for i in 0..m {
                        for j in 0..n {
                            let (gi, d) = if *axis == 0 { (g[j], m) } else { (g[i], n) };
                            c[i * n + j] = if is_mean {
                                T::from_f64(gi.to_f64() / d as f64)
                            } else {
                                gi
                            };
                        }
                    }
                    accumulate(&mut before[x.0], c);
                }
            }
            Op::SoftmaxCrossEntropy {
                logits,
                targets,
                mask,
                lse,
                count,
            } => {
                if before[logits.0].requires_grad {
                    let v = before[logits.0].shape[1];
                    let lv = &before[logits.0].value;
                    let scale = g[0].to_f64() / *count as f64;
                    let mut c = vec![T::ZERO; lv.len()];
                    for (i, (&on, &tgt)) in mask.iter().zip(targets).enumerate() {
                        if !on {
                            continue;
                        }
                        for j in 0..v {
                            let p = libm::exp(lv[i * v + j].to_f64() - lse[i]);
                            let y = if j == tgt as usize { 1.0 } else { 0.0 };
                            c[i * v + j] = T::from_f64(scale * (p - y));
                        }
                    }
                    accumulate(&mut before[logits.0], c);
                }
            }
            Op::TokenLogprobs {
                logits,
                rows,
                targets,
                lse,
            } => {
                if before[logits.0].requires_grad {
                    let v = before[logits.0].shape[1];
                    let lv = &before[logits.0].value;
                    let mut c = vec![T::ZERO; lv.len()];
                    for (k, (&r, &tgt)) in rows.iter().zip(targets).enumerate() {
                        let gk = g[k].to_f64();
                        for j in 0..v {
                            let p = libm::exp(lv[r * v + j].to_f64() - lse[k]);
                            let y = if j == tgt as usize { 1.0 } else { 0.0 };
                            c[r * v + j] += T::from_f64(gk * (y - p));
                        }
                    }
                    accumulate(&mut before[logits.0], c);
                }
            }
        }
    }
}

fn reduce_broadcast<T: Float>(g: &[T], target_len: usize) -> Vec<T> {
    if target_len == g.len() {
        g.to_vec()
    } else {
        let s: f64 = g.iter().map(|v| v.to_f64()).sum();
        vec![T::from_f64(s)]
    }
}

fn log_sum_exp<T: Float>(row: &[T]) -> f64 {
    let mx = row.iter().fold(f64::NEG_INFINITY, |m, v| m.max(v.to_f64()));
    let s: f64 = row.iter().map(|v| libm::exp(v.to_f64() - mx)).sum();
    mx + libm::log(s)
}

fn sigmoid<T: Float>(x: T) -> T {
    if x >= T::ZERO {
        T::ONE / (T::ONE + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::ONE + e)
    }
}

fn softplus<T: Float>(x: T) -> T {
    if x > T::ZERO {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

fn gelu<T: Float>(x: T) -> T {
    let c = T::from_f64(GELU_C);
    let a = T::from_f64(GELU_A);
    let half = T::from_f64(0.5);
    let u = c * (x + a * x * x * x);
    half * x * (T::ONE + u.tanh())
}

fn gelu_grad<T: Float>(x: T) -> T {
    let c = T::from_f64(GELU_C);
    let a = T::from_f64(GELU_A);
    let half = T::from_f64(0.5);
    let u = c * (x + a * x * x * x);
    let th = u.tanh();
    let du = c * (T::ONE + T::from_f64(3.0) * a * x * x);
    half * (T::ONE + th) + half * x * (T::ONE - th * th) * du
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f32]) -> Tensor {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn matmul_identity() {
        let mut g = Graph::<f32>::new();
        let a = g.constant(&t(&[2, 2], &[1.0, 0.0, 0.0, 1.0]));
        let b = g.constant(&t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]));
        let c = g.matmul(a, b).unwrap();
        assert_eq!(g.value(c), &[1.0, 2.0, 3.0, 4.0]);
    }

    #[test]
    fn matmul_dot_product() {
        let mut g = Graph::<f32>::new();
        let a = g.constant(&t(&[1, 2], &[1.0, 2.0]));
        let b = g.constant(&t(&[2, 1], &[3.0, 4.0]));
        let c = g.matmul(a, b).unwrap();
        assert_eq!(g.shape(c), &[1, 1]);
        assert_eq!(g.value(c), &[11.0]);
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let mut g = Graph::<f32>::new();
        let a = g.constant(&Tensor::zeros(vec![2, 3]));
        let b = g.constant(&Tensor::zeros(vec![2, 3]));
        match g.matmul(a, b).unwrap_err() {
            TensorError::Shape { lhs, rhs, .. } => {
                assert_eq!(lhs, vec![2, 3]);
                assert_eq!(rhs, vec![2, 3]);
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn sigmoid_values() {
        let mut g = Graph::<f64>::new();
        let x = g.leaf_raw(vec![2], vec![0.0, 1.0], false).unwrap();
        let y = g.sigmoid(x);
        assert_eq!(g.value(y)[0], 0.5);
        assert!((g.value(y)[1] - 0.731_058_6).abs() < 1e-7);
    }

    #[test]
    fn log_exp_inverse() {
        let mut g = Graph::<f32>::new();
        let x = g.constant(&t(&[3], &[-2.0, 0.0, 3.0]));
        let e = g.exp(x);
        let l = g.log(e).unwrap();
        for (a, b) in g.value(l).iter().zip([-2.0f32, 0.0, 3.0]) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn log_rejects_non_positive() {
        let mut g = Graph::<f32>::new();
        let x = g.constant(&t(&[3], &[1.0, 0.0, 2.0]));
        assert_eq!(
            g.log(x).unwrap_err(),
            TensorError::Domain {
                index: 1,
                value: 0.0
            }
        );
    }

    #[test]
    fn scalar_broadcast_only() {
        let mut g = Graph::<f32>::new();
        let a = g.constant(&Tensor::zeros(vec![2, 3]));
        let s = g.scalar(2.0);
        let b = g.add(a, s).unwrap();
        assert_eq!(g.value(b), &[2.0; 6]);
        let c = g.constant(&Tensor::zeros(vec![3]));
        assert!(matches!(g.add(a, c), Err(TensorError::Shape { .. })));
    }

    #[test]
    fn cross_entropy_uniform_is_ln_v() {
        let mut g = Graph::<f32>::new();
        let logits = g.constant(&Tensor::zeros(vec![3, 4]));
        let loss = g.softmax_cross_entropy(logits, &[0, 3, 2], &[true; 3]).unwrap();
        assert!((g.item(loss) - 1.386_294_4).abs() < 1e-6);
    }

    #[test]
    fn cross_entropy_confident_is_zero() {
        let mut g = Graph::<f32>::new();
        let mut data = [0.0f32; 4];
        data[2] = 1000.0;
        let logits = g.constant(&t(&[1, 4], &data));
        let loss = g.softmax_cross_entropy(logits, &[2], &[true]).unwrap();
        assert!(g.item(loss).abs() < 1e-6);
    }

    #[test]
    fn cross_entropy_all_masked_is_error() {
        let mut g = Graph::<f32>::new();
        let logits = g.constant(&Tensor::zeros(vec![2, 4]));
        assert_eq!(
            g.softmax_cross_entropy(logits, &[0, 1], &[false, false]).unwrap_err(),
            TensorError::EmptyLoss
        );
    }

    #[test]
    fn backward_sum_gives_ones() {
        let mut g = Graph::<f32>::new();
        let x = g.param(&t(&[2, 2], &[1.0, -2.0, 3.0, 0.5]));
        let s = g.sum(x);
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[1.0; 4]);
    }

    #[test]
    fn backward_square_gives_two_x() {
        let mut g = Graph::<f32>::new();
        let data = [1.0, -2.0, 3.0, 0.5];
        let x = g.param(&t(&[4], &data));
        let sq = g.mul(x, x).unwrap();
        let s = g.sum(sq);
        g.backward(s).unwrap();
        let grad = g.grad(x).unwrap();
        for (gi, xi) in grad.iter().zip(data) {
            assert_eq!(*gi, 2.0 * xi);
        }
    }

    #[test]
    fn backward_twice_is_error_until_reset() {
        let mut g = Graph::<f32>::new();
        let x = g.param(&t(&[2], &[1.0, 2.0]));
        let s = g.sum(x);
        g.backward(s).unwrap();
        assert_eq!(g.backward(s).unwrap_err(), TensorError::BackwardTwice);
        g.zero_grad();
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[1.0, 1.0]);
    }

    #[test]
    fn backward_requires_scalar() {
        let mut g = Graph::<f32>::new();
        let x = g.param(&t(&[2], &[1.0, 2.0]));
        let y = g.exp(x);
        assert!(matches!(g.backward(y), Err(TensorError::Rank { .. })));
    }

    #[test]
    fn backward_visits_each_node_once() {
        let mut g = Graph::<f64>::new();
        let x = g.leaf_raw(vec![2, 2], vec![0.1, 0.2, 0.3, 0.4], true).unwrap();
        let w = g.leaf_raw(vec![2, 2], vec![1.0, -1.0, 0.5, 2.0], true).unwrap();
        let h = g.matmul(x, w).unwrap();
        let a = g.gelu(h);
        let b = g.mul(a, a).unwrap();
        let c = g.add(b, h).unwrap();
        let loss = g.mean(c);
        let non_leaf = g.len() - 2;
        g.backward(loss).unwrap();
        assert_eq!(g.backward_calls(), non_leaf);
    }

    #[test]
    fn causal_softmax_masks_future() {
        let mut g = Graph::<f64>::new();
        let x = g.leaf_raw(vec![3, 3], (0..9).map(|i| i as f64).collect(), false).unwrap();
        let y = g.causal_softmax(x).unwrap();
        let v = g.value(y);
        assert_eq!(v[0], 1.0);
        assert_eq!(v[1], 0.0);
        assert_eq!(v[2], 0.0);
        assert_eq!(v[5], 0.0);
        assert!((v[6] + v[7] + v[8] - 1.0).abs() < 1e-12);
    }
}
