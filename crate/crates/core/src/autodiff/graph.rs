use super::tensor::{numel, Tensor};
use crate::error::{Error, Result};

/// Index of a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Operations the tape knows how to differentiate.
///
/// Shape rules (`[..., d]` means any leading dimensions with last dim `d`):
///
/// | kind | inputs | output |
/// |---|---|---|
/// | `Add`, `Sub`, `Mul` | two tensors of identical shape | same shape |
/// | `Matmul` | `[m, k]`, `[k, n]` | `[m, n]` |
/// | `Affine` | `[m, k]`, `[k, n]`, `[n]` | `[m, n]` |
/// | `BatchMatmul` | `[b, m, k]`, `[b, k, n]` | `[b, m, n]` |
/// | elementwise unary | any | same shape |
/// | `SoftmaxLastDim`, `LogSoftmaxLastDim` | `[..., d]` | `[..., d]` |
/// | `Sum`, `Mean` | any | scalar `[]` |
/// | `SumLastDim` | `[..., d]` | `[...]` |
/// | `L1Distance`, `L2DistanceSq` | two `[..., d]` of identical shape | `[...]` |
/// | `ConcatLastDim` | `[..., d_i]` with identical leading dims | `[..., sum d_i]` |
/// | `BroadcastAdd` | `[..., d]`, `[d]` | `[..., d]` |
/// | `RowScale` | `[r, d]`, `[r]` | `[r, d]` |
/// | `Transpose` | `[m, n]` | `[n, m]` |
/// | `GatherRows(idx)` | `[r, ...]` | `[idx.len(), ...]` |
/// | `Reshape(s)` | any with the same element count | `s` |
#[derive(Clone, Debug, PartialEq)]
pub enum OpKind {
    Add,
    Sub,
    Mul,
    Matmul,
    /// `x · w + b` for `x: [m, k]`, `w: [k, n]`, `b: [n]`.
    Affine,
    Sigmoid,
    Tanh,
    Relu,
    Exp,
    Log,
    SoftmaxLastDim,
    LogSoftmaxLastDim,
    Sum,
    Mean,
    L1Distance,
    L2DistanceSq,
    ConcatLastDim,
    BroadcastAdd,
    Scale(f64),
    AddScalar(f64),
    Clamp { lo: f64, hi: f64 },
    Powf(f64),
    Reshape(Vec<usize>),
    BatchMatmul,
    Transpose,
    GatherRows(Vec<usize>),
    RowScale,
    SumLastDim,
}

impl OpKind {
    /// Names of every kind, in declaration order.
    pub const NAMES: [&'static str; 28] = [
        "add",
        "sub",
        "mul",
        "matmul",
        "affine",
        "sigmoid",
        "tanh",
        "relu",
        "exp",
        "log",
        "softmax_lastdim",
        "log_softmax_lastdim",
        "sum",
        "mean",
        "l1_distance",
        "l2_distance_sq",
        "concat_lastdim",
        "broadcast_add",
        "scale",
        "add_scalar",
        "clamp",
        "powf",
        "reshape",
        "batch_matmul",
        "transpose",
        "gather_rows",
        "row_scale",
        "sum_lastdim",
    ];

    pub fn name(&self) -> &'static str {
        match self {
            OpKind::Add => "add",
            OpKind::Sub => "sub",
            OpKind::Mul => "mul",
            OpKind::Matmul => "matmul",
            OpKind::Affine => "affine",
            OpKind::Sigmoid => "sigmoid",
            OpKind::Tanh => "tanh",
            OpKind::Relu => "relu",
            OpKind::Exp => "exp",
            OpKind::Log => "log",
            OpKind::SoftmaxLastDim => "softmax_lastdim",
            OpKind::LogSoftmaxLastDim => "log_softmax_lastdim",
            OpKind::Sum => "sum",
            OpKind::Mean => "mean",
            OpKind::L1Distance => "l1_distance",
            OpKind::L2DistanceSq => "l2_distance_sq",
            OpKind::ConcatLastDim => "concat_lastdim",
            OpKind::BroadcastAdd => "broadcast_add",
            OpKind::Scale(_) => "scale",
            OpKind::AddScalar(_) => "add_scalar",
            OpKind::Clamp { .. } => "clamp",
            OpKind::Powf(_) => "powf",
            OpKind::Reshape(_) => "reshape",
            OpKind::BatchMatmul => "batch_matmul",
            OpKind::Transpose => "transpose",
            OpKind::GatherRows(_) => "gather_rows",
            OpKind::RowScale => "row_scale",
            OpKind::SumLastDim => "sum_lastdim",
        }
    }

    fn arity(&self) -> Option<usize> {
        match self {
            OpKind::Add
            | OpKind::Sub
            | OpKind::Mul
            | OpKind::Matmul
            | OpKind::L1Distance
            | OpKind::L2DistanceSq
            | OpKind::BroadcastAdd
            | OpKind::BatchMatmul
            | OpKind::RowScale => Some(2),
            OpKind::Affine => Some(3),
            OpKind::ConcatLastDim => None,
            _ => Some(1),
        }
    }
}

struct Node {
    value: Tensor,
    op: Option<(OpKind, Vec<Var>)>,
    requires_grad: bool,
}

/// Record-on-forward tape. Nodes are appended in evaluation order, so the
/// node list is always a valid topological order and backward walks it in
/// reverse.
///
/// A graph is built for one forward pass and then dropped; trainable state
/// lives in [`super::ParamSet`].
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Per-node gradients produced by [`Graph::backward`].
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    /// Gradient of the loss with respect to `var`, if any flowed there.
    pub fn wrt(&self, var: Var) -> Option<&[f64]> {
        self.grads.get(var.0).and_then(|g| g.as_deref())
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Adds a leaf that receives gradients.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(value, None, true)
    }

    /// Adds a leaf that is treated as a constant by backward.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, None, false)
    }

    pub fn value(&self, var: Var) -> &Tensor {
        &self.nodes[var.0].value
    }

    pub fn requires_grad(&self, var: Var) -> bool {
        self.nodes[var.0].requires_grad
    }

    /// The operation that produced `var`, or `None` for leaves.
    pub fn op(&self, var: Var) -> Option<&OpKind> {
        self.nodes[var.0].op.as_ref().map(|(k, _)| k)
    }

    /// Operations recorded so far, in evaluation order.
    pub fn ops(&self) -> impl Iterator<Item = &OpKind> {
        self.nodes.iter().filter_map(|n| n.op.as_ref().map(|(k, _)| k))
    }

    /// Input nodes of `var`.
    pub fn inputs(&self, var: Var) -> &[Var] {
        self.nodes[var.0].op.as_ref().map_or(&[], |(_, i)| i.as_slice())
    }

    fn push(&mut self, value: Tensor, op: Option<(OpKind, Vec<Var>)>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Evaluates `kind` on `inputs` and records it.
    ///
    /// Fails with a shape error when the inputs do not conform, a domain
    /// error for `log` of a non-positive value, and a non-finite error when
    /// the result contains NaN or infinity.
    pub fn forward_op(&mut self, kind: OpKind, inputs: &[Var]) -> Result<Var> {
        if let Some(n) = kind.arity() {
            if inputs.len() != n {
                return Err(Error::Contract(format!(
                    "{} takes {n} inputs, got {}",
                    kind.name(),
                    inputs.len()
                )));
            }
        } else if inputs.is_empty() {
            return Err(Error::Contract(format!("{} needs inputs", kind.name())));
        }
        let values: Vec<&Tensor> = inputs.iter().map(|v| &self.nodes[v.0].value).collect();
        let out = eval(&kind, &values)?;
        if !out.is_finite() {
            return Err(Error::NonFinite { op: kind.name() });
        }
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        Ok(self.push(out, Some((kind, inputs.to_vec())), requires_grad))
    }

    /// Reverse pass from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let loss_value = &self.nodes[loss.0].value;
        if loss_value.rank() != 0 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                loss_value.shape()
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            let Some((kind, inputs)) = &node.op else {
                continue;
            };
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else {
                continue;
            };
            let values: Vec<&Tensor> = inputs.iter().map(|v| &self.nodes[v.0].value).collect();
            for (j, input) in inputs.iter().enumerate() {
                if !self.nodes[input.0].requires_grad {
                    continue;
                }
                let n = self.nodes[input.0].value.numel();
                let slot = &mut grads[input.0];
                let fresh = slot.is_none();
                let acc = slot.get_or_insert_with(|| Vec::with_capacity(n));
                accumulate_input_grad(kind, j, &values, &node.value, &g, acc, fresh, n);
            }
            grads[i] = Some(g);
        }
        Ok(Gradients { grads })
    }

    // Convenience wrappers, one per op kind.

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.forward_op(OpKind::Add, &[a, b])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.forward_op(OpKind::Sub, &[a, b])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.forward_op(OpKind::Mul, &[a, b])
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.forward_op(OpKind::Matmul, &[a, b])
    }

    pub fn batch_matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.forward_op(OpKind::BatchMatmul, &[a, b])
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        self.forward_op(OpKind::Sigmoid, &[x])
    }

    pub fn tanh(&mut self, x: Var) -> Result<Var> {
        self.forward_op(OpKind::Tanh, &[x])
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        self.forward_op(OpKind::Relu, &[x])
    }

    pub fn exp(&mut self, x: Var) -> Result<Var> {
        self.forward_op(OpKind::Exp, &[x])
    }

    pub fn log(&mut self, x: Var) -> Result<Var> {
        self.forward_op(OpKind::Log, &[x])
    }

    pub fn softmax_lastdim(&mut self, x: Var) -> Result<Var> {
        self.forward_op(OpKind::SoftmaxLastDim, &[x])
    }

    pub fn log_softmax_lastdim(&mut self, x: Var) -> Result<Var> {
        self.forward_op(OpKind::LogSoftmaxLastDim, &[x])
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        self.forward_op(OpKind::Sum, &[x])
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        self.forward_op(OpKind::Mean, &[x])
    }

    pub fn sum_lastdim(&mut self, x: Var) -> Result<Var> {
        self.forward_op(OpKind::SumLastDim, &[x])
    }

    pub fn l1_distance(&mut self, a: Var, b: Var) -> Result<Var> {
        self.forward_op(OpKind::L1Distance, &[a, b])
    }

    pub fn l2_distance_sq(&mut self, a: Var, b: Var) -> Result<Var> {
        self.forward_op(OpKind::L2DistanceSq, &[a, b])
    }

    pub fn concat_lastdim(&mut self, parts: &[Var]) -> Result<Var> {
        self.forward_op(OpKind::ConcatLastDim, parts)
    }

    pub fn affine(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        self.forward_op(OpKind::Affine, &[x, w, b])
    }

    pub fn broadcast_add(&mut self, a: Var, bias: Var) -> Result<Var> {
        self.forward_op(OpKind::BroadcastAdd, &[a, bias])
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Result<Var> {
        self.forward_op(OpKind::Scale(factor), &[x])
    }

    pub fn add_scalar(&mut self, x: Var, c: f64) -> Result<Var> {
        self.forward_op(OpKind::AddScalar(c), &[x])
    }

    pub fn clamp(&mut self, x: Var, lo: f64, hi: f64) -> Result<Var> {
        self.forward_op(OpKind::Clamp { lo, hi }, &[x])
    }

    pub fn powf(&mut self, x: Var, p: f64) -> Result<Var> {
        self.forward_op(OpKind::Powf(p), &[x])
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        self.forward_op(OpKind::Reshape(shape.to_vec()), &[x])
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        self.forward_op(OpKind::Transpose, &[x])
    }

    pub fn gather_rows(&mut self, x: Var, rows: &[usize]) -> Result<Var> {
        self.forward_op(OpKind::GatherRows(rows.to_vec()), &[x])
    }

    pub fn row_scale(&mut self, x: Var, s: Var) -> Result<Var> {
        self.forward_op(OpKind::RowScale, &[x, s])
    }

    /// `1 - x`, elementwise.
    pub fn one_minus(&mut self, x: Var) -> Result<Var> {
        let neg = self.scale(x, -1.0)?;
        self.add_scalar(neg, 1.0)
    }
}

/// C = A·B (+ beta·C) with explicit (row, column) strides, `m x k` by
/// `k x n`; `beta` is 0 or 1.
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    sa: (usize, usize),
    b: &[f64],
    sb: (usize, usize),
    c: &mut [f64],
    beta: f64,
) {
    assert!(c.len() >= m * n);
    // SAFETY: the callers pass slices sized for the given dimensions and
    // strides; `c` is row-major contiguous and does not alias `a` or `b`.
    unsafe { gemm_raw(m, k, n, a, sa, b, sb, c.as_mut_ptr(), beta != 0.0) }
}

/// A·B into a new row-major `m x n` buffer.
fn gemm_new(m: usize, k: usize, n: usize, a: &[f64], sa: (usize, usize), b: &[f64], sb: (usize, usize)) -> Vec<f64> {
    let len = m * n;
    let mut c = Vec::with_capacity(len);
    // SAFETY: as in `gemm`; without `read_dst` every entry of C is written
    // and none is read, so the reserved capacity is initialized before
    // `set_len`.
    unsafe {
        gemm_raw(m, k, n, a, sa, b, sb, c.as_mut_ptr(), false);
        c.set_len(len);
    }
    c
}

/// # Safety
/// `c` must be valid for writes of `m * n` values (and reads when
/// `accumulate`), and the strides must keep every access to `a` and `b`
/// in bounds.
#[allow(clippy::too_many_arguments)]
unsafe fn gemm_raw(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    (rsa, csa): (usize, usize),
    b: &[f64],
    (rsb, csb): (usize, usize),
    c: *mut f64,
    accumulate: bool,
) {
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        if !accumulate {
            unsafe { c.write_bytes(0, m * n) };
        }
        return;
    }
    debug_assert!(a.len() > (m - 1) * rsa + (k - 1) * csa);
    debug_assert!(b.len() > (k - 1) * rsb + (n - 1) * csb);
    // gemm's convention is dst = alpha·dst + beta·lhs·rhs
    unsafe {
        gemm::gemm(
            m,
            n,
            k,
            c,
            1,
            n as isize,
            accumulate,
            a.as_ptr(),
            csa as isize,
            rsa as isize,
            b.as_ptr(),
            csb as isize,
            rsb as isize,
            1.0,
            1.0,
            false,
            false,
            false,
            gemm::Parallelism::None,
        );
    }
}

fn last_dim(shape: &[usize]) -> usize {
    shape.last().copied().unwrap_or(1)
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn map_unary(x: &Tensor, f: impl Fn(f64) -> f64) -> Tensor {
    Tensor::from_parts(x.shape().to_vec(), x.data().iter().map(|&v| f(v)).collect())
}

fn same_shape(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::shape(op, a.shape(), b.shape()));
    }
    Ok(())
}

fn eval(kind: &OpKind, xs: &[&Tensor]) -> Result<Tensor> {
    let op = kind.name();
    let out = match kind {
        OpKind::Add | OpKind::Sub | OpKind::Mul => {
            let (a, b) = (xs[0], xs[1]);
            same_shape(op, a, b)?;
            let pairs = a.data().iter().zip(b.data());
            let data = match kind {
                OpKind::Add => pairs.map(|(x, y)| x + y).collect(),
                OpKind::Sub => pairs.map(|(x, y)| x - y).collect(),
                _ => pairs.map(|(x, y)| x * y).collect(),
            };
            Tensor::from_parts(a.shape().to_vec(), data)
        }
        OpKind::Matmul => {
            let (a, b) = (xs[0], xs[1]);
            if a.rank() != 2 || b.rank() != 2 || a.shape()[1] != b.shape()[0] {
                return Err(Error::shape(op, a.shape(), b.shape()));
            }
            let (m, k, n) = (a.shape()[0], a.shape()[1], b.shape()[1]);
            Tensor::from_parts(vec![m, n], gemm_new(m, k, n, a.data(), (k, 1), b.data(), (n, 1)))
        }
        OpKind::Affine => {
            let (x, w, bias) = (xs[0], xs[1], xs[2]);
            if x.rank() != 2 || w.rank() != 2 || x.shape()[1] != w.shape()[0] {
                return Err(Error::shape(op, x.shape(), w.shape()));
            }
            if bias.shape() != [w.shape()[1]] {
                return Err(Error::shape(op, w.shape(), bias.shape()));
            }
            let (m, k, n) = (x.shape()[0], x.shape()[1], w.shape()[1]);
            let mut c = Vec::with_capacity(m * n);
            for _ in 0..m {
                c.extend_from_slice(bias.data());
            }
            gemm(m, k, n, x.data(), (k, 1), w.data(), (n, 1), &mut c, 1.0);
            Tensor::from_parts(vec![m, n], c)
        }
        OpKind::BatchMatmul => {
            let (a, b) = (xs[0], xs[1]);
            if a.rank() != 3
                || b.rank() != 3
                || a.shape()[0] != b.shape()[0]
                || a.shape()[2] != b.shape()[1]
            {
                return Err(Error::shape(op, a.shape(), b.shape()));
            }
            let (bs, m, k, n) = (a.shape()[0], a.shape()[1], a.shape()[2], b.shape()[2]);
            let mut c = vec![0.0; bs * m * n];
            for i in 0..bs {
                gemm(
                    m,
                    k,
                    n,
                    &a.data()[i * m * k..],
                    (k, 1),
                    &b.data()[i * k * n..],
                    (n, 1),
                    &mut c[i * m * n..(i + 1) * m * n],
                    0.0,
                );
            }
            Tensor::from_parts(vec![bs, m, n], c)
        }
        OpKind::Sigmoid => map_unary(xs[0], sigmoid),
        OpKind::Tanh => map_unary(xs[0], f64::tanh),
        OpKind::Relu => map_unary(xs[0], |v| if v > 0.0 { v } else { 0.0 }),
        OpKind::Exp => map_unary(xs[0], f64::exp),
        OpKind::Log => {
            if let Some(bad) = xs[0].data().iter().find(|v| !(**v > 0.0)) {
                return Err(Error::Domain {
                    op,
                    detail: format!("log of non-positive value {bad}"),
                });
            }
            map_unary(xs[0], f64::ln)
        }
        OpKind::SoftmaxLastDim => {
            let x = xs[0];
            if x.rank() == 0 {
                return Err(Error::shape(op, x.shape(), &[]));
            }
            let d = last_dim(x.shape());
            let mut out = x.data().to_vec();
            for row in out.chunks_mut(d.max(1)) {
                let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let mut total = 0.0;
                for v in row.iter_mut() {
                    *v = (*v - max).exp();
                    total += *v;
                }
                row.iter_mut().for_each(|v| *v /= total);
            }
            Tensor::from_parts(x.shape().to_vec(), out)
        }
        OpKind::LogSoftmaxLastDim => {
            let x = xs[0];
            if x.rank() == 0 {
                return Err(Error::shape(op, x.shape(), &[]));
            }
            let d = last_dim(x.shape());
            let mut out = x.data().to_vec();
            for row in out.chunks_mut(d.max(1)) {
                let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
                row.iter_mut().for_each(|v| *v -= lse);
            }
            Tensor::from_parts(x.shape().to_vec(), out)
        }
        OpKind::Sum => Tensor::scalar(xs[0].data().iter().sum()),
        OpKind::Mean => {
            let x = xs[0];
            if x.numel() == 0 {
                return Err(Error::Contract("mean of empty tensor".into()));
            }
            Tensor::scalar(x.data().iter().sum::<f64>() / x.numel() as f64)
        }
        OpKind::SumLastDim => {
            let x = xs[0];
            if x.rank() == 0 {
                return Err(Error::shape(op, x.shape(), &[]));
            }
            let d = last_dim(x.shape());
            let data = x.data().chunks(d.max(1)).map(|r| r.iter().sum()).collect();
            Tensor::from_parts(x.shape()[..x.rank() - 1].to_vec(), data)
        }
        OpKind::L1Distance | OpKind::L2DistanceSq => {
            let (a, b) = (xs[0], xs[1]);
            same_shape(op, a, b)?;
            if a.rank() == 0 {
                return Err(Error::shape(op, a.shape(), b.shape()));
            }
            let d = last_dim(a.shape()).max(1);
            let l1 = matches!(kind, OpKind::L1Distance);
            let data = a
                .data()
                .chunks(d)
                .zip(b.data().chunks(d))
                .map(|(ra, rb)| {
                    ra.iter()
                        .zip(rb)
                        .map(|(x, y)| if l1 { (x - y).abs() } else { (x - y) * (x - y) })
                        .sum()
                })
                .collect();
            Tensor::from_parts(a.shape()[..a.rank() - 1].to_vec(), data)
        }
        OpKind::ConcatLastDim => {
            let first = xs[0];
            if first.rank() == 0 {
                return Err(Error::shape(op, first.shape(), &[]));
            }
            let lead = &first.shape()[..first.rank() - 1];
            for x in &xs[1..] {
                if x.rank() != first.rank() || &x.shape()[..x.rank() - 1] != lead {
                    return Err(Error::shape(op, first.shape(), x.shape()));
                }
            }
            let rows = numel(lead);
            let width: usize = xs.iter().map(|x| last_dim(x.shape())).sum();
            let mut data = Vec::with_capacity(rows * width);
            for r in 0..rows {
                for x in xs {
                    let w = last_dim(x.shape());
                    data.extend_from_slice(&x.data()[r * w..(r + 1) * w]);
                }
            }
            let mut shape = lead.to_vec();
            shape.push(width);
            Tensor::from_parts(shape, data)
        }
        OpKind::BroadcastAdd => {
            let (a, b) = (xs[0], xs[1]);
            if a.rank() == 0 || b.rank() != 1 || last_dim(a.shape()) != b.shape()[0] {
                return Err(Error::shape(op, a.shape(), b.shape()));
            }
            let d = b.numel().max(1);
            let mut data = a.data().to_vec();
            for row in data.chunks_mut(d) {
                row.iter_mut().zip(b.data()).for_each(|(v, bias)| *v += bias);
            }
            Tensor::from_parts(a.shape().to_vec(), data)
        }
        OpKind::RowScale => {
            let (a, s) = (xs[0], xs[1]);
            if a.rank() != 2 || s.rank() != 1 || a.shape()[0] != s.shape()[0] {
                return Err(Error::shape(op, a.shape(), s.shape()));
            }
            let d = a.shape()[1].max(1);
            let mut data = a.data().to_vec();
            for (row, f) in data.chunks_mut(d).zip(s.data()) {
                row.iter_mut().for_each(|v| *v *= f);
            }
            Tensor::from_parts(a.shape().to_vec(), data)
        }
        OpKind::Scale(c) => map_unary(xs[0], |v| v * c),
        OpKind::AddScalar(c) => map_unary(xs[0], |v| v + c),
        OpKind::Clamp { lo, hi } => map_unary(xs[0], |v| v.clamp(*lo, *hi)),
        OpKind::Powf(p) => {
            if p.fract() != 0.0 {
                if let Some(bad) = xs[0].data().iter().find(|v| !(**v > 0.0)) {
                    return Err(Error::Domain {
                        op,
                        detail: format!("fractional power of non-positive value {bad}"),
                    });
                }
            }
            map_unary(xs[0], |v| v.powf(*p))
        }
        OpKind::Reshape(shape) => {
            let x = xs[0];
            if numel(shape) != x.numel() {
                return Err(Error::shape(op, x.shape(), shape));
            }
            Tensor::from_parts(shape.clone(), x.data().to_vec())
        }
        OpKind::Transpose => {
            let x = xs[0];
            if x.rank() != 2 {
                return Err(Error::shape(op, x.shape(), &[]));
            }
            let (m, n) = (x.shape()[0], x.shape()[1]);
            let mut data = vec![0.0; m * n];
            for i in 0..m {
                for j in 0..n {
                    data[j * m + i] = x.data()[i * n + j];
                }
            }
            Tensor::from_parts(vec![n, m], data)
        }
        OpKind::GatherRows(idx) => {
            let x = xs[0];
            if x.rank() == 0 {
                return Err(Error::shape(op, x.shape(), &[]));
            }
            let rows = x.shape()[0];
            let w = x.numel() / rows.max(1);
            let mut data = Vec::with_capacity(idx.len() * w);
            for &r in idx {
                if r >= rows {
                    return Err(Error::Range {
                        what: "gathered row",
                        value: r,
                        limit: rows,
                    });
                }
                data.extend_from_slice(&x.data()[r * w..(r + 1) * w]);
            }
            let mut shape = x.shape().to_vec();
            shape[0] = idx.len();
            Tensor::from_parts(shape, data)
        }
    };
    Ok(out)
}

/// Adds the vector-Jacobian product for input `j` into `acc`. A `fresh`
/// accumulator is empty and receives the `n` values directly.
fn accumulate_input_grad(
    kind: &OpKind,
    j: usize,
    xs: &[&Tensor],
    out: &Tensor,
    g: &[f64],
    acc: &mut Vec<f64>,
    fresh: bool,
    n: usize,
) {
    // elementwise rule: value i of the product is `$e`
    macro_rules! each {
        (|$i:ident| $e:expr) => {
            if fresh {
                acc.extend((0..n).map(|$i| $e));
            } else {
                for ($i, a) in acc.iter_mut().enumerate() {
                    *a += $e;
                }
            }
        };
    }
    // rules that scatter into `acc` start from zeros
    let zeroed = |acc: &mut Vec<f64>| {
        if fresh {
            acc.resize(n, 0.0);
        }
    };
    match kind {
        OpKind::Add | OpKind::Reshape(_) | OpKind::AddScalar(_) => each!(|i| g[i]),
        OpKind::Sub => {
            if j == 0 {
                each!(|i| g[i])
            } else {
                each!(|i| -g[i])
            }
        }
        OpKind::Mul => {
            let other = xs[1 - j].data();
            each!(|i| g[i] * other[i]);
        }
        OpKind::Affine if j == 2 => {
            // bias: column sums of G
            zeroed(acc);
            for g_row in g.chunks(acc.len().max(1)) {
                acc.iter_mut().zip(g_row).for_each(|(a, v)| *a += v);
            }
        }
        OpKind::Matmul | OpKind::Affine => {
            let (a, b) = (xs[0], xs[1]);
            let (m, k, n) = (a.shape()[0], a.shape()[1], b.shape()[1]);
            // dA = G · Bᵀ, dB = Aᵀ · G
            let (rows, inner, cols, lhs, ls, rhs, rs) = if j == 0 {
                (m, n, k, g, (n, 1), b.data(), (1, n))
            } else {
                (k, m, n, a.data(), (1, k), g, (n, 1))
            };
            if fresh {
                *acc = gemm_new(rows, inner, cols, lhs, ls, rhs, rs);
            } else {
                gemm(rows, inner, cols, lhs, ls, rhs, rs, acc, 1.0);
            }
        }
        OpKind::BatchMatmul => {
            let (a, b) = (xs[0], xs[1]);
            let (bs, m, k, n) = (a.shape()[0], a.shape()[1], a.shape()[2], b.shape()[2]);
            zeroed(acc);
            for s in 0..bs {
                let gs = &g[s * m * n..(s + 1) * m * n];
                if j == 0 {
                    gemm(
                        m,
                        n,
                        k,
                        gs,
                        (n, 1),
                        &b.data()[s * k * n..],
                        (1, n),
                        &mut acc[s * m * k..(s + 1) * m * k],
                        1.0,
                    );
                } else {
                    gemm(
                        k,
                        m,
                        n,
                        &a.data()[s * m * k..],
                        (1, k),
                        gs,
                        (n, 1),
                        &mut acc[s * k * n..(s + 1) * k * n],
                        1.0,
                    );
                }
            }
        }
        OpKind::Sigmoid => {
            let y = out.data();
            each!(|i| g[i] * y[i] * (1.0 - y[i]));
        }
        OpKind::Tanh => {
            let y = out.data();
            each!(|i| g[i] * (1.0 - y[i] * y[i]));
        }
        OpKind::Relu => {
            let x = xs[0].data();
            each!(|i| if x[i] > 0.0 { g[i] } else { 0.0 });
        }
        OpKind::Exp => {
            let y = out.data();
            each!(|i| g[i] * y[i]);
        }
        OpKind::Log => {
            let x = xs[0].data();
            each!(|i| g[i] / x[i]);
        }
        OpKind::SoftmaxLastDim => {
            let d = last_dim(out.shape()).max(1);
            let y = out.data();
            let dots: Vec<f64> = y
                .chunks(d)
                .zip(g.chunks(d))
                .map(|(y_row, g_row)| y_row.iter().zip(g_row).map(|(y, g)| y * g).sum())
                .collect();
            each!(|i| y[i] * (g[i] - dots[i / d]));
        }
        OpKind::LogSoftmaxLastDim => {
            // d/dx_k of y_j = delta_jk - softmax_k
            let d = last_dim(out.shape()).max(1);
            let y = out.data();
            let totals: Vec<f64> = g.chunks(d).map(|g_row| g_row.iter().sum()).collect();
            each!(|i| g[i] - y[i].exp() * totals[i / d]);
        }
        OpKind::Sum => each!(|_i| g[0]),
        OpKind::Mean => {
            let count = n as f64;
            each!(|_i| g[0] / count);
        }
        OpKind::SumLastDim => {
            let d = last_dim(xs[0].shape()).max(1);
            each!(|i| g[i / d]);
        }
        OpKind::L1Distance | OpKind::L2DistanceSq => {
            let (a, b) = (xs[0].data(), xs[1].data());
            let d = last_dim(xs[0].shape()).max(1);
            let sign = if j == 0 { 1.0 } else { -1.0 };
            if matches!(kind, OpKind::L1Distance) {
                each!(|i| {
                    let diff = a[i] - b[i];
                    let local = if diff > 0.0 {
                        1.0
                    } else if diff < 0.0 {
                        -1.0
                    } else {
                        0.0
                    };
                    sign * g[i / d] * local
                });
            } else {
                each!(|i| sign * g[i / d] * 2.0 * (a[i] - b[i]));
            }
        }
        OpKind::ConcatLastDim => {
            let width = last_dim(out.shape());
            let offset: usize = xs[..j].iter().map(|x| last_dim(x.shape())).sum();
            let w = last_dim(xs[j].shape());
            if w == 0 {
                return;
            }
            each!(|i| g[(i / w) * width + offset + i % w]);
        }
        OpKind::BroadcastAdd => {
            if j == 0 {
                each!(|i| g[i]);
            } else {
                zeroed(acc);
                let d = acc.len().max(1);
                for g_row in g.chunks(d) {
                    acc.iter_mut().zip(g_row).for_each(|(a, v)| *a += v);
                }
            }
        }
        OpKind::RowScale => {
            let (a, s) = (xs[0], xs[1]);
            let d = a.shape()[1].max(1);
            if j == 0 {
                each!(|i| g[i] * s.data()[i / d]);
            } else {
                each!(|r| {
                    let row = r * d..(r + 1) * d;
                    g[row.clone()]
                        .iter()
                        .zip(&a.data()[row])
                        .map(|(gv, av)| gv * av)
                        .sum::<f64>()
                });
            }
        }
        OpKind::Scale(c) => each!(|i| c * g[i]),
        OpKind::Clamp { lo, hi } => {
            let x = xs[0].data();
            each!(|i| if x[i] >= *lo && x[i] <= *hi { g[i] } else { 0.0 });
        }
        OpKind::Powf(p) => {
            let x = xs[0].data();
            each!(|i| g[i] * p * x[i].powf(p - 1.0));
        }
        OpKind::Transpose => {
            let (m, n) = (xs[0].shape()[0], xs[0].shape()[1]);
            each!(|t| g[(t % n) * m + t / n]);
        }
        OpKind::GatherRows(idx) => {
            zeroed(acc);
            let rows = xs[0].shape()[0];
            let w = xs[0].numel() / rows.max(1);
            for (r, &src) in idx.iter().enumerate() {
                let dst = &mut acc[src * w..(src + 1) * w];
                dst.iter_mut().zip(&g[r * w..(r + 1) * w]).for_each(|(a, v)| *a += v);
            }
        }
    }
}
