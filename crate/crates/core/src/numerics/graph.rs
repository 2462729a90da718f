//! Reverse-mode automatic differentiation over dense tensors.
//!
//! A [`Graph`] records every primitive in execution order, so node indices are
//! already a topological order and `backward` is a single reverse sweep. The
//! same recording also drives FLOP counting: in [`Mode::Trace`] ops only
//! propagate shapes and accumulate their cost, which lets the profiler walk
//! sequences far too large to materialize.

use std::fmt;

use super::flops;
use super::tensor::{self, Mask, Tensor};
use crate::error::{Error, Result};

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    /// Values computed, gradients recorded for `requires_grad` leaves.
    Train,
    /// Values computed, nothing recorded for backward.
    Infer,
    /// Shapes and costs only; no values are materialized.
    Trace,
}

/// A fused primitive with a hand-written adjoint.
pub trait CustomOp {
    fn name(&self) -> &'static str;

    /// Adjoints for each input, given the forward inputs/output and the
    /// output adjoint. `None` means "no gradient flows to this input".
    fn backward(&self, inputs: &[&Tensor], output: &Tensor, grad: &Tensor) -> Result<Vec<Option<Tensor>>>;
}

enum Op {
    Leaf,
    MatMul(Var, Var),
    MatMulNt(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    Affine(Var, f64),
    ScaleBy(Var, Var),
    Sigmoid(Var),
    Silu(Var),
    Gelu(Var),
    Softplus(Var),
    Exp(Var),
    Ln(Var),
    Softmax(Var),
    LayerNorm { x: Var, gain: Var, bias: Var, eps: f64 },
    SliceRows(Var, usize),
    SliceCols(Var, usize),
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    Gather(Var, Vec<usize>),
    Sum(Var),
    Custom(Vec<Var>, Box<dyn CustomOp>),
}

struct Node {
    shape: Vec<usize>,
    value: Option<Tensor>,
    op: Op,
    requires_grad: bool,
    leaf: bool,
}

/// Execution record. One graph per forward pass; confined to one thread.
pub struct Graph {
    nodes: Vec<Node>,
    mode: Mode,
    flops: u64,
}

impl fmt::Debug for Graph {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Graph")
            .field("nodes", &self.nodes.len())
            .field("mode", &self.mode)
            .field("flops", &self.flops)
            .finish()
    }
}

impl Graph {
    pub fn new(mode: Mode) -> Self {
        Self { nodes: Vec::new(), mode, flops: 0 }
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Total FLOPs of every op recorded so far.
    pub fn flops(&self) -> u64 {
        self.flops
    }

    /// Number of values held by non-leaf nodes: the activation footprint of
    /// everything recorded so far.
    pub fn activation_values(&self) -> u64 {
        self.nodes.iter().filter(|n| !n.leaf).map(|n| n.shape.iter().product::<usize>() as u64).sum()
    }

    /// Number of values held by leaves (inputs and parameters).
    pub fn leaf_values(&self) -> u64 {
        self.nodes.iter().filter(|n| n.leaf).map(|n| n.shape.iter().product::<usize>() as u64).sum()
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    /// Value of a node. Panics in trace mode, where nothing is materialized.
    pub fn value(&self, v: Var) -> &Tensor {
        self.nodes[v.0].value.as_ref().expect("graph in trace mode holds no values")
    }

    pub fn try_value(&self, v: Var) -> Option<&Tensor> {
        self.nodes[v.0].value.as_ref()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn dims2(&self, v: Var, op: &'static str) -> Result<(usize, usize)> {
        match self.nodes[v.0].shape.as_slice() {
            [m, n] => Ok((*m, *n)),
            [n] => Ok((1, *n)),
            s => Err(Error::dim(op, format!("expected a matrix, got {s:?}"))),
        }
    }

    fn numel(&self, v: Var) -> usize {
        self.nodes[v.0].shape.iter().product()
    }

    fn materialize(&self) -> bool {
        self.mode != Mode::Trace
    }

    /// Registers an input. `requires_grad` on the tensor is honoured in
    /// [`Mode::Train`] only.
    pub fn leaf(&mut self, t: Tensor) -> Var {
        let requires_grad = t.requires_grad() && self.mode == Mode::Train;
        let shape = t.shape().to_vec();
        let value = self.materialize().then_some(t);
        self.nodes.push(Node { shape, value, op: Op::Leaf, requires_grad, leaf: true });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, t: Tensor) -> Var {
        self.leaf(t.with_requires_grad(false))
    }

    /// Registers a trainable parameter (a copy of `t`).
    pub fn param(&mut self, t: &Tensor) -> Var {
        self.leaf(t.clone().with_requires_grad(true))
    }

    /// Registers a leaf by shape alone; only meaningful in trace mode.
    pub fn placeholder(&mut self, shape: Vec<usize>) -> Var {
        let value = self.materialize().then(|| Tensor::zeros(shape.clone()));
        self.nodes.push(Node { shape, value, op: Op::Leaf, requires_grad: false, leaf: true });
        Var(self.nodes.len() - 1)
    }

    fn push(&mut self, shape: Vec<usize>, value: Option<Tensor>, op: Op, parents: &[Var], cost: u64) -> Result<Var> {
        if let Some(v) = &value {
            if !v.is_finite() {
                return Err(Error::NonFinite { op: op_name(&op), token: None });
            }
        }
        let requires_grad = self.mode == Mode::Train && parents.iter().any(|p| self.nodes[p.0].requires_grad);
        self.flops += cost;
        self.nodes.push(Node { shape, value, op, requires_grad, leaf: false });
        Ok(Var(self.nodes.len() - 1))
    }

    fn compute(&self, f: impl FnOnce(&Self) -> Result<Tensor>) -> Result<Option<Tensor>> {
        if self.materialize() {
            f(self).map(Some)
        } else {
            Ok(None)
        }
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.dims2(a, "matmul")?;
        let (k2, n) = self.dims2(b, "matmul")?;
        if k != k2 {
            return Err(Error::dim("matmul", format!("[{m}x{k}] x [{k2}x{n}]")));
        }
        let value = self.compute(|g| tensor::matmul(g.value(a), g.value(b)))?;
        self.push(vec![m, n], value, Op::MatMul(a, b), &[a, b], flops::matmul(m, k, n))
    }

    /// `a · bᵀ`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.dims2(a, "matmul_nt")?;
        let (n, k2) = self.dims2(b, "matmul_nt")?;
        if k != k2 {
            return Err(Error::dim("matmul_nt", format!("[{m}x{k}] x [{n}x{k2}]^T")));
        }
        let value = self.compute(|g| tensor::matmul_nt(g.value(a), g.value(b)))?;
        self.push(vec![m, n], value, Op::MatMulNt(a, b), &[a, b], flops::matmul(m, k, n))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let (m, n) = self.dims2(a, "transpose")?;
        let value = self.compute(|g| g.value(a).transpose())?;
        self.push(vec![n, m], value, Op::Transpose(a), &[a], 0)
    }

    fn same_shape(&self, a: Var, b: Var, op: &'static str) -> Result<Vec<usize>> {
        let (sa, sb) = (&self.nodes[a.0].shape, &self.nodes[b.0].shape);
        if sa != sb {
            return Err(Error::dim(op, format!("{sa:?} vs {sb:?}")));
        }
        Ok(sa.clone())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let shape = self.same_shape(a, b, "add")?;
        let value = self.compute(|g| g.value(a).zip_map(g.value(b), |x, y| x + y))?;
        let n = self.numel(a) as u64;
        self.push(shape, value, Op::Add(a, b), &[a, b], n)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let shape = self.same_shape(a, b, "sub")?;
        let value = self.compute(|g| g.value(a).zip_map(g.value(b), |x, y| x - y))?;
        let n = self.numel(a) as u64;
        self.push(shape, value, Op::Sub(a, b), &[a, b], n)
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let shape = self.same_shape(a, b, "mul")?;
        let value = self.compute(|g| g.value(a).zip_map(g.value(b), |x, y| x * y))?;
        let n = self.numel(a) as u64;
        self.push(shape, value, Op::Mul(a, b), &[a, b], n)
    }

    fn row_broadcast(
        &mut self,
        x: Var,
        r: Var,
        op: &'static str,
        f: fn(f64, f64) -> f64,
    ) -> Result<(Vec<usize>, Option<Tensor>)> {
        let (_, n) = self.dims2(x, op)?;
        if self.numel(r) != n {
            return Err(Error::dim(op, format!("row vector of {} for width {n}", self.numel(r))));
        }
        let value = self.compute(|g| {
            let xv = g.value(x);
            let rv = g.value(r).data();
            let data = xv.data().chunks(n).flat_map(|row| row.iter().zip(rv).map(|(&a, &b)| f(a, b))).collect();
            Tensor::new(xv.shape().to_vec(), data)
        })?;
        Ok((self.nodes[x.0].shape.clone(), value))
    }

    /// `x + bias` with `bias` broadcast over rows.
    pub fn add_row(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (shape, value) = self.row_broadcast(x, bias, "add_row", |a, b| a + b)?;
        let n = self.numel(x) as u64;
        self.push(shape, value, Op::AddRow(x, bias), &[x, bias], n)
    }

    /// `x ⊙ gain` with `gain` broadcast over rows.
    pub fn mul_row(&mut self, x: Var, gain: Var) -> Result<Var> {
        let (shape, value) = self.row_broadcast(x, gain, "mul_row", |a, b| a * b)?;
        let n = self.numel(x) as u64;
        self.push(shape, value, Op::MulRow(x, gain), &[x, gain], n)
    }

    /// `mul · x + add` with constant coefficients.
    pub fn affine(&mut self, x: Var, mul: f64, add: f64) -> Result<Var> {
        let value = self.compute(|g| Ok(g.value(x).map(|v| mul * v + add)))?;
        let shape = self.nodes[x.0].shape.clone();
        let n = self.numel(x) as u64;
        self.push(shape, value, Op::Affine(x, mul), &[x], 2 * n)
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Result<Var> {
        self.affine(x, c, 0.0)
    }

    /// `s · x` for a one-element `s`.
    pub fn scale_by(&mut self, x: Var, s: Var) -> Result<Var> {
        if self.numel(s) != 1 {
            return Err(Error::dim("scale_by", format!("scalar expected, got {:?}", self.shape(s))));
        }
        let value = self.compute(|g| {
            let c = g.value(s).item();
            Ok(g.value(x).map(|v| c * v))
        })?;
        let shape = self.nodes[x.0].shape.clone();
        let n = self.numel(x) as u64;
        self.push(shape, value, Op::ScaleBy(x, s), &[x, s], n)
    }

    fn unary(&mut self, x: Var, op: Op, f: fn(f64) -> f64) -> Result<Var> {
        let value = self.compute(|g| Ok(g.value(x).map(f)))?;
        let shape = self.nodes[x.0].shape.clone();
        let n = self.numel(x) as u64;
        self.push(shape, value, op, &[x], n * flops::TRANSCENDENTAL)
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        self.unary(x, Op::Sigmoid(x), sigmoid)
    }

    pub fn silu(&mut self, x: Var) -> Result<Var> {
        self.unary(x, Op::Silu(x), |v| v * sigmoid(v))
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, x: Var) -> Result<Var> {
        self.unary(x, Op::Gelu(x), gelu)
    }

    pub fn softplus(&mut self, x: Var) -> Result<Var> {
        self.unary(x, Op::Softplus(x), softplus)
    }

    pub fn exp(&mut self, x: Var) -> Result<Var> {
        self.unary(x, Op::Exp(x), f64::exp)
    }

    /// Natural log; non-positive inputs surface as a non-finite error.
    pub fn ln(&mut self, x: Var) -> Result<Var> {
        self.unary(x, Op::Ln(x), f64::ln)
    }

    pub fn softmax_rows(&mut self, x: Var, mask: Mask) -> Result<Var> {
        let (m, n) = self.dims2(x, "softmax_rows")?;
        if let Mask::Dense(bits) = &mask {
            if bits.len() != m * n {
                return Err(Error::dim("softmax_rows", "mask size"));
            }
        }
        let value = self.compute(|g| tensor::softmax_rows(g.value(x), &mask))?;
        let cost = (m * n) as u64 * flops::SOFTMAX;
        self.push(vec![m, n], value, Op::Softmax(x), &[x], cost)
    }

    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let (_, d) = self.dims2(x, "layer_norm")?;
        if self.numel(gain) != d || self.numel(bias) != d {
            return Err(Error::dim("layer_norm", format!("width {d}")));
        }
        if eps <= 0.0 {
            return Err(Error::contract("layer_norm eps must be positive"));
        }
        let value = self.compute(|g| tensor::layer_norm(g.value(x), g.value(gain), g.value(bias), eps))?;
        let shape = self.nodes[x.0].shape.clone();
        let cost = self.numel(x) as u64 * flops::LAYER_NORM;
        self.push(shape, value, Op::LayerNorm { x, gain, bias, eps }, &[x, gain, bias], cost)
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, count: usize) -> Result<Var> {
        let (m, n) = self.dims2(x, "slice_rows")?;
        if start + count > m {
            return Err(Error::dim("slice_rows", format!("{start}+{count} > {m}")));
        }
        let value = self.compute(|g| g.value(x).slice_rows(start, count))?;
        self.push(vec![count, n], value, Op::SliceRows(x, start), &[x], 0)
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, count: usize) -> Result<Var> {
        let (m, n) = self.dims2(x, "slice_cols")?;
        if start + count > n {
            return Err(Error::dim("slice_cols", format!("{start}+{count} > {n}")));
        }
        let value = self.compute(|g| g.value(x).slice_cols(start, count))?;
        self.push(vec![m, count], value, Op::SliceCols(x, start), &[x], 0)
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let mut rows = 0;
        let mut cols = None;
        for &p in parts {
            let (m, n) = self.dims2(p, "concat_rows")?;
            if *cols.get_or_insert(n) != n {
                return Err(Error::dim("concat_rows", "column counts differ"));
            }
            rows += m;
        }
        let cols = cols.ok_or_else(|| Error::dim("concat_rows", "no parts"))?;
        let value = self.compute(|g| Tensor::concat_rows(&parts.iter().map(|p| g.value(*p)).collect::<Vec<_>>()))?;
        self.push(vec![rows, cols], value, Op::ConcatRows(parts.to_vec()), parts, 0)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let mut cols = 0;
        let mut rows = None;
        for &p in parts {
            let (m, n) = self.dims2(p, "concat_cols")?;
            if *rows.get_or_insert(m) != m {
                return Err(Error::dim("concat_cols", "row counts differ"));
            }
            cols += n;
        }
        let rows = rows.ok_or_else(|| Error::dim("concat_cols", "no parts"))?;
        let value = self.compute(|g| Tensor::concat_cols(&parts.iter().map(|p| g.value(*p)).collect::<Vec<_>>()))?;
        self.push(vec![rows, cols], value, Op::ConcatCols(parts.to_vec()), parts, 0)
    }

    /// Rows `ids` of `table` (an embedding lookup).
    pub fn gather_rows(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let (m, n) = self.dims2(table, "gather_rows")?;
        if let Some(bad) = ids.iter().find(|&&i| i >= m) {
            return Err(Error::contract(format!("row id {bad} out of range for {m} rows")));
        }
        let value = self.compute(|g| {
            let t = g.value(table);
            Tensor::new(vec![ids.len(), n], ids.iter().flat_map(|&i| t.row(i).iter().copied()).collect())
        })?;
        self.push(vec![ids.len(), n], value, Op::Gather(table, ids.to_vec()), &[table], 0)
    }

    /// Sum of all entries, as a one-element tensor.
    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let value = self.compute(|g| Ok(Tensor::scalar(g.value(x).sum())))?;
        let n = self.numel(x) as u64;
        self.push(vec![1], value, Op::Sum(x), &[x], n)
    }

    /// Records a fused op. `value` must be `Some` unless the graph is tracing.
    pub fn custom(
        &mut self,
        inputs: &[Var],
        shape: Vec<usize>,
        value: Option<Tensor>,
        cost: u64,
        op: Box<dyn CustomOp>,
    ) -> Result<Var> {
        if self.materialize() != value.is_some() {
            return Err(Error::contract(format!("{}: value presence must match graph mode", op.name())));
        }
        self.push(shape, value, Op::Custom(inputs.to_vec(), op), inputs, cost)
    }

    /// Input values for a custom op's forward computation.
    pub fn values(&self, inputs: &[Var]) -> Vec<&Tensor> {
        inputs.iter().map(|v| self.value(*v)).collect()
    }

    /// Propagates adjoints from a one-element `loss` back to every reachable
    /// node that requires a gradient.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.mode != Mode::Train {
            return Err(Error::contract("backward needs a graph recorded in Train mode"));
        }
        if self.numel(loss) != 1 {
            return Err(Error::contract(format!("loss must be a scalar, got shape {:?}", self.shape(loss))));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::ones(self.nodes[loss.0].shape.clone()));

        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(gout) = grads[idx].take() else { continue };
            let acc = |v: Var, t: Tensor, grads: &mut Vec<Option<Tensor>>| {
                if !self.nodes[v.0].requires_grad {
                    return;
                }
                match &mut grads[v.0] {
                    Some(g) => g.add_assign(&t),
                    slot => *slot = Some(t.reshape(self.nodes[v.0].shape.clone()).expect("adjoint shape")),
                }
            };
            match &node.op {
                Op::Leaf => {
                    grads[idx] = Some(gout);
                    continue;
                }
                Op::MatMul(a, b) => {
                    if self.nodes[a.0].requires_grad {
                        acc(*a, tensor::matmul_nt(&gout, self.value(*b))?, &mut grads);
                    }
                    if self.nodes[b.0].requires_grad {
                        acc(*b, tensor::matmul_tn(self.value(*a), &gout)?, &mut grads);
                    }
                }
                Op::MatMulNt(a, b) => {
                    if self.nodes[a.0].requires_grad {
                        acc(*a, tensor::matmul(&gout, self.value(*b))?, &mut grads);
                    }
                    if self.nodes[b.0].requires_grad {
                        acc(*b, tensor::matmul_tn(&gout, self.value(*a))?, &mut grads);
                    }
                }
                Op::Transpose(a) => acc(*a, gout.transpose()?, &mut grads),
                Op::Add(a, b) => {
                    acc(*a, gout.clone(), &mut grads);
                    acc(*b, gout, &mut grads);
                }
                Op::Sub(a, b) => {
                    acc(*b, gout.map(|v| -v), &mut grads);
                    acc(*a, gout, &mut grads);
                }
                Op::Mul(a, b) => {
                    acc(*a, gout.zip_map(self.value(*b), |g, y| g * y)?, &mut grads);
                    acc(*b, gout.zip_map(self.value(*a), |g, x| g * x)?, &mut grads);
                }
                Op::AddRow(x, r) => {
                    acc(*r, Tensor::vector(col_sums(&gout, |g, _| g, None)), &mut grads);
                    acc(*x, gout, &mut grads);
                }
                Op::MulRow(x, r) => {
                    let xv = self.value(*x);
                    acc(*r, Tensor::vector(col_sums(&gout, |g, x| g * x, Some(xv))), &mut grads);
                    let rv = self.value(*r).data();
                    let n = rv.len();
                    let data = gout.data().chunks(n).flat_map(|row| row.iter().zip(rv).map(|(g, r)| g * r)).collect();
                    acc(*x, Tensor::new(gout.shape().to_vec(), data)?, &mut grads);
                }
                Op::Affine(x, mul) => acc(*x, gout.map(|g| g * mul), &mut grads),
                Op::ScaleBy(x, s) => {
                    let c = self.value(*s).item();
                    let ds: f64 = gout.data().iter().zip(self.value(*x).data()).map(|(g, x)| g * x).sum();
                    acc(*s, Tensor::scalar(ds), &mut grads);
                    acc(*x, gout.map(|g| g * c), &mut grads);
                }
                Op::Sigmoid(x) => {
                    let y = node.value.as_ref().expect("value");
                    acc(*x, gout.zip_map(y, |g, y| g * y * (1.0 - y))?, &mut grads);
                }
                Op::Silu(x) => {
                    let d = self.value(*x).map(|v| {
                        let s = sigmoid(v);
                        s * (1.0 + v * (1.0 - s))
                    });
                    acc(*x, gout.zip_map(&d, |g, d| g * d)?, &mut grads);
                }
                Op::Gelu(x) => {
                    let d = self.value(*x).map(gelu_grad);
                    acc(*x, gout.zip_map(&d, |g, d| g * d)?, &mut grads);
                }
                Op::Softplus(x) => {
                    let d = self.value(*x).map(sigmoid);
                    acc(*x, gout.zip_map(&d, |g, d| g * d)?, &mut grads);
                }
                Op::Exp(x) => {
                    let y = node.value.as_ref().expect("value");
                    acc(*x, gout.zip_map(y, |g, y| g * y)?, &mut grads);
                }
                Op::Ln(x) => {
                    acc(*x, gout.zip_map(self.value(*x), |g, x| g / x)?, &mut grads);
                }
                Op::Softmax(x) => {
                    let y = node.value.as_ref().expect("value");
                    let n = y.cols();
                    let mut dx = vec![0.0; y.len()];
                    for ((yr, gr), dr) in y.data().chunks(n).zip(gout.data().chunks(n)).zip(dx.chunks_mut(n)) {
                        let dot: f64 = yr.iter().zip(gr).map(|(y, g)| y * g).sum();
                        for ((d, y), g) in dr.iter_mut().zip(yr).zip(gr) {
                            *d = y * (g - dot);
                        }
                    }
                    acc(*x, Tensor::new(y.shape().to_vec(), dx)?, &mut grads);
                }
                Op::LayerNorm { x, gain, bias, eps } => {
                    let (dx, dg, db) = layer_norm_backward(self.value(*x), self.value(*gain), &gout, *eps)?;
                    acc(*gain, dg, &mut grads);
                    acc(*bias, db, &mut grads);
                    acc(*x, dx, &mut grads);
                }
                Op::SliceRows(x, start) => {
                    let (m, n) = self.dims2(*x, "slice_rows")?;
                    let mut full = vec![0.0; m * n];
                    full[start * n..start * n + gout.len()].copy_from_slice(gout.data());
                    acc(*x, Tensor::new(vec![m, n], full)?, &mut grads);
                }
                Op::SliceCols(x, start) => {
                    let (m, n) = self.dims2(*x, "slice_cols")?;
                    let w = gout.cols();
                    let mut full = vec![0.0; m * n];
                    for i in 0..m {
                        full[i * n + start..i * n + start + w].copy_from_slice(gout.row(i));
                    }
                    acc(*x, Tensor::new(vec![m, n], full)?, &mut grads);
                }
                Op::ConcatRows(parts) => {
                    let mut start = 0;
                    for &p in parts {
                        let m = self.dims2(p, "concat_rows")?.0;
                        acc(p, gout.slice_rows(start, m)?, &mut grads);
                        start += m;
                    }
                }
                Op::ConcatCols(parts) => {
                    let mut start = 0;
                    for &p in parts {
                        let n = self.dims2(p, "concat_cols")?.1;
                        acc(p, gout.slice_cols(start, n)?, &mut grads);
                        start += n;
                    }
                }
                Op::Gather(table, ids) => {
                    let (m, n) = self.dims2(*table, "gather_rows")?;
                    let mut full = vec![0.0; m * n];
                    for (r, &id) in ids.iter().enumerate() {
                        for (f, g) in full[id * n..(id + 1) * n].iter_mut().zip(gout.row(r)) {
                            *f += g;
                        }
                    }
                    acc(*table, Tensor::new(vec![m, n], full)?, &mut grads);
                }
                Op::Sum(x) => {
                    let g = gout.item();
                    acc(*x, Tensor::full(self.nodes[x.0].shape.clone(), g), &mut grads);
                }
                Op::Custom(inputs, op) => {
                    let values = self.values(inputs);
                    let out = node.value.as_ref().expect("value");
                    let adj = op.backward(&values, out, &gout)?;
                    for (v, g) in inputs.iter().zip(adj) {
                        if let Some(g) = g {
                            acc(*v, g, &mut grads);
                        }
                    }
                }
            }
        }
        Ok(Gradients { grads })
    }
}

/// Adjoints produced by [`Graph::backward`], indexed by node.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Adjoint of a leaf; `None` if it does not require a gradient or the
    /// loss does not depend on it.
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

fn col_sums(g: &Tensor, f: impl Fn(f64, f64) -> f64, other: Option<&Tensor>) -> Vec<f64> {
    let n = g.cols();
    let mut out = vec![0.0; n];
    for (i, row) in g.data().chunks(n).enumerate() {
        for (j, &gv) in row.iter().enumerate() {
            let o = other.map_or(0.0, |t| t.data()[i * n + j]);
            out[j] += f(gv, o);
        }
    }
    out
}

fn layer_norm_backward(x: &Tensor, gain: &Tensor, gout: &Tensor, eps: f64) -> Result<(Tensor, Tensor, Tensor)> {
    let d = x.cols();
    let mut dx = vec![0.0; x.len()];
    let mut dg = vec![0.0; d];
    let mut db = vec![0.0; d];
    let mut xhat = vec![0.0; d];
    let mut dxhat = vec![0.0; d];
    for ((xr, gr), dr) in x.data().chunks(d).zip(gout.data().chunks(d)).zip(dx.chunks_mut(d)) {
        let (mean, rstd) = tensor::row_moments(xr, eps);
        for j in 0..d {
            xhat[j] = (xr[j] - mean) * rstd;
            dxhat[j] = gr[j] * gain.data()[j];
            dg[j] += gr[j] * xhat[j];
            db[j] += gr[j];
        }
        let mean_d = dxhat.iter().sum::<f64>() / d as f64;
        let mean_dx = dxhat.iter().zip(&xhat).map(|(a, b)| a * b).sum::<f64>() / d as f64;
        for j in 0..d {
            dr[j] = rstd * (dxhat[j] - mean_d - xhat[j] * mean_dx);
        }
    }
    Ok((Tensor::new(x.shape().to_vec(), dx)?, Tensor::vector(dg), Tensor::vector(db)))
}

fn op_name(op: &Op) -> &'static str {
    match op {
        Op::Leaf => "leaf",
        Op::MatMul(..) => "matmul",
        Op::MatMulNt(..) => "matmul_nt",
        Op::Transpose(..) => "transpose",
        Op::Add(..) => "add",
        Op::Sub(..) => "sub",
        Op::Mul(..) => "mul",
        Op::AddRow(..) => "add_row",
        Op::MulRow(..) => "mul_row",
        Op::Affine(..) => "affine",
        Op::ScaleBy(..) => "scale_by",
        Op::Sigmoid(..) => "sigmoid",
        Op::Silu(..) => "silu",
        Op::Gelu(..) => "gelu",
        Op::Softplus(..) => "softplus",
        Op::Exp(..) => "exp",
        Op::Ln(..) => "ln",
        Op::Softmax(..) => "softmax_rows",
        Op::LayerNorm { .. } => "layer_norm",
        Op::SliceRows(..) => "slice_rows",
        Op::SliceCols(..) => "slice_cols",
        Op::ConcatRows(..) => "concat_rows",
        Op::ConcatCols(..) => "concat_cols",
        Op::Gather(..) => "gather_rows",
        Op::Sum(..) => "sum",
        Op::Custom(_, op) => op.name(),
    }
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[inline]
pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_K: f64 = 0.044_715;

#[inline]
pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_K * x * x * x)).tanh())
}

#[inline]
fn gelu_grad(x: f64) -> f64 {
    let t = (GELU_C * (x + GELU_K * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_K * x * x)
}
