//! Define-by-run reverse-mode differentiation.
//!
//! A [`Tape`] is rebuilt for every forward pass. Nodes are appended in
//! execution order, so creation order is a topological order and the
//! backward sweep is a single reverse scan. A tape owns all of its state;
//! independent tapes can live on different threads.

use rand::Rng;

use crate::error::{Error, Result};
use crate::tensor::{Param, Tensor};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum OpKind {
    Leaf,
    MatMul,
    MatMulT,
    Transpose,
    Add,
    AddRow,
    Hadamard,
    MulRow,
    Scale,
    MulScalar,
    Relu,
    L2Normalize,
    Softmax,
    CrossEntropy,
    MeanRows,
    Sum,
    SelectRows,
    ConcatRows,
    Reshape,
    Dropout,
}

impl OpKind {
    /// Every differentiable operation, in a fixed order.
    pub const DIFFERENTIABLE: [OpKind; 19] = [
        OpKind::MatMul,
        OpKind::MatMulT,
        OpKind::Transpose,
        OpKind::Add,
        OpKind::AddRow,
        OpKind::Hadamard,
        OpKind::MulRow,
        OpKind::Scale,
        OpKind::MulScalar,
        OpKind::Relu,
        OpKind::L2Normalize,
        OpKind::Softmax,
        OpKind::CrossEntropy,
        OpKind::MeanRows,
        OpKind::Sum,
        OpKind::SelectRows,
        OpKind::ConcatRows,
        OpKind::Reshape,
        OpKind::Dropout,
    ];

    pub fn name(self) -> &'static str {
        match self {
            OpKind::Leaf => "leaf",
            OpKind::MatMul => "matmul",
            OpKind::MatMulT => "matmul_t",
            OpKind::Transpose => "transpose",
            OpKind::Add => "add",
            OpKind::AddRow => "add_row",
            OpKind::Hadamard => "hadamard",
            OpKind::MulRow => "mul_row",
            OpKind::Scale => "scale",
            OpKind::MulScalar => "mul_scalar",
            OpKind::Relu => "relu",
            OpKind::L2Normalize => "l2_normalize",
            OpKind::Softmax => "softmax",
            OpKind::CrossEntropy => "cross_entropy",
            OpKind::MeanRows => "mean_rows",
            OpKind::Sum => "sum",
            OpKind::SelectRows => "select_rows",
            OpKind::ConcatRows => "concat_rows",
            OpKind::Reshape => "reshape",
            OpKind::Dropout => "dropout",
        }
    }

    pub fn from_name(name: &str) -> Option<Self> {
        std::iter::once(OpKind::Leaf)
            .chain(Self::DIFFERENTIABLE)
            .find(|k| k.name() == name)
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    MatMulT(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Hadamard(Var, Var),
    MulRow(Var, Var),
    Scale(Var, f64),
    MulScalar(Var, Var),
    Relu(Var),
    L2Normalize { x: Var, norms: Vec<f64>, eps: f64 },
    Softmax(Var),
    CrossEntropy { p: Var, labels: Vec<usize>, eps: f64 },
    MeanRows(Var),
    Sum(Var),
    SelectRows(Var, Vec<usize>),
    ConcatRows(Vec<Var>),
    Reshape(Var),
    Dropout(Var, Vec<f64>),
}

impl Op {
    fn kind(&self) -> OpKind {
        match self {
            Op::Leaf => OpKind::Leaf,
            Op::MatMul(..) => OpKind::MatMul,
            Op::MatMulT(..) => OpKind::MatMulT,
            Op::Transpose(..) => OpKind::Transpose,
            Op::Add(..) => OpKind::Add,
            Op::AddRow(..) => OpKind::AddRow,
            Op::Hadamard(..) => OpKind::Hadamard,
            Op::MulRow(..) => OpKind::MulRow,
            Op::Scale(..) => OpKind::Scale,
            Op::MulScalar(..) => OpKind::MulScalar,
            Op::Relu(..) => OpKind::Relu,
            Op::L2Normalize { .. } => OpKind::L2Normalize,
            Op::Softmax(..) => OpKind::Softmax,
            Op::CrossEntropy { .. } => OpKind::CrossEntropy,
            Op::MeanRows(..) => OpKind::MeanRows,
            Op::Sum(..) => OpKind::Sum,
            Op::SelectRows(..) => OpKind::SelectRows,
            Op::ConcatRows(..) => OpKind::ConcatRows,
            Op::Reshape(..) => OpKind::Reshape,
            Op::Dropout(..) => OpKind::Dropout,
        }
    }
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Default clamp for [`Tape::l2_normalize`].
pub const NORM_EPS: f64 = 1e-12;
/// Default offset inside the log of [`Tape::cross_entropy`].
pub const LOG_EPS: f64 = 1e-12;

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
    corrupt: Option<OpKind>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    /// Test hook: perturbs the adjoint of every node of `kind` during
    /// backward so the gradient checker can be shown to catch it.
    pub fn corrupt_adjoint(&mut self, kind: Option<OpKind>) {
        self.corrupt = kind;
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        self.grads.push(None);
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn param(&mut self, p: &Param) -> Var {
        self.leaf(p.value.clone(), true)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.grads[v.0].as_deref()
    }

    pub fn kind(&self, v: Var) -> OpKind {
        self.nodes[v.0].op.kind()
    }

    /// Adds the gradient of `v` (if any reached it) into `p`.
    pub fn pull_grad(&self, v: Var, p: &mut Param) {
        if let Some(g) = self.grad(v) {
            p.accumulate_grad(g);
        }
    }

    pub fn zero_grads(&mut self) {
        self.grads.iter_mut().for_each(|g| *g = None);
    }

    fn dims(&self, v: Var) -> (usize, usize) {
        self.nodes[v.0].value.dims2()
    }

    fn shape_err(&self, op: &'static str, a: Var, b: Var) -> Error {
        Error::Shape {
            op,
            lhs: self.shape(a).to_vec(),
            rhs: self.shape(b).to_vec(),
        }
    }

    fn require_matrix(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a).len() != 2 || self.shape(b).len() != 2 {
            return Err(self.shape_err(op, a, b));
        }
        Ok(())
    }

    /// `a[m×k] · b[k×n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.require_matrix("matmul", a, b)?;
        let (m, k) = self.dims(a);
        let (k2, n) = self.dims(b);
        if k != k2 {
            return Err(self.shape_err("matmul", a, b));
        }
        let out = mm(self.value(a).data(), self.value(b).data(), m, k, n);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::matrix(m, n, out)?, Op::MatMul(a, b), rg))
    }

    /// `a[m×k] · b[n×k]ᵀ`.
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Result<Var> {
        self.require_matrix("matmul_t", a, b)?;
        let (m, k) = self.dims(a);
        let (n, k2) = self.dims(b);
        if k != k2 {
            return Err(self.shape_err("matmul_t", a, b));
        }
        let out = mm_t(self.value(a).data(), self.value(b).data(), m, k, n);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::matrix(m, n, out)?, Op::MatMulT(a, b), rg))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        if self.shape(a).len() != 2 {
            return Err(self.shape_err("transpose", a, a));
        }
        let (m, n) = self.dims(a);
        let out = transpose(self.value(a).data(), m, n);
        let rg = self.rg(a);
        Ok(self.push(Tensor::matrix(n, m, out)?, Op::Transpose(a), rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(self.shape_err("add", a, b));
        }
        let data = zip_map(self.value(a).data(), self.value(b).data(), |x, y| x + y);
        let shape = self.shape(a).to_vec();
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::new(shape, data)?, Op::Add(a, b), rg))
    }

    pub fn hadamard(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(self.shape_err("hadamard", a, b));
        }
        let data = zip_map(self.value(a).data(), self.value(b).data(), |x, y| x * y);
        let shape = self.shape(a).to_vec();
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::new(shape, data)?, Op::Hadamard(a, b), rg))
    }

    fn check_row_operand(&self, op: &'static str, x: Var, v: Var) -> Result<(usize, usize)> {
        let (m, n) = self.dims(x);
        if self.shape(v) != [n] {
            return Err(self.shape_err(op, x, v));
        }
        Ok((m, n))
    }

    /// Adds the vector `b[n]` to every row of `x`.
    pub fn add_row(&mut self, x: Var, b: Var) -> Result<Var> {
        let (_, n) = self.check_row_operand("add_row", x, b)?;
        let bv = self.value(b).data();
        let data: Vec<f64> = self
            .value(x)
            .data()
            .iter()
            .enumerate()
            .map(|(i, &xi)| xi + bv[i % n])
            .collect();
        let shape = self.shape(x).to_vec();
        let rg = self.rg(x) || self.rg(b);
        Ok(self.push(Tensor::new(shape, data)?, Op::AddRow(x, b), rg))
    }

    /// Multiplies every row of `x` elementwise by the vector `v[n]`.
    pub fn mul_row(&mut self, x: Var, v: Var) -> Result<Var> {
        let (_, n) = self.check_row_operand("mul_row", x, v)?;
        let vv = self.value(v).data();
        let data: Vec<f64> = self
            .value(x)
            .data()
            .iter()
            .enumerate()
            .map(|(i, &xi)| xi * vv[i % n])
            .collect();
        let shape = self.shape(x).to_vec();
        let rg = self.rg(x) || self.rg(v);
        Ok(self.push(Tensor::new(shape, data)?, Op::MulRow(x, v), rg))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Result<Var> {
        let data = self.value(x).data().iter().map(|v| v * c).collect();
        let shape = self.shape(x).to_vec();
        let rg = self.rg(x);
        Ok(self.push(Tensor::new(shape, data)?, Op::Scale(x, c), rg))
    }

    /// `s · x` for a scalar tensor `s`.
    pub fn mul_scalar(&mut self, x: Var, s: Var) -> Result<Var> {
        if self.value(s).len() != 1 {
            return Err(self.shape_err("mul_scalar", x, s));
        }
        let c = self.value(s).item();
        let data = self.value(x).data().iter().map(|v| v * c).collect();
        let shape = self.shape(x).to_vec();
        let rg = self.rg(x) || self.rg(s);
        Ok(self.push(Tensor::new(shape, data)?, Op::MulScalar(x, s), rg))
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let data = self.value(x).data().iter().map(|v| v.max(0.0)).collect();
        let shape = self.shape(x).to_vec();
        let rg = self.rg(x);
        Ok(self.push(Tensor::new(shape, data)?, Op::Relu(x), rg))
    }

    /// Row-wise `v / max(‖v‖₂, eps)`.
    pub fn l2_normalize(&mut self, x: Var, eps: f64) -> Result<Var> {
        let (m, n) = self.dims(x);
        let xv = self.value(x).data();
        let mut norms = Vec::with_capacity(m);
        let mut data = Vec::with_capacity(m * n);
        for row in xv.chunks(n) {
            let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            let denom = norm.max(eps);
            norms.push(norm);
            data.extend(row.iter().map(|v| v / denom));
        }
        let shape = self.shape(x).to_vec();
        let rg = self.rg(x);
        Ok(self.push(Tensor::new(shape, data)?, Op::L2Normalize { x, norms, eps }, rg))
    }

    /// Row-wise softmax with max subtraction.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let (_, n) = self.dims(x);
        let mut data = Vec::with_capacity(self.value(x).len());
        for row in self.value(x).data().chunks(n) {
            data.extend(softmax_row(row));
        }
        let shape = self.shape(x).to_vec();
        let rg = self.rg(x);
        Ok(self.push(Tensor::new(shape, data)?, Op::Softmax(x), rg))
    }

    /// Mean over rows of `−log(p[i, labels[i]] + eps)`; a scalar.
    pub fn cross_entropy(&mut self, p: Var, labels: &[usize], eps: f64) -> Result<Var> {
        let (m, k) = self.dims(p);
        if labels.len() != m {
            return Err(Error::Shape {
                op: "cross_entropy",
                lhs: self.shape(p).to_vec(),
                rhs: vec![labels.len()],
            });
        }
        let pv = self.value(p).data();
        let mut total = 0.0;
        for (i, &y) in labels.iter().enumerate() {
            if y >= k {
                return Err(Error::IndexOutOfRange { index: y, len: k });
            }
            total -= (pv[i * k + y] + eps).ln();
        }
        let loss = total / m as f64;
        let rg = self.rg(p);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy {
                p,
                labels: labels.to_vec(),
                eps,
            },
            rg,
        ))
    }

    /// Mean over rows; `[m×n] → [n]`.
    pub fn mean_rows(&mut self, x: Var) -> Result<Var> {
        let (m, n) = self.dims(x);
        let mut out = vec![0.0; n];
        for row in self.value(x).data().chunks(n) {
            out.iter_mut().zip(row).for_each(|(o, v)| *o += v);
        }
        out.iter_mut().for_each(|o| *o /= m as f64);
        let rg = self.rg(x);
        Ok(self.push(Tensor::new(vec![n], out)?, Op::MeanRows(x), rg))
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).data().iter().sum();
        let rg = self.rg(x);
        Ok(self.push(Tensor::scalar(s), Op::Sum(x), rg))
    }

    /// Gathers rows `idx` into a `[idx.len() × n]` matrix.
    pub fn select_rows(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let out = self.value(x).select_rows(idx)?;
        let rg = self.rg(x);
        Ok(self.push(out, Op::SelectRows(x, idx.to_vec()), rg))
    }

    /// Stacks vectors and matrices with equal column count.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let Some(&first) = parts.first() else {
            return Err(Error::InvalidTensor("concat of nothing".into()));
        };
        let n = self.dims(first).1;
        let mut rows = 0;
        let mut data = Vec::new();
        for &p in parts {
            let (m, c) = self.dims(p);
            if c != n {
                return Err(self.shape_err("concat_rows", first, p));
            }
            rows += m;
            data.extend_from_slice(self.value(p).data());
        }
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(Tensor::matrix(rows, n, data)?, Op::ConcatRows(parts.to_vec()), rg))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(x).clone().reshaped(shape.to_vec())?;
        let rg = self.rg(x);
        Ok(self.push(out, Op::Reshape(x), rg))
    }

    /// Inverted dropout. With `train == false` the input handle is returned
    /// unchanged.
    pub fn dropout<R: Rng + ?Sized>(
        &mut self,
        x: Var,
        p: f64,
        rng: &mut R,
        train: bool,
    ) -> Result<Var> {
        if !train || p <= 0.0 {
            return Ok(x);
        }
        if p >= 1.0 {
            return Err(Error::Config(format!("dropout probability {p} must be < 1")));
        }
        let keep = 1.0 / (1.0 - p);
        let mask: Vec<f64> = (0..self.value(x).len())
            .map(|_| if rng.random::<f64>() < p { 0.0 } else { keep })
            .collect();
        Ok(self.dropout_with_mask(x, mask)?)
    }

    /// Dropout with an explicit multiplicative mask.
    pub fn dropout_with_mask(&mut self, x: Var, mask: Vec<f64>) -> Result<Var> {
        if mask.len() != self.value(x).len() {
            return Err(Error::Shape {
                op: "dropout",
                lhs: self.shape(x).to_vec(),
                rhs: vec![mask.len()],
            });
        }
        let data = zip_map(self.value(x).data(), &mask, |a, b| a * b);
        let shape = self.shape(x).to_vec();
        let rg = self.rg(x);
        Ok(self.push(Tensor::new(shape, data)?, Op::Dropout(x, mask), rg))
    }

    /// Reverse sweep from a scalar `loss`.
    ///
    /// Gradients are added to whatever earlier sweeps left on this tape;
    /// call [`Tape::zero_grads`] to start over.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).len() != 1 {
            return Err(Error::NonScalarLoss(self.shape(loss).to_vec()));
        }
        let mut pass: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        pass[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let Some(g) = pass[i].take() else { continue };
            let node = &self.nodes[i];
            if node.requires_grad {
                let mut contributions = self.adjoints(node, &g);
                if self.corrupt == Some(node.op.kind()) {
                    for (_, c) in contributions.iter_mut() {
                        c.iter_mut().for_each(|v| *v = *v * 1.25 + 1e-3);
                    }
                }
                for (v, c) in contributions {
                    if self.nodes[v.0].requires_grad {
                        accumulate(&mut pass[v.0], c);
                    }
                }
            }
            pass[i] = Some(g);
        }
        for (i, g) in pass.into_iter().enumerate() {
            if let Some(g) = g {
                if self.nodes[i].requires_grad {
                    accumulate(&mut self.grads[i], g);
                }
            }
        }
        Ok(())
    }

    fn adjoints(&self, node: &Node, g: &[f64]) -> Vec<(Var, Vec<f64>)> {
        let val = |v: Var| self.nodes[v.0].value.data();
        let dims = |v: Var| self.nodes[v.0].value.dims2();
        match &node.op {
            Op::Leaf => vec![],
            Op::MatMul(a, b) => {
                let (m, k) = dims(*a);
                let n = dims(*b).1;
                vec![
                    (*a, mm_t(g, val(*b), m, n, k)),
                    (*b, mm_tn(val(*a), g, m, k, n)),
                ]
            }
            Op::MatMulT(a, b) => {
                let (m, k) = dims(*a);
                let n = dims(*b).0;
                vec![
                    (*a, mm(g, val(*b), m, n, k)),
                    (*b, mm_tn(g, val(*a), m, n, k)),
                ]
            }
            Op::Transpose(a) => {
                let (m, n) = dims(*a);
                vec![(*a, transpose(g, n, m))]
            }
            Op::Add(a, b) => vec![(*a, g.to_vec()), (*b, g.to_vec())],
            Op::AddRow(x, b) => {
                let n = dims(*x).1;
                let mut gb = vec![0.0; n];
                for row in g.chunks(n) {
                    gb.iter_mut().zip(row).for_each(|(o, v)| *o += v);
                }
                vec![(*x, g.to_vec()), (*b, gb)]
            }
            Op::Hadamard(a, b) => vec![
                (*a, zip_map(g, val(*b), |x, y| x * y)),
                (*b, zip_map(g, val(*a), |x, y| x * y)),
            ],
            Op::MulRow(x, v) => {
                let n = dims(*x).1;
                let vv = val(*v);
                let xv = val(*x);
                let gx = g.iter().enumerate().map(|(i, gi)| gi * vv[i % n]).collect();
                let mut gv = vec![0.0; n];
                for (i, gi) in g.iter().enumerate() {
                    gv[i % n] += gi * xv[i];
                }
                vec![(*x, gx), (*v, gv)]
            }
            Op::Scale(x, c) => vec![(*x, g.iter().map(|v| v * c).collect())],
            Op::MulScalar(x, s) => {
                let c = val(*s)[0];
                let gs: f64 = g.iter().zip(val(*x)).map(|(a, b)| a * b).sum();
                vec![(*x, g.iter().map(|v| v * c).collect()), (*s, vec![gs])]
            }
            Op::Relu(x) => vec![(
                *x,
                zip_map(g, val(*x), |gi, xi| if xi > 0.0 { gi } else { 0.0 }),
            )],
            Op::L2Normalize { x, norms, eps } => {
                let n = dims(*x).1;
                let y = node.value.data();
                let mut gx = Vec::with_capacity(g.len());
                for (r, &norm) in norms.iter().enumerate() {
                    let gr = &g[r * n..(r + 1) * n];
                    if norm >= *eps {
                        let yr = &y[r * n..(r + 1) * n];
                        let dot: f64 = gr.iter().zip(yr).map(|(a, b)| a * b).sum();
                        gx.extend(gr.iter().zip(yr).map(|(gi, yi)| (gi - yi * dot) / norm));
                    } else {
                        gx.extend(gr.iter().map(|gi| gi / eps));
                    }
                }
                vec![(*x, gx)]
            }
            Op::Softmax(x) => {
                let n = dims(*x).1;
                let y = node.value.data();
                let mut gx = Vec::with_capacity(g.len());
                for (gr, yr) in g.chunks(n).zip(y.chunks(n)) {
                    let dot: f64 = gr.iter().zip(yr).map(|(a, b)| a * b).sum();
                    gx.extend(gr.iter().zip(yr).map(|(gi, yi)| yi * (gi - dot)));
                }
                vec![(*x, gx)]
            }
            Op::CrossEntropy { p, labels, eps } => {
                let (m, k) = dims(*p);
                let pv = val(*p);
                let mut gp = vec![0.0; m * k];
                for (i, &y) in labels.iter().enumerate() {
                    gp[i * k + y] = -g[0] / (m as f64 * (pv[i * k + y] + eps));
                }
                vec![(*p, gp)]
            }
            Op::MeanRows(x) => {
                let (m, _) = dims(*x);
                let gx = (0..m).flat_map(|_| g.iter().map(|v| v / m as f64)).collect();
                vec![(*x, gx)]
            }
            Op::Sum(x) => vec![(*x, vec![g[0]; val(*x).len()])],
            Op::SelectRows(x, idx) => {
                let (m, n) = dims(*x);
                let mut gx = vec![0.0; m * n];
                for (r, &i) in idx.iter().enumerate() {
                    gx[i * n..(i + 1) * n]
                        .iter_mut()
                        .zip(&g[r * n..(r + 1) * n])
                        .for_each(|(o, v)| *o += v);
                }
                vec![(*x, gx)]
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                parts
                    .iter()
                    .map(|&p| {
                        let len = val(p).len();
                        let slice = g[offset..offset + len].to_vec();
                        offset += len;
                        (p, slice)
                    })
                    .collect()
            }
            Op::Reshape(x) => vec![(*x, g.to_vec())],
            Op::Dropout(x, mask) => vec![(*x, zip_map(g, mask, |a, b| a * b))],
        }
    }
}

fn accumulate(slot: &mut Option<Vec<f64>>, g: Vec<f64>) {
    match slot {
        Some(buf) => buf.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
        None => *slot = Some(g),
    }
}

fn zip_map(a: &[f64], b: &[f64], f: impl Fn(f64, f64) -> f64) -> Vec<f64> {
    a.iter().zip(b).map(|(&x, &y)| f(x, y)).collect()
}

pub(crate) fn softmax_row(row: &[f64]) -> Vec<f64> {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = row.iter().map(|v| (v - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / total).collect()
}

/// `a[m×k] · b[k×n]`
fn mm(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let orow = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = a[i * k + p];
            if aip == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            orow.iter_mut().zip(brow).for_each(|(o, bv)| *o += aip * bv);
        }
    }
    out
}

/// `a[m×k] · b[n×k]ᵀ`
fn mm_t(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
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

/// `a[m×k]ᵀ · b[m×n]`
fn mm_tn(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; k * n];
    for i in 0..m {
        let brow = &b[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = a[i * k + p];
            if aip == 0.0 {
                continue;
            }
            out[p * n..(p + 1) * n]
                .iter_mut()
                .zip(brow)
                .for_each(|(o, bv)| *o += aip * bv);
        }
    }
    out
}

fn transpose(a: &[f64], m: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            out[j * m + i] = a[i * n + j];
        }
    }
    out
}
