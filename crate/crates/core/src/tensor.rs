//! Dense row-major `f64` tensors and a reverse-mode differentiation tape.
//!
//! A [`Tape`] records every operation applied to its [`Var`] handles in
//! execution order, so the node list is already topologically sorted and a
//! backward pass is a single reverse sweep. Only rank-2 matrix products,
//! equal-shape / scalar broadcasting and a bias-row add are supported; that
//! is all an MLP needs.

use crate::error::{Error, Result};

/// Floor applied to the argument of `log`.
pub const LOG_CLAMP: f64 = 1e-12;

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(Error::Shape {
                op: "tensor",
                left: shape,
                right: vec![data.len()],
            });
        }
        if let Some(bad) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!(
                "tensor construction (element {bad})"
            )));
        }
        Ok(Tensor { shape, data })
    }

    pub fn scalar(value: f64) -> Self {
        Tensor {
            shape: Vec::new(),
            data: vec![value],
        }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Tensor {
            shape: shape.to_vec(),
            data: vec![0.0; shape.iter().product()],
        }
    }

    pub fn vector(data: Vec<f64>) -> Result<Self> {
        Tensor::new(vec![data.len()], data)
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        Tensor::new(vec![rows, cols], data)
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

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> Result<f64> {
        if self.data.len() != 1 {
            return Err(Error::Contract(format!(
                "item() on tensor of shape {:?}",
                self.shape
            )));
        }
        Ok(self.data[0])
    }

    fn dims2(&self, op: &'static str) -> Result<(usize, usize)> {
        match self.shape.as_slice() {
            [r, c] => Ok((*r, *c)),
            _ => Err(Error::Shape {
                op,
                left: self.shape.clone(),
                right: vec![],
            }),
        }
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
pub enum UnaryOp {
    Exp,
    Log,
    Sigmoid,
    Tanh,
    Relu,
    Neg,
    Square,
    Softplus,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BinaryOp {
    Add,
    Sub,
    Mul,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ReduceOp {
    Sum,
    Mean,
    LogSumExp,
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Binary(BinaryOp, Var, Var),
    Unary(UnaryOp, Var),
    Scale(f64, Var),
    AddRow(Var, Var),
    Reduce(ReduceOp, Var, Option<usize>),
    /// Per-row Bernoulli log-likelihood Σ_j x_j·l_j − softplus(l_j); targets are constant.
    BernoulliRows(Var, Vec<f64>),
    /// Per-row softmax cross-entropy against integer labels.
    CrossEntropyRows(Var, Vec<usize>),
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
    grad: Option<Vec<f64>>,
}

/// Operation recorder. Confined to one thread; independent tapes may run in parallel.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

/// Max-shifted log-sum-exp of a slice. `-inf` for an empty slice.
pub fn log_sum_exp(values: &[f64]) -> f64 {
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        return max;
    }
    max + values.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}

fn check_finite(op: &str, data: &[f64]) -> Result<()> {
    if data.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite(op.to_string()))
    }
}

/// C (m×n) = alpha·A·B + beta·C with explicit strides.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_strides: (usize, usize),
    b: &[f64],
    b_strides: (usize, usize),
    beta: f64,
    c: &mut [f64],
) {
    if m == 0 || n == 0 {
        return;
    }
    // SAFETY: callers size every buffer from the checked tensor shapes, and the
    // strides describe either the buffer itself or its transpose.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            a_strides.0 as isize,
            a_strides.1 as isize,
            b.as_ptr(),
            b_strides.0 as isize,
            b_strides.1 as isize,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

fn reduce_dims(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Adds a differentiable input.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Adds an input that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Accumulated gradient of a leaf, if any backward pass reached it.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.nodes[v.0].grad.as_deref()
    }

    pub fn zero_grad(&mut self) {
        for node in &mut self.nodes {
            node.grad = None;
        }
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
            grad: None,
        });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn record(&mut self, op: Op, shape: Vec<usize>, data: Vec<f64>, name: &str) -> Result<Var> {
        check_finite(name, &data)?;
        let requires_grad = match &op {
            Op::Leaf => false,
            Op::MatMul(a, b) | Op::Binary(_, a, b) | Op::AddRow(a, b) => {
                self.needs(*a) || self.needs(*b)
            }
            Op::Unary(_, a)
            | Op::Scale(_, a)
            | Op::Reduce(_, a, _)
            | Op::BernoulliRows(a, _)
            | Op::CrossEntropyRows(a, _) => self.needs(*a),
        };
        Ok(self.push(Tensor { shape, data }, op, requires_grad))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.value(a).dims2("matmul")?;
        let (k2, n) = self.value(b).dims2("matmul")?;
        if k != k2 {
            return Err(Error::Shape {
                op: "matmul",
                left: vec![m, k],
                right: vec![k2, n],
            });
        }
        let mut out = vec![0.0; m * n];
        gemm(
            m,
            k,
            n,
            self.value(a).data(),
            (k, 1),
            self.value(b).data(),
            (n, 1),
            0.0,
            &mut out,
        );
        self.record(Op::MatMul(a, b), vec![m, n], out, "matmul")
    }

    pub fn binary(&mut self, op: BinaryOp, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        let f = match op {
            BinaryOp::Add => |x: f64, y: f64| x + y,
            BinaryOp::Sub => |x: f64, y: f64| x - y,
            BinaryOp::Mul => |x: f64, y: f64| x * y,
        };
        let (shape, data) = if va.shape() == vb.shape() {
            let d = va
                .data()
                .iter()
                .zip(vb.data())
                .map(|(&x, &y)| f(x, y))
                .collect();
            (va.shape().to_vec(), d)
        } else if vb.is_scalar() {
            let y = vb.data()[0];
            (
                va.shape().to_vec(),
                va.data().iter().map(|&x| f(x, y)).collect(),
            )
        } else if va.is_scalar() {
            let x = va.data()[0];
            (
                vb.shape().to_vec(),
                vb.data().iter().map(|&y| f(x, y)).collect(),
            )
        } else {
            return Err(Error::Shape {
                op: "elementwise",
                left: va.shape().to_vec(),
                right: vb.shape().to_vec(),
            });
        };
        self.record(Op::Binary(op, a, b), shape, data, "elementwise")
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryOp::Add, a, b)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryOp::Sub, a, b)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryOp::Mul, a, b)
    }

    pub fn unary(&mut self, op: UnaryOp, a: Var) -> Result<Var> {
        let va = self.value(a);
        if op == UnaryOp::Log {
            if let Some(bad) = va.data().iter().find(|&&x| x < 0.0) {
                return Err(Error::Domain(format!("log of negative value {bad}")));
            }
        }
        let f: fn(f64) -> f64 = match op {
            UnaryOp::Exp => f64::exp,
            UnaryOp::Log => |x| x.max(LOG_CLAMP).ln(),
            UnaryOp::Sigmoid => sigmoid,
            UnaryOp::Tanh => f64::tanh,
            UnaryOp::Relu => |x| x.max(0.0),
            UnaryOp::Neg => |x| -x,
            UnaryOp::Square => |x| x * x,
            UnaryOp::Softplus => softplus,
        };
        let shape = va.shape().to_vec();
        let data = va.data().iter().map(|&x| f(x)).collect();
        self.record(
            Op::Unary(op, a),
            shape,
            data,
            &format!("{op:?}").to_lowercase(),
        )
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        self.unary(UnaryOp::Exp, a)
    }

    pub fn log(&mut self, a: Var) -> Result<Var> {
        self.unary(UnaryOp::Log, a)
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        self.unary(UnaryOp::Sigmoid, a)
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var> {
        self.unary(UnaryOp::Tanh, a)
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        self.unary(UnaryOp::Relu, a)
    }

    pub fn neg(&mut self, a: Var) -> Result<Var> {
        self.unary(UnaryOp::Neg, a)
    }

    pub fn square(&mut self, a: Var) -> Result<Var> {
        self.unary(UnaryOp::Square, a)
    }

    pub fn softplus(&mut self, a: Var) -> Result<Var> {
        self.unary(UnaryOp::Softplus, a)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        let va = self.value(a);
        let shape = va.shape().to_vec();
        let data = va.data().iter().map(|&x| c * x).collect();
        self.record(Op::Scale(c, a), shape, data, "scale")
    }

    /// `m` (rows×cols) plus a bias `row` of length cols added to every row.
    pub fn add_row(&mut self, m: Var, row: Var) -> Result<Var> {
        let (rows, cols) = self.value(m).dims2("add_row")?;
        let vr = self.value(row);
        if vr.numel() != cols {
            return Err(Error::Shape {
                op: "add_row",
                left: vec![rows, cols],
                right: vr.shape().to_vec(),
            });
        }
        let r = vr.data();
        let data = self
            .value(m)
            .data()
            .chunks_exact(cols.max(1))
            .flat_map(|chunk| chunk.iter().zip(r).map(|(x, b)| x + b))
            .collect();
        self.record(Op::AddRow(m, row), vec![rows, cols], data, "add_row")
    }

    pub fn reduce(&mut self, op: ReduceOp, a: Var, axis: Option<usize>) -> Result<Var> {
        let va = self.value(a);
        let (shape, data) = match axis {
            None => {
                if va.numel() == 0 && op != ReduceOp::Sum {
                    return Err(Error::Domain(format!("{op:?} over an empty tensor")));
                }
                (
                    Vec::new(),
                    vec![reduce_slice(op, va.data().iter().copied())],
                )
            }
            Some(ax) => {
                if ax >= va.shape().len() {
                    return Err(Error::Domain(format!(
                        "reduction axis {ax} out of range for shape {:?}",
                        va.shape()
                    )));
                }
                let (outer, len, inner) = reduce_dims(va.shape(), ax);
                if len == 0 {
                    return Err(Error::Domain(format!("empty reduction axis {ax}")));
                }
                let mut out = Vec::with_capacity(outer * inner);
                let d = va.data();
                for o in 0..outer {
                    for i in 0..inner {
                        let it = (0..len).map(|l| d[(o * len + l) * inner + i]);
                        out.push(reduce_slice(op, it));
                    }
                }
                let mut shape = va.shape().to_vec();
                shape.remove(ax);
                (shape, out)
            }
        };
        self.record(Op::Reduce(op, a, axis), shape, data, "reduce")
    }

    pub fn sum(&mut self, a: Var, axis: Option<usize>) -> Result<Var> {
        self.reduce(ReduceOp::Sum, a, axis)
    }

    pub fn mean(&mut self, a: Var, axis: Option<usize>) -> Result<Var> {
        self.reduce(ReduceOp::Mean, a, axis)
    }

    pub fn log_sum_exp(&mut self, a: Var, axis: Option<usize>) -> Result<Var> {
        self.reduce(ReduceOp::LogSumExp, a, axis)
    }

    /// Row sums of the Bernoulli log-likelihood of `targets` under `logits`,
    /// evaluated in the stable logit form.
    pub fn bernoulli_log_lik_rows(&mut self, logits: Var, targets: &Tensor) -> Result<Var> {
        let vl = self.value(logits);
        let (rows, cols) = vl.dims2("bernoulli_log_lik")?;
        if targets.numel() != rows * cols {
            return Err(Error::Shape {
                op: "bernoulli_log_lik",
                left: vl.shape().to_vec(),
                right: targets.shape().to_vec(),
            });
        }
        let out = vl
            .data()
            .chunks_exact(cols.max(1))
            .zip(targets.data().chunks_exact(cols.max(1)))
            .map(|(l, x)| l.iter().zip(x).map(|(&l, &x)| x * l - softplus(l)).sum())
            .collect();
        let t = targets.data().to_vec();
        self.record(
            Op::BernoulliRows(logits, t),
            vec![rows],
            out,
            "bernoulli_log_lik",
        )
    }

    /// Per-row negative log-softmax at the given labels.
    pub fn cross_entropy_rows(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let vl = self.value(logits);
        let (rows, cols) = vl.dims2("cross_entropy")?;
        if labels.len() != rows {
            return Err(Error::Shape {
                op: "cross_entropy",
                left: vec![rows, cols],
                right: vec![labels.len()],
            });
        }
        if let Some(&bad) = labels.iter().find(|&&y| y >= cols) {
            return Err(Error::Domain(format!(
                "label {bad} out of range for {cols} classes"
            )));
        }
        let out = vl
            .data()
            .chunks_exact(cols)
            .zip(labels)
            .map(|(row, &y)| log_sum_exp(row) - row[y])
            .collect();
        self.record(
            Op::CrossEntropyRows(logits, labels.to_vec()),
            vec![rows],
            out,
            "cross_entropy",
        )
    }

    /// Reverse sweep from a scalar output. Leaf gradients accumulate across calls.
    pub fn backward(&mut self, output: Var) -> Result<()> {
        if !self.value(output).is_scalar() {
            return Err(Error::Contract(format!(
                "backward needs a scalar output, got shape {:?}",
                self.shape(output)
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; output.0 + 1];
        grads[output.0] = Some(vec![1.0]);

        for id in (0..=output.0).rev() {
            let Some(g) = grads[id].take() else { continue };
            if !self.nodes[id].requires_grad {
                continue;
            }
            let op = self.nodes[id].op.clone();
            match op {
                Op::Leaf => {
                    let node = &mut self.nodes[id];
                    match &mut node.grad {
                        Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
                        None => node.grad = Some(g),
                    }
                }
                Op::MatMul(a, b) => {
                    let (m, k) = self.value(a).dims2("matmul")?;
                    let n = self.shape(b)[1];
                    if self.needs(a) {
                        let mut da = vec![0.0; m * k];
                        gemm(
                            m,
                            n,
                            k,
                            &g,
                            (n, 1),
                            self.value(b).data(),
                            (1, n),
                            0.0,
                            &mut da,
                        );
                        accumulate(&mut grads, a, da);
                    }
                    if self.needs(b) {
                        let mut db = vec![0.0; k * n];
                        gemm(
                            k,
                            m,
                            n,
                            self.value(a).data(),
                            (1, k),
                            &g,
                            (n, 1),
                            0.0,
                            &mut db,
                        );
                        accumulate(&mut grads, b, db);
                    }
                }
                Op::Binary(bop, a, b) => {
                    let (ga, gb) = self.binary_grads(bop, a, b, &g);
                    if let Some(ga) = ga {
                        accumulate(&mut grads, a, ga);
                    }
                    if let Some(gb) = gb {
                        accumulate(&mut grads, b, gb);
                    }
                }
                Op::Unary(uop, a) => {
                    let x = self.value(a).data();
                    let y = self.nodes[id].value.data();
                    let ga = g
                        .iter()
                        .zip(x.iter().zip(y))
                        .map(|(&g, (&x, &y))| g * unary_derivative(uop, x, y))
                        .collect();
                    accumulate(&mut grads, a, ga);
                }
                Op::Scale(c, a) => {
                    accumulate(&mut grads, a, g.iter().map(|v| c * v).collect());
                }
                Op::AddRow(m, row) => {
                    let cols = self.shape(m)[1];
                    if self.needs(row) {
                        let mut gr = vec![0.0; cols];
                        for chunk in g.chunks_exact(cols.max(1)) {
                            gr.iter_mut().zip(chunk).for_each(|(a, b)| *a += b);
                        }
                        accumulate(&mut grads, row, gr);
                    }
                    if self.needs(m) {
                        accumulate(&mut grads, m, g);
                    }
                }
                Op::Reduce(rop, a, axis) => {
                    let ga = self.reduce_grad(rop, a, axis, id, &g);
                    accumulate(&mut grads, a, ga);
                }
                Op::BernoulliRows(l, targets) => {
                    let cols = self.shape(l)[1];
                    let ga = self
                        .value(l)
                        .data()
                        .iter()
                        .zip(&targets)
                        .enumerate()
                        .map(|(i, (&l, &x))| g[i / cols] * (x - sigmoid(l)))
                        .collect();
                    accumulate(&mut grads, l, ga);
                }
                Op::CrossEntropyRows(l, labels) => {
                    let cols = self.shape(l)[1];
                    let mut ga = Vec::with_capacity(self.value(l).numel());
                    for (r, row) in self.value(l).data().chunks_exact(cols).enumerate() {
                        let lse = log_sum_exp(row);
                        for (c, &v) in row.iter().enumerate() {
                            let onehot = if c == labels[r] { 1.0 } else { 0.0 };
                            ga.push(g[r] * ((v - lse).exp() - onehot));
                        }
                    }
                    accumulate(&mut grads, l, ga);
                }
            }
        }
        Ok(())
    }

    fn binary_grads(
        &self,
        op: BinaryOp,
        a: Var,
        b: Var,
        g: &[f64],
    ) -> (Option<Vec<f64>>, Option<Vec<f64>>) {
        let (va, vb) = (self.value(a), self.value(b));
        let n = g.len();
        let at = |t: &Tensor, i: usize| {
            if t.is_scalar() {
                t.data()[0]
            } else {
                t.data()[i]
            }
        };
        let local_a: Vec<f64> = (0..n)
            .map(|i| match op {
                BinaryOp::Add | BinaryOp::Sub => g[i],
                BinaryOp::Mul => g[i] * at(vb, i),
            })
            .collect();
        let local_b: Vec<f64> = (0..n)
            .map(|i| match op {
                BinaryOp::Add => g[i],
                BinaryOp::Sub => -g[i],
                BinaryOp::Mul => g[i] * at(va, i),
            })
            .collect();
        let fold = |t: &Tensor, local: Vec<f64>| {
            if t.is_scalar() && n != 1 {
                vec![local.iter().sum()]
            } else {
                local
            }
        };
        let ga = self.needs(a).then(|| fold(va, local_a));
        let gb = self.needs(b).then(|| fold(vb, local_b));
        (ga, gb)
    }

    fn reduce_grad(
        &self,
        op: ReduceOp,
        a: Var,
        axis: Option<usize>,
        out: usize,
        g: &[f64],
    ) -> Vec<f64> {
        let x = self.value(a);
        let y = self.nodes[out].value.data();
        let (outer, len, inner) = match axis {
            None => (1, x.numel(), 1),
            Some(ax) => reduce_dims(x.shape(), ax),
        };
        let mut ga = vec![0.0; x.numel()];
        for o in 0..outer {
            for i in 0..inner {
                let r = o * inner + i;
                for l in 0..len {
                    let idx = (o * len + l) * inner + i;
                    ga[idx] = match op {
                        ReduceOp::Sum => g[r],
                        ReduceOp::Mean => g[r] / len as f64,
                        ReduceOp::LogSumExp => g[r] * (x.data()[idx] - y[r]).exp(),
                    };
                }
            }
        }
        ga
    }
}

fn reduce_slice(op: ReduceOp, it: impl Iterator<Item = f64>) -> f64 {
    match op {
        ReduceOp::Sum => it.sum(),
        ReduceOp::Mean => {
            let (s, n) = it.fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
            s / n as f64
        }
        ReduceOp::LogSumExp => {
            let v: Vec<f64> = it.collect();
            log_sum_exp(&v)
        }
    }
}

fn unary_derivative(op: UnaryOp, x: f64, y: f64) -> f64 {
    match op {
        UnaryOp::Exp => y,
        UnaryOp::Log => {
            if x >= LOG_CLAMP {
                1.0 / x
            } else {
                0.0
            }
        }
        UnaryOp::Sigmoid => y * (1.0 - y),
        UnaryOp::Tanh => 1.0 - y * y,
        UnaryOp::Relu => {
            if x > 0.0 {
                1.0
            } else {
                0.0
            }
        }
        UnaryOp::Neg => -1.0,
        UnaryOp::Square => 2.0 * x,
        UnaryOp::Softplus => sigmoid(x),
    }
}

fn accumulate(grads: &mut [Option<Vec<f64>>], v: Var, g: Vec<f64>) {
    match &mut grads[v.0] {
        Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
        slot @ None => *slot = Some(g),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn fd_check<F>(x0: &Tensor, f: F)
    where
        F: Fn(&mut Tape, Var) -> Result<Var>,
    {
        let mut tape = Tape::new();
        let x = tape.leaf(x0.clone());
        let y = f(&mut tape, x).unwrap();
        let y = if tape.value(y).is_scalar() {
            y
        } else {
            tape.sum(y, None).unwrap()
        };
        tape.backward(y).unwrap();
        let analytic = tape.grad(x).unwrap().to_vec();

        let h = 1e-5;
        let eval = |data: Vec<f64>| {
            let mut t = Tape::new();
            let x = t.leaf(Tensor::new(x0.shape().to_vec(), data).unwrap());
            let y = f(&mut t, x).unwrap();
            t.value(y).data().iter().sum::<f64>()
        };
        for i in 0..x0.numel() {
            let mut plus = x0.data().to_vec();
            let mut minus = x0.data().to_vec();
            plus[i] += h;
            minus[i] -= h;
            let numeric = (eval(plus) - eval(minus)) / (2.0 * h);
            let a = analytic[i];
            let abs = (a - numeric).abs();
            let rel = abs / a.abs().max(numeric.abs()).max(1e-300);
            assert!(
                rel < 1e-4 || abs < 1e-7,
                "component {i}: analytic {a} vs numeric {numeric}"
            );
        }
    }

    #[test]
    fn matmul_identity_and_product() {
        let mut tape = Tape::new();
        let i = tape.constant(Tensor::matrix(2, 2, vec![1.0, 0.0, 0.0, 1.0]).unwrap());
        let v = tape.constant(Tensor::matrix(2, 1, vec![3.0, 4.0]).unwrap());
        let out = tape.matmul(i, v).unwrap();
        assert_eq!(tape.value(out).data(), &[3.0, 4.0]);

        let a = tape.leaf(Tensor::matrix(1, 2, vec![1.0, 2.0]).unwrap());
        let p = tape.matmul(a, v).unwrap();
        assert_eq!(tape.value(p).data(), &[11.0]);
        let s = tape.sum(p, None).unwrap();
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(a).unwrap(), &[3.0, 4.0]);
    }

    #[test]
    fn matmul_shape_mismatch_reports_both_shapes() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::zeros(&[2, 3]));
        let b = tape.constant(Tensor::zeros(&[2, 3]));
        match tape.matmul(a, b) {
            Err(Error::Shape { left, right, .. }) => {
                assert_eq!(left, vec![2, 3]);
                assert_eq!(right, vec![2, 3]);
            }
            other => panic!("expected shape error, got {other:?}"),
        }
    }

    #[test]
    fn elementwise_values() {
        let mut tape = Tape::new();
        let z = tape.leaf(Tensor::scalar(0.0));
        let s = tape.sigmoid(z).unwrap();
        assert_eq!(tape.value(s).item().unwrap(), 0.5);
        tape.backward(s).unwrap();
        assert!((tape.grad(z).unwrap()[0] - 0.25).abs() < 1e-15);

        let x = tape.constant(Tensor::scalar(2.5));
        let l = tape.log(x).unwrap();
        let e = tape.exp(l).unwrap();
        assert!((tape.value(e).item().unwrap() - 2.5).abs() < 1e-15);
    }

    #[test]
    fn log_rejects_negative_and_clamps_zero() {
        let mut tape = Tape::new();
        let neg = tape.constant(Tensor::scalar(-1.0));
        assert!(matches!(tape.log(neg), Err(Error::Domain(_))));
        let zero = tape.constant(Tensor::scalar(0.0));
        let l = tape.log(zero).unwrap();
        assert_eq!(tape.value(l).item().unwrap(), LOG_CLAMP.ln());
    }

    #[test]
    fn sigmoid_saturates_without_nan() {
        assert_eq!(sigmoid(-1000.0), 0.0);
        assert_eq!(sigmoid(1000.0), 1.0);
        assert!(softplus(1000.0) == 1000.0);
        assert!(softplus(-1000.0) >= 0.0);
    }

    #[test]
    fn broadcasting_rules() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::vector(vec![1.0, 2.0]).unwrap());
        let b = tape.constant(Tensor::vector(vec![1.0, 2.0, 3.0]).unwrap());
        assert!(matches!(tape.add(a, b), Err(Error::Shape { .. })));
        let c = tape.constant(Tensor::scalar(10.0));
        let s = tape.add(a, c).unwrap();
        assert_eq!(tape.value(s).data(), &[11.0, 12.0]);
    }

    #[test]
    fn log_sum_exp_cases() {
        assert!((log_sum_exp(&[0.0, 0.0]) - 2f64.ln()).abs() < 1e-15);
        let big = log_sum_exp(&[1000.0, 1000.0]);
        assert!((big - (1000.0 + 2f64.ln())).abs() < 1e-12);
        assert_eq!(log_sum_exp(&[-5.0; 4]), -5.0 + 4f64.ln());

        let mut tape = Tape::new();
        let z = tape.constant(Tensor::zeros(&[3]));
        let s = tape.sum(z, None).unwrap();
        assert_eq!(tape.value(s).item().unwrap(), 0.0);
        let e = tape.constant(Tensor::zeros(&[2, 0]));
        assert!(matches!(
            tape.log_sum_exp(e, Some(1)),
            Err(Error::Domain(_))
        ));
        assert!(matches!(tape.sum(z, Some(1)), Err(Error::Domain(_))));
    }

    #[test]
    fn reduce_along_axis() {
        let mut tape = Tape::new();
        let m = tape.constant(Tensor::matrix(2, 3, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap());
        let rows = tape.sum(m, Some(1)).unwrap();
        assert_eq!(tape.value(rows).data(), &[6.0, 15.0]);
        let cols = tape.mean(m, Some(0)).unwrap();
        assert_eq!(tape.value(cols).data(), &[2.5, 3.5, 4.5]);
    }

    #[test]
    fn backward_square_and_constant() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::scalar(3.0));
        let y = tape.square(x).unwrap();
        tape.backward(y).unwrap();
        assert!((tape.grad(x).unwrap()[0] - 6.0).abs() < 1e-12);
        // accumulation across passes
        tape.backward(y).unwrap();
        assert!((tape.grad(x).unwrap()[0] - 12.0).abs() < 1e-12);

        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::scalar(3.0));
        let c = tape.constant(Tensor::scalar(7.0));
        let zero = tape.scale(x, 0.0).unwrap();
        let y = tape.add(c, zero).unwrap();
        tape.backward(y).unwrap();
        assert_eq!(tape.grad(x).unwrap()[0], 0.0);
    }

    #[test]
    fn backward_requires_scalar() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::zeros(&[2]));
        assert!(matches!(tape.backward(x), Err(Error::Contract(_))));
    }

    #[test]
    fn overflow_is_surfaced() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::scalar(1000.0));
        assert!(matches!(tape.exp(x), Err(Error::NonFinite(_))));
        assert!(Tensor::vector(vec![f64::NAN]).is_err());
    }

    #[test]
    fn finite_difference_unary_ops() {
        let x = Tensor::vector(vec![-1.7, -0.4, 0.3, 1.1, 1.9]).unwrap();
        for op in [
            UnaryOp::Exp,
            UnaryOp::Sigmoid,
            UnaryOp::Tanh,
            UnaryOp::Relu,
            UnaryOp::Neg,
            UnaryOp::Square,
            UnaryOp::Softplus,
        ] {
            fd_check(&x, |t, v| t.unary(op, v));
        }
        let pos = Tensor::vector(vec![0.2, 0.9, 1.7]).unwrap();
        fd_check(&pos, |t, v| t.log(v));
    }

    #[test]
    fn finite_difference_reductions_and_fused_ops() {
        let x = Tensor::matrix(2, 3, vec![0.5, -1.2, 1.9, -0.3, 0.8, -1.9]).unwrap();
        for ax in [None, Some(0), Some(1)] {
            fd_check(&x, |t, v| t.log_sum_exp(v, ax));
            fd_check(&x, |t, v| t.mean(v, ax));
        }
        let targets = Tensor::matrix(2, 3, vec![0.0, 1.0, 0.3, 0.9, 0.5, 0.0]).unwrap();
        fd_check(&x, |t, v| t.bernoulli_log_lik_rows(v, &targets));
        fd_check(&x, |t, v| t.cross_entropy_rows(v, &[2, 0]));
        let bias = Tensor::vector(vec![0.1, -0.2, 0.3]).unwrap();
        fd_check(&x, |t, v| {
            let b = t.constant(bias.clone());
            t.add_row(v, b)
        });
        fd_check(&bias, |t, b| {
            let m = t.constant(x.clone());
            t.add_row(m, b)
        });
    }

    #[test]
    fn two_layer_mlp_gradients() {
        let w1 = Tensor::matrix(
            3,
            4,
            (0..12).map(|i| ((i * 7 % 11) as f64 - 5.0) / 6.0).collect(),
        )
        .unwrap();
        let w2 = Tensor::matrix(
            4,
            2,
            (0..8).map(|i| ((i * 5 % 9) as f64 - 4.0) / 5.0).collect(),
        )
        .unwrap();
        let input = Tensor::matrix(2, 3, vec![0.1, -0.5, 0.9, 1.3, 0.2, -0.7]).unwrap();
        let loss = |t: &mut Tape, w1: Var, w2: Var| -> Result<Var> {
            let x = t.constant(input.clone());
            let h = t.matmul(x, w1)?;
            let h = t.tanh(h)?;
            let o = t.matmul(h, w2)?;
            let o = t.sigmoid(o)?;
            let sq = t.square(o)?;
            t.mean(sq, None)
        };
        fd_check(&w1, |t, v| {
            let w2 = t.constant(w2.clone());
            loss(t, v, w2)
        });
        fd_check(&w2, |t, v| {
            let w1 = t.constant(w1.clone());
            loss(t, w1, v)
        });
    }
}
