use super::{gemm, Tensor};
use crate::error::{Error, Result};

/// Handle to a value stored on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// How the right operand of a binary elementwise op lines up with the left.
#[derive(Clone, Copy, Debug)]
enum Bcast {
    Same,
    /// Right operand has the left's shape without the leading axis and is
    /// repeated for every leading-axis row.
    Rows,
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    MatMul(usize, usize),
    Add(usize, usize, Bcast),
    Sub(usize, usize, Bcast),
    Mul(usize, usize, Bcast),
    Scale(usize, f64),
    AddScalar(usize),
    Relu(usize),
    Tanh(usize),
    Exp(usize),
    Log(usize),
    Square(usize),
    Sigmoid(usize),
    Softplus(usize),
    Clamp(usize, f64, f64),
    Sum(usize),
    Mean(usize),
    SumRows(usize),
    LogSumExpRows(usize),
    Concat {
        inputs: Vec<usize>,
        axis: usize,
    },
    Slice {
        input: usize,
        axis: usize,
        start: usize,
    },
    Reshape(usize),
    GatherRows(usize, Vec<usize>),
    RepeatRows(usize, usize),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Ordered record of tensor operations.
///
/// Nodes are appended in evaluation order, so inputs always precede the nodes
/// that consume them. Operations whose inputs are all constant are stored as
/// values only; nothing is recorded for them.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients of a scalar root with respect to the leaves of a tape.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    /// `∂root/∂leaf`, or `None` when the leaf does not require gradients or
    /// is unreachable from the root.
    pub fn get(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }
}

fn shape_err(op: &'static str, a: &Tensor, b: &Tensor) -> Error {
    Error::ShapeMismatch {
        op,
        lhs: a.shape().to_vec(),
        rhs: b.shape().to_vec(),
    }
}

fn buf<'a>(grads: &'a mut [Option<Vec<f64>>], i: usize, len: usize) -> &'a mut Vec<f64> {
    grads[i].get_or_insert_with(|| vec![0.0; len])
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

    /// Drops every recorded node.
    pub fn clear(&mut self) {
        self.nodes.clear();
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Copies `t` onto the tape as a leaf. The leaf requires gradients iff
    /// `t` does.
    pub fn leaf(&mut self, t: &Tensor) -> Var {
        let requires_grad = t.requires_grad();
        let mut value = t.clone();
        value.zero_grad();
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Moves `t` onto the tape as a constant.
    pub fn constant(&mut self, mut t: Tensor) -> Var {
        t.set_requires_grad(false);
        t.zero_grad();
        self.nodes.push(Node {
            value: t,
            op: Op::Leaf,
            requires_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    /// Constant copy of `v`; gradients do not flow through the result.
    pub fn detach(&mut self, v: Var) -> Var {
        let t = self.nodes[v.0].value.clone();
        self.constant(t)
    }

    fn push(&mut self, value: Tensor, op: Op, inputs: &[usize]) -> Var {
        let requires_grad = inputs.iter().any(|&i| self.nodes[i].requires_grad);
        let op = if requires_grad { op } else { Op::Leaf };
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn unary(&mut self, a: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let x = &self.nodes[a.0].value;
        let data = x.data().iter().map(|&v| f(v)).collect();
        let out = Tensor::from_parts(x.shape().to_vec(), data);
        self.push(out, op, &[a.0])
    }

    fn bcast(&self, op: &'static str, a: Var, b: Var) -> Result<Bcast> {
        let (x, y) = (self.value(a), self.value(b));
        if x.shape() == y.shape() {
            Ok(Bcast::Same)
        } else if x.rank() >= 2 && &x.shape()[1..] == y.shape() {
            Ok(Bcast::Rows)
        } else {
            Err(shape_err(op, x, y))
        }
    }

    fn binary(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
        op: impl FnOnce(Bcast) -> Op,
    ) -> Result<Var> {
        let mode = self.bcast(name, a, b)?;
        let (x, y) = (self.value(a), self.value(b));
        let yd = y.data();
        let data: Vec<f64> = match mode {
            Bcast::Same => x.data().iter().zip(yd).map(|(&p, &q)| f(p, q)).collect(),
            Bcast::Rows => {
                let w = yd.len();
                x.data()
                    .iter()
                    .enumerate()
                    .map(|(i, &p)| f(p, yd[i % w]))
                    .collect()
            }
        };
        let out = Tensor::from_parts(x.shape().to_vec(), data);
        Ok(self.push(out, op(mode), &[a.0, b.0]))
    }

    /// Matrix product of two rank-2 values.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).matmul(self.value(b))?;
        Ok(self.push(out, Op::MatMul(a.0, b.0), &[a.0, b.0]))
    }

    /// Elementwise `a + b`; `b` may omit the leading axis of `a`.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("add", a, b, |p, q| p + q, |m| Op::Add(a.0, b.0, m))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("sub", a, b, |p, q| p - q, |m| Op::Sub(a.0, b.0, m))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("mul", a, b, |p, q| p * q, |m| Op::Mul(a.0, b.0, m))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        self.unary(a, |v| v * s, Op::Scale(a.0, s))
    }

    pub fn neg(&mut self, a: Var) -> Var {
        self.scale(a, -1.0)
    }

    pub fn add_scalar(&mut self, a: Var, s: f64) -> Var {
        self.unary(a, |v| v + s, Op::AddScalar(a.0))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(a, |v| v.max(0.0), Op::Relu(a.0))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.unary(a, f64::tanh, Op::Tanh(a.0))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(a, f64::exp, Op::Exp(a.0))
    }

    /// Natural logarithm; every element must be positive.
    pub fn log(&mut self, a: Var) -> Result<Var> {
        if let Some(bad) = self.value(a).data().iter().find(|&&v| !(v > 0.0)) {
            return Err(Error::Domain {
                op: "log",
                detail: format!("non-positive argument {bad}"),
            });
        }
        Ok(self.unary(a, f64::ln, Op::Log(a.0)))
    }

    pub fn square(&mut self, a: Var) -> Var {
        self.unary(a, |v| v * v, Op::Square(a.0))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(a, sigmoid, Op::Sigmoid(a.0))
    }

    /// `ln(1 + e^x)`, evaluated without overflow.
    pub fn softplus(&mut self, a: Var) -> Var {
        self.unary(a, softplus, Op::Softplus(a.0))
    }

    /// Clamps into `[lo, hi]`; the gradient is zero outside the interval.
    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Var {
        self.unary(a, |v| v.clamp(lo, hi), Op::Clamp(a.0, lo, hi))
    }

    /// Sum of all elements, as a one-element tensor.
    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().sum();
        self.push(Tensor::scalar(s), Op::Sum(a.0), &[a.0])
    }

    /// Mean of all elements, as a one-element tensor.
    pub fn mean(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let s = x.data().iter().sum::<f64>() / x.len().max(1) as f64;
        self.push(Tensor::scalar(s), Op::Mean(a.0), &[a.0])
    }

    /// Sums every leading-axis row, giving a rank-1 tensor of row totals.
    pub fn sum_rows(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let (n, c) = (x.rows(), x.cols());
        let data = (0..n)
            .map(|i| x.data()[i * c..(i + 1) * c].iter().sum())
            .collect();
        self.push(Tensor::from_parts(vec![n], data), Op::SumRows(a.0), &[a.0])
    }

    /// Row-wise `ln Σ_j exp(a_ij)`, shifted by the row maximum.
    pub fn logsumexp_rows(&mut self, a: Var) -> Result<Var> {
        let x = self.value(a);
        if x.rank() != 2 {
            return Err(Error::contract(format!(
                "logsumexp_rows expects rank 2, got {:?}",
                x.shape()
            )));
        }
        let (n, c) = (x.rows(), x.cols());
        let data = (0..n)
            .map(|i| logsumexp(&x.data()[i * c..(i + 1) * c]))
            .collect();
        let out = Tensor::from_parts(vec![n], data);
        Ok(self.push(out, Op::LogSumExpRows(a.0), &[a.0]))
    }

    /// Concatenates along `axis`; all other axes must agree.
    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| Error::contract("concat of zero tensors"))?;
        let base = self.value(*first).shape().to_vec();
        if axis >= base.len() {
            return Err(Error::contract(format!(
                "concat axis {axis} out of range for {base:?}"
            )));
        }
        let mut axis_total = 0;
        for &p in parts {
            let s = self.value(p).shape();
            let conform = s.len() == base.len()
                && s.iter()
                    .zip(&base)
                    .enumerate()
                    .all(|(d, (x, y))| d == axis || x == y);
            if !conform {
                return Err(shape_err("concat", self.value(*first), self.value(p)));
            }
            axis_total += s[axis];
        }
        let outer: usize = base[..axis].iter().product();
        let inner: usize = base[axis + 1..].iter().product();
        let mut data = Vec::with_capacity(outer * axis_total * inner);
        for o in 0..outer {
            for &p in parts {
                let x = self.value(p);
                let chunk = x.shape()[axis] * inner;
                data.extend_from_slice(&x.data()[o * chunk..(o + 1) * chunk]);
            }
        }
        let mut shape = base;
        shape[axis] = axis_total;
        let inputs: Vec<usize> = parts.iter().map(|v| v.0).collect();
        let out = Tensor::from_parts(shape, data);
        Ok(self.push(
            out,
            Op::Concat {
                inputs: inputs.clone(),
                axis,
            },
            &inputs,
        ))
    }

    /// The `len` entries starting at `start` along `axis`.
    pub fn slice(&mut self, a: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let x = self.value(a);
        let shape = x.shape();
        if axis >= shape.len() || start + len > shape[axis] || len == 0 {
            return Err(Error::contract(format!(
                "slice [{start}, {}) along axis {axis} out of range for {shape:?}",
                start + len
            )));
        }
        let outer: usize = shape[..axis].iter().product();
        let inner: usize = shape[axis + 1..].iter().product();
        let full = shape[axis] * inner;
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = o * full + start * inner;
            data.extend_from_slice(&x.data()[base..base + len * inner]);
        }
        let mut out_shape = shape.to_vec();
        out_shape[axis] = len;
        let out = Tensor::from_parts(out_shape, data);
        Ok(self.push(
            out,
            Op::Slice {
                input: a.0,
                axis,
                start,
            },
            &[a.0],
        ))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(a).reshape(shape)?;
        Ok(self.push(out, Op::Reshape(a.0), &[a.0]))
    }

    /// Rows of `a` at `indices`, in order (indices may repeat).
    pub fn gather_rows(&mut self, a: Var, indices: &[usize]) -> Result<Var> {
        let x = self.value(a);
        if let Some(&bad) = indices.iter().find(|&&i| i >= x.rows()) {
            return Err(Error::contract(format!(
                "gather_rows index {bad} out of range for {} rows",
                x.rows()
            )));
        }
        let out = x.select_rows(indices);
        Ok(self.push(out, Op::GatherRows(a.0, indices.to_vec()), &[a.0]))
    }

    /// Repeats each leading-axis row `k` times consecutively.
    pub fn repeat_rows(&mut self, a: Var, k: usize) -> Var {
        let x = self.value(a);
        let c = x.cols();
        let mut data = Vec::with_capacity(x.len() * k);
        for i in 0..x.rows() {
            for _ in 0..k {
                data.extend_from_slice(&x.data()[i * c..(i + 1) * c]);
            }
        }
        let mut shape = x.shape().to_vec();
        shape[0] *= k;
        let out = Tensor::from_parts(shape, data);
        self.push(out, Op::RepeatRows(a.0, k), &[a.0])
    }

    /// Reverse sweep from a one-element `root`.
    pub fn backward(&self, root: Var) -> Result<Gradients> {
        if self.nodes.is_empty() || root.0 >= self.nodes.len() {
            return Err(Error::contract("backward on an empty tape"));
        }
        let root_val = &self.nodes[root.0].value;
        if root_val.len() != 1 {
            return Err(Error::contract(format!(
                "backward root must have exactly one element, got shape {:?}",
                root_val.shape()
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        if !self.nodes[root.0].requires_grad {
            return Ok(Gradients { grads });
        }
        grads[root.0] = Some(vec![1.0]);

        for i in (0..=root.0).rev() {
            let node = &self.nodes[i];
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.propagate(node, &g, &mut grads);
        }
        Ok(Gradients { grads })
    }

    fn propagate(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let val = |i: usize| &self.nodes[i].value;
        let wants = |i: usize| self.nodes[i].requires_grad;
        let y = node.value.data();

        // Elementwise rule da += g * f'(x, y).
        let mut pointwise = |a: usize, d: &dyn Fn(f64, f64) -> f64| {
            if !wants(a) {
                return;
            }
            let x = val(a).data();
            let ga = buf(grads, a, x.len());
            for k in 0..x.len() {
                ga[k] += g[k] * d(x[k], y[k]);
            }
        };

        match node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (xa, xb) = (val(a), val(b));
                let (m, k, n) = (xa.shape()[0], xa.shape()[1], xb.shape()[1]);
                if wants(a) {
                    let ga = buf(grads, a, m * k);
                    gemm(m, n, k, g, false, xb.data(), true, ga, 1.0);
                }
                if wants(b) {
                    let gb = buf(grads, b, k * n);
                    gemm(k, m, n, xa.data(), true, g, false, gb, 1.0);
                }
            }
            Op::Add(a, b, mode) | Op::Sub(a, b, mode) => {
                let sign = if matches!(node.op, Op::Sub(..)) { -1.0 } else { 1.0 };
                if wants(a) {
                    let ga = buf(grads, a, g.len());
                    ga.iter_mut().zip(g).for_each(|(p, q)| *p += q);
                }
                if wants(b) {
                    let w = val(b).len();
                    let gb = buf(grads, b, w);
                    match mode {
                        Bcast::Same => gb.iter_mut().zip(g).for_each(|(p, q)| *p += sign * q),
                        Bcast::Rows => {
                            for (k, q) in g.iter().enumerate() {
                                gb[k % w] += sign * q;
                            }
                        }
                    }
                }
            }
            Op::Mul(a, b, mode) => {
                let (xa, xb) = (val(a).data(), val(b).data());
                let w = xb.len();
                if wants(a) {
                    let ga = buf(grads, a, xa.len());
                    for k in 0..xa.len() {
                        let q = match mode {
                            Bcast::Same => xb[k],
                            Bcast::Rows => xb[k % w],
                        };
                        ga[k] += g[k] * q;
                    }
                }
                if wants(b) {
                    let gb = buf(grads, b, w);
                    for k in 0..xa.len() {
                        let j = match mode {
                            Bcast::Same => k,
                            Bcast::Rows => k % w,
                        };
                        gb[j] += g[k] * xa[k];
                    }
                }
            }
            Op::Scale(a, s) => pointwise(a, &|_, _| s),
            Op::AddScalar(a) => pointwise(a, &|_, _| 1.0),
            Op::Relu(a) => pointwise(a, &|x, _| if x > 0.0 { 1.0 } else { 0.0 }),
            Op::Tanh(a) => pointwise(a, &|_, y| 1.0 - y * y),
            Op::Exp(a) => pointwise(a, &|_, y| y),
            Op::Log(a) => pointwise(a, &|x, _| 1.0 / x),
            Op::Square(a) => pointwise(a, &|x, _| 2.0 * x),
            Op::Sigmoid(a) => pointwise(a, &|_, y| y * (1.0 - y)),
            Op::Softplus(a) => pointwise(a, &|x, _| sigmoid(x)),
            Op::Clamp(a, lo, hi) => {
                pointwise(a, &|x, _| if x >= lo && x <= hi { 1.0 } else { 0.0 })
            }
            Op::Sum(a) | Op::Mean(a) => {
                if wants(a) {
                    let n = val(a).len();
                    let q = if matches!(node.op, Op::Mean(_)) {
                        g[0] / n as f64
                    } else {
                        g[0]
                    };
                    buf(grads, a, n).iter_mut().for_each(|p| *p += q);
                }
            }
            Op::SumRows(a) => {
                if wants(a) {
                    let x = val(a);
                    let c = x.cols();
                    let ga = buf(grads, a, x.len());
                    for (k, p) in ga.iter_mut().enumerate() {
                        *p += g[k / c];
                    }
                }
            }
            Op::LogSumExpRows(a) => {
                if wants(a) {
                    let x = val(a);
                    let c = x.cols();
                    let xd = x.data();
                    let ga = buf(grads, a, x.len());
                    for k in 0..xd.len() {
                        let r = k / c;
                        ga[k] += g[r] * (xd[k] - y[r]).exp();
                    }
                }
            }
            Op::Concat { ref inputs, axis } => {
                let shape = node.value.shape();
                let outer: usize = shape[..axis].iter().product();
                let inner: usize = shape[axis + 1..].iter().product();
                let full = shape[axis] * inner;
                let mut offset = 0;
                for &p in inputs {
                    let x = val(p);
                    let chunk = x.shape()[axis] * inner;
                    if wants(p) {
                        let gp = buf(grads, p, x.len());
                        for o in 0..outer {
                            let src = &g[o * full + offset..o * full + offset + chunk];
                            gp[o * chunk..(o + 1) * chunk]
                                .iter_mut()
                                .zip(src)
                                .for_each(|(d, s)| *d += s);
                        }
                    }
                    offset += chunk;
                }
            }
            Op::Slice { input, axis, start } => {
                if wants(input) {
                    let x = val(input);
                    let shape = x.shape();
                    let outer: usize = shape[..axis].iter().product();
                    let inner: usize = shape[axis + 1..].iter().product();
                    let full = shape[axis] * inner;
                    let chunk = node.value.shape()[axis] * inner;
                    let gi = buf(grads, input, x.len());
                    for o in 0..outer {
                        let base = o * full + start * inner;
                        gi[base..base + chunk]
                            .iter_mut()
                            .zip(&g[o * chunk..(o + 1) * chunk])
                            .for_each(|(d, s)| *d += s);
                    }
                }
            }
            Op::Reshape(a) => pointwise(a, &|_, _| 1.0),
            Op::GatherRows(a, ref idx) => {
                if wants(a) {
                    let x = val(a);
                    let c = x.cols();
                    let ga = buf(grads, a, x.len());
                    for (r, &src) in idx.iter().enumerate() {
                        for j in 0..c {
                            ga[src * c + j] += g[r * c + j];
                        }
                    }
                }
            }
            Op::RepeatRows(a, k) => {
                if wants(a) {
                    let x = val(a);
                    let c = x.cols();
                    let ga = buf(grads, a, x.len());
                    for (r, q) in g.iter().enumerate() {
                        let row = r / c / k;
                        ga[row * c + r % c] += q;
                    }
                }
            }
        }
    }
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub(crate) fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

pub(crate) fn logsumexp(xs: &[f64]) -> f64 {
    let m = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !m.is_finite() {
        return m;
    }
    m + xs.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}
