//! Tape-based reverse-mode differentiation.
//!
//! A [`Graph`] records every primitive in execution order, so the node list is
//! already topologically sorted. `backward` walks it once in reverse. A graph is
//! single-use: after `backward` it refuses a second pass, and a new forward pass
//! must build a new graph.

use crate::error::{Error, Result};
use crate::tensor::{self, matmul_raw, transpose_raw, Tensor};

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Axis {
    Rows,
    Cols,
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Transpose(Var),
    Reshape(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Exp(Var),
    Log(Var),
    Softplus(Var),
    Relu(Var),
    Softmax(Var),
    LogSoftmax(Var),
    Sum(Var),
    Mean(Var),
    /// `n x c -> n x 1`
    SumRows(Var),
    /// `n x c -> 1 x c`
    SumCols(Var),
    /// `1 x c -> n x c`
    BroadcastRows(Var),
    /// `n x 1 -> n x c`
    BroadcastCols(Var),
    /// Row-wise L2 norm, `n x c -> n x 1`.
    RowNorm(Var),
    Concat(Vec<Var>, Axis),
    Slice { input: Var, axis: Axis, start: usize },
}

#[derive(Clone, Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Record of primitive operations for one forward pass.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
    consumed: bool,
}

fn scalar_like(t: &Tensor) -> bool {
    t.numel() == 1 && t.shape().iter().all(|&d| d == 1)
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

    /// A trainable input. Its gradient is available after [`Graph::backward`].
    pub fn leaf(&mut self, value: Tensor) -> Result<Var> {
        self.push_checked("leaf", value, Op::Leaf, true)
    }

    /// A non-trainable input.
    pub fn constant(&mut self, value: Tensor) -> Result<Var> {
        self.push_checked("constant", value, Op::Leaf, false)
    }

    pub fn scalar(&mut self, value: f64) -> Result<Var> {
        self.constant(Tensor::scalar(value))
    }

    /// Copies the current value of `v` into a new constant, cutting gradient flow.
    pub fn detach(&mut self, v: Var) -> Result<Var> {
        let value = self.value(v).clone();
        self.constant(value)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Gradient of the last backward pass with respect to `v`, if `v` required one.
    pub fn grad(&self, v: Var) -> Option<Tensor> {
        let data = self.grads.get(v.0)?.as_ref()?;
        Some(Tensor::new(self.nodes[v.0].value.shape().to_vec(), data.clone()).expect("grad shape"))
    }

    fn push_checked(&mut self, name: &'static str, value: Tensor, op: Op, requires_grad: bool) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::NonFinite(name.to_string()));
        }
        self.nodes.push(Node { value, op, requires_grad });
        Ok(Var(self.nodes.len() - 1))
    }

    fn push(&mut self, name: &'static str, value: Tensor, op: Op, inputs: &[Var]) -> Result<Var> {
        let rg = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.push_checked(name, value, op, rg)
    }

    fn dims2(&self, op: &'static str, v: Var) -> Result<(usize, usize)> {
        self.value(v).dims2().map_err(|_| {
            Error::shape(op, format!("expected a matrix, got shape {:?}", self.value(v).shape()))
        })
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.dims2("matmul", a)?;
        let (k2, n) = self.dims2("matmul", b)?;
        if k != k2 {
            return Err(Error::shape("matmul", format!("({m}x{k}) * ({k2}x{n})")));
        }
        let out = matmul_raw(self.value(a).data(), self.value(b).data(), m, k, n);
        self.push("matmul", Tensor::new(vec![m, n], out)?, Op::MatMul(a, b), &[a, b])
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let (r, c) = self.dims2("transpose", a)?;
        let out = transpose_raw(self.value(a).data(), r, c);
        self.push("transpose", Tensor::new(vec![c, r], out)?, Op::Transpose(a), &[a])
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(a).clone().reshaped(shape.to_vec())?;
        self.push("reshape", value, Op::Reshape(a), &[a])
    }

    fn binary(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Tensor> {
        let (ta, tb) = (self.value(a), self.value(b));
        let (shape, data) = if ta.shape() == tb.shape() {
            (ta.shape().to_vec(), ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect())
        } else if scalar_like(tb) {
            let y = tb.item();
            (ta.shape().to_vec(), ta.data().iter().map(|&x| f(x, y)).collect())
        } else if scalar_like(ta) {
            let x = ta.item();
            (tb.shape().to_vec(), tb.data().iter().map(|&y| f(x, y)).collect())
        } else {
            return Err(Error::shape(name, format!("{:?} vs {:?}", ta.shape(), tb.shape())));
        };
        Tensor::new(shape, data)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.binary("add", a, b, |x, y| x + y)?;
        self.push("add", v, Op::Add(a, b), &[a, b])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.binary("sub", a, b, |x, y| x - y)?;
        self.push("sub", v, Op::Sub(a, b), &[a, b])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.binary("mul", a, b, |x, y| x * y)?;
        self.push("mul", v, Op::Mul(a, b), &[a, b])
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.value(b).data().iter().any(|&y| y == 0.0) {
            return Err(Error::domain("div", "division by zero"));
        }
        let v = self.binary("div", a, b, |x, y| x / y)?;
        self.push("div", v, Op::Div(a, b), &[a, b])
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        let v = self.value(a).map(|x| x * c);
        self.push("scale", v, Op::Scale(a, c), &[a])
    }

    pub fn neg(&mut self, a: Var) -> Result<Var> {
        self.scale(a, -1.0)
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Result<Var> {
        let v = self.value(a).map(|x| x + c);
        self.push("add_scalar", v, Op::AddScalar(a), &[a])
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        let v = self.value(a).map(f64::exp);
        self.push("exp", v, Op::Exp(a), &[a])
    }

    pub fn log(&mut self, a: Var) -> Result<Var> {
        if self.value(a).data().iter().any(|&x| x <= 0.0) {
            return Err(Error::domain("log", "non-positive input; add a stabilizer first"));
        }
        let v = self.value(a).map(f64::ln);
        self.push("log", v, Op::Log(a), &[a])
    }

    pub fn softplus(&mut self, a: Var) -> Result<Var> {
        let v = self.value(a).map(tensor::softplus);
        self.push("softplus", v, Op::Softplus(a), &[a])
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        let v = self.value(a).map(|x| x.max(0.0));
        self.push("relu", v, Op::Relu(a), &[a])
    }

    fn row_len(&self, op: &'static str, a: Var) -> Result<usize> {
        match self.value(a).shape() {
            [c] | [_, c] => Ok(*c),
            other => Err(Error::shape(op, format!("expected rank 1 or 2, got {other:?}"))),
        }
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        let c = self.row_len("softmax", a)?;
        let t = self.value(a);
        let data = t.data().chunks(c).flat_map(tensor::softmax_row).collect();
        let v = Tensor::new(t.shape().to_vec(), data)?;
        self.push("softmax", v, Op::Softmax(a), &[a])
    }

    /// Log-softmax over the last axis (log-sum-exp form).
    pub fn log_softmax(&mut self, a: Var) -> Result<Var> {
        let c = self.row_len("log_softmax", a)?;
        let t = self.value(a);
        let data = t.data().chunks(c).flat_map(tensor::log_softmax_row).collect();
        let v = Tensor::new(t.shape().to_vec(), data)?;
        self.push("log_softmax", v, Op::LogSoftmax(a), &[a])
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let v = Tensor::scalar(self.value(a).sum());
        self.push("sum", v, Op::Sum(a), &[a])
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        if t.numel() == 0 {
            return Err(Error::shape("mean", "empty tensor"));
        }
        let v = Tensor::scalar(t.sum() / t.numel() as f64);
        self.push("mean", v, Op::Mean(a), &[a])
    }

    pub fn sum_rows(&mut self, a: Var) -> Result<Var> {
        let (n, c) = self.dims2("sum_rows", a)?;
        let data = self.value(a).data().chunks(c.max(1)).map(|r| r.iter().sum()).collect();
        self.push("sum_rows", Tensor::new(vec![n, 1], data)?, Op::SumRows(a), &[a])
    }

    pub fn sum_cols(&mut self, a: Var) -> Result<Var> {
        let (n, c) = self.dims2("sum_cols", a)?;
        let t = self.value(a);
        let mut data = vec![0.0; c];
        for i in 0..n {
            for (acc, &x) in data.iter_mut().zip(t.row(i)) {
                *acc += x;
            }
        }
        self.push("sum_cols", Tensor::new(vec![1, c], data)?, Op::SumCols(a), &[a])
    }

    /// Repeats a `1 x c` row `n` times.
    pub fn broadcast_rows(&mut self, a: Var, n: usize) -> Result<Var> {
        let (r, c) = self.dims2("broadcast_rows", a)?;
        if r != 1 {
            return Err(Error::shape("broadcast_rows", format!("expected 1 x c, got {r} x {c}")));
        }
        let row = self.value(a).data().to_vec();
        let data = (0..n).flat_map(|_| row.iter().copied()).collect();
        self.push("broadcast_rows", Tensor::new(vec![n, c], data)?, Op::BroadcastRows(a), &[a])
    }

    /// Repeats an `n x 1` column `c` times.
    pub fn broadcast_cols(&mut self, a: Var, c: usize) -> Result<Var> {
        let (n, k) = self.dims2("broadcast_cols", a)?;
        if k != 1 {
            return Err(Error::shape("broadcast_cols", format!("expected n x 1, got {n} x {k}")));
        }
        let data = self.value(a).data().iter().flat_map(|&x| std::iter::repeat_n(x, c)).collect();
        self.push("broadcast_cols", Tensor::new(vec![n, c], data)?, Op::BroadcastCols(a), &[a])
    }

    /// Row-wise Euclidean norm, `n x c -> n x 1`.
    pub fn row_norm(&mut self, a: Var) -> Result<Var> {
        let (n, c) = self.dims2("row_norm", a)?;
        let data = self
            .value(a)
            .data()
            .chunks(c.max(1))
            .map(|r| r.iter().map(|x| x * x).sum::<f64>().sqrt())
            .collect();
        self.push("row_norm", Tensor::new(vec![n, 1], data)?, Op::RowNorm(a), &[a])
    }

    /// Euclidean norm of all entries, as a scalar.
    pub fn l2_norm(&mut self, a: Var) -> Result<Var> {
        let numel = self.value(a).numel();
        let flat = self.reshape(a, &[1, numel])?;
        let n = self.row_norm(flat)?;
        self.reshape(n, &[])
    }

    pub fn concat(&mut self, parts: &[Var], axis: Axis) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::shape("concat", "no inputs"));
        }
        let dims: Vec<(usize, usize)> =
            parts.iter().map(|&p| self.dims2("concat", p)).collect::<Result<_>>()?;
        let value = match axis {
            Axis::Rows => {
                let c = dims[0].1;
                if dims.iter().any(|d| d.1 != c) {
                    return Err(Error::shape("concat", format!("column counts differ: {dims:?}")));
                }
                let data = parts.iter().flat_map(|&p| self.value(p).data().iter().copied()).collect();
                Tensor::new(vec![dims.iter().map(|d| d.0).sum(), c], data)?
            }
            Axis::Cols => {
                let n = dims[0].0;
                if dims.iter().any(|d| d.0 != n) {
                    return Err(Error::shape("concat", format!("row counts differ: {dims:?}")));
                }
                let total: usize = dims.iter().map(|d| d.1).sum();
                let mut data = Vec::with_capacity(n * total);
                for i in 0..n {
                    for &p in parts {
                        data.extend_from_slice(self.value(p).row(i));
                    }
                }
                Tensor::new(vec![n, total], data)?
            }
        };
        self.push("concat", value, Op::Concat(parts.to_vec(), axis), parts)
    }

    pub fn slice(&mut self, a: Var, axis: Axis, start: usize, len: usize) -> Result<Var> {
        let (n, c) = self.dims2("slice", a)?;
        let t = self.value(a);
        let value = match axis {
            Axis::Rows => {
                if start + len > n {
                    return Err(Error::shape("slice", format!("rows {start}..{} of {n}", start + len)));
                }
                Tensor::new(vec![len, c], t.data()[start * c..(start + len) * c].to_vec())?
            }
            Axis::Cols => {
                if start + len > c {
                    return Err(Error::shape("slice", format!("cols {start}..{} of {c}", start + len)));
                }
                let data = (0..n).flat_map(|i| t.row(i)[start..start + len].iter().copied()).collect();
                Tensor::new(vec![n, len], data)?
            }
        };
        self.push("slice", value, Op::Slice { input: a, axis, start }, &[a])
    }

    /// Splits along `axis` into `parts` equal pieces.
    pub fn chunk(&mut self, a: Var, axis: Axis, parts: usize) -> Result<Vec<Var>> {
        let (n, c) = self.dims2("chunk", a)?;
        let extent = if axis == Axis::Rows { n } else { c };
        if parts == 0 || extent % parts != 0 {
            return Err(Error::shape("chunk", format!("{extent} is not divisible into {parts} parts")));
        }
        let len = extent / parts;
        (0..parts).map(|i| self.slice(a, axis, i * len, len)).collect()
    }

    /// Reverse pass from a scalar `loss`. Gradients are then read with [`Graph::grad`].
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.consumed {
            return Err(Error::BackwardTwice);
        }
        let lt = self.value(loss);
        if lt.numel() != 1 {
            return Err(Error::NonScalarLoss(lt.shape().to_vec()));
        }
        self.consumed = true;
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);

        for idx in (0..=loss.0).rev() {
            if !self.nodes[idx].requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            for (input, contrib) in self.vjp(idx, &g)? {
                if !self.nodes[input.0].requires_grad {
                    continue;
                }
                match &mut grads[input.0] {
                    Some(acc) => acc.iter_mut().zip(&contrib).for_each(|(a, c)| *a += c),
                    slot @ None => *slot = Some(contrib),
                }
            }
            grads[idx] = Some(g);
        }
        for (i, g) in grads.iter().enumerate() {
            if let Some(g) = g {
                if g.iter().any(|x| !x.is_finite()) {
                    return Err(Error::NonFinite(format!("gradient of node {i}")));
                }
            }
        }
        self.grads = grads;
        Ok(())
    }

    /// Vector-Jacobian products of node `idx` given its output gradient `g`.
    fn vjp(&self, idx: usize, g: &[f64]) -> Result<Vec<(Var, Vec<f64>)>> {
        let node = &self.nodes[idx];
        let out = &node.value;
        let val = |v: Var| &self.nodes[v.0].value;
        // Reduces a full-shape contribution onto an input that was broadcast as a scalar.
        let fit = |v: Var, full: Vec<f64>| -> Vec<f64> {
            if val(v).numel() == full.len() {
                full
            } else {
                vec![full.iter().sum()]
            }
        };
        let bval = |v: Var, i: usize| -> f64 {
            let t = val(v);
            if t.numel() == 1 { t.item() } else { t.data()[i] }
        };
        let res = match &node.op {
            Op::Leaf => vec![],
            Op::MatMul(a, b) => {
                let (m, k) = val(*a).dims2()?;
                let n = val(*b).dims2()?.1;
                let bt = transpose_raw(val(*b).data(), k, n);
                let at = transpose_raw(val(*a).data(), m, k);
                vec![(*a, matmul_raw(g, &bt, m, n, k)), (*b, matmul_raw(&at, g, k, m, n))]
            }
            Op::Transpose(a) => {
                let (r, c) = val(*a).dims2()?;
                vec![(*a, transpose_raw(g, c, r))]
            }
            Op::Reshape(a) => vec![(*a, g.to_vec())],
            Op::Add(a, b) => vec![(*a, fit(*a, g.to_vec())), (*b, fit(*b, g.to_vec()))],
            Op::Sub(a, b) => {
                vec![(*a, fit(*a, g.to_vec())), (*b, fit(*b, g.iter().map(|x| -x).collect()))]
            }
            Op::Mul(a, b) => {
                let ga = g.iter().enumerate().map(|(i, gi)| gi * bval(*b, i)).collect();
                let gb = g.iter().enumerate().map(|(i, gi)| gi * bval(*a, i)).collect();
                vec![(*a, fit(*a, ga)), (*b, fit(*b, gb))]
            }
            Op::Div(a, b) => {
                let ga = g.iter().enumerate().map(|(i, gi)| gi / bval(*b, i)).collect();
                let gb = g
                    .iter()
                    .enumerate()
                    .map(|(i, gi)| {
                        let y = bval(*b, i);
                        -gi * bval(*a, i) / (y * y)
                    })
                    .collect();
                vec![(*a, fit(*a, ga)), (*b, fit(*b, gb))]
            }
            Op::Scale(a, c) => vec![(*a, g.iter().map(|x| x * c).collect())],
            Op::AddScalar(a) => vec![(*a, g.to_vec())],
            Op::Exp(a) => vec![(*a, g.iter().zip(out.data()).map(|(gi, y)| gi * y).collect())],
            Op::Log(a) => vec![(*a, g.iter().zip(val(*a).data()).map(|(gi, x)| gi / x).collect())],
            Op::Softplus(a) => {
                vec![(*a, g.iter().zip(val(*a).data()).map(|(gi, &x)| gi * tensor::sigmoid(x)).collect())]
            }
            Op::Relu(a) => vec![(
                *a,
                g.iter().zip(val(*a).data()).map(|(gi, &x)| if x > 0.0 { *gi } else { 0.0 }).collect(),
            )],
            Op::Softmax(a) => {
                let c = *out.shape().last().unwrap_or(&1);
                let mut dx = Vec::with_capacity(g.len());
                for (gr, yr) in g.chunks(c).zip(out.data().chunks(c)) {
                    let dot: f64 = gr.iter().zip(yr).map(|(x, y)| x * y).sum();
                    dx.extend(gr.iter().zip(yr).map(|(gi, yi)| yi * (gi - dot)));
                }
                vec![(*a, dx)]
            }
            Op::LogSoftmax(a) => {
                let c = *out.shape().last().unwrap_or(&1);
                let mut dx = Vec::with_capacity(g.len());
                for (gr, yr) in g.chunks(c).zip(out.data().chunks(c)) {
                    let total: f64 = gr.iter().sum();
                    dx.extend(gr.iter().zip(yr).map(|(gi, yi)| gi - yi.exp() * total));
                }
                vec![(*a, dx)]
            }
            Op::Sum(a) => vec![(*a, vec![g[0]; val(*a).numel()])],
            Op::Mean(a) => {
                let n = val(*a).numel();
                vec![(*a, vec![g[0] / n as f64; n])]
            }
            Op::SumRows(a) => {
                let c = val(*a).dims2()?.1;
                vec![(*a, g.iter().flat_map(|&x| std::iter::repeat_n(x, c)).collect())]
            }
            Op::SumCols(a) => {
                let n = val(*a).dims2()?.0;
                vec![(*a, (0..n).flat_map(|_| g.iter().copied()).collect())]
            }
            Op::BroadcastRows(a) => {
                let c = val(*a).numel();
                let mut acc = vec![0.0; c];
                for row in g.chunks(c.max(1)) {
                    acc.iter_mut().zip(row).for_each(|(s, x)| *s += x);
                }
                vec![(*a, acc)]
            }
            Op::BroadcastCols(a) => {
                let c = out.dims2()?.1;
                vec![(*a, g.chunks(c.max(1)).map(|r| r.iter().sum()).collect())]
            }
            Op::RowNorm(a) => {
                let x = val(*a);
                let c = x.dims2()?.1;
                let mut dx = Vec::with_capacity(x.numel());
                for (i, row) in x.data().chunks(c.max(1)).enumerate() {
                    let norm = out.data()[i];
                    let scale = if norm > 0.0 { g[i] / norm } else { 0.0 };
                    dx.extend(row.iter().map(|xi| xi * scale));
                }
                vec![(*a, dx)]
            }
            Op::Concat(parts, axis) => {
                let (n, total) = out.dims2()?;
                let mut res = Vec::with_capacity(parts.len());
                let mut offset = 0;
                for &p in parts {
                    let (pn, pc) = val(p).dims2()?;
                    let piece = match axis {
                        Axis::Rows => g[offset * total..(offset + pn) * total].to_vec(),
                        Axis::Cols => (0..n)
                            .flat_map(|i| g[i * total + offset..i * total + offset + pc].iter().copied())
                            .collect(),
                    };
                    offset += if *axis == Axis::Rows { pn } else { pc };
                    res.push((p, piece));
                }
                res
            }
            Op::Slice { input, axis, start } => {
                let (n, c) = val(*input).dims2()?;
                let mut dx = vec![0.0; n * c];
                match axis {
                    Axis::Rows => dx[start * c..start * c + g.len()].copy_from_slice(g),
                    Axis::Cols => {
                        let len = out.dims2()?.1;
                        for i in 0..n {
                            dx[i * c + start..i * c + start + len].copy_from_slice(&g[i * len..(i + 1) * len]);
                        }
                    }
                }
                vec![(*input, dx)]
            }
        };
        Ok(res)
    }
}
