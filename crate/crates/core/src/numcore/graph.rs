//! Tape-based reverse-mode differentiation. A `Graph` records every operation
//! as a node in creation order, so the tape is already a topological order and
//! `backward` walks it in reverse.

use std::collections::HashMap;

use super::tensor::{ParamId, ParamStore, Tensor};
use super::NumError;

/// Handle to a node on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Param(ParamId),
    MatMul(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Relu(Var),
    Gelu(Var),
    Sigmoid(Var),
    Softplus(Var),
    Abs(Var),
    Square(Var),
    Sqrt(Var),
    Log(Var),
    Softmax(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    Mean(Var, usize),
    Sum(Var),
    Concat(Vec<Var>, usize),
    SliceCols(Var, usize, usize),
    SliceRows(Var, usize),
    Embedding(Var, Vec<usize>),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// One forward computation. Confined to a single thread; build one graph per
/// example when running examples in parallel.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    params: HashMap<ParamId, Var>,
}

fn shape_err(op: &'static str, a: &Tensor, b: &Tensor) -> NumError {
    NumError::Shape {
        op,
        left: a.shape().to_vec(),
        right: b.shape().to_vec(),
    }
}

fn rank_err(op: &'static str, a: &Tensor, want: usize) -> NumError {
    NumError::Shape {
        op,
        left: a.shape().to_vec(),
        right: vec![want],
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_K: f64 = 0.044_715;

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_K * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let u = GELU_C * (x + GELU_K * x * x * x);
    let t = u.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_K * x * x)
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// ln(1 + e^x) without overflow.
pub(crate) fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// A leaf that does not receive gradients.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// A leaf that receives gradients (retrievable with [`Gradients::wrt`]).
    pub fn input(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, true)
    }

    /// Binds a stored parameter into the graph. Repeated calls with the same id
    /// return the same node, so shared weights accumulate one gradient.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        if let Some(&v) = self.params.get(&id) {
            return v;
        }
        let v = self.push(store.value(id).clone(), Op::Param(id), true);
        self.params.insert(id, v);
        v
    }

    /// Sign pattern of every kinked op input (`relu`, `abs`). Two evaluations
    /// with equal signatures lie on the same smooth piece.
    pub fn kink_signature(&self) -> Vec<bool> {
        let mut sig = Vec::new();
        for n in &self.nodes {
            if let Op::Relu(x) | Op::Abs(x) = n.op {
                sig.extend(self.nodes[x.0].value.data().iter().map(|&v| v > 0.0));
                if let Op::Abs(x) = n.op {
                    sig.extend(self.nodes[x.0].value.data().iter().map(|&v| v < 0.0));
                }
            }
        }
        sig
    }

    // ---- ops -------------------------------------------------------------

    /// `[m,k] x [k,n] -> [m,n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, NumError> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.rank() != 2 || tb.rank() != 2 || ta.cols() != tb.rows() {
            return Err(shape_err("matmul", ta, tb));
        }
        let (m, k, n) = (ta.rows(), ta.cols(), tb.cols());
        let (ad, bd) = (ta.data(), tb.data());
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let row = &mut out[i * n..(i + 1) * n];
            for p in 0..k {
                let aip = ad[i * k + p];
                let brow = &bd[p * n..(p + 1) * n];
                for j in 0..n {
                    row[j] += aip * brow[j];
                }
            }
        }
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::matrix(m, n, out)?, Op::MatMul(a, b), rg))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var, NumError> {
        let ta = self.value(a);
        if ta.rank() != 2 {
            return Err(rank_err("transpose", ta, 2));
        }
        let (m, n) = (ta.rows(), ta.cols());
        let d = ta.data();
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = d[i * n + j];
            }
        }
        let rg = self.rg(a);
        Ok(self.push(Tensor::matrix(n, m, out)?, Op::Transpose(a), rg))
    }

    fn binary(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<Var, NumError> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(shape_err(name, ta, tb));
        }
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        let t = Tensor::new(ta.shape().to_vec(), data)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(t, op, rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, NumError> {
        self.binary("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, NumError> {
        self.binary("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, NumError> {
        self.binary("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    /// Adds the vector `row` (`[n]`) to every row of `a` (`[m,n]`).
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var, NumError> {
        let (ta, tr) = (self.value(a), self.value(row));
        if ta.rank() != 2 || tr.rank() != 1 || ta.cols() != tr.numel() {
            return Err(shape_err("add_row", ta, tr));
        }
        let n = ta.cols();
        let r = tr.data();
        let data = ta
            .data()
            .iter()
            .enumerate()
            .map(|(i, &v)| v + r[i % n])
            .collect();
        let t = Tensor::new(ta.shape().to_vec(), data)?;
        let rg = self.rg(a) || self.rg(row);
        Ok(self.push(t, Op::AddRow(a, row), rg))
    }

    fn unary(&mut self, a: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let t = self.value(a).map(f);
        let rg = self.rg(a);
        self.push(t, op, rg)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        self.unary(a, |x| x * c, Op::Scale(a, c))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        // NaN passes through so divergence stays visible
        self.unary(a, |x| if x <= 0.0 { 0.0 } else { x }, Op::Relu(a))
    }

    /// Tanh approximation of GELU.
    pub fn gelu(&mut self, a: Var) -> Var {
        self.unary(a, gelu, Op::Gelu(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(a, sigmoid, Op::Sigmoid(a))
    }

    /// `ln(1 + exp(x))`, evaluated stably.
    pub fn softplus(&mut self, a: Var) -> Var {
        self.unary(a, softplus, Op::Softplus(a))
    }

    pub fn abs(&mut self, a: Var) -> Var {
        self.unary(a, f64::abs, Op::Abs(a))
    }

    pub fn square(&mut self, a: Var) -> Var {
        self.unary(a, |x| x * x, Op::Square(a))
    }

    pub fn sqrt(&mut self, a: Var) -> Var {
        self.unary(a, f64::sqrt, Op::Sqrt(a))
    }

    pub fn log(&mut self, a: Var) -> Var {
        self.unary(a, f64::ln, Op::Log(a))
    }

    /// Row-wise softmax of a `[m,n]` matrix. Columns where `key_mask` is false
    /// get weight exactly 0 and take no part in the normalization.
    pub fn softmax_rows(&mut self, a: Var, key_mask: Option<&[bool]>) -> Result<Var, NumError> {
        let ta = self.value(a);
        if ta.rank() != 2 {
            return Err(rank_err("softmax_rows", ta, 2));
        }
        let (m, n) = (ta.rows(), ta.cols());
        if let Some(mask) = key_mask {
            if mask.len() != n {
                return Err(NumError::Shape {
                    op: "softmax_rows",
                    left: ta.shape().to_vec(),
                    right: vec![mask.len()],
                });
            }
        }
        let keep = |j: usize| key_mask.is_none_or(|mk| mk[j]);
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let row = ta.row(i);
            let mut max = f64::NEG_INFINITY;
            for (j, &v) in row.iter().enumerate() {
                if keep(j) && v > max {
                    max = v;
                }
            }
            if max == f64::NEG_INFINITY {
                continue;
            }
            let mut sum = 0.0;
            for j in 0..n {
                if keep(j) {
                    let e = (row[j] - max).exp();
                    out[i * n + j] = e;
                    sum += e;
                }
            }
            for v in &mut out[i * n..(i + 1) * n] {
                *v /= sum;
            }
        }
        let rg = self.rg(a);
        Ok(self.push(Tensor::matrix(m, n, out)?, Op::Softmax(a), rg))
    }

    /// Per-row layer normalization of `[m,n]` with gain and bias `[n]`.
    /// Uses the population variance.
    pub fn layernorm_rows(
        &mut self,
        x: Var,
        gain: Var,
        bias: Var,
        eps: f64,
    ) -> Result<Var, NumError> {
        let (tx, tg, tb) = (self.value(x), self.value(gain), self.value(bias));
        if tx.rank() != 2 {
            return Err(rank_err("layernorm_rows", tx, 2));
        }
        let n = tx.cols();
        if tg.shape() != [n] || tb.shape() != [n] {
            return Err(shape_err("layernorm_rows", tx, tg));
        }
        let m = tx.rows();
        let (g, b) = (tg.data(), tb.data());
        let mut xhat = vec![0.0; m * n];
        let mut inv_std = vec![0.0; m];
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let row = tx.row(i);
            let mean = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
            let inv = 1.0 / (var + eps).sqrt();
            inv_std[i] = inv;
            for j in 0..n {
                let h = (row[j] - mean) * inv;
                xhat[i * n + j] = h;
                out[i * n + j] = h * g[j] + b[j];
            }
        }
        let rg = self.rg(x) || self.rg(gain) || self.rg(bias);
        Ok(self.push(
            Tensor::matrix(m, n, out)?,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            },
            rg,
        ))
    }

    /// Mean along `axis`. For a matrix, axis 0 averages rows into `[cols]` and
    /// axis 1 averages columns into `[rows]`; a vector reduces to a scalar.
    pub fn mean(&mut self, a: Var, axis: usize) -> Result<Var, NumError> {
        let ta = self.value(a);
        let t = match (ta.rank(), axis) {
            (1, 0) => Tensor::scalar(ta.data().iter().sum::<f64>() / ta.numel() as f64),
            (2, 0) => {
                let (m, n) = (ta.rows(), ta.cols());
                let mut out = vec![0.0; n];
                for i in 0..m {
                    for (o, v) in out.iter_mut().zip(ta.row(i)) {
                        *o += v;
                    }
                }
                Tensor::vector(out.into_iter().map(|v| v / m as f64).collect())
            }
            (2, 1) => {
                let n = ta.cols() as f64;
                Tensor::vector(
                    (0..ta.rows())
                        .map(|i| ta.row(i).iter().sum::<f64>() / n)
                        .collect(),
                )
            }
            _ => return Err(rank_err("mean", ta, axis)),
        };
        if ta.numel() == 0 {
            return Err(rank_err("mean", ta, axis));
        }
        let rg = self.rg(a);
        Ok(self.push(t, Op::Mean(a, axis), rg))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().sum::<f64>();
        let rg = self.rg(a);
        self.push(Tensor::scalar(s), Op::Sum(a), rg)
    }

    /// Concatenates vectors end to end (axis 0), or matrices along rows
    /// (axis 0) or columns (axis 1).
    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var, NumError> {
        let first = self.value(*parts.first().ok_or(NumError::Empty("concat"))?);
        let rank = first.rank();
        let t = match (rank, axis) {
            (1, 0) => {
                let mut data = Vec::new();
                for &p in parts {
                    let tp = self.value(p);
                    if tp.rank() != 1 {
                        return Err(shape_err("concat", first, tp));
                    }
                    data.extend_from_slice(tp.data());
                }
                Tensor::vector(data)
            }
            (2, 0) => {
                let n = first.cols();
                let mut data = Vec::new();
                let mut m = 0;
                for &p in parts {
                    let tp = self.value(p);
                    if tp.rank() != 2 || tp.cols() != n {
                        return Err(shape_err("concat", first, tp));
                    }
                    m += tp.rows();
                    data.extend_from_slice(tp.data());
                }
                Tensor::matrix(m, n, data)?
            }
            (2, 1) => {
                let m = first.rows();
                let mut n = 0;
                for &p in parts {
                    let tp = self.value(p);
                    if tp.rank() != 2 || tp.rows() != m {
                        return Err(shape_err("concat", first, tp));
                    }
                    n += tp.cols();
                }
                let mut data = Vec::with_capacity(m * n);
                for i in 0..m {
                    for &p in parts {
                        data.extend_from_slice(self.value(p).row(i));
                    }
                }
                Tensor::matrix(m, n, data)?
            }
            _ => return Err(rank_err("concat", first, axis)),
        };
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(t, Op::Concat(parts.to_vec(), axis), rg))
    }

    /// Columns `start..end` of a matrix.
    pub fn slice_cols(&mut self, a: Var, start: usize, end: usize) -> Result<Var, NumError> {
        let ta = self.value(a);
        if ta.rank() != 2 || start >= end || end > ta.cols() {
            return Err(NumError::Shape {
                op: "slice_cols",
                left: ta.shape().to_vec(),
                right: vec![start, end],
            });
        }
        let mut data = Vec::with_capacity(ta.rows() * (end - start));
        for i in 0..ta.rows() {
            data.extend_from_slice(&ta.row(i)[start..end]);
        }
        let t = Tensor::matrix(ta.rows(), end - start, data)?;
        let rg = self.rg(a);
        Ok(self.push(t, Op::SliceCols(a, start, end), rg))
    }

    /// Rows `start..end` of a matrix.
    pub fn slice_rows(&mut self, a: Var, start: usize, end: usize) -> Result<Var, NumError> {
        let ta = self.value(a);
        if ta.rank() != 2 || start >= end || end > ta.rows() {
            return Err(NumError::Shape {
                op: "slice_rows",
                left: ta.shape().to_vec(),
                right: vec![start, end],
            });
        }
        let n = ta.cols();
        let t = Tensor::matrix(end - start, n, ta.data()[start * n..end * n].to_vec())?;
        let rg = self.rg(a);
        Ok(self.push(t, Op::SliceRows(a, start), rg))
    }

    /// Gathers rows of `table` (`[vocab, d]`) into a `[ids.len(), d]` matrix.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var, NumError> {
        let tt = self.value(table);
        if tt.rank() != 2 {
            return Err(rank_err("embedding", tt, 2));
        }
        if let Some(&bad) = ids.iter().find(|&&i| i >= tt.rows()) {
            return Err(NumError::Index {
                index: bad,
                size: tt.rows(),
            });
        }
        let d = tt.cols();
        let mut data = Vec::with_capacity(ids.len() * d);
        for &i in ids {
            data.extend_from_slice(tt.row(i));
        }
        let t = Tensor::matrix(ids.len(), d, data)?;
        let rg = self.rg(table);
        Ok(self.push(t, Op::Embedding(table, ids.to_vec()), rg))
    }

    // ---- backward --------------------------------------------------------

    /// Reverse pass from a single-element `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients, NumError> {
        let lt = self.value(loss);
        if lt.numel() != 1 {
            return Err(NumError::Shape {
                op: "backward",
                left: lt.shape().to_vec(),
                right: vec![],
            });
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(Tensor::full(lt.shape(), 1.0));
        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            if node.requires_grad {
                self.propagate(node, &g, &mut grads);
            }
            grads[idx] = Some(g);
        }
        Ok(Gradients {
            grads,
            params: self
                .nodes
                .iter()
                .enumerate()
                .filter_map(|(i, n)| match n.op {
                    Op::Param(id) => Some((id, Var(i))),
                    _ => None,
                })
                .collect(),
        })
    }

    /// Runs [`Graph::backward`] and adds every parameter gradient into `store`.
    pub fn backward_into(&self, loss: Var, store: &mut ParamStore) -> Result<(), NumError> {
        let grads = self.backward(loss)?;
        for (id, g) in grads.param_grads() {
            store.accumulate_grad(id, g);
        }
        Ok(())
    }

    fn propagate(&self, node: &Node, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let val = |v: Var| &self.nodes[v.0].value;
        let mut send = |v: Var, t: Tensor| {
            if !self.nodes[v.0].requires_grad {
                return;
            }
            match &mut grads[v.0] {
                Some(acc) => acc.add_assign(&t),
                slot @ None => *slot = Some(t),
            }
        };
        let gd = g.data();
        match &node.op {
            Op::Leaf | Op::Param(_) => {}
            Op::MatMul(a, b) => {
                let (ta, tb) = (val(*a), val(*b));
                let (m, k, n) = (ta.rows(), ta.cols(), tb.cols());
                let (ad, bd) = (ta.data(), tb.data());
                if self.nodes[a.0].requires_grad {
                    let mut da = vec![0.0; m * k];
                    for i in 0..m {
                        for p in 0..k {
                            let mut s = 0.0;
                            for j in 0..n {
                                s += gd[i * n + j] * bd[p * n + j];
                            }
                            da[i * k + p] = s;
                        }
                    }
                    send(*a, Tensor::new(vec![m, k], da).unwrap());
                }
                if self.nodes[b.0].requires_grad {
                    let mut db = vec![0.0; k * n];
                    for i in 0..m {
                        for p in 0..k {
                            let aip = ad[i * k + p];
                            for j in 0..n {
                                db[p * n + j] += aip * gd[i * n + j];
                            }
                        }
                    }
                    send(*b, Tensor::new(vec![k, n], db).unwrap());
                }
            }
            Op::Transpose(a) => {
                let (m, n) = (g.rows(), g.cols());
                let mut out = vec![0.0; m * n];
                for i in 0..m {
                    for j in 0..n {
                        out[j * m + i] = gd[i * n + j];
                    }
                }
                send(*a, Tensor::new(vec![n, m], out).unwrap());
            }
            Op::Add(a, b) => {
                send(*a, g.clone());
                send(*b, g.clone());
            }
            Op::Sub(a, b) => {
                send(*a, g.clone());
                send(*b, g.map(|v| -v));
            }
            Op::Mul(a, b) => {
                let (ta, tb) = (val(*a), val(*b));
                let da = gd.iter().zip(tb.data()).map(|(g, y)| g * y).collect();
                let db = gd.iter().zip(ta.data()).map(|(g, x)| g * x).collect();
                send(*a, Tensor::new(ta.shape().to_vec(), da).unwrap());
                send(*b, Tensor::new(tb.shape().to_vec(), db).unwrap());
            }
            Op::AddRow(a, row) => {
                send(*a, g.clone());
                let n = g.cols();
                let mut dr = vec![0.0; n];
                for i in 0..g.rows() {
                    for (d, v) in dr.iter_mut().zip(g.row(i)) {
                        *d += v;
                    }
                }
                send(*row, Tensor::vector(dr));
            }
            Op::Scale(a, c) => send(*a, g.map(|v| v * c)),
            Op::Relu(a) => send(*a, zip_map(g, val(*a), |g, x| if x > 0.0 { g } else { 0.0 })),
            Op::Gelu(a) => send(*a, zip_map(g, val(*a), |g, x| g * gelu_grad(x))),
            Op::Sigmoid(a) => send(*a, zip_map(g, &node.value, |g, s| g * s * (1.0 - s))),
            Op::Softplus(a) => send(*a, zip_map(g, val(*a), |g, x| g * sigmoid(x))),
            Op::Abs(a) => send(
                *a,
                zip_map(g, val(*a), |g, x| {
                    if x > 0.0 {
                        g
                    } else if x < 0.0 {
                        -g
                    } else {
                        0.0
                    }
                }),
            ),
            Op::Square(a) => send(*a, zip_map(g, val(*a), |g, x| 2.0 * x * g)),
            Op::Sqrt(a) => send(*a, zip_map(g, &node.value, |g, y| 0.5 * g / y)),
            Op::Log(a) => send(*a, zip_map(g, val(*a), |g, x| g / x)),
            Op::Softmax(a) => {
                let y = &node.value;
                let (m, n) = (y.rows(), y.cols());
                let mut out = vec![0.0; m * n];
                for i in 0..m {
                    let yr = y.row(i);
                    let gr = &gd[i * n..(i + 1) * n];
                    let dot: f64 = yr.iter().zip(gr).map(|(y, g)| y * g).sum();
                    for j in 0..n {
                        out[i * n + j] = yr[j] * (gr[j] - dot);
                    }
                }
                send(*a, Tensor::new(vec![m, n], out).unwrap());
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            } => {
                let (m, n) = (g.rows(), g.cols());
                let gv = val(*gain).data();
                let mut dx = vec![0.0; m * n];
                let mut dg = vec![0.0; n];
                let mut db = vec![0.0; n];
                let nf = n as f64;
                for i in 0..m {
                    let gr = &gd[i * n..(i + 1) * n];
                    let hr = &xhat[i * n..(i + 1) * n];
                    let mut sum_dh = 0.0;
                    let mut sum_dh_h = 0.0;
                    for j in 0..n {
                        let dh = gr[j] * gv[j];
                        sum_dh += dh;
                        sum_dh_h += dh * hr[j];
                        dg[j] += gr[j] * hr[j];
                        db[j] += gr[j];
                    }
                    for j in 0..n {
                        let dh = gr[j] * gv[j];
                        dx[i * n + j] = inv_std[i] / nf * (nf * dh - sum_dh - hr[j] * sum_dh_h);
                    }
                }
                send(*x, Tensor::new(vec![m, n], dx).unwrap());
                send(*gain, Tensor::vector(dg));
                send(*bias, Tensor::vector(db));
            }
            Op::Mean(a, axis) => {
                let ta = val(*a);
                let t = match (ta.rank(), axis) {
                    (1, _) => Tensor::full(ta.shape(), gd[0] / ta.numel() as f64),
                    (2, 0) => {
                        let (m, n) = (ta.rows(), ta.cols());
                        let mut out = vec![0.0; m * n];
                        for i in 0..m {
                            for j in 0..n {
                                out[i * n + j] = gd[j] / m as f64;
                            }
                        }
                        Tensor::new(vec![m, n], out).unwrap()
                    }
                    _ => {
                        let (m, n) = (ta.rows(), ta.cols());
                        let mut out = vec![0.0; m * n];
                        for i in 0..m {
                            for j in 0..n {
                                out[i * n + j] = gd[i] / n as f64;
                            }
                        }
                        Tensor::new(vec![m, n], out).unwrap()
                    }
                };
                send(*a, t);
            }
            Op::Sum(a) => send(*a, Tensor::full(val(*a).shape(), gd[0])),
            Op::Concat(parts, axis) => match (g.rank(), axis) {
                (1, _) => {
                    let mut off = 0;
                    for &p in parts {
                        let n = val(p).numel();
                        send(p, Tensor::vector(gd[off..off + n].to_vec()));
                        off += n;
                    }
                }
                (2, 0) => {
                    let n = g.cols();
                    let mut off = 0;
                    for &p in parts {
                        let r = val(p).rows();
                        send(
                            p,
                            Tensor::new(vec![r, n], gd[off * n..(off + r) * n].to_vec()).unwrap(),
                        );
                        off += r;
                    }
                }
                _ => {
                    let mut off = 0;
                    for &p in parts {
                        let c = val(p).cols();
                        let mut out = Vec::with_capacity(g.rows() * c);
                        for i in 0..g.rows() {
                            out.extend_from_slice(&g.row(i)[off..off + c]);
                        }
                        send(p, Tensor::new(vec![g.rows(), c], out).unwrap());
                        off += c;
                    }
                }
            },
            Op::SliceCols(a, start, end) => {
                let ta = val(*a);
                let (m, n) = (ta.rows(), ta.cols());
                let w = end - start;
                let mut out = vec![0.0; m * n];
                for i in 0..m {
                    out[i * n + start..i * n + end].copy_from_slice(&gd[i * w..(i + 1) * w]);
                }
                send(*a, Tensor::new(vec![m, n], out).unwrap());
            }
            Op::SliceRows(a, start) => {
                let ta = val(*a);
                let n = ta.cols();
                let mut out = vec![0.0; ta.numel()];
                out[start * n..start * n + gd.len()].copy_from_slice(gd);
                send(*a, Tensor::new(ta.shape().to_vec(), out).unwrap());
            }
            Op::Embedding(table, ids) => {
                let tt = val(*table);
                let d = tt.cols();
                let mut out = vec![0.0; tt.numel()];
                for (r, &id) in ids.iter().enumerate() {
                    for j in 0..d {
                        out[id * d + j] += gd[r * d + j];
                    }
                }
                send(*table, Tensor::new(tt.shape().to_vec(), out).unwrap());
            }
        }
    }
}

fn zip_map(g: &Tensor, x: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    let data = g.data().iter().zip(x.data()).map(|(&g, &x)| f(g, x)).collect();
    Tensor::new(g.shape().to_vec(), data).unwrap()
}

/// Result of a reverse pass.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    params: Vec<(ParamId, Var)>,
}

impl Gradients {
    /// Gradient of the loss with respect to `v`, if `v` lies on a path to it.
    pub fn wrt(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    pub fn param_grads(&self) -> impl Iterator<Item = (ParamId, &Tensor)> {
        self.params
            .iter()
            .filter_map(|&(id, v)| self.wrt(v).map(|g| (id, g)))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn softmax_of_zeros_is_uniform() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::matrix(1, 2, vec![0.0, 0.0]).unwrap());
        let y = g.softmax_rows(x, None).unwrap();
        assert_eq!(g.value(y).data(), &[0.5, 0.5]);
    }

    #[test]
    fn masked_softmax_zeroes_masked_columns() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::matrix(1, 3, vec![0.3, 9.0, -0.2]).unwrap());
        let y = g.softmax_rows(x, Some(&[true, false, true])).unwrap();
        let v = g.value(y).data();
        assert_eq!(v[1], 0.0);
        assert_abs_diff_eq!(v[0] + v[2], 1.0, epsilon = 1e-15);
    }

    #[test]
    fn identity_matmul() {
        let mut g = Graph::new();
        let i = g.constant(Tensor::matrix(2, 2, vec![1.0, 0.0, 0.0, 1.0]).unwrap());
        let a = g.constant(Tensor::matrix(2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap());
        let y = g.matmul(i, a).unwrap();
        assert_eq!(g.value(y).data(), &[1.0, 2.0, 3.0, 4.0]);
    }

    #[test]
    fn matmul_shape_error_names_op_and_shapes() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::zeros(&[2, 3]));
        let b = g.constant(Tensor::zeros(&[2, 3]));
        let err = g.matmul(a, b).unwrap_err();
        assert_eq!(
            err,
            NumError::Shape {
                op: "matmul",
                left: vec![2, 3],
                right: vec![2, 3]
            }
        );
        assert!(err.to_string().contains("matmul"));
    }

    #[test]
    fn layernorm_two_values() {
        // mean 2, population std 1
        let x_vals = [1.0, 3.0];
        let mean = (x_vals[0] + x_vals[1]) / 2.0;
        let std = (((x_vals[0] - mean) * (x_vals[0] - mean) + (x_vals[1] - mean) * (x_vals[1] - mean)) / 2.0_f64).sqrt();
        let expected: Vec<f64> = x_vals.iter().map(|v| (v - mean) / std).collect();
        assert_eq!(expected, vec![-1.0, 1.0]);

        let mut g = Graph::new();
        let x = g.constant(Tensor::matrix(1, 2, x_vals.to_vec()).unwrap());
        let gain = g.constant(Tensor::vector(vec![1.0, 1.0]));
        let bias = g.constant(Tensor::vector(vec![0.0, 0.0]));
        let y = g.layernorm_rows(x, gain, bias, 0.0).unwrap();
        assert_eq!(g.value(y).data(), expected.as_slice());
    }

    #[test]
    fn sum_of_squares_gradient() {
        let mut g = Graph::new();
        let x = g.input(Tensor::vector(vec![1.0, 2.0, 3.0]));
        let sq = g.square(x);
        let loss = g.sum(sq);
        let grads = g.backward(loss).unwrap();
        assert_eq!(grads.wrt(x).unwrap().data(), &[2.0, 4.0, 6.0]);
    }

    #[test]
    fn constant_loss_has_zero_gradient() {
        let mut store = ParamStore::new();
        let id = store.add("x", Tensor::vector(vec![1.0, 2.0])).unwrap();
        let mut g = Graph::new();
        let _x = g.param(&store, id);
        let c = g.constant(Tensor::scalar(3.0));
        let loss = g.scale(c, 2.0);
        g.backward_into(loss, &mut store).unwrap();
        // unreachable parameter: no gradient delivered, treated as zero
        assert!(store.get(id).grad.as_ref().is_none_or(|t| t.data().iter().all(|&v| v == 0.0)));
    }

    #[test]
    fn backward_accumulates_across_calls() {
        let mut store = ParamStore::new();
        let id = store.add("x", Tensor::vector(vec![1.0, -2.0])).unwrap();
        for _ in 0..2 {
            let mut g = Graph::new();
            let x = g.param(&store, id);
            let sq = g.square(x);
            let loss = g.sum(sq);
            g.backward_into(loss, &mut store).unwrap();
        }
        assert_eq!(store.get(id).grad.as_ref().unwrap().data(), &[4.0, -8.0]);
    }

    #[test]
    fn non_scalar_loss_rejected() {
        let mut g = Graph::new();
        let x = g.input(Tensor::vector(vec![1.0, 2.0]));
        assert!(matches!(g.backward(x), Err(NumError::Shape { op: "backward", .. })));
    }

    #[test]
    fn shared_param_accumulates_once_per_use() {
        let mut store = ParamStore::new();
        let id = store.add("w", Tensor::vector(vec![3.0])).unwrap();
        let mut g = Graph::new();
        let a = g.param(&store, id);
        let b = g.param(&store, id);
        assert_eq!(a, b);
        let p = g.mul(a, b).unwrap();
        let loss = g.sum(p);
        g.backward_into(loss, &mut store).unwrap();
        assert_eq!(store.get(id).grad.as_ref().unwrap().data(), &[6.0]);
    }

    #[test]
    fn embedding_scatter_adds_repeated_ids() {
        let mut g = Graph::new();
        let t = g.input(Tensor::matrix(3, 2, vec![0.0; 6]).unwrap());
        let e = g.embedding(t, &[2, 0, 2]).unwrap();
        let loss = g.sum(e);
        let grads = g.backward(loss).unwrap();
        assert_eq!(grads.wrt(t).unwrap().data(), &[1.0, 1.0, 0.0, 0.0, 2.0, 2.0]);
        assert!(matches!(
            g.embedding(t, &[3]),
            Err(NumError::Index { index: 3, size: 3 })
        ));
    }

    #[test]
    fn softplus_is_stable() {
        assert_eq!(softplus(1000.0), 1000.0);
        assert!(softplus(-1000.0) >= 0.0 && softplus(-1000.0) < 1e-300);
        assert_abs_diff_eq!(softplus(0.0), std::f64::consts::LN_2, epsilon = 1e-16);
    }

    #[test]
    fn relu_keeps_nan() {
        let mut g = Graph::new();
        let x = g.input(Tensor::vector(vec![f64::NAN, -1.0, 2.0]));
        let y = g.relu(x);
        let v = g.value(y).data();
        assert!(v[0].is_nan());
        assert_eq!(&v[1..], &[0.0, 2.0]);
    }
}
