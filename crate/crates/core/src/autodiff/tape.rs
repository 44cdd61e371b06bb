use std::cell::RefCell;
use std::rc::Rc;

use super::Tensor;
use crate::error::{Error, Result};

/// Smallest temperature accepted by [`Var::softmax`].
pub const TEMPERATURE_FLOOR: f64 = 1e-6;

const LAYER_NORM_EPS: f64 = 1e-5;
const COSINE_MIN_NORM: f64 = 1e-12;

#[derive(Debug)]
enum Op {
    Leaf,
    Constant,
    MatMul(usize, usize),
    Transpose(usize),
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    AddRow(usize, usize),
    Scale(usize, f64),
    Softmax {
        input: usize,
        temperature: f64,
    },
    CrossEntropy {
        logits: usize,
        targets: Vec<usize>,
        probs: Vec<f64>,
    },
    Mse(usize, usize),
    Cosine(usize, usize),
    Reshape(usize),
    GatherRows {
        table: usize,
        ids: Vec<usize>,
    },
    Concat(Vec<usize>),
    Slice {
        input: usize,
        offset: usize,
    },
    MeanRows(usize),
    LayerNorm {
        input: usize,
        gain: usize,
        bias: usize,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    Silu(usize),
    Log(usize),
    Sum(usize),
}

struct Node {
    value: Rc<Tensor>,
    op: Op,
    tracked: bool,
}

/// Append-only record of one forward pass.
///
/// Nodes are pushed in evaluation order, so parents always precede
/// children and a single reverse sweep visits every node once.
#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    id: usize,
}

impl std::fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Var")
            .field("id", &self.id)
            .field("shape", &self.shape())
            .finish()
    }
}

/// Gradients of a scalar with respect to every tracked node of a tape.
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    /// Gradient for `var`, or `None` when no gradient reached it.
    pub fn get(&self, var: Var<'_>) -> Option<Tensor> {
        self.grads[var.id]
            .as_ref()
            .map(|g| Tensor::new(self.shapes[var.id].clone(), g.clone()).expect("shape recorded"))
    }

    /// Gradient for `var`, zero-filled when nothing reached it.
    pub fn wrt(&self, var: Var<'_>) -> Tensor {
        self.get(var)
            .unwrap_or_else(|| Tensor::zeros(&self.shapes[var.id]))
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

    /// Differentiable input.
    pub fn leaf(&self, value: Tensor) -> Var<'_> {
        self.push(value, Op::Leaf, true)
    }

    /// Input that never receives a gradient.
    pub fn constant(&self, value: Tensor) -> Var<'_> {
        self.push(value, Op::Constant, false)
    }

    fn push(&self, value: Tensor, op: Op, tracked: bool) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value: Rc::new(value),
            op,
            tracked,
        });
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    fn value(&self, id: usize) -> Rc<Tensor> {
        Rc::clone(&self.nodes.borrow()[id].value)
    }

    fn tracked(&self, ids: &[usize]) -> bool {
        let nodes = self.nodes.borrow();
        ids.iter().any(|&i| nodes[i].tracked)
    }

    /// Reverse sweep from a scalar output.
    pub fn backward(&self, output: Var<'_>) -> Gradients {
        let nodes = self.nodes.borrow();
        assert_eq!(
            nodes[output.id].value.len(),
            1,
            "backward requires a scalar output"
        );
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; nodes.len()];
        grads[output.id] = Some(vec![1.0]);

        for id in (0..=output.id).rev() {
            let node = &nodes[id];
            if !node.tracked {
                continue;
            }
            let Some(upstream) = grads[id].take() else {
                continue;
            };
            propagate(&nodes, id, &upstream, &mut grads);
            grads[id] = Some(upstream);
        }

        Gradients {
            grads,
            shapes: nodes.iter().map(|n| n.value.shape().to_vec()).collect(),
        }
    }
}

fn accumulate(grads: &mut [Option<Vec<f64>>], nodes: &[Node], id: usize, f: impl FnOnce(&mut [f64])) {
    if !nodes[id].tracked {
        return;
    }
    let slot = grads[id].get_or_insert_with(|| vec![0.0; nodes[id].value.len()]);
    f(slot);
}

fn propagate(nodes: &[Node], id: usize, up: &[f64], grads: &mut [Option<Vec<f64>>]) {
    let out = &nodes[id].value;
    match &nodes[id].op {
        Op::Leaf | Op::Constant => {}
        Op::MatMul(a, b) => {
            let av = &nodes[*a].value;
            let bv = &nodes[*b].value;
            let (m, n, p) = (av.rows(), av.cols(), bv.cols());
            let (ad, bd) = (av.data(), bv.data());
            accumulate(grads, nodes, *a, |g| {
                for i in 0..m {
                    let up_row = &up[i * p..(i + 1) * p];
                    for k in 0..n {
                        let b_row = &bd[k * p..(k + 1) * p];
                        g[i * n + k] += dot(up_row, b_row);
                    }
                }
            });
            accumulate(grads, nodes, *b, |g| {
                for i in 0..m {
                    let up_row = &up[i * p..(i + 1) * p];
                    for k in 0..n {
                        let aik = ad[i * n + k];
                        if aik == 0.0 {
                            continue;
                        }
                        let g_row = &mut g[k * p..(k + 1) * p];
                        for (gv, u) in g_row.iter_mut().zip(up_row) {
                            *gv += aik * u;
                        }
                    }
                }
            });
        }
        Op::Transpose(a) => {
            let (r, c) = (out.rows(), out.cols());
            accumulate(grads, nodes, *a, |g| {
                for i in 0..r {
                    for j in 0..c {
                        g[j * r + i] += up[i * c + j];
                    }
                }
            });
        }
        Op::Add(a, b) => {
            accumulate(grads, nodes, *a, |g| add_into(g, up));
            accumulate(grads, nodes, *b, |g| add_into(g, up));
        }
        Op::Sub(a, b) => {
            accumulate(grads, nodes, *a, |g| add_into(g, up));
            accumulate(grads, nodes, *b, |g| {
                for (gv, u) in g.iter_mut().zip(up) {
                    *gv -= u;
                }
            });
        }
        Op::Mul(a, b) => {
            let av = nodes[*a].value.data();
            let bv = nodes[*b].value.data();
            accumulate(grads, nodes, *a, |g| {
                for ((gv, u), bb) in g.iter_mut().zip(up).zip(bv) {
                    *gv += u * bb;
                }
            });
            accumulate(grads, nodes, *b, |g| {
                for ((gv, u), aa) in g.iter_mut().zip(up).zip(av) {
                    *gv += u * aa;
                }
            });
        }
        Op::AddRow(a, b) => {
            let c = nodes[*b].value.len();
            accumulate(grads, nodes, *a, |g| add_into(g, up));
            accumulate(grads, nodes, *b, |g| {
                for row in up.chunks(c) {
                    add_into(g, row);
                }
            });
        }
        Op::Scale(a, s) => {
            accumulate(grads, nodes, *a, |g| {
                for (gv, u) in g.iter_mut().zip(up) {
                    *gv += s * u;
                }
            });
        }
        Op::Softmax { input, temperature } => {
            let c = *out.shape().last().expect("non-empty shape");
            let y = out.data();
            accumulate(grads, nodes, *input, |g| {
                for ((g_row, y_row), u_row) in g.chunks_mut(c).zip(y.chunks(c)).zip(up.chunks(c)) {
                    let inner = dot(y_row, u_row);
                    for ((gv, yv), uv) in g_row.iter_mut().zip(y_row).zip(u_row) {
                        *gv += yv * (uv - inner) / temperature;
                    }
                }
            });
        }
        Op::CrossEntropy {
            logits,
            targets,
            probs,
        } => {
            let v = nodes[*logits].value.cols();
            let scale = up[0] / targets.len() as f64;
            accumulate(grads, nodes, *logits, |g| {
                for (t, &target) in targets.iter().enumerate() {
                    let row = &probs[t * v..(t + 1) * v];
                    for (j, p) in row.iter().enumerate() {
                        g[t * v + j] += scale * p;
                    }
                    g[t * v + target] -= scale;
                }
            });
        }
        Op::Mse(a, b) => {
            let av = nodes[*a].value.data();
            let bv = nodes[*b].value.data();
            let s = 2.0 * up[0];
            accumulate(grads, nodes, *a, |g| {
                for ((gv, x), y) in g.iter_mut().zip(av).zip(bv) {
                    *gv += s * (x - y);
                }
            });
            accumulate(grads, nodes, *b, |g| {
                for ((gv, x), y) in g.iter_mut().zip(av).zip(bv) {
                    *gv -= s * (x - y);
                }
            });
        }
        Op::Cosine(q, z) => {
            let qv = nodes[*q].value.data();
            let zv = nodes[*z].value.data();
            let s = out.item();
            let (qn, zn) = (norm(qv), norm(zv));
            let u = up[0];
            // ds/dq = (z - s * q * |z| / |q|) / (|q| |z|), and symmetrically for z.
            accumulate(grads, nodes, *q, |g| {
                for ((gv, qi), zi) in g.iter_mut().zip(qv).zip(zv) {
                    *gv += u * (zi - s * qi * zn / qn) / (qn * zn);
                }
            });
            accumulate(grads, nodes, *z, |g| {
                for ((gv, qi), zi) in g.iter_mut().zip(qv).zip(zv) {
                    *gv += u * (qi - s * zi * qn / zn) / (qn * zn);
                }
            });
        }
        Op::Reshape(a) => accumulate(grads, nodes, *a, |g| add_into(g, up)),
        Op::GatherRows { table, ids } => {
            let c = out.cols();
            accumulate(grads, nodes, *table, |g| {
                for (r, &id) in ids.iter().enumerate() {
                    add_into(&mut g[id * c..(id + 1) * c], &up[r * c..(r + 1) * c]);
                }
            });
        }
        Op::Concat(parts) => {
            let mut offset = 0;
            for &p in parts {
                let n = nodes[p].value.len();
                accumulate(grads, nodes, p, |g| add_into(g, &up[offset..offset + n]));
                offset += n;
            }
        }
        Op::Slice { input, offset } => {
            let n = out.len();
            accumulate(grads, nodes, *input, |g| add_into(&mut g[*offset..offset + n], up));
        }
        Op::MeanRows(a) => {
            let r = nodes[*a].value.rows() as f64;
            let c = out.len();
            accumulate(grads, nodes, *a, |g| {
                for row in g.chunks_mut(c) {
                    for (gv, u) in row.iter_mut().zip(up) {
                        *gv += u / r;
                    }
                }
            });
        }
        Op::LayerNorm {
            input,
            gain,
            bias,
            xhat,
            inv_std,
        } => {
            let gv = nodes[*gain].value.data();
            let c = gv.len();
            accumulate(grads, nodes, *input, |g| {
                let mut dxhat = vec![0.0; c];
                for (r, (g_row, u_row)) in g.chunks_mut(c).zip(up.chunks(c)).enumerate() {
                    let xh = &xhat[r * c..(r + 1) * c];
                    for j in 0..c {
                        dxhat[j] = u_row[j] * gv[j];
                    }
                    let mean_d = dxhat.iter().sum::<f64>() / c as f64;
                    let mean_dx = dot(&dxhat, xh) / c as f64;
                    for j in 0..c {
                        g_row[j] += inv_std[r] * (dxhat[j] - mean_d - xh[j] * mean_dx);
                    }
                }
            });
            accumulate(grads, nodes, *gain, |g| {
                for (u_row, xh) in up.chunks(c).zip(xhat.chunks(c)) {
                    for j in 0..c {
                        g[j] += u_row[j] * xh[j];
                    }
                }
            });
            accumulate(grads, nodes, *bias, |g| {
                for u_row in up.chunks(c) {
                    add_into(g, u_row);
                }
            });
        }
        Op::Silu(a) => {
            let x = nodes[*a].value.data();
            accumulate(grads, nodes, *a, |g| {
                for ((gv, u), xv) in g.iter_mut().zip(up).zip(x) {
                    let sig = sigmoid(*xv);
                    *gv += u * sig * (1.0 + xv * (1.0 - sig));
                }
            });
        }
        Op::Log(a) => {
            let x = nodes[*a].value.data();
            accumulate(grads, nodes, *a, |g| {
                for ((gv, u), xv) in g.iter_mut().zip(up).zip(x) {
                    *gv += u / xv;
                }
            });
        }
        Op::Sum(a) => {
            accumulate(grads, nodes, *a, |g| {
                for gv in g.iter_mut() {
                    *gv += up[0];
                }
            });
        }
    }
}

impl<'t> Var<'t> {
    pub fn id(&self) -> usize {
        self.id
    }

    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn value(&self) -> Rc<Tensor> {
        self.tape.value(self.id)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tape.nodes.borrow()[self.id].value.shape().to_vec()
    }

    /// True when gradients can flow from this value to some leaf.
    pub fn is_tracked(&self) -> bool {
        self.tape.tracked(&[self.id])
    }

    fn unary(&self, value: Tensor, op: Op) -> Var<'t> {
        let tracked = self.tape.tracked(&[self.id]);
        self.tape.push(value, op, tracked)
    }

    fn binary(&self, other: Var<'t>, value: Tensor, op: Op) -> Var<'t> {
        let tracked = self.tape.tracked(&[self.id, other.id]);
        self.tape.push(value, op, tracked)
    }

    fn same_shape(&self, other: &Var<'t>, op: &'static str) -> Result<(Rc<Tensor>, Rc<Tensor>)> {
        let (a, b) = (self.value(), other.value());
        if a.shape() != b.shape() {
            return Err(Error::shape(op, a.shape(), b.shape()));
        }
        Ok((a, b))
    }

    pub fn matmul(&self, other: Var<'t>) -> Result<Var<'t>> {
        let (a, b) = (self.value(), other.value());
        if a.shape().len() != 2 || b.shape().len() != 2 || a.shape()[1] != b.shape()[0] {
            return Err(Error::shape("matmul", a.shape(), b.shape()));
        }
        let (m, n, p) = (a.shape()[0], a.shape()[1], b.shape()[1]);
        let mut out = vec![0.0; m * p];
        let (ad, bd) = (a.data(), b.data());
        for i in 0..m {
            let out_row = &mut out[i * p..(i + 1) * p];
            for k in 0..n {
                let aik = ad[i * n + k];
                if aik == 0.0 {
                    continue;
                }
                for (o, bv) in out_row.iter_mut().zip(&bd[k * p..(k + 1) * p]) {
                    *o += aik * bv;
                }
            }
        }
        let value = Tensor::new(vec![m, p], out)?;
        Ok(self.binary(other, value, Op::MatMul(self.id, other.id)))
    }

    pub fn transpose(&self) -> Result<Var<'t>> {
        let a = self.value();
        if a.shape().len() != 2 {
            return Err(Error::shape("transpose", a.shape(), &[2]));
        }
        let (r, c) = (a.shape()[0], a.shape()[1]);
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = a.data()[i * c + j];
            }
        }
        Ok(self.unary(Tensor::new(vec![c, r], out)?, Op::Transpose(self.id)))
    }

    pub fn add(&self, other: Var<'t>) -> Result<Var<'t>> {
        let (a, b) = self.same_shape(&other, "add")?;
        let data = a.data().iter().zip(b.data()).map(|(x, y)| x + y).collect();
        let value = Tensor::new(a.shape().to_vec(), data)?;
        Ok(self.binary(other, value, Op::Add(self.id, other.id)))
    }

    pub fn sub(&self, other: Var<'t>) -> Result<Var<'t>> {
        let (a, b) = self.same_shape(&other, "sub")?;
        let data = a.data().iter().zip(b.data()).map(|(x, y)| x - y).collect();
        let value = Tensor::new(a.shape().to_vec(), data)?;
        Ok(self.binary(other, value, Op::Sub(self.id, other.id)))
    }

    /// Elementwise product.
    pub fn mul(&self, other: Var<'t>) -> Result<Var<'t>> {
        let (a, b) = self.same_shape(&other, "mul")?;
        let data = a.data().iter().zip(b.data()).map(|(x, y)| x * y).collect();
        let value = Tensor::new(a.shape().to_vec(), data)?;
        Ok(self.binary(other, value, Op::Mul(self.id, other.id)))
    }

    /// Adds a vector to every row.
    pub fn add_row(&self, row: Var<'t>) -> Result<Var<'t>> {
        let (a, b) = (self.value(), row.value());
        if a.cols() != b.len() || b.shape().len() != 1 {
            return Err(Error::shape("add_row", a.shape(), b.shape()));
        }
        let c = b.len();
        let mut data = a.data().to_vec();
        for chunk in data.chunks_mut(c) {
            add_into(chunk, b.data());
        }
        let value = Tensor::new(a.shape().to_vec(), data)?;
        Ok(self.binary(row, value, Op::AddRow(self.id, row.id)))
    }

    pub fn scale(&self, factor: f64) -> Var<'t> {
        let a = self.value();
        let data = a.data().iter().map(|x| x * factor).collect();
        let value = Tensor::new(a.shape().to_vec(), data).expect("same shape");
        self.unary(value, Op::Scale(self.id, factor))
    }

    /// Softmax over the last axis of `self / temperature`.
    ///
    /// The temperature is floored at [`TEMPERATURE_FLOOR`].
    pub fn softmax(&self, temperature: f64) -> Result<Var<'t>> {
        if !(temperature > 0.0) {
            return Err(Error::Config(format!("softmax temperature must be positive, got {temperature}")));
        }
        let temperature = temperature.max(TEMPERATURE_FLOOR);
        let a = self.value();
        if !a.is_finite() {
            return Err(Error::NonFinite("softmax"));
        }
        let c = *a.shape().last().expect("non-empty shape");
        let mut data = vec![0.0; a.len()];
        for (o_row, x_row) in data.chunks_mut(c).zip(a.data().chunks(c)) {
            softmax_into(x_row, temperature, o_row);
        }
        let value = Tensor::new(a.shape().to_vec(), data)?;
        Ok(self.unary(
            value,
            Op::Softmax {
                input: self.id,
                temperature,
            },
        ))
    }

    /// Mean token-level negative log-likelihood of `targets` under row-wise
    /// softmax of `self` (shape `[T, V]`).
    pub fn cross_entropy(&self, targets: &[usize]) -> Result<Var<'t>> {
        let a = self.value();
        if a.shape().len() != 2 || a.rows() != targets.len() {
            return Err(Error::shape("cross_entropy", a.shape(), &[targets.len()]));
        }
        if !a.is_finite() {
            return Err(Error::NonFinite("cross_entropy"));
        }
        let v = a.cols();
        let mut probs = vec![0.0; a.len()];
        let mut loss = 0.0;
        for (t, &target) in targets.iter().enumerate() {
            if target >= v {
                return Err(Error::Index {
                    op: "cross_entropy",
                    index: target,
                    bound: v,
                });
            }
            let row = a.row(t);
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|x| (x - max).exp()).sum::<f64>().ln();
            loss += lse - row[target];
            for (p, x) in probs[t * v..(t + 1) * v].iter_mut().zip(row) {
                *p = (x - lse).exp();
            }
        }
        loss /= targets.len() as f64;
        Ok(self.unary(
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits: self.id,
                targets: targets.to_vec(),
                probs,
            },
        ))
    }

    /// Squared Euclidean distance `‖self − other‖²`.
    pub fn mse(&self, other: Var<'t>) -> Result<Var<'t>> {
        let (a, b) = self.same_shape(&other, "mse")?;
        let value = a
            .data()
            .iter()
            .zip(b.data())
            .map(|(x, y)| (x - y) * (x - y))
            .sum();
        Ok(self.binary(other, Tensor::scalar(value), Op::Mse(self.id, other.id)))
    }

    /// Cosine similarity of two equally sized tensors, viewed flat.
    pub fn cosine(&self, other: Var<'t>) -> Result<Var<'t>> {
        let (q, z) = (self.value(), other.value());
        if q.len() != z.len() {
            return Err(Error::shape("cosine", q.shape(), z.shape()));
        }
        let (qn, zn) = (norm(q.data()), norm(z.data()));
        if !(qn > COSINE_MIN_NORM && zn > COSINE_MIN_NORM) {
            return Err(Error::Degenerate {
                op: "cosine",
                detail: format!("vector norms {qn:e} and {zn:e} must exceed {COSINE_MIN_NORM:e}"),
            });
        }
        let s = (dot(q.data(), z.data()) / (qn * zn)).clamp(-1.0, 1.0);
        Ok(self.binary(other, Tensor::scalar(s), Op::Cosine(self.id, other.id)))
    }

    /// Forward identity; blocks gradient flow. The result is a constant.
    pub fn stop_gradient(&self) -> Var<'t> {
        let value = (*self.value()).clone();
        self.tape.push(value, Op::Constant, false)
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Var<'t>> {
        let a = self.value();
        let value = a.reshaped(shape).map_err(|_| Error::shape("reshape", a.shape(), shape))?;
        Ok(self.unary(value, Op::Reshape(self.id)))
    }

    /// Row lookup into a `[V, h]` table.
    pub fn gather_rows(&self, ids: &[usize]) -> Result<Var<'t>> {
        let table = self.value();
        if table.shape().len() != 2 {
            return Err(Error::shape("gather_rows", table.shape(), &[2]));
        }
        if ids.is_empty() {
            return Err(Error::Empty("gather_rows"));
        }
        let (v, c) = (table.rows(), table.cols());
        let mut data = Vec::with_capacity(ids.len() * c);
        for &id in ids {
            if id >= v {
                return Err(Error::Index {
                    op: "gather_rows",
                    index: id,
                    bound: v,
                });
            }
            data.extend_from_slice(table.row(id));
        }
        let value = Tensor::new(vec![ids.len(), c], data)?;
        Ok(self.unary(
            value,
            Op::GatherRows {
                table: self.id,
                ids: ids.to_vec(),
            },
        ))
    }

    /// Leading-axis slice `[start, start + len)`.
    pub fn slice_rows(&self, start: usize, len: usize) -> Result<Var<'t>> {
        let a = self.value();
        if len == 0 || start + len > a.rows() {
            return Err(Error::Index {
                op: "slice_rows",
                index: start + len,
                bound: a.rows(),
            });
        }
        let c = a.cols();
        let mut shape = a.shape().to_vec();
        shape[0] = len;
        let value = Tensor::new(shape, a.data()[start * c..(start + len) * c].to_vec())?;
        Ok(self.unary(
            value,
            Op::Slice {
                input: self.id,
                offset: start * c,
            },
        ))
    }

    /// Mean over the leading axis of a 2-D tensor; returns a vector.
    pub fn mean_rows(&self) -> Result<Var<'t>> {
        let a = self.value();
        if a.shape().len() != 2 {
            return Err(Error::shape("mean_rows", a.shape(), &[2]));
        }
        let (r, c) = (a.rows(), a.cols());
        let mut data = vec![0.0; c];
        for row in a.data().chunks(c) {
            add_into(&mut data, row);
        }
        data.iter_mut().for_each(|v| *v /= r as f64);
        Ok(self.unary(Tensor::vector(data), Op::MeanRows(self.id)))
    }

    /// Row-wise layer normalization with learned gain and bias.
    pub fn layer_norm(&self, gain: Var<'t>, bias: Var<'t>) -> Result<Var<'t>> {
        let (x, g, b) = (self.value(), gain.value(), bias.value());
        let c = x.cols();
        if g.len() != c || b.len() != c || x.shape().len() != 2 {
            return Err(Error::shape("layer_norm", x.shape(), g.shape()));
        }
        let rows = x.rows();
        let mut xhat = vec![0.0; x.len()];
        let mut inv_std = vec![0.0; rows];
        let mut out = vec![0.0; x.len()];
        for r in 0..rows {
            let row = x.row(r);
            let mean = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
            let is = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            inv_std[r] = is;
            for j in 0..c {
                let h = (row[j] - mean) * is;
                xhat[r * c + j] = h;
                out[r * c + j] = h * g.data()[j] + b.data()[j];
            }
        }
        let tracked = self.tape.tracked(&[self.id, gain.id, bias.id]);
        Ok(self.tape.push(
            Tensor::new(x.shape().to_vec(), out)?,
            Op::LayerNorm {
                input: self.id,
                gain: gain.id,
                bias: bias.id,
                xhat,
                inv_std,
            },
            tracked,
        ))
    }

    /// `x · sigmoid(x)`
    pub fn silu(&self) -> Var<'t> {
        let a = self.value();
        let data = a.data().iter().map(|x| x * sigmoid(*x)).collect();
        self.unary(Tensor::new(a.shape().to_vec(), data).expect("same shape"), Op::Silu(self.id))
    }

    pub fn ln(&self) -> Result<Var<'t>> {
        let a = self.value();
        if a.data().iter().any(|v| !(*v > 0.0)) {
            return Err(Error::Degenerate {
                op: "ln",
                detail: "logarithm of a non-positive value".into(),
            });
        }
        let data = a.data().iter().map(|x| x.ln()).collect();
        Ok(self.unary(Tensor::new(a.shape().to_vec(), data)?, Op::Log(self.id)))
    }

    pub fn sum(&self) -> Var<'t> {
        let total = self.value().data().iter().sum();
        self.unary(Tensor::scalar(total), Op::Sum(self.id))
    }
}

/// Concatenates along the leading axis. Trailing shapes must agree.
pub fn concat<'t>(parts: &[Var<'t>]) -> Result<Var<'t>> {
    let first = parts.first().ok_or(Error::Empty("concat"))?;
    let tape = first.tape;
    let head = first.value();
    let trailing = head.shape()[1..].to_vec();
    let mut rows = 0;
    let mut data = Vec::new();
    for p in parts {
        let v = p.value();
        if v.shape()[1..] != trailing[..] {
            return Err(Error::shape("concat", head.shape(), v.shape()));
        }
        rows += v.shape()[0];
        data.extend_from_slice(v.data());
    }
    let mut shape = vec![rows];
    shape.extend(trailing);
    let ids: Vec<usize> = parts.iter().map(|p| p.id).collect();
    let tracked = tape.tracked(&ids);
    Ok(tape.push(Tensor::new(shape, data)?, Op::Concat(ids), tracked))
}

/// Stacks equally shaped tensors along a new leading axis.
pub fn stack<'t>(parts: &[Var<'t>]) -> Result<Var<'t>> {
    let first = parts.first().ok_or(Error::Empty("stack"))?;
    let mut shape = vec![parts.len()];
    shape.extend(first.shape());
    let mut flat = Vec::with_capacity(parts.len());
    for p in parts {
        let s = p.shape();
        let mut one = vec![1];
        one.extend(&s);
        if s != first.shape() {
            return Err(Error::shape("stack", &first.shape(), &s));
        }
        flat.push(p.reshape(&one)?);
    }
    concat(&flat)?.reshape(&shape)
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub(crate) fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Numerically stable `softmax(x / temperature)` into `out`.
pub(crate) fn softmax_into(x: &[f64], temperature: f64, out: &mut [f64]) {
    let max = x.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for (o, v) in out.iter_mut().zip(x) {
        *o = ((v - max) / temperature).exp();
        total += *o;
    }
    out.iter_mut().for_each(|o| *o /= total);
}
