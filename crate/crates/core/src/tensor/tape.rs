use std::borrow::Cow;

use super::gemm::gemm;
use super::{Tensor, TensorError};

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// An operation whose forward and backward passes are supplied by the
/// caller. Used for kernels that are much cheaper fused than composed.
pub trait CustomOp {
    fn name(&self) -> &'static str;

    fn forward(&self, inputs: &[&Tensor]) -> Result<Tensor, TensorError>;

    /// Vector-Jacobian product: one entry per input, `None` when the
    /// input receives no gradient.
    fn backward(&self, inputs: &[&Tensor], output: &Tensor, grad: &[f64]) -> Vec<Option<Vec<f64>>>;
}

enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    AddBias(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Concat(Vec<Var>),
    SliceLast(Var, usize),
    Sigmoid(Var),
    Tanh(Var),
    HeavisideSt(Var),
    LogSoftmax(Var),
    LogSumExp(Var),
    Embedding(Var, Vec<usize>),
    Sum(Var),
    Stack(Vec<Var>),
    Reshape(Var),
    BatchMatMulNt(Var, Var),
    PairwiseAdd(Var, Var),
    GatherLast(Var, Vec<usize>),
    SelectRows(Vec<bool>, Var, Var),
    Custom(Box<dyn CustomOp>, Vec<Var>),
}

struct Node<'p> {
    value: Cow<'p, Tensor>,
    op: Op,
    requires_grad: bool,
}

/// Records a forward computation for one loss.
///
/// Nodes are appended in evaluation order, so the node list is already a
/// topological order and the graph cannot contain cycles.
#[derive(Default)]
pub struct Tape<'p> {
    nodes: Vec<Node<'p>>,
}

/// Gradients of leaf parameters produced by [`Tape::backward`].
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    pub fn get(&self, var: Var) -> Option<&[f64]> {
        self.grads.get(var.0).and_then(|g| g.as_deref())
    }

    /// Adds the gradient of `var` (if any) into `param`'s gradient slot.
    pub fn accumulate_into(&self, var: Var, param: &mut Tensor) {
        if let Some(g) = self.get(var) {
            param.accumulate_grad(g);
        }
    }
}

fn shape_err(op: &'static str, a: &Tensor, b: &Tensor) -> TensorError {
    TensorError::Shape {
        op,
        left: a.shape.clone(),
        right: b.shape.clone(),
    }
}

fn owned(shape: Vec<usize>, data: Vec<f64>) -> Tensor {
    debug_assert_eq!(shape.iter().product::<usize>(), data.len());
    Tensor {
        shape,
        data,
        grad: None,
    }
}

fn last_dim(t: &Tensor) -> usize {
    *t.shape.last().unwrap_or(&1)
}

fn buf<'g>(grads: &'g mut [Option<Vec<f64>>], var: Var, len: usize) -> &'g mut Vec<f64> {
    grads[var.0].get_or_insert_with(|| vec![0.0; len])
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    dst.iter_mut().zip(src).for_each(|(d, s)| *d += s);
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub(crate) fn logsumexp(xs: &[f64]) -> f64 {
    let max = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    max + xs.iter().map(|x| (x - max).exp()).sum::<f64>().ln()
}

impl<'p> Tape<'p> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Cow<'p, Tensor>, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn push_op(&mut self, value: Tensor, op: Op, parents: &[Var]) -> Var {
        let requires_grad = parents.iter().any(|p| self.nodes[p.0].requires_grad);
        self.push(Cow::Owned(value), op, requires_grad)
    }

    /// Binds a trainable tensor by reference.
    pub fn param(&mut self, t: &'p Tensor) -> Var {
        self.push(Cow::Borrowed(t), Op::Leaf, true)
    }

    /// Records a value that receives no gradient.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(Cow::Owned(t), Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape.len() != 2 || tb.shape.len() != 2 || ta.shape[1] != tb.shape[0] {
            return Err(shape_err("matmul", ta, tb));
        }
        let (m, k, n) = (ta.shape[0], ta.shape[1], tb.shape[1]);
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, &ta.data, false, &tb.data, false, &mut out, 0.0);
        Ok(self.push_op(owned(vec![m, n], out), Op::MatMul(a, b), &[a, b]))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape != tb.shape {
            return Err(shape_err("add", ta, tb));
        }
        let data = ta.data.iter().zip(&tb.data).map(|(x, y)| x + y).collect();
        let shape = ta.shape.clone();
        Ok(self.push_op(owned(shape, data), Op::Add(a, b), &[a, b]))
    }

    /// Adds a vector along the last axis of `a`.
    pub fn add_bias(&mut self, a: Var, bias: Var) -> Result<Var, TensorError> {
        let (ta, tb) = (self.value(a), self.value(bias));
        if tb.shape.len() != 1 || last_dim(ta) != tb.shape[0] {
            return Err(shape_err("add_bias", ta, tb));
        }
        let n = tb.shape[0];
        let mut data = ta.data.clone();
        for row in data.chunks_mut(n) {
            add_into(row, &tb.data);
        }
        let shape = ta.shape.clone();
        Ok(self.push_op(owned(shape, data), Op::AddBias(a, bias), &[a, bias]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape != tb.shape {
            return Err(shape_err("mul", ta, tb));
        }
        let data = ta.data.iter().zip(&tb.data).map(|(x, y)| x * y).collect();
        let shape = ta.shape.clone();
        Ok(self.push_op(owned(shape, data), Op::Mul(a, b), &[a, b]))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let ta = self.value(a);
        let data = ta.data.iter().map(|x| x * c).collect();
        let shape = ta.shape.clone();
        self.push_op(owned(shape, data), Op::Scale(a, c), &[a])
    }

    /// Concatenates along the last axis; leading dimensions must agree.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var, TensorError> {
        let first = self.value(*parts.first().ok_or_else(|| TensorError::Argument {
            op: "concat",
            reason: "no inputs".into(),
        })?);
        let lead = first.shape[..first.shape.len().saturating_sub(1)].to_vec();
        let mut width = 0;
        for &p in parts {
            let t = self.value(p);
            if t.shape.is_empty() || t.shape[..t.shape.len() - 1] != lead[..] {
                return Err(shape_err("concat", first, t));
            }
            width += last_dim(t);
        }
        let rows: usize = lead.iter().product();
        let mut data = Vec::with_capacity(rows * width);
        for r in 0..rows {
            for &p in parts {
                let t = self.value(p);
                let d = last_dim(t);
                data.extend_from_slice(&t.data[r * d..(r + 1) * d]);
            }
        }
        let mut shape = lead;
        shape.push(width);
        Ok(self.push_op(owned(shape, data), Op::Concat(parts.to_vec()), parts))
    }

    /// `a[..., start..end]`.
    pub fn slice_last(&mut self, a: Var, start: usize, end: usize) -> Result<Var, TensorError> {
        let ta = self.value(a);
        let d = last_dim(ta);
        if ta.shape.is_empty() || start >= end || end > d {
            return Err(TensorError::Argument {
                op: "slice_last",
                reason: format!("range {start}..{end} outside last axis of {:?}", ta.shape),
            });
        }
        let w = end - start;
        let data: Vec<f64> = ta.data.chunks(d).flat_map(|row| &row[start..end]).copied().collect();
        let mut shape = ta.shape.clone();
        *shape.last_mut().unwrap() = w;
        Ok(self.push_op(owned(shape, data), Op::SliceLast(a, start), &[a]))
    }

    fn map(&mut self, a: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let ta = self.value(a);
        let data = ta.data.iter().map(|&x| f(x)).collect();
        let shape = ta.shape.clone();
        self.push_op(owned(shape, data), op, &[a])
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.map(a, sigmoid, Op::Sigmoid(a))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.map(a, f64::tanh, Op::Tanh(a))
    }

    /// Heaviside step in the forward pass (`x >= 0` maps to 1), identity
    /// in the backward pass.
    pub fn heaviside_st(&mut self, a: Var) -> Var {
        self.map(a, |x| if x >= 0.0 { 1.0 } else { 0.0 }, Op::HeavisideSt(a))
    }

    pub fn log_softmax(&mut self, a: Var) -> Var {
        let ta = self.value(a);
        let d = last_dim(ta);
        let mut data = ta.data.clone();
        for row in data.chunks_mut(d) {
            let lse = logsumexp(row);
            row.iter_mut().for_each(|x| *x -= lse);
        }
        let shape = ta.shape.clone();
        self.push_op(owned(shape, data), Op::LogSoftmax(a), &[a])
    }

    /// Reduces the last axis.
    pub fn logsumexp(&mut self, a: Var) -> Var {
        let ta = self.value(a);
        let d = last_dim(ta);
        let data = ta.data.chunks(d).map(logsumexp).collect();
        let shape = ta.shape[..ta.shape.len().saturating_sub(1)].to_vec();
        self.push_op(owned(shape, data), Op::LogSumExp(a), &[a])
    }

    /// Rows `ids` of a 2-D table, as an `[ids.len(), cols]` matrix.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var, TensorError> {
        let t = self.value(table);
        if t.shape.len() != 2 {
            return Err(TensorError::Argument {
                op: "embedding",
                reason: format!("table must be 2-D, got {:?}", t.shape),
            });
        }
        let (rows, d) = (t.shape[0], t.shape[1]);
        if let Some(bad) = ids.iter().find(|&&i| i >= rows) {
            return Err(TensorError::Argument {
                op: "embedding",
                reason: format!("id {bad} out of range for {rows} rows"),
            });
        }
        let data = ids.iter().flat_map(|&i| t.row(i)).copied().collect();
        let out = owned(vec![ids.len(), d], data);
        Ok(self.push_op(out, Op::Embedding(table, ids.to_vec()), &[table]))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data.iter().sum();
        self.push_op(Tensor::scalar(s), Op::Sum(a), &[a])
    }

    /// Stacks equally shaped `[B, rest..]` tensors into `[B, T, rest..]`.
    pub fn stack(&mut self, parts: &[Var]) -> Result<Var, TensorError> {
        let first = self.value(*parts.first().ok_or_else(|| TensorError::Argument {
            op: "stack",
            reason: "no inputs".into(),
        })?);
        if first.shape.is_empty() {
            return Err(TensorError::Argument {
                op: "stack",
                reason: "cannot stack scalars".into(),
            });
        }
        for &p in parts {
            if self.value(p).shape != first.shape {
                return Err(shape_err("stack", first, self.value(p)));
            }
        }
        let b = first.shape[0];
        let inner = first.numel() / b.max(1);
        let mut data = Vec::with_capacity(b * parts.len() * inner);
        for row in 0..b {
            for &p in parts {
                data.extend_from_slice(&self.value(p).data[row * inner..(row + 1) * inner]);
            }
        }
        let mut shape = vec![b, parts.len()];
        shape.extend_from_slice(&first.shape[1..]);
        Ok(self.push_op(owned(shape, data), Op::Stack(parts.to_vec()), parts))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var, TensorError> {
        let ta = self.value(a);
        if shape.iter().product::<usize>() != ta.numel() {
            return Err(TensorError::Shape {
                op: "reshape",
                left: ta.shape.clone(),
                right: shape.to_vec(),
            });
        }
        let data = ta.data.clone();
        Ok(self.push_op(owned(shape.to_vec(), data), Op::Reshape(a), &[a]))
    }

    /// `out[b] = a[b] · c[b]ᵀ` for `a: [B, M, K]`, `c: [B, N, K]`.
    pub fn batch_matmul_nt(&mut self, a: Var, c: Var) -> Result<Var, TensorError> {
        let (ta, tc) = (self.value(a), self.value(c));
        if ta.shape.len() != 3 || tc.shape.len() != 3 || ta.shape[0] != tc.shape[0] || ta.shape[2] != tc.shape[2] {
            return Err(shape_err("batch_matmul_nt", ta, tc));
        }
        let (bs, m, k, n) = (ta.shape[0], ta.shape[1], ta.shape[2], tc.shape[1]);
        let mut out = vec![0.0; bs * m * n];
        for b in 0..bs {
            gemm(
                m,
                k,
                n,
                &ta.data[b * m * k..(b + 1) * m * k],
                false,
                &tc.data[b * n * k..(b + 1) * n * k],
                true,
                &mut out[b * m * n..(b + 1) * m * n],
                0.0,
            );
        }
        Ok(self.push_op(owned(vec![bs, m, n], out), Op::BatchMatMulNt(a, c), &[a, c]))
    }

    /// `out[b, t, j, :] = a[b, t, :] + c[b, j, :]`.
    pub fn pairwise_add(&mut self, a: Var, c: Var) -> Result<Var, TensorError> {
        let (ta, tc) = (self.value(a), self.value(c));
        if ta.shape.len() != 3 || tc.shape.len() != 3 || ta.shape[0] != tc.shape[0] || ta.shape[2] != tc.shape[2] {
            return Err(shape_err("pairwise_add", ta, tc));
        }
        let (bs, t, j, h) = (ta.shape[0], ta.shape[1], tc.shape[1], ta.shape[2]);
        let mut out = Vec::with_capacity(bs * t * j * h);
        for b in 0..bs {
            for ti in 0..t {
                let ar = &ta.data[(b * t + ti) * h..(b * t + ti + 1) * h];
                for ji in 0..j {
                    let cr = &tc.data[(b * j + ji) * h..(b * j + ji + 1) * h];
                    out.extend(ar.iter().zip(cr).map(|(x, y)| x + y));
                }
            }
        }
        Ok(self.push_op(owned(vec![bs, t, j, h], out), Op::PairwiseAdd(a, c), &[a, c]))
    }

    /// Picks one entry per row of the last axis: `out[r] = a[r, ids[r]]`.
    pub fn gather_last(&mut self, a: Var, ids: &[usize]) -> Result<Var, TensorError> {
        let ta = self.value(a);
        let d = last_dim(ta);
        let rows = ta.numel() / d.max(1);
        if ta.shape.is_empty() || ids.len() != rows || ids.iter().any(|&i| i >= d) {
            return Err(TensorError::Argument {
                op: "gather_last",
                reason: format!("{} ids for {:?}", ids.len(), ta.shape),
            });
        }
        let data = ids.iter().enumerate().map(|(r, &i)| ta.data[r * d + i]).collect();
        let shape = ta.shape[..ta.shape.len() - 1].to_vec();
        Ok(self.push_op(owned(shape, data), Op::GatherLast(a, ids.to_vec()), &[a]))
    }

    /// Row-wise choice along the first axis: `mask[r] ? on[r] : off[r]`.
    pub fn select_rows(&mut self, mask: &[bool], on: Var, off: Var) -> Result<Var, TensorError> {
        let (ton, toff) = (self.value(on), self.value(off));
        if ton.shape != toff.shape || ton.shape.first() != Some(&mask.len()) {
            return Err(shape_err("select_rows", ton, toff));
        }
        let inner = ton.numel() / mask.len().max(1);
        let mut data = Vec::with_capacity(ton.numel());
        for (r, &m) in mask.iter().enumerate() {
            let src = if m { ton } else { toff };
            data.extend_from_slice(&src.data[r * inner..(r + 1) * inner]);
        }
        let shape = ton.shape.clone();
        Ok(self.push_op(owned(shape, data), Op::SelectRows(mask.to_vec(), on, off), &[on, off]))
    }

    pub fn custom(&mut self, op: Box<dyn CustomOp>, inputs: &[Var]) -> Result<Var, TensorError> {
        let values: Vec<&Tensor> = inputs.iter().map(|&v| self.value(v)).collect();
        let out = op.forward(&values)?;
        Ok(self.push_op(out, Op::Custom(op, inputs.to_vec()), inputs))
    }

    /// Reverse pass from a scalar `loss`. Returns the gradients of every
    /// leaf bound with [`Tape::param`].
    pub fn backward(&self, loss: Var) -> Result<Gradients, TensorError> {
        let root = &self.nodes[loss.0];
        if root.value.numel() != 1 || root.value.shape.iter().any(|&d| d != 1) {
            return Err(TensorError::Argument {
                op: "backward",
                reason: format!("loss must be scalar, got shape {:?}", root.value.shape),
            });
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if matches!(node.op, Op::Leaf) || !node.requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.propagate(node, &g, &mut grads);
        }
        for (g, node) in grads.iter_mut().zip(&self.nodes) {
            if !(matches!(node.op, Op::Leaf) && node.requires_grad) {
                *g = None;
            }
        }
        Ok(Gradients { grads })
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn propagate(&self, node: &Node<'p>, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let out = &*node.value;
        match &node.op {
            Op::Leaf => {}
            &Op::MatMul(a, b) => {
                let (ta, tb) = (self.value(a), self.value(b));
                let (m, k, n) = (ta.shape[0], ta.shape[1], tb.shape[1]);
                if self.needs(a) {
                    gemm(m, n, k, g, false, &tb.data, true, buf(grads, a, m * k), 1.0);
                }
                if self.needs(b) {
                    gemm(k, m, n, &ta.data, true, g, false, buf(grads, b, k * n), 1.0);
                }
            }
            &Op::Add(a, b) => {
                for v in [a, b] {
                    if self.needs(v) {
                        add_into(buf(grads, v, g.len()), g);
                    }
                }
            }
            &Op::AddBias(a, bias) => {
                if self.needs(a) {
                    add_into(buf(grads, a, g.len()), g);
                }
                if self.needs(bias) {
                    let n = self.value(bias).numel();
                    let gb = buf(grads, bias, n);
                    for row in g.chunks(n) {
                        add_into(gb, row);
                    }
                }
            }
            &Op::Mul(a, b) => {
                let (ta, tb) = (self.value(a), self.value(b));
                if self.needs(a) {
                    let ga = buf(grads, a, g.len());
                    for ((d, gi), y) in ga.iter_mut().zip(g).zip(&tb.data) {
                        *d += gi * y;
                    }
                }
                if self.needs(b) {
                    let gb = buf(grads, b, g.len());
                    for ((d, gi), x) in gb.iter_mut().zip(g).zip(&ta.data) {
                        *d += gi * x;
                    }
                }
            }
            &Op::Scale(a, c) => {
                let ga = buf(grads, a, g.len());
                for (d, gi) in ga.iter_mut().zip(g) {
                    *d += c * gi;
                }
            }
            Op::Concat(parts) => {
                let width = last_dim(out);
                let rows = out.numel() / width.max(1);
                let mut offset = 0;
                for &p in parts {
                    let d = last_dim(self.value(p));
                    if self.needs(p) {
                        let gp = buf(grads, p, rows * d);
                        for r in 0..rows {
                            add_into(&mut gp[r * d..(r + 1) * d], &g[r * width + offset..r * width + offset + d]);
                        }
                    }
                    offset += d;
                }
            }
            &Op::SliceLast(a, start) => {
                let ta = self.value(a);
                let (d, w) = (last_dim(ta), last_dim(out));
                let ga = buf(grads, a, ta.numel());
                for (dst, src) in ga.chunks_mut(d).zip(g.chunks(w)) {
                    add_into(&mut dst[start..start + w], src);
                }
            }
            &Op::Sigmoid(a) => {
                let ga = buf(grads, a, g.len());
                for ((d, gi), y) in ga.iter_mut().zip(g).zip(&out.data) {
                    *d += gi * y * (1.0 - y);
                }
            }
            &Op::Tanh(a) => {
                let ga = buf(grads, a, g.len());
                for ((d, gi), y) in ga.iter_mut().zip(g).zip(&out.data) {
                    *d += gi * (1.0 - y * y);
                }
            }
            &Op::HeavisideSt(a) => add_into(buf(grads, a, g.len()), g),
            &Op::LogSoftmax(a) => {
                let d = last_dim(out);
                let ga = buf(grads, a, g.len());
                for ((dst, gr), yr) in ga.chunks_mut(d).zip(g.chunks(d)).zip(out.data.chunks(d)) {
                    let total: f64 = gr.iter().sum();
                    for ((x, gi), y) in dst.iter_mut().zip(gr).zip(yr) {
                        *x += gi - y.exp() * total;
                    }
                }
            }
            &Op::LogSumExp(a) => {
                let ta = self.value(a);
                let d = last_dim(ta);
                let ga = buf(grads, a, ta.numel());
                for (r, (dst, xr)) in ga.chunks_mut(d).zip(ta.data.chunks(d)).enumerate() {
                    for (x, xi) in dst.iter_mut().zip(xr) {
                        *x += g[r] * (xi - out.data[r]).exp();
                    }
                }
            }
            Op::Embedding(table, ids) => {
                let tt = self.value(*table);
                let d = tt.shape[1];
                let gt = buf(grads, *table, tt.numel());
                for (r, &id) in ids.iter().enumerate() {
                    add_into(&mut gt[id * d..(id + 1) * d], &g[r * d..(r + 1) * d]);
                }
            }
            &Op::Sum(a) => {
                let ga = buf(grads, a, self.value(a).numel());
                ga.iter_mut().for_each(|x| *x += g[0]);
            }
            Op::Stack(parts) => {
                let first = self.value(parts[0]);
                let b = first.shape[0];
                let inner = first.numel() / b.max(1);
                let t = parts.len();
                for (ti, &p) in parts.iter().enumerate() {
                    if !self.needs(p) {
                        continue;
                    }
                    let gp = buf(grads, p, b * inner);
                    for row in 0..b {
                        let src = &g[(row * t + ti) * inner..(row * t + ti + 1) * inner];
                        add_into(&mut gp[row * inner..(row + 1) * inner], src);
                    }
                }
            }
            &Op::Reshape(a) => add_into(buf(grads, a, g.len()), g),
            &Op::BatchMatMulNt(a, c) => {
                let (ta, tc) = (self.value(a), self.value(c));
                let (bs, m, k, n) = (ta.shape[0], ta.shape[1], ta.shape[2], tc.shape[1]);
                if self.needs(a) {
                    let ga = buf(grads, a, bs * m * k);
                    for b in 0..bs {
                        gemm(
                            m,
                            n,
                            k,
                            &g[b * m * n..(b + 1) * m * n],
                            false,
                            &tc.data[b * n * k..(b + 1) * n * k],
                            false,
                            &mut ga[b * m * k..(b + 1) * m * k],
                            1.0,
                        );
                    }
                }
                if self.needs(c) {
                    let gc = buf(grads, c, bs * n * k);
                    for b in 0..bs {
                        gemm(
                            n,
                            m,
                            k,
                            &g[b * m * n..(b + 1) * m * n],
                            true,
                            &ta.data[b * m * k..(b + 1) * m * k],
                            false,
                            &mut gc[b * n * k..(b + 1) * n * k],
                            1.0,
                        );
                    }
                }
            }
            &Op::PairwiseAdd(a, c) => {
                let (ta, tc) = (self.value(a), self.value(c));
                let (bs, t, j, h) = (ta.shape[0], ta.shape[1], tc.shape[1], ta.shape[2]);
                if self.needs(a) {
                    let ga = buf(grads, a, ta.numel());
                    for b in 0..bs {
                        for ti in 0..t {
                            let dst = &mut ga[(b * t + ti) * h..(b * t + ti + 1) * h];
                            for ji in 0..j {
                                let base = ((b * t + ti) * j + ji) * h;
                                add_into(dst, &g[base..base + h]);
                            }
                        }
                    }
                }
                if self.needs(c) {
                    let gc = buf(grads, c, tc.numel());
                    for b in 0..bs {
                        for ti in 0..t {
                            for ji in 0..j {
                                let base = ((b * t + ti) * j + ji) * h;
                                add_into(&mut gc[(b * j + ji) * h..(b * j + ji + 1) * h], &g[base..base + h]);
                            }
                        }
                    }
                }
            }
            Op::GatherLast(a, ids) => {
                let ta = self.value(*a);
                let d = last_dim(ta);
                let ga = buf(grads, *a, ta.numel());
                for (r, &i) in ids.iter().enumerate() {
                    ga[r * d + i] += g[r];
                }
            }
            Op::SelectRows(mask, on, off) => {
                let inner = g.len() / mask.len().max(1);
                for (v, want) in [(*on, true), (*off, false)] {
                    if !self.needs(v) {
                        continue;
                    }
                    let gv = buf(grads, v, g.len());
                    for (r, &m) in mask.iter().enumerate() {
                        if m == want {
                            add_into(&mut gv[r * inner..(r + 1) * inner], &g[r * inner..(r + 1) * inner]);
                        }
                    }
                }
            }
            Op::Custom(op, inputs) => {
                let values: Vec<&Tensor> = inputs.iter().map(|&v| self.value(v)).collect();
                let input_grads = op.backward(&values, out, g);
                for (&v, gi) in inputs.iter().zip(input_grads) {
                    if let (true, Some(gi)) = (self.needs(v), gi) {
                        add_into(buf(grads, v, gi.len()), &gi);
                    }
                }
            }
        }
    }
}
