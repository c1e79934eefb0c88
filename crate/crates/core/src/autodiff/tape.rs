use std::collections::HashMap;

use crate::autodiff::params::{ParamId, ParamStore};
use crate::error::{Error, Result};
use crate::geometry::{self, BoxCxCyWh};
use crate::tensor::{broadcast_offsets, broadcast_shape, broadcast_strides, gemm, numel, strides, Tensor};

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(pub(crate) usize);

#[derive(Debug, Clone, Copy, PartialEq)]
enum BinaryKind {
    Add,
    Sub,
    Mul,
    Div,
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum UnaryKind {
    Relu,
    Sigmoid,
    Abs,
    Exp,
    Log,
    Affine { scale: f64, shift: f64 },
}

#[derive(Debug)]
enum Op {
    Leaf,
    Param,
    Binary(BinaryKind, Var, Var),
    MatMul(Var, Var),
    Unary(UnaryKind, Var),
    Softmax { x: Var, axis: usize },
    LogSoftmax { x: Var, axis: usize },
    LayerNorm { x: Var, gain: Var, bias: Var, xhat: Vec<f64>, inv_std: Vec<f64> },
    Sum(Var),
    MeanAxis { x: Var, axis: usize },
    Reshape(Var),
    Permute { x: Var, perm: Vec<usize> },
    Narrow { x: Var, axis: usize, start: usize },
    Concat { xs: Vec<Var>, axis: usize },
    GatherRows { table: Var, ids: Vec<usize> },
    Pick { x: Var, targets: Vec<usize> },
    GiouLoss { pred: Var, gold: Vec<BoxCxCyWh> },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Ordered record of executed primitive operations.
///
/// Nodes are appended in execution order, so walking indices backwards is a
/// reverse topological order.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    params: HashMap<ParamId, Var>,
}

/// `(outer, axis_len, inner)` decomposition of a shape around `axis`.
fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = numel(&shape[..axis]);
    let inner = numel(&shape[axis + 1..]);
    (outer, shape[axis], inner)
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, op, requires_grad });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// A value that takes no gradient.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// A leaf that records a gradient (used for probing inputs).
    pub fn leaf(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, true)
    }

    /// Bind a trainable parameter; repeated calls return the same node.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        if let Some(&v) = self.params.get(&id) {
            return v;
        }
        let v = self.push(store.value(id).clone(), Op::Param, true);
        self.params.insert(id, v);
        v
    }

    pub(crate) fn param_vars(&self) -> impl Iterator<Item = (ParamId, Var)> + '_ {
        self.params.iter().map(|(&p, &v)| (p, v))
    }

    fn binary(&mut self, kind: BinaryKind, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let f = |x: f64, y: f64| match kind {
            BinaryKind::Add => x + y,
            BinaryKind::Sub => x - y,
            BinaryKind::Mul => x * y,
            BinaryKind::Div => x / y,
        };
        let value = if ta.shape() == tb.shape() {
            let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
            Tensor::from_parts(ta.shape().to_vec(), data)
        } else {
            let op = match kind {
                BinaryKind::Add => "add",
                BinaryKind::Sub => "sub",
                BinaryKind::Mul => "mul",
                BinaryKind::Div => "div",
            };
            let out = broadcast_shape(op, ta.shape(), tb.shape())?;
            let oa = broadcast_offsets(&out, &broadcast_strides(ta.shape(), &out));
            let ob = broadcast_offsets(&out, &broadcast_strides(tb.shape(), &out));
            let data = oa
                .iter()
                .zip(&ob)
                .map(|(&i, &j)| f(ta.data()[i], tb.data()[j]))
                .collect();
            Tensor::from_parts(out, data)
        };
        let rg = self.rg(&[a, b]);
        Ok(self.push(value, Op::Binary(kind, a, b), rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryKind::Add, a, b)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryKind::Sub, a, b)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryKind::Mul, a, b)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryKind::Div, a, b)
    }

    fn unary(&mut self, kind: UnaryKind, x: Var) -> Var {
        let f = |v: f64| match kind {
            UnaryKind::Relu => v.max(0.0),
            UnaryKind::Sigmoid => sigmoid(v),
            UnaryKind::Abs => v.abs(),
            UnaryKind::Exp => v.exp(),
            UnaryKind::Log => v.ln(),
            UnaryKind::Affine { scale, shift } => scale * v + shift,
        };
        let t = self.value(x);
        let value = Tensor::from_parts(t.shape().to_vec(), t.data().iter().map(|&v| f(v)).collect());
        let rg = self.rg(&[x]);
        self.push(value, Op::Unary(kind, x), rg)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.unary(UnaryKind::Relu, x)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(UnaryKind::Sigmoid, x)
    }

    pub fn abs(&mut self, x: Var) -> Var {
        self.unary(UnaryKind::Abs, x)
    }

    pub fn exp(&mut self, x: Var) -> Var {
        self.unary(UnaryKind::Exp, x)
    }

    pub fn log(&mut self, x: Var) -> Var {
        self.unary(UnaryKind::Log, x)
    }

    /// `scale * x + shift`.
    pub fn affine(&mut self, x: Var, scale: f64, shift: f64) -> Var {
        self.unary(UnaryKind::Affine { scale, shift }, x)
    }

    pub fn scale(&mut self, x: Var, scale: f64) -> Var {
        self.affine(x, scale, 0.0)
    }

    /// Batched matrix product over the last two axes; leading axes broadcast.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let (sa, sb) = (ta.shape(), tb.shape());
        let mismatch = || Error::Shape {
            op: "matmul",
            lhs: sa.to_vec(),
            rhs: sb.to_vec(),
        };
        if sa.len() < 2 || sb.len() < 2 {
            return Err(mismatch());
        }
        let (m, k) = (sa[sa.len() - 2], sa[sa.len() - 1]);
        let (k2, n) = (sb[sb.len() - 2], sb[sb.len() - 1]);
        if k != k2 {
            return Err(mismatch());
        }
        let (ba, bb) = (&sa[..sa.len() - 2], &sb[..sb.len() - 2]);
        let batch = broadcast_shape("matmul", ba, bb).map_err(|_| mismatch())?;
        let oa = broadcast_offsets(&batch, &broadcast_strides(ba, &batch));
        let ob = broadcast_offsets(&batch, &broadcast_strides(bb, &batch));
        let mut data = vec![0.0; oa.len() * m * n];
        for (i, (&ia, &ib)) in oa.iter().zip(&ob).enumerate() {
            gemm(
                m,
                k,
                n,
                &ta.data()[ia * m * k..],
                false,
                &tb.data()[ib * k * n..],
                false,
                &mut data[i * m * n..(i + 1) * m * n],
                false,
            );
        }
        let mut shape = batch;
        shape.extend([m, n]);
        let rg = self.rg(&[a, b]);
        Ok(self.push(Tensor::from_parts(shape, data), Op::MatMul(a, b), rg))
    }

    fn check_axis(&self, x: Var, axis: usize, op: &'static str) -> Result<()> {
        if axis >= self.shape(x).len() {
            return Err(Error::Shape {
                op,
                lhs: self.shape(x).to_vec(),
                rhs: vec![axis],
            });
        }
        Ok(())
    }

    /// Numerically stable softmax along `axis`.
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.check_axis(x, axis, "softmax")?;
        let t = self.value(x);
        let value = Tensor::from_parts(t.shape().to_vec(), softmax_along(t.data(), t.shape(), axis, false));
        let rg = self.rg(&[x]);
        Ok(self.push(value, Op::Softmax { x, axis }, rg))
    }

    pub fn log_softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.check_axis(x, axis, "log_softmax")?;
        let t = self.value(x);
        let value = Tensor::from_parts(t.shape().to_vec(), softmax_along(t.data(), t.shape(), axis, true));
        let rg = self.rg(&[x]);
        Ok(self.push(value, Op::LogSoftmax { x, axis }, rg))
    }

    /// Layer normalization over the last axis with affine `gain`/`bias` of that length.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let t = self.value(x);
        let d = *t.shape().last().expect("rank >= 1");
        for p in [gain, bias] {
            if self.shape(p) != [d] {
                return Err(Error::Shape {
                    op: "layer_norm",
                    lhs: t.shape().to_vec(),
                    rhs: self.shape(p).to_vec(),
                });
            }
        }
        let (g, b) = (self.value(gain).data(), self.value(bias).data());
        let rows = t.numel() / d;
        let mut xhat = vec![0.0; t.numel()];
        let mut inv_std = vec![0.0; rows];
        let mut out = vec![0.0; t.numel()];
        for r in 0..rows {
            let xs = &t.data()[r * d..(r + 1) * d];
            let mean = xs.iter().sum::<f64>() / d as f64;
            let var = xs.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let is = 1.0 / (var + eps).sqrt();
            inv_std[r] = is;
            for j in 0..d {
                let h = (xs[j] - mean) * is;
                xhat[r * d + j] = h;
                out[r * d + j] = h * g[j] + b[j];
            }
        }
        let value = Tensor::from_parts(t.shape().to_vec(), out);
        let rg = self.rg(&[x, gain, bias]);
        Ok(self.push(value, Op::LayerNorm { x, gain, bias, xhat, inv_std }, rg))
    }

    /// Sum of all elements as a `[1]` tensor.
    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().sum();
        let rg = self.rg(&[x]);
        self.push(Tensor::scalar(s), Op::Sum(x), rg)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let n = self.value(x).numel() as f64;
        let s = self.sum(x);
        self.scale(s, 1.0 / n)
    }

    /// Mean over `axis`, removing it (a rank-1 input yields shape `[1]`).
    pub fn mean_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.check_axis(x, axis, "mean_axis")?;
        let t = self.value(x);
        let (outer, n, inner) = split_axis(t.shape(), axis);
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for j in 0..n {
                let base = (o * n + j) * inner;
                for i in 0..inner {
                    out[o * inner + i] += t.data()[base + i];
                }
            }
        }
        out.iter_mut().for_each(|v| *v /= n as f64);
        let mut shape: Vec<usize> = t.shape().to_vec();
        shape.remove(axis);
        if shape.is_empty() {
            shape.push(1);
        }
        let rg = self.rg(&[x]);
        Ok(self.push(Tensor::from_parts(shape, out), Op::MeanAxis { x, axis }, rg))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(x).reshape(shape)?;
        let rg = self.rg(&[x]);
        Ok(self.push(value, Op::Reshape(x), rg))
    }

    /// Reorder axes: output axis `i` is input axis `perm[i]`.
    pub fn permute(&mut self, x: Var, perm: &[usize]) -> Result<Var> {
        let t = self.value(x);
        let rank = t.rank();
        let mut seen = vec![false; rank];
        if perm.len() != rank || perm.iter().any(|&p| p >= rank || std::mem::replace(&mut seen[p], true)) {
            return Err(Error::Shape {
                op: "permute",
                lhs: t.shape().to_vec(),
                rhs: perm.to_vec(),
            });
        }
        let out_shape: Vec<usize> = perm.iter().map(|&p| t.shape()[p]).collect();
        let in_strides = strides(t.shape());
        let permuted: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
        let src = broadcast_offsets(&out_shape, &permuted);
        let data = src.iter().map(|&i| t.data()[i]).collect();
        let rg = self.rg(&[x]);
        Ok(self.push(
            Tensor::from_parts(out_shape, data),
            Op::Permute { x, perm: perm.to_vec() },
            rg,
        ))
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let r = self.shape(x).len();
        if r < 2 {
            return Err(Error::Shape {
                op: "transpose",
                lhs: self.shape(x).to_vec(),
                rhs: vec![],
            });
        }
        let mut perm: Vec<usize> = (0..r).collect();
        perm.swap(r - 2, r - 1);
        self.permute(x, &perm)
    }

    /// Slice `len` entries of `axis` starting at `start`.
    pub fn narrow(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        self.check_axis(x, axis, "narrow")?;
        let t = self.value(x);
        if len == 0 || start + len > t.shape()[axis] {
            return Err(Error::Shape {
                op: "narrow",
                lhs: t.shape().to_vec(),
                rhs: vec![axis, start, len],
            });
        }
        let (outer, n, inner) = split_axis(t.shape(), axis);
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * n + start) * inner;
            data.extend_from_slice(&t.data()[base..base + len * inner]);
        }
        let mut shape = t.shape().to_vec();
        shape[axis] = len;
        let rg = self.rg(&[x]);
        Ok(self.push(Tensor::from_parts(shape, data), Op::Narrow { x, axis, start }, rg))
    }

    pub fn concat(&mut self, xs: &[Var], axis: usize) -> Result<Var> {
        let first = xs.first().ok_or_else(|| Error::Contract("concat of nothing".into()))?;
        self.check_axis(*first, axis, "concat")?;
        let base = self.shape(*first).to_vec();
        for &v in xs {
            let s = self.shape(v);
            let compatible = s.len() == base.len()
                && s.iter().zip(&base).enumerate().all(|(i, (a, b))| i == axis || a == b);
            if !compatible {
                return Err(Error::Shape {
                    op: "concat",
                    lhs: base,
                    rhs: s.to_vec(),
                });
            }
        }
        let total: usize = xs.iter().map(|&v| self.shape(v)[axis]).sum();
        let (outer, _, inner) = split_axis(&base, axis);
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &v in xs {
                let t = self.value(v);
                let n = t.shape()[axis];
                data.extend_from_slice(&t.data()[o * n * inner..(o + 1) * n * inner]);
            }
        }
        let mut shape = base;
        shape[axis] = total;
        let rg = self.rg(xs);
        Ok(self.push(
            Tensor::from_parts(shape, data),
            Op::Concat { xs: xs.to_vec(), axis },
            rg,
        ))
    }

    /// Row lookup into a `[rows, d]` table (embedding).
    pub fn gather_rows(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let t = self.value(table);
        if t.rank() != 2 {
            return Err(Error::Shape {
                op: "gather_rows",
                lhs: t.shape().to_vec(),
                rhs: vec![ids.len()],
            });
        }
        let (rows, d) = (t.shape()[0], t.shape()[1]);
        if let Some(&bad) = ids.iter().find(|&&i| i >= rows) {
            return Err(Error::Data(format!("index {bad} out of range for table with {rows} rows")));
        }
        if ids.is_empty() {
            return Err(Error::Contract("gather_rows with no ids".into()));
        }
        let mut data = Vec::with_capacity(ids.len() * d);
        for &i in ids {
            data.extend_from_slice(t.row(i));
        }
        let rg = self.rg(&[table]);
        Ok(self.push(
            Tensor::from_parts(vec![ids.len(), d], data),
            Op::GatherRows { table, ids: ids.to_vec() },
            rg,
        ))
    }

    /// `out[i] = x[i, targets[i]]` for a `[N, C]` input.
    pub fn pick(&mut self, x: Var, targets: &[usize]) -> Result<Var> {
        let t = self.value(x);
        if t.rank() != 2 || t.shape()[0] != targets.len() || targets.iter().any(|&c| c >= t.shape()[1]) {
            return Err(Error::Shape {
                op: "pick",
                lhs: t.shape().to_vec(),
                rhs: targets.to_vec(),
            });
        }
        let data = targets.iter().enumerate().map(|(i, &c)| t.row(i)[c]).collect();
        let rg = self.rg(&[x]);
        Ok(self.push(
            Tensor::from_parts(vec![targets.len()], data),
            Op::Pick { x, targets: targets.to_vec() },
            rg,
        ))
    }

    /// Per-row `1 - giou(pred_i, gold_i)` for `[K, 4]` predictions in cxcywh form.
    pub fn giou_loss(&mut self, pred: Var, gold: &[BoxCxCyWh]) -> Result<Var> {
        let t = self.value(pred);
        if t.shape() != [gold.len(), 4] {
            return Err(Error::Shape {
                op: "giou_loss",
                lhs: t.shape().to_vec(),
                rhs: vec![gold.len(), 4],
            });
        }
        let data = gold
            .iter()
            .enumerate()
            .map(|(i, g)| geometry::giou_loss(&BoxCxCyWh::from_slice(t.row(i)), g))
            .collect();
        let rg = self.rg(&[pred]);
        Ok(self.push(
            Tensor::from_parts(vec![gold.len()], data),
            Op::GiouLoss { pred, gold: gold.to_vec() },
            rg,
        ))
    }

    /// Reverse-mode sweep from a scalar root.
    pub fn backward(&self, root: Var) -> Result<Gradients> {
        let rv = self.value(root);
        if rv.numel() != 1 {
            return Err(Error::Contract(format!(
                "backward requires a scalar root, got shape {:?}",
                rv.shape()
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[root.0] = Some(vec![1.0]);
        for idx in (0..=root.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.propagate(node, &g, &mut grads);
            grads[idx] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn propagate(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let out = &node.value;
        match &node.op {
            Op::Leaf | Op::Param => {}
            Op::Binary(kind, a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let same = ta.shape() == tb.shape();
                let oa = (!same).then(|| broadcast_offsets(out.shape(), &broadcast_strides(ta.shape(), out.shape())));
                let ob = (!same).then(|| broadcast_offsets(out.shape(), &broadcast_strides(tb.shape(), out.shape())));
                let ia = |i: usize| oa.as_ref().map_or(i, |o| o[i]);
                let ib = |i: usize| ob.as_ref().map_or(i, |o| o[i]);
                let (da, db) = (ta.data(), tb.data());
                if self.requires_grad(*a) {
                    let ga = slot(grads, *a, ta.numel());
                    for (i, &gi) in g.iter().enumerate() {
                        ga[ia(i)] += match kind {
                            BinaryKind::Add | BinaryKind::Sub => gi,
                            BinaryKind::Mul => gi * db[ib(i)],
                            BinaryKind::Div => gi / db[ib(i)],
                        };
                    }
                }
                if self.requires_grad(*b) {
                    let gb = slot(grads, *b, tb.numel());
                    for (i, &gi) in g.iter().enumerate() {
                        gb[ib(i)] += match kind {
                            BinaryKind::Add => gi,
                            BinaryKind::Sub => -gi,
                            BinaryKind::Mul => gi * da[ia(i)],
                            BinaryKind::Div => -gi * da[ia(i)] / (db[ib(i)] * db[ib(i)]),
                        };
                    }
                }
            }
            Op::MatMul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let (sa, sb) = (ta.shape(), tb.shape());
                let (m, k, n) = (sa[sa.len() - 2], sa[sa.len() - 1], sb[sb.len() - 1]);
                let (ba, bb) = (&sa[..sa.len() - 2], &sb[..sb.len() - 2]);
                let batch = &out.shape()[..out.rank() - 2];
                let oa = broadcast_offsets(batch, &broadcast_strides(ba, batch));
                let ob = broadcast_offsets(batch, &broadcast_strides(bb, batch));
                if self.requires_grad(*a) {
                    let ga = slot(grads, *a, ta.numel());
                    for (i, (&ia, &ib)) in oa.iter().zip(&ob).enumerate() {
                        gemm(
                            m,
                            n,
                            k,
                            &g[i * m * n..],
                            false,
                            &tb.data()[ib * k * n..],
                            true,
                            &mut ga[ia * m * k..(ia + 1) * m * k],
                            true,
                        );
                    }
                }
                if self.requires_grad(*b) {
                    let gb = slot(grads, *b, tb.numel());
                    for (i, (&ia, &ib)) in oa.iter().zip(&ob).enumerate() {
                        gemm(
                            k,
                            m,
                            n,
                            &ta.data()[ia * m * k..],
                            true,
                            &g[i * m * n..],
                            false,
                            &mut gb[ib * k * n..(ib + 1) * k * n],
                            true,
                        );
                    }
                }
            }
            Op::Unary(kind, x) => {
                let tx = self.value(*x);
                let gx = slot(grads, *x, tx.numel());
                for i in 0..g.len() {
                    let xi = tx.data()[i];
                    let yi = out.data()[i];
                    gx[i] += g[i]
                        * match kind {
                            UnaryKind::Relu => {
                                if xi > 0.0 {
                                    1.0
                                } else {
                                    0.0
                                }
                            }
                            UnaryKind::Sigmoid => yi * (1.0 - yi),
                            UnaryKind::Abs => {
                                if xi > 0.0 {
                                    1.0
                                } else if xi < 0.0 {
                                    -1.0
                                } else {
                                    0.0
                                }
                            }
                            UnaryKind::Exp => yi,
                            UnaryKind::Log => 1.0 / xi,
                            UnaryKind::Affine { scale, .. } => *scale,
                        };
                }
            }
            Op::Softmax { x, axis } => {
                let (outer, n, inner) = split_axis(out.shape(), *axis);
                let gx = slot(grads, *x, out.numel());
                let y = out.data();
                for o in 0..outer {
                    for i in 0..inner {
                        let at = |j: usize| (o * n + j) * inner + i;
                        let dot: f64 = (0..n).map(|j| g[at(j)] * y[at(j)]).sum();
                        for j in 0..n {
                            gx[at(j)] += y[at(j)] * (g[at(j)] - dot);
                        }
                    }
                }
            }
            Op::LogSoftmax { x, axis } => {
                let (outer, n, inner) = split_axis(out.shape(), *axis);
                let gx = slot(grads, *x, out.numel());
                let y = out.data();
                for o in 0..outer {
                    for i in 0..inner {
                        let at = |j: usize| (o * n + j) * inner + i;
                        let total: f64 = (0..n).map(|j| g[at(j)]).sum();
                        for j in 0..n {
                            gx[at(j)] += g[at(j)] - y[at(j)].exp() * total;
                        }
                    }
                }
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            } => {
                let d = *out.shape().last().unwrap();
                let rows = out.numel() / d;
                let gv = self.value(*gain).data();
                if self.requires_grad(*gain) {
                    let gg = slot(grads, *gain, d);
                    for r in 0..rows {
                        for j in 0..d {
                            gg[j] += g[r * d + j] * xhat[r * d + j];
                        }
                    }
                }
                if self.requires_grad(*bias) {
                    let gbias = slot(grads, *bias, d);
                    for r in 0..rows {
                        for j in 0..d {
                            gbias[j] += g[r * d + j];
                        }
                    }
                }
                if self.requires_grad(*x) {
                    let gx = slot(grads, *x, out.numel());
                    for r in 0..rows {
                        let row = r * d..(r + 1) * d;
                        let dxhat: Vec<f64> = g[row.clone()].iter().zip(gv).map(|(a, b)| a * b).collect();
                        let h = &xhat[row];
                        let mean_d = dxhat.iter().sum::<f64>() / d as f64;
                        let mean_dh = dxhat.iter().zip(h).map(|(a, b)| a * b).sum::<f64>() / d as f64;
                        for j in 0..d {
                            gx[r * d + j] += inv_std[r] * (dxhat[j] - mean_d - h[j] * mean_dh);
                        }
                    }
                }
            }
            Op::Sum(x) => {
                let n = self.value(*x).numel();
                slot(grads, *x, n).iter_mut().for_each(|v| *v += g[0]);
            }
            Op::MeanAxis { x, axis } => {
                let tx = self.value(*x);
                let (outer, n, inner) = split_axis(tx.shape(), *axis);
                let gx = slot(grads, *x, tx.numel());
                for o in 0..outer {
                    for j in 0..n {
                        for i in 0..inner {
                            gx[(o * n + j) * inner + i] += g[o * inner + i] / n as f64;
                        }
                    }
                }
            }
            Op::Reshape(x) => {
                let gx = slot(grads, *x, g.len());
                gx.iter_mut().zip(g).for_each(|(a, b)| *a += b);
            }
            Op::Permute { x, perm } => {
                let tx = self.value(*x);
                let in_strides = strides(tx.shape());
                let permuted: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
                let src = broadcast_offsets(out.shape(), &permuted);
                let gx = slot(grads, *x, tx.numel());
                for (i, &s) in src.iter().enumerate() {
                    gx[s] += g[i];
                }
            }
            Op::Narrow { x, axis, start } => {
                let tx = self.value(*x);
                let (outer, n, inner) = split_axis(tx.shape(), *axis);
                let len = out.shape()[*axis];
                let gx = slot(grads, *x, tx.numel());
                for o in 0..outer {
                    let base = (o * n + start) * inner;
                    for i in 0..len * inner {
                        gx[base + i] += g[o * len * inner + i];
                    }
                }
            }
            Op::Concat { xs, axis } => {
                let (outer, total, inner) = split_axis(out.shape(), *axis);
                let mut offset = 0;
                for &v in xs {
                    let n = self.shape(v)[*axis];
                    if self.requires_grad(v) {
                        let gx = slot(grads, v, outer * n * inner);
                        for o in 0..outer {
                            let src = (o * total + offset) * inner;
                            for i in 0..n * inner {
                                gx[o * n * inner + i] += g[src + i];
                            }
                        }
                    }
                    offset += n;
                }
            }
            Op::GatherRows { table, ids } => {
                let tt = self.value(*table);
                let d = tt.shape()[1];
                let gt = slot(grads, *table, tt.numel());
                for (r, &id) in ids.iter().enumerate() {
                    for j in 0..d {
                        gt[id * d + j] += g[r * d + j];
                    }
                }
            }
            Op::Pick { x, targets } => {
                let tx = self.value(*x);
                let c = tx.shape()[1];
                let gx = slot(grads, *x, tx.numel());
                for (i, &t) in targets.iter().enumerate() {
                    gx[i * c + t] += g[i];
                }
            }
            Op::GiouLoss { pred, gold } => {
                let tp = self.value(*pred);
                let gp = slot(grads, *pred, tp.numel());
                for (i, gb) in gold.iter().enumerate() {
                    let (_, d) = geometry::giou_loss_with_grad(&BoxCxCyWh::from_slice(tp.row(i)), gb);
                    for j in 0..4 {
                        gp[i * 4 + j] += g[i] * d[j];
                    }
                }
            }
        }
    }
}

fn slot(grads: &mut [Option<Vec<f64>>], v: Var, n: usize) -> &mut Vec<f64> {
    grads[v.0].get_or_insert_with(|| vec![0.0; n])
}

pub(crate) fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

fn softmax_along(x: &[f64], shape: &[usize], axis: usize, log: bool) -> Vec<f64> {
    let (outer, n, inner) = split_axis(shape, axis);
    let mut out = vec![0.0; x.len()];
    for o in 0..outer {
        for i in 0..inner {
            let at = |j: usize| (o * n + j) * inner + i;
            let max = (0..n).map(|j| x[at(j)]).fold(f64::NEG_INFINITY, f64::max);
            let total: f64 = (0..n).map(|j| (x[at(j)] - max).exp()).sum();
            for j in 0..n {
                let z = x[at(j)] - max;
                out[at(j)] = if log { z - total.ln() } else { z.exp() / total };
            }
        }
    }
    out
}

/// Gradients produced by [`Tape::backward`], indexed by node.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    /// `d(root)/d(v)`, or `None` when `v` is unreachable or constant.
    pub fn wrt(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Add `scale * grad` into each bound parameter's gradient buffer.
    pub fn accumulate(&self, tape: &Tape, store: &mut ParamStore, scale: f64) {
        for (id, v) in tape.param_vars() {
            if let Some(g) = self.wrt(v) {
                store
                    .grad_mut(id)
                    .iter_mut()
                    .zip(g)
                    .for_each(|(a, b)| *a += scale * b);
            }
        }
    }
}
