//! Wengert tape: operations are recorded during the forward pass and replayed
//! in reverse to compute gradients.
//!
//! Broadcasting is limited to two forms for binary elementwise ops: a
//! single-element right operand, or a right operand whose shape is a suffix of
//! the left operand's shape (the row-vector-over-matrix case and its batched
//! generalisation). Everything else must be spelled out with an explicit op.

use std::cell::{Cell, RefCell};
use std::sync::Arc;

use rayon::prelude::*;

use crate::error::{DiffError, Result};
use crate::gemm::gemm;
use crate::param::{ParamId, ParamStore};
use crate::tensor::Tensor;

type NodeId = usize;

#[derive(Debug, Clone, Copy)]
enum BinKind {
    Add,
    Sub,
    Mul,
}

#[derive(Debug)]
enum Op {
    Leaf,
    Param(ParamId),
    Binary {
        kind: BinKind,
        a: NodeId,
        b: NodeId,
    },
    Scale(NodeId, f64),
    AddScalar(NodeId),
    Tanh(NodeId),
    Sigmoid(NodeId),
    Exp(NodeId),
    Relu(NodeId),
    Abs(NodeId),
    Powf(NodeId, f64),
    MatMul(NodeId, NodeId),
    BatchMatMul(NodeId, NodeId),
    TransposeLast2(NodeId),
    Permute01(NodeId),
    Reshape(NodeId),
    ConcatLast(Vec<NodeId>),
    SliceLast {
        a: NodeId,
        start: usize,
    },
    SumAll(NodeId),
    MeanAll(NodeId),
    SumLast(NodeId),
    MaxLast {
        a: NodeId,
        argmax: Vec<usize>,
    },
    SoftmaxLast(NodeId),
    LayerNorm {
        x: NodeId,
        gain: NodeId,
        bias: NodeId,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    AddRows(NodeId, NodeId),
    ScaleRows(NodeId, NodeId),
    ScaleCols(NodeId, NodeId),
    Mask {
        a: NodeId,
        keep: Vec<bool>,
    },
    CosineRows {
        a: NodeId,
        unit: Vec<f64>,
        norms: Vec<f64>,
    },
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Param(_) => "param",
            Op::Binary { kind, .. } => match kind {
                BinKind::Add => "add",
                BinKind::Sub => "sub",
                BinKind::Mul => "mul",
            },
            Op::Scale(..) => "scale",
            Op::AddScalar(_) => "add_scalar",
            Op::Tanh(_) => "tanh",
            Op::Sigmoid(_) => "sigmoid",
            Op::Exp(_) => "exp",
            Op::Relu(_) => "relu",
            Op::Abs(_) => "abs",
            Op::Powf(..) => "powf",
            Op::MatMul(..) => "matmul",
            Op::BatchMatMul(..) => "bmm",
            Op::TransposeLast2(_) => "transpose",
            Op::Permute01(_) => "permute01",
            Op::Reshape(_) => "reshape",
            Op::ConcatLast(_) => "concat",
            Op::SliceLast { .. } => "slice",
            Op::SumAll(_) => "sum",
            Op::MeanAll(_) => "mean",
            Op::SumLast(_) => "sum_last",
            Op::MaxLast { .. } => "max_last",
            Op::SoftmaxLast(_) => "softmax",
            Op::LayerNorm { .. } => "layer_norm",
            Op::AddRows(..) => "add_rows",
            Op::ScaleRows(..) => "scale_rows",
            Op::ScaleCols(..) => "scale_cols",
            Op::Mask { .. } => "mask",
            Op::CosineRows { .. } => "cosine_rows",
        }
    }
}

struct Node {
    value: Arc<Tensor>,
    op: Op,
    requires_grad: bool,
}

/// Records a computation graph. One tape per forward pass.
#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
    non_finite: Cell<Option<&'static str>>,
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    id: NodeId,
}

impl std::fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Var#{} {:?}", self.id, self.value())
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

    /// Untracked input.
    pub fn constant(&self, value: Tensor) -> Var<'_> {
        self.push(Arc::new(value), Op::Leaf, false)
    }

    /// Tracked input whose gradient is reported by [`Tape::backward`].
    pub fn input(&self, value: Tensor) -> Var<'_> {
        self.push(Arc::new(value), Op::Leaf, true)
    }

    /// Leaf bound to a stored parameter; its gradient can be accumulated back
    /// into the store.
    pub fn param(&self, store: &ParamStore, id: ParamId) -> Var<'_> {
        self.push(store.get(id).shared_value(), Op::Param(id), true)
    }

    fn push(&self, value: Arc<Tensor>, op: Op, requires_grad: bool) -> Var<'_> {
        if cfg!(debug_assertions) && self.non_finite.get().is_none() && !value.all_finite() {
            self.non_finite.set(Some(op.name()));
        }
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    fn value(&self, id: NodeId) -> Arc<Tensor> {
        Arc::clone(&self.nodes.borrow()[id].value)
    }

    fn tracked(&self, ids: &[NodeId]) -> bool {
        let nodes = self.nodes.borrow();
        ids.iter().any(|&i| nodes[i].requires_grad)
    }

    fn record(&self, shape: &[usize], data: Vec<f64>, op: Op, inputs: &[NodeId]) -> Var<'_> {
        let requires_grad = self.tracked(inputs);
        let value = Tensor::new(shape, data).expect("op produced inconsistent shape");
        self.push(Arc::new(value), op, requires_grad)
    }

    /// Name of the first op that produced a NaN or infinity. Only tracked in
    /// builds with debug assertions.
    pub fn first_non_finite(&self) -> Option<&'static str> {
        self.non_finite.get()
    }

    /// Reverse pass from a single-element `loss`.
    pub fn backward(&self, loss: Var<'_>) -> Result<Gradients> {
        if let Some(op) = self.non_finite.get() {
            return Err(DiffError::Invalid {
                op: "backward",
                msg: format!("non-finite value produced by `{op}`"),
            });
        }
        let nodes = self.nodes.borrow();
        let loss_node = &nodes[loss.id];
        if loss_node.value.numel() != 1 {
            return Err(DiffError::NotScalar {
                shape: loss_node.value.shape().to_vec(),
            });
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; nodes.len()];
        grads[loss.id] = Some(vec![1.0]);
        for id in (0..=loss.id).rev() {
            let node = &nodes[id];
            if !node.requires_grad {
                continue;
            }
            if matches!(node.op, Op::Leaf | Op::Param(_)) {
                continue;
            }
            let Some(g) = grads[id].take() else {
                continue;
            };
            backprop(&nodes, id, &g, &mut grads);
        }
        let mut out = Vec::new();
        let mut params = Vec::new();
        for (id, node) in nodes.iter().enumerate() {
            let leaf = match node.op {
                Op::Leaf if node.requires_grad => true,
                Op::Param(pid) => {
                    params.push((id, pid));
                    true
                }
                _ => false,
            };
            if leaf {
                let data = grads[id]
                    .take()
                    .unwrap_or_else(|| vec![0.0; node.value.numel()]);
                out.push((id, Tensor::new(node.value.shape(), data)?));
            }
        }
        Ok(Gradients {
            leaves: out,
            params,
        })
    }
}

/// Gradients of the loss with respect to every tracked leaf of a tape.
#[derive(Debug)]
pub struct Gradients {
    leaves: Vec<(NodeId, Tensor)>,
    params: Vec<(NodeId, ParamId)>,
}

impl Gradients {
    pub fn wrt(&self, var: Var<'_>) -> Option<&Tensor> {
        self.leaves
            .iter()
            .find(|(id, _)| *id == var.id)
            .map(|(_, g)| g)
    }

    /// Adds parameter gradients into the store's gradient buffers.
    pub fn accumulate_into(&self, store: &mut ParamStore) {
        for &(node, pid) in &self.params {
            if let Some((_, g)) = self.leaves.iter().find(|(id, _)| *id == node) {
                let buf = store.grad_mut(pid);
                for (d, s) in buf.data_mut().iter_mut().zip(g.data()) {
                    *d += s;
                }
            }
        }
    }
}

fn slot<'a>(
    nodes: &[Node],
    grads: &'a mut [Option<Vec<f64>>],
    id: NodeId,
) -> Option<&'a mut Vec<f64>> {
    if !nodes[id].requires_grad {
        return None;
    }
    Some(grads[id].get_or_insert_with(|| vec![0.0; nodes[id].value.numel()]))
}

/// Adds `g` into the gradient of `id`, taking ownership of a copy when the
/// slot is still empty instead of zero-filling first.
fn pass_through(nodes: &[Node], grads: &mut [Option<Vec<f64>>], id: NodeId, g: &[f64]) {
    if !nodes[id].requires_grad {
        return;
    }
    match &mut grads[id] {
        Some(buf) => buf.iter_mut().zip(g).for_each(|(d, s)| *d += s),
        slot @ None => *slot = Some(g.to_vec()),
    }
}

fn split_last(shape: &[usize]) -> (usize, usize) {
    let cols = shape.last().copied().unwrap_or(1);
    let rows = if cols == 0 {
        0
    } else {
        shape.iter().product::<usize>() / cols
    };
    (rows, cols)
}

/// `(batch, rows, cols)` view of a tensor with rank ≥ 2.
fn split_last2(shape: &[usize]) -> (usize, usize, usize) {
    let n = shape.len();
    let (r, c) = (shape[n - 2], shape[n - 1]);
    (shape[..n - 2].iter().product(), r, c)
}

fn backprop(nodes: &[Node], id: NodeId, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
    let node = &nodes[id];
    let out = node.value.data();
    match &node.op {
        Op::Leaf | Op::Param(_) => {}
        Op::Binary { kind, a, b } => {
            let av = nodes[*a].value.data();
            let bv = nodes[*b].value.data();
            let bn = bv.len();
            if g.is_empty() {
                return;
            }
            match kind {
                BinKind::Add | BinKind::Sub => pass_through(nodes, grads, *a, g),
                BinKind::Mul => {
                    if let Some(ga) = slot(nodes, grads, *a) {
                        for (gac, gc) in ga.chunks_mut(bn).zip(g.chunks(bn)) {
                            for ((d, s), y) in gac.iter_mut().zip(gc).zip(bv) {
                                *d += s * y;
                            }
                        }
                    }
                }
            }
            if let Some(gb) = slot(nodes, grads, *b) {
                for (gc, ac) in g.chunks(bn).zip(av.chunks(bn)) {
                    match kind {
                        BinKind::Add => gb.iter_mut().zip(gc).for_each(|(d, s)| *d += s),
                        BinKind::Sub => gb.iter_mut().zip(gc).for_each(|(d, s)| *d -= s),
                        BinKind::Mul => gb
                            .iter_mut()
                            .zip(gc)
                            .zip(ac)
                            .for_each(|((d, s), x)| *d += s * x),
                    }
                }
            }
        }
        Op::Scale(a, c) => {
            if let Some(ga) = slot(nodes, grads, *a) {
                ga.iter_mut().zip(g).for_each(|(d, s)| *d += c * s);
            }
        }
        Op::AddScalar(a) | Op::Reshape(a) => pass_through(nodes, grads, *a, g),
        Op::Tanh(a) => {
            if let Some(ga) = slot(nodes, grads, *a) {
                for i in 0..g.len() {
                    ga[i] += g[i] * (1.0 - out[i] * out[i]);
                }
            }
        }
        Op::Sigmoid(a) => {
            if let Some(ga) = slot(nodes, grads, *a) {
                for i in 0..g.len() {
                    ga[i] += g[i] * out[i] * (1.0 - out[i]);
                }
            }
        }
        Op::Exp(a) => {
            if let Some(ga) = slot(nodes, grads, *a) {
                for i in 0..g.len() {
                    ga[i] += g[i] * out[i];
                }
            }
        }
        Op::Relu(a) => {
            let av = nodes[*a].value.data();
            if let Some(ga) = slot(nodes, grads, *a) {
                for i in 0..g.len() {
                    if av[i] > 0.0 {
                        ga[i] += g[i];
                    }
                }
            }
        }
        Op::Abs(a) => {
            let av = nodes[*a].value.data();
            if let Some(ga) = slot(nodes, grads, *a) {
                for i in 0..g.len() {
                    if av[i] != 0.0 {
                        ga[i] += g[i] * av[i].signum();
                    }
                }
            }
        }
        Op::Powf(a, p) => {
            let av = nodes[*a].value.data();
            if let Some(ga) = slot(nodes, grads, *a) {
                for i in 0..g.len() {
                    ga[i] += g[i] * p * av[i].powf(p - 1.0);
                }
            }
        }
        Op::MatMul(a, b) => {
            let at = &nodes[*a].value;
            let bt = &nodes[*b].value;
            let (m, k) = (at.shape()[0], at.shape()[1]);
            let n = bt.shape()[1];
            if let Some(ga) = slot(nodes, grads, *a) {
                gemm(m, n, k, g, false, bt.data(), true, ga, true);
            }
            if let Some(gb) = slot(nodes, grads, *b) {
                gemm(k, m, n, at.data(), true, g, false, gb, true);
            }
        }
        Op::BatchMatMul(a, b) => {
            let at = &nodes[*a].value;
            let bt = &nodes[*b].value;
            let (_, m, k) = split_last2(at.shape());
            let n = bt.shape()[2];
            if let Some(ga) = slot(nodes, grads, *a) {
                ga.par_chunks_mut(m * k)
                    .zip(g.par_chunks(m * n))
                    .zip(bt.data().par_chunks(k * n))
                    .for_each(|((ga, g), b)| gemm(m, n, k, g, false, b, true, ga, true));
            }
            if let Some(gb) = slot(nodes, grads, *b) {
                gb.par_chunks_mut(k * n)
                    .zip(g.par_chunks(m * n))
                    .zip(at.data().par_chunks(m * k))
                    .for_each(|((gb, g), a)| gemm(k, m, n, a, true, g, false, gb, true));
            }
        }
        Op::TransposeLast2(a) => {
            let (batch, r, c) = split_last2(nodes[*a].value.shape());
            if let Some(ga) = slot(nodes, grads, *a) {
                for bi in 0..batch {
                    let off = bi * r * c;
                    for i in 0..r {
                        for j in 0..c {
                            ga[off + i * c + j] += g[off + j * r + i];
                        }
                    }
                }
            }
        }
        Op::Permute01(a) => {
            let shape = nodes[*a].value.shape();
            let (d0, d1) = (shape[0], shape[1]);
            let inner: usize = shape[2..].iter().product();
            if let Some(ga) = slot(nodes, grads, *a) {
                for i in 0..d0 {
                    for j in 0..d1 {
                        let src = (j * d0 + i) * inner;
                        let dst = (i * d1 + j) * inner;
                        for k in 0..inner {
                            ga[dst + k] += g[src + k];
                        }
                    }
                }
            }
        }
        Op::ConcatLast(inputs) => {
            let (rows, total) = split_last(node.value.shape());
            let mut offset = 0;
            for &inp in inputs {
                let w = nodes[inp].value.shape().last().copied().unwrap_or(1);
                if let Some(gi) = slot(nodes, grads, inp) {
                    for r in 0..rows {
                        for j in 0..w {
                            gi[r * w + j] += g[r * total + offset + j];
                        }
                    }
                }
                offset += w;
            }
        }
        Op::SliceLast { a, start } => {
            let (rows, w) = split_last(node.value.shape());
            let total = nodes[*a].value.shape().last().copied().unwrap_or(1);
            if let Some(ga) = slot(nodes, grads, *a) {
                for r in 0..rows {
                    for j in 0..w {
                        ga[r * total + start + j] += g[r * w + j];
                    }
                }
            }
        }
        Op::SumAll(a) => {
            if let Some(ga) = slot(nodes, grads, *a) {
                ga.iter_mut().for_each(|d| *d += g[0]);
            }
        }
        Op::MeanAll(a) => {
            if let Some(ga) = slot(nodes, grads, *a) {
                let scale = g[0] / ga.len() as f64;
                ga.iter_mut().for_each(|d| *d += scale);
            }
        }
        Op::SumLast(a) => {
            let (_, cols) = split_last(nodes[*a].value.shape());
            if let Some(ga) = slot(nodes, grads, *a) {
                for (i, d) in ga.iter_mut().enumerate() {
                    *d += g[i / cols];
                }
            }
        }
        Op::MaxLast { a, argmax } => {
            let (_, cols) = split_last(nodes[*a].value.shape());
            if let Some(ga) = slot(nodes, grads, *a) {
                for (r, &j) in argmax.iter().enumerate() {
                    ga[r * cols + j] += g[r];
                }
            }
        }
        Op::SoftmaxLast(a) => {
            let (rows, cols) = split_last(node.value.shape());
            if let Some(ga) = slot(nodes, grads, *a) {
                for r in 0..rows {
                    let y = &out[r * cols..(r + 1) * cols];
                    let gr = &g[r * cols..(r + 1) * cols];
                    let dot: f64 = y.iter().zip(gr).map(|(y, g)| y * g).sum();
                    for j in 0..cols {
                        ga[r * cols + j] += y[j] * (gr[j] - dot);
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
            let (rows, d) = split_last(node.value.shape());
            let gv = nodes[*gain].value.data().to_vec();
            if let Some(gb) = slot(nodes, grads, *bias) {
                for r in 0..rows {
                    for j in 0..d {
                        gb[j] += g[r * d + j];
                    }
                }
            }
            if let Some(gg) = slot(nodes, grads, *gain) {
                for r in 0..rows {
                    for j in 0..d {
                        gg[j] += g[r * d + j] * xhat[r * d + j];
                    }
                }
            }
            if let Some(gx) = slot(nodes, grads, *x) {
                let inv_d = 1.0 / d as f64;
                for r in 0..rows {
                    let base = r * d;
                    let mut mean_dxh = 0.0;
                    let mut mean_dxh_xh = 0.0;
                    for j in 0..d {
                        let dxh = g[base + j] * gv[j];
                        mean_dxh += dxh;
                        mean_dxh_xh += dxh * xhat[base + j];
                    }
                    mean_dxh *= inv_d;
                    mean_dxh_xh *= inv_d;
                    for j in 0..d {
                        let dxh = g[base + j] * gv[j];
                        gx[base + j] +=
                            inv_std[r] * (dxh - mean_dxh - xhat[base + j] * mean_dxh_xh);
                    }
                }
            }
        }
        Op::AddRows(x, b) => {
            let (_, r, c) = split_last2(node.value.shape());
            pass_through(nodes, grads, *x, g);
            if c == 0 {
                return;
            }
            if let Some(gb) = slot(nodes, grads, *b) {
                for (k, gr) in g.chunks(c).enumerate() {
                    let bi = k / r;
                    gb[bi * c..(bi + 1) * c]
                        .iter_mut()
                        .zip(gr)
                        .for_each(|(d, s)| *d += s);
                }
            }
        }
        Op::ScaleRows(x, s) => {
            let (batch, r, c) = split_last2(node.value.shape());
            let xv = nodes[*x].value.data();
            let sv = nodes[*s].value.data();
            if let Some(gx) = slot(nodes, grads, *x) {
                for i in 0..batch * r {
                    for j in 0..c {
                        gx[i * c + j] += g[i * c + j] * sv[i];
                    }
                }
            }
            if let Some(gs) = slot(nodes, grads, *s) {
                for i in 0..batch * r {
                    for j in 0..c {
                        gs[i] += g[i * c + j] * xv[i * c + j];
                    }
                }
            }
        }
        Op::ScaleCols(x, s) => {
            let (batch, r, c) = split_last2(node.value.shape());
            let xv = nodes[*x].value.data();
            let sv = nodes[*s].value.data();
            if let Some(gx) = slot(nodes, grads, *x) {
                for bi in 0..batch {
                    for i in 0..r {
                        for j in 0..c {
                            let k = (bi * r + i) * c + j;
                            gx[k] += g[k] * sv[bi * c + j];
                        }
                    }
                }
            }
            if let Some(gs) = slot(nodes, grads, *s) {
                for bi in 0..batch {
                    for i in 0..r {
                        for j in 0..c {
                            let k = (bi * r + i) * c + j;
                            gs[bi * c + j] += g[k] * xv[k];
                        }
                    }
                }
            }
        }
        Op::Mask { a, keep } => {
            if let Some(ga) = slot(nodes, grads, *a) {
                for i in 0..g.len() {
                    if keep[i] {
                        ga[i] += g[i];
                    }
                }
            }
        }
        Op::CosineRows { a, unit, norms } => {
            let (n, d) = split_last(nodes[*a].value.shape());
            if let Some(ga) = slot(nodes, grads, *a) {
                // d(unit) = (G + Gᵀ) · unit
                let mut sym = vec![0.0; n * n];
                for i in 0..n {
                    for j in 0..n {
                        sym[i * n + j] = g[i * n + j] + g[j * n + i];
                    }
                }
                let mut dunit = vec![0.0; n * d];
                gemm(n, n, d, &sym, false, unit, false, &mut dunit, false);
                for i in 0..n {
                    if norms[i] == 0.0 {
                        continue;
                    }
                    let u = &unit[i * d..(i + 1) * d];
                    let du = &dunit[i * d..(i + 1) * d];
                    let proj: f64 = u.iter().zip(du).map(|(u, g)| u * g).sum();
                    for j in 0..d {
                        ga[i * d + j] += (du[j] - proj * u[j]) / norms[i];
                    }
                }
            }
        }
    }
}

impl<'t> Var<'t> {
    pub fn id(&self) -> usize {
        self.id
    }

    pub fn value(&self) -> Arc<Tensor> {
        self.tape.value(self.id)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tape.nodes.borrow()[self.id].value.shape().to_vec()
    }

    pub fn item(&self) -> Result<f64> {
        self.value().item()
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.nodes.borrow()[self.id].requires_grad
    }

    fn binary(self, other: Var<'t>, kind: BinKind, name: &'static str) -> Result<Var<'t>> {
        let a = self.value();
        let b = other.value();
        let (an, bn) = (a.numel(), b.numel());
        let compatible = a.shape() == b.shape()
            || bn == 1
            || (b.ndim() <= a.ndim() && a.shape().ends_with(b.shape()));
        if !compatible || (an > 0 && bn == 0) {
            return Err(DiffError::Shape {
                op: name,
                lhs: a.shape().to_vec(),
                rhs: b.shape().to_vec(),
            });
        }
        let (av, bv) = (a.data(), b.data());
        let mut data = Vec::with_capacity(an);
        if an > 0 {
            for ac in av.chunks(bn) {
                match kind {
                    BinKind::Add => data.extend(ac.iter().zip(bv).map(|(x, y)| x + y)),
                    BinKind::Sub => data.extend(ac.iter().zip(bv).map(|(x, y)| x - y)),
                    BinKind::Mul => data.extend(ac.iter().zip(bv).map(|(x, y)| x * y)),
                }
            }
        }
        Ok(self.tape.record(
            a.shape(),
            data,
            Op::Binary {
                kind,
                a: self.id,
                b: other.id,
            },
            &[self.id, other.id],
        ))
    }

    /// Elementwise sum; `other` may be a single element or a suffix-shaped
    /// tensor tiled over the leading axes.
    pub fn add(self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(other, BinKind::Add, "add")
    }

    pub fn sub(self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(other, BinKind::Sub, "sub")
    }

    pub fn mul(self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(other, BinKind::Mul, "mul")
    }

    fn unary(self, op: Op, f: impl Fn(f64) -> f64) -> Var<'t> {
        let a = self.value();
        let data = a.data().iter().map(|&x| f(x)).collect();
        self.tape.record(a.shape(), data, op, &[self.id])
    }

    pub fn scale(self, c: f64) -> Var<'t> {
        self.unary(Op::Scale(self.id, c), |x| c * x)
    }

    pub fn add_scalar(self, c: f64) -> Var<'t> {
        self.unary(Op::AddScalar(self.id), |x| x + c)
    }

    /// `c - self`
    pub fn rsub_scalar(self, c: f64) -> Var<'t> {
        self.scale(-1.0).add_scalar(c)
    }

    pub fn tanh(self) -> Var<'t> {
        self.unary(Op::Tanh(self.id), f64::tanh)
    }

    pub fn sigmoid(self) -> Var<'t> {
        self.unary(Op::Sigmoid(self.id), sigmoid)
    }

    pub fn exp(self) -> Var<'t> {
        self.unary(Op::Exp(self.id), f64::exp)
    }

    pub fn relu(self) -> Var<'t> {
        self.unary(Op::Relu(self.id), |x| x.max(0.0))
    }

    pub fn abs(self) -> Var<'t> {
        self.unary(Op::Abs(self.id), f64::abs)
    }

    pub fn powf(self, p: f64) -> Var<'t> {
        self.unary(Op::Powf(self.id, p), |x| x.powf(p))
    }

    pub fn square(self) -> Var<'t> {
        self.powf(2.0)
    }

    /// Matrix product of two rank-2 operands.
    pub fn matmul(self, other: Var<'t>) -> Result<Var<'t>> {
        let a = self.value();
        let b = other.value();
        let (m, k) = a.as_matrix("matmul")?;
        let (k2, n) = b.as_matrix("matmul")?;
        if k != k2 {
            return Err(DiffError::Shape {
                op: "matmul",
                lhs: a.shape().to_vec(),
                rhs: b.shape().to_vec(),
            });
        }
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, a.data(), false, b.data(), false, &mut out, false);
        Ok(self
            .tape
            .record(&[m, n], out, Op::MatMul(self.id, other.id), &[self.id, other.id]))
    }

    /// Batched product `[B,m,k] × [B,k,n] → [B,m,n]`.
    pub fn bmm(self, other: Var<'t>) -> Result<Var<'t>> {
        let a = self.value();
        let b = other.value();
        let err = || DiffError::Shape {
            op: "bmm",
            lhs: a.shape().to_vec(),
            rhs: b.shape().to_vec(),
        };
        let (&[ba, m, k], &[bb, k2, n]) = (a.shape(), b.shape()) else {
            return Err(err());
        };
        if ba != bb || k != k2 {
            return Err(err());
        }
        let mut out = vec![0.0; ba * m * n];
        if m * n > 0 {
            out.par_chunks_mut(m * n)
                .zip(a.data().par_chunks(m * k.max(1)))
                .zip(b.data().par_chunks((k * n).max(1)))
                .for_each(|((c, a), b)| {
                    if k == 0 {
                        return;
                    }
                    gemm(m, k, n, a, false, b, false, c, false)
                });
        }
        Ok(self.tape.record(
            &[ba, m, n],
            out,
            Op::BatchMatMul(self.id, other.id),
            &[self.id, other.id],
        ))
    }

    /// Swaps the last two axes.
    pub fn transpose(self) -> Result<Var<'t>> {
        let a = self.value();
        if a.ndim() < 2 {
            return Err(DiffError::Rank {
                op: "transpose",
                expected: 2,
                shape: a.shape().to_vec(),
            });
        }
        let (batch, r, c) = split_last2(a.shape());
        let av = a.data();
        let mut out = vec![0.0; av.len()];
        for bi in 0..batch {
            let off = bi * r * c;
            for i in 0..r {
                for j in 0..c {
                    out[off + j * r + i] = av[off + i * c + j];
                }
            }
        }
        let mut shape = a.shape().to_vec();
        let n = shape.len();
        shape.swap(n - 2, n - 1);
        Ok(self
            .tape
            .record(&shape, out, Op::TransposeLast2(self.id), &[self.id]))
    }

    /// Swaps the first two axes: `[A, B, …] → [B, A, …]`.
    pub fn permute01(self) -> Result<Var<'t>> {
        let a = self.value();
        if a.ndim() < 2 {
            return Err(DiffError::Rank {
                op: "permute01",
                expected: 2,
                shape: a.shape().to_vec(),
            });
        }
        let shape = a.shape();
        let (d0, d1) = (shape[0], shape[1]);
        let inner: usize = shape[2..].iter().product();
        let av = a.data();
        let mut out = vec![0.0; av.len()];
        for i in 0..d0 {
            for j in 0..d1 {
                let src = (i * d1 + j) * inner;
                let dst = (j * d0 + i) * inner;
                out[dst..dst + inner].copy_from_slice(&av[src..src + inner]);
            }
        }
        let mut new_shape = shape.to_vec();
        new_shape.swap(0, 1);
        Ok(self
            .tape
            .record(&new_shape, out, Op::Permute01(self.id), &[self.id]))
    }

    pub fn reshape(self, shape: &[usize]) -> Result<Var<'t>> {
        let a = self.value();
        if shape.iter().product::<usize>() != a.numel() {
            return Err(DiffError::Shape {
                op: "reshape",
                lhs: a.shape().to_vec(),
                rhs: shape.to_vec(),
            });
        }
        Ok(self
            .tape
            .record(shape, a.data().to_vec(), Op::Reshape(self.id), &[self.id]))
    }

    /// Concatenates along the last axis; leading axes must agree.
    pub fn concat(parts: &[Var<'t>]) -> Result<Var<'t>> {
        let first = parts.first().ok_or(DiffError::Invalid {
            op: "concat",
            msg: "no inputs".into(),
        })?;
        let tape = first.tape;
        let values: Vec<Arc<Tensor>> = parts.iter().map(|p| p.value()).collect();
        let lead = &values[0].shape()[..values[0].ndim().saturating_sub(1)];
        for v in &values {
            if v.ndim() == 0 || &v.shape()[..v.ndim() - 1] != lead {
                return Err(DiffError::Shape {
                    op: "concat",
                    lhs: values[0].shape().to_vec(),
                    rhs: v.shape().to_vec(),
                });
            }
        }
        let widths: Vec<usize> = values.iter().map(|v| v.shape()[v.ndim() - 1]).collect();
        let total: usize = widths.iter().sum();
        let rows: usize = lead.iter().product();
        let mut out = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for (v, &w) in values.iter().zip(&widths) {
                out.extend_from_slice(&v.data()[r * w..(r + 1) * w]);
            }
        }
        let mut shape = lead.to_vec();
        shape.push(total);
        let ids: Vec<NodeId> = parts.iter().map(|p| p.id).collect();
        Ok(tape.record(&shape, out, Op::ConcatLast(ids.clone()), &ids))
    }

    /// Columns `start..start + len` of the last axis.
    pub fn slice_last(self, start: usize, len: usize) -> Result<Var<'t>> {
        let a = self.value();
        let (rows, cols) = split_last(a.shape());
        if a.ndim() == 0 || start + len > cols {
            return Err(DiffError::Invalid {
                op: "slice_last",
                msg: format!("range {start}..{} outside width {cols}", start + len),
            });
        }
        let av = a.data();
        let mut out = Vec::with_capacity(rows * len);
        for r in 0..rows {
            out.extend_from_slice(&av[r * cols + start..r * cols + start + len]);
        }
        let mut shape = a.shape().to_vec();
        *shape.last_mut().unwrap() = len;
        Ok(self.tape.record(
            &shape,
            out,
            Op::SliceLast { a: self.id, start },
            &[self.id],
        ))
    }

    pub fn sum(self) -> Var<'t> {
        let s = self.value().data().iter().sum();
        self.tape.record(&[], vec![s], Op::SumAll(self.id), &[self.id])
    }

    pub fn mean(self) -> Var<'t> {
        let a = self.value();
        let s = a.data().iter().sum::<f64>() / a.numel() as f64;
        self.tape.record(&[], vec![s], Op::MeanAll(self.id), &[self.id])
    }

    /// Sum over the last axis, which is dropped.
    pub fn sum_last(self) -> Result<Var<'t>> {
        let a = self.value();
        self.reduce_rank("sum_last", &a)?;
        let (_, cols) = split_last(a.shape());
        let out = a.data().chunks(cols).map(|r| r.iter().sum()).collect();
        Ok(self.tape.record(
            &a.shape()[..a.ndim() - 1],
            out,
            Op::SumLast(self.id),
            &[self.id],
        ))
    }

    /// Maximum over the last axis, which is dropped. The gradient goes to the
    /// first maximal entry of each row.
    pub fn max_last(self) -> Result<Var<'t>> {
        let a = self.value();
        self.reduce_rank("max_last", &a)?;
        let (_, cols) = split_last(a.shape());
        if cols == 0 {
            return Err(DiffError::Invalid {
                op: "max_last",
                msg: "empty rows".into(),
            });
        }
        let mut argmax = Vec::new();
        let mut out = Vec::new();
        for row in a.data().chunks(cols) {
            let (j, m) = row
                .iter()
                .enumerate()
                .fold((0, f64::NEG_INFINITY), |(bj, bm), (j, &x)| {
                    if x > bm {
                        (j, x)
                    } else {
                        (bj, bm)
                    }
                });
            argmax.push(j);
            out.push(m);
        }
        Ok(self.tape.record(
            &a.shape()[..a.ndim() - 1],
            out,
            Op::MaxLast { a: self.id, argmax },
            &[self.id],
        ))
    }

    fn reduce_rank(&self, op: &'static str, a: &Tensor) -> Result<()> {
        if a.ndim() == 0 {
            return Err(DiffError::Rank {
                op,
                expected: 1,
                shape: Vec::new(),
            });
        }
        Ok(())
    }

    /// Softmax over the last axis, stabilised by subtracting the row maximum.
    pub fn softmax_last(self) -> Var<'t> {
        let a = self.value();
        let data = softmax_rows(a.data(), a.shape().last().copied().unwrap_or(1));
        self.tape
            .record(a.shape(), data, Op::SoftmaxLast(self.id), &[self.id])
    }

    /// Layer normalisation over the last axis with per-feature gain and bias
    /// (population variance).
    pub fn layer_norm(self, gain: Var<'t>, bias: Var<'t>, eps: f64) -> Result<Var<'t>> {
        let x = self.value();
        let (rows, d) = split_last(x.shape());
        let (gv, bv) = (gain.value(), bias.value());
        if x.ndim() == 0 || gv.shape() != [d] || bv.shape() != [d] {
            return Err(DiffError::Shape {
                op: "layer_norm",
                lhs: x.shape().to_vec(),
                rhs: gv.shape().to_vec(),
            });
        }
        let mut xhat = vec![0.0; rows * d];
        let mut inv_std = vec![0.0; rows];
        let mut out = vec![0.0; rows * d];
        for r in 0..rows {
            let row = &x.data()[r * d..(r + 1) * d];
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / d as f64;
            let is = 1.0 / (var + eps).sqrt();
            inv_std[r] = is;
            for j in 0..d {
                let h = (row[j] - mean) * is;
                xhat[r * d + j] = h;
                out[r * d + j] = gv.data()[j] * h + bv.data()[j];
            }
        }
        Ok(self.tape.record(
            x.shape(),
            out,
            Op::LayerNorm {
                x: self.id,
                gain: gain.id,
                bias: bias.id,
                xhat,
                inv_std,
            },
            &[self.id, gain.id, bias.id],
        ))
    }

    /// `x[..., r, c] + b[..., c]`: one row vector per leading batch entry.
    pub fn add_rows(self, bias: Var<'t>) -> Result<Var<'t>> {
        let x = self.value();
        let b = bias.value();
        self.check_batched("add_rows", &x, &b, |s| s[s.len() - 1])?;
        let (batch, r, c) = split_last2(x.shape());
        let mut out = Vec::with_capacity(x.numel());
        if c > 0 {
            for (k, row) in x.data().chunks(c).enumerate() {
                let bi = k / r;
                out.extend(row.iter().zip(&b.data()[bi * c..(bi + 1) * c]).map(|(v, y)| v + y));
            }
        }
        debug_assert_eq!(out.len(), batch * r * c);
        Ok(self.tape.record(
            x.shape(),
            out,
            Op::AddRows(self.id, bias.id),
            &[self.id, bias.id],
        ))
    }

    /// `x[..., r, c] * s[..., r]`
    pub fn scale_rows(self, s: Var<'t>) -> Result<Var<'t>> {
        let x = self.value();
        let sv = s.value();
        self.check_batched("scale_rows", &x, &sv, |s| s[s.len() - 2])?;
        let c = x.shape()[x.ndim() - 1];
        let mut out = Vec::with_capacity(x.numel());
        if c > 0 {
            for (row, &f) in x.data().chunks(c).zip(sv.data()) {
                out.extend(row.iter().map(|v| v * f));
            }
        }
        Ok(self.tape.record(
            x.shape(),
            out,
            Op::ScaleRows(self.id, s.id),
            &[self.id, s.id],
        ))
    }

    /// `x[..., r, c] * s[..., c]`
    pub fn scale_cols(self, s: Var<'t>) -> Result<Var<'t>> {
        let x = self.value();
        let sv = s.value();
        self.check_batched("scale_cols", &x, &sv, |s| s[s.len() - 1])?;
        let (_, r, c) = split_last2(x.shape());
        let mut out = Vec::with_capacity(x.numel());
        if c > 0 {
            for (k, row) in x.data().chunks(c).enumerate() {
                let bi = k / r;
                out.extend(row.iter().zip(&sv.data()[bi * c..(bi + 1) * c]).map(|(v, f)| v * f));
            }
        }
        Ok(self.tape.record(
            x.shape(),
            out,
            Op::ScaleCols(self.id, s.id),
            &[self.id, s.id],
        ))
    }

    fn check_batched(
        &self,
        op: &'static str,
        x: &Tensor,
        other: &Tensor,
        last: impl Fn(&[usize]) -> usize,
    ) -> Result<()> {
        let ok = x.ndim() >= 2
            && other.ndim() == x.ndim() - 1
            && other.shape()[..other.ndim() - 1] == x.shape()[..x.ndim() - 2]
            && other.shape()[other.ndim() - 1] == last(x.shape());
        if ok {
            Ok(())
        } else {
            Err(DiffError::Shape {
                op,
                lhs: x.shape().to_vec(),
                rhs: other.shape().to_vec(),
            })
        }
    }

    /// Keeps entries where `keep` is true and zeroes the rest. The mask is a
    /// constant: no gradient flows into whatever produced it.
    pub fn mask(self, keep: Vec<bool>) -> Result<Var<'t>> {
        let a = self.value();
        if keep.len() != a.numel() {
            return Err(DiffError::Invalid {
                op: "mask",
                msg: format!("mask has {} entries for {} values", keep.len(), a.numel()),
            });
        }
        let out = a
            .data()
            .iter()
            .zip(&keep)
            .map(|(&v, &k)| if k { v } else { 0.0 })
            .collect();
        Ok(self
            .tape
            .record(a.shape(), out, Op::Mask { a: self.id, keep }, &[self.id]))
    }

    /// Pairwise cosine similarity between the rows of an `n × d` matrix.
    /// Rows of zero norm have similarity 0 with everything, including themselves.
    pub fn cosine_rows(self) -> Result<Var<'t>> {
        let a = self.value();
        let (n, d) = a.as_matrix("cosine_rows")?;
        let mut unit = a.data().to_vec();
        let mut norms = vec![0.0; n];
        for i in 0..n {
            let row = &mut unit[i * d..(i + 1) * d];
            let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            norms[i] = norm;
            if norm > 0.0 {
                row.iter_mut().for_each(|v| *v /= norm);
            }
        }
        let mut out = vec![0.0; n * n];
        gemm(n, d, n, &unit, false, &unit, true, &mut out, false);
        for i in 0..n {
            if norms[i] > 0.0 {
                out[i * n + i] = 1.0;
            }
        }
        Ok(self.tape.record(
            &[n, n],
            out,
            Op::CosineRows {
                a: self.id,
                unit,
                norms,
            },
            &[self.id],
        ))
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

/// Row-wise softmax of a row-major buffer with `cols` columns.
pub fn softmax_rows(data: &[f64], cols: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(data.len());
    for row in data.chunks(cols.max(1)) {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let start = out.len();
        let mut total = 0.0;
        for &x in row {
            let e = (x - max).exp();
            total += e;
            out.push(e);
        }
        out[start..].iter_mut().for_each(|e| *e /= total);
    }
    out
}
