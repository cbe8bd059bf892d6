//! Tape-based reverse-mode differentiation over [`Tensor`] values.
//!
//! Every operation appends a node holding its forward value and the ids of
//! its operands. [`Tape::backward`] walks the tape in reverse, accumulating
//! vector-Jacobian products. Gradients are additive across fan-out; a fresh
//! tape per step is the way to zero them.

use std::cell::{Ref, RefCell};

use super::kernel::{gemm, Strides};
use super::tensor::{broadcast_offsets, broadcast_shapes, Tensor};
use crate::error::{Error, Result};

#[derive(Debug)]
enum Layout {
    Same,
    /// Right operand repeats over the left operand's leading axes.
    RepeatRight,
    /// Left operand repeats over the right operand's leading axes.
    RepeatLeft,
    /// Right operand is the left one with its last axis collapsed to 1.
    RowScalar(usize),
    General(Vec<usize>, Vec<usize>),
}

impl Layout {
    fn plan(a: &[usize], b: &[usize], out: &[usize]) -> Layout {
        if a == b {
            Layout::Same
        } else if a == out && out.ends_with(b) {
            Layout::RepeatRight
        } else if b == out && out.ends_with(a) {
            Layout::RepeatLeft
        } else if a == out && a.len() == b.len() && b.last() == Some(&1) && a[..a.len() - 1] == b[..b.len() - 1] {
            Layout::RowScalar(*a.last().unwrap())
        } else {
            let (ia, ib) = broadcast_offsets(a, b, out);
            Layout::General(ia, ib)
        }
    }

    /// Calls `f(i, ia, ib)` for every output index with the matching
    /// operand offsets; the layout is resolved once per loop.
    #[inline]
    fn for_each(&self, n: usize, nb: usize, na: usize, mut f: impl FnMut(usize, usize, usize)) {
        match self {
            Layout::Same => (0..n).for_each(|i| f(i, i, i)),
            Layout::RepeatRight => {
                for c in 0..n / nb {
                    for j in 0..nb {
                        f(c * nb + j, c * nb + j, j);
                    }
                }
            }
            Layout::RepeatLeft => {
                for c in 0..n / na {
                    for j in 0..na {
                        f(c * na + j, j, c * na + j);
                    }
                }
            }
            Layout::RowScalar(w) => {
                for r in 0..n / w {
                    for j in 0..*w {
                        f(r * w + j, r * w + j, r);
                    }
                }
            }
            Layout::General(ia, ib) => (0..n).for_each(|i| f(i, ia[i], ib[i])),
        }
    }
}

#[derive(Debug, Clone, Copy)]
enum BinaryKind {
    Add,
    Sub,
    Mul,
    Div,
}

#[derive(Debug)]
enum Op {
    Leaf,
    Binary(BinaryKind, usize, usize, Layout),
    Affine(usize, f64),
    Tanh(usize),
    Sigmoid(usize),
    Relu(usize),
    Abs(usize),
    MatMul(usize, usize, MatMulPlan),
    TransposeLast(usize),
    ConcatLast(Vec<usize>),
    SliceLast(usize, usize),
    Reshape(usize),
    SumAll(usize),
    SumLast(usize),
}

#[derive(Debug)]
struct MatMulPlan {
    m: usize,
    k: usize,
    n: usize,
    a_blocks: Vec<usize>,
    b_blocks: Vec<usize>,
    /// Left blocks are contiguous and share one right block, so the whole
    /// product is a single taller matrix product.
    merged: bool,
}

struct Node {
    value: Tensor,
    op: Op,
    tracked: bool,
}

/// Records operations for one forward pass.
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
        write!(f, "Var#{}{:?}", self.id, self.shape())
    }
}
/// Gradients of the tracked leaves reached by a backward sweep.
/// Gradients produced by a backward sweep, indexed by variable.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, var: Var<'_>) -> Option<&Tensor> {
        self.grads.get(var.id).and_then(|g| g.as_ref())
    }

    /// Gradient of `var`, or zeros of its shape when nothing flowed back.
    pub fn get_or_zeros(&self, var: Var<'_>) -> Tensor {
        self.get(var)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(&var.shape()))
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

    /// A leaf that receives gradients.
    pub fn param(&self, value: Tensor) -> Var<'_> {
        self.push(value, Op::Leaf, true)
    }

    /// A leaf that does not receive gradients.
    pub fn constant(&self, value: Tensor) -> Var<'_> {
        self.push(value, Op::Leaf, false)
    }

    fn push(&self, value: Tensor, op: Op, tracked: bool) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node { value, op, tracked });
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    fn tracked(&self, ids: &[usize]) -> bool {
        let nodes = self.nodes.borrow();
        ids.iter().any(|&i| nodes[i].tracked)
    }

    /// Reverse sweep from a single-element output.
    pub fn backward(&self, output: Var<'_>) -> Result<Gradients> {
        let nodes = self.nodes.borrow();
        let root = &nodes[output.id];
        if root.value.numel() != 1 {
            return Err(Error::dim(
                "backward",
                format!("output must hold one value, shape {:?}", root.value.shape()),
            ));
        }
        let mut grads: Vec<Option<Vec<f64>>> = Vec::with_capacity(nodes.len());
        grads.resize_with(nodes.len(), || None);
        grads[output.id] = Some(vec![1.0]);

        for id in (0..=output.id).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &nodes[id];
            if !node.tracked {
                continue;
            }
            backprop_node(&nodes, node, &g, &mut grads);
            // Only leaves are reported; intermediate adjoints are dropped.
            if matches!(node.op, Op::Leaf) {
                grads[id] = Some(g);
            }
        }

        let grads = grads
            .into_iter()
            .zip(nodes.iter())
            .map(|(g, n)| g.map(|d| Tensor::from_parts(n.value.shape().to_vec(), d)))
            .collect();
        Ok(Gradients { grads })
    }
}

fn accumulate<'g>(
    grads: &'g mut [Option<Vec<f64>>],
    nodes: &[Node],
    id: usize,
    len: usize,
) -> Option<&'g mut Vec<f64>> {
    if !nodes[id].tracked {
        return None;
    }
    Some(grads[id].get_or_insert_with(|| vec![0.0; len]))
}

fn backprop_node(nodes: &[Node], node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
    let out = node.value.data();
    match &node.op {
        Op::Leaf => {}
        Op::Binary(kind, a, b, layout) => {
            let (va, vb) = (nodes[*a].value.data(), nodes[*b].value.data());
            let (na, nb, n) = (va.len(), vb.len(), g.len());
            if let Some(ga) = accumulate(grads, nodes, *a, na) {
                match kind {
                    BinaryKind::Add | BinaryKind::Sub => layout.for_each(n, nb, na, |i, ia, _| ga[ia] += g[i]),
                    BinaryKind::Mul => layout.for_each(n, nb, na, |i, ia, ib| ga[ia] += g[i] * vb[ib]),
                    BinaryKind::Div => layout.for_each(n, nb, na, |i, ia, ib| ga[ia] += g[i] / vb[ib]),
                }
            }
            if let Some(gb) = accumulate(grads, nodes, *b, nb) {
                match kind {
                    BinaryKind::Add => layout.for_each(n, nb, na, |i, _, ib| gb[ib] += g[i]),
                    BinaryKind::Sub => layout.for_each(n, nb, na, |i, _, ib| gb[ib] -= g[i]),
                    BinaryKind::Mul => layout.for_each(n, nb, na, |i, ia, ib| gb[ib] += g[i] * va[ia]),
                    BinaryKind::Div => {
                        layout.for_each(n, nb, na, |i, ia, ib| gb[ib] -= g[i] * va[ia] / (vb[ib] * vb[ib]))
                    }
                }
            }
        }
        Op::Affine(a, scale) => {
            if let Some(ga) = accumulate(grads, nodes, *a, g.len()) {
                ga.iter_mut().zip(g).for_each(|(d, &gi)| *d += gi * scale);
            }
        }
        Op::Tanh(a) => {
            if let Some(ga) = accumulate(grads, nodes, *a, g.len()) {
                for ((d, &gi), &y) in ga.iter_mut().zip(g).zip(out) {
                    *d += gi * (1.0 - y * y);
                }
            }
        }
        Op::Sigmoid(a) => {
            if let Some(ga) = accumulate(grads, nodes, *a, g.len()) {
                for ((d, &gi), &y) in ga.iter_mut().zip(g).zip(out) {
                    *d += gi * y * (1.0 - y);
                }
            }
        }
        Op::Relu(a) | Op::Abs(a) => {
            let x = nodes[*a].value.data();
            let relu = matches!(node.op, Op::Relu(_));
            if let Some(ga) = accumulate(grads, nodes, *a, g.len()) {
                for ((d, &gi), &xi) in ga.iter_mut().zip(g).zip(x) {
                    let slope = if xi > 0.0 {
                        1.0
                    } else if xi < 0.0 && !relu {
                        -1.0
                    } else {
                        0.0
                    };
                    *d += gi * slope;
                }
            }
        }
        Op::MatMul(a, b, plan) => {
            let (va, vb) = (nodes[*a].value.data(), nodes[*b].value.data());
            let (m, k, n) = (plan.m, plan.k, plan.n);
            let rn = Strides(n as isize, 1);
            // Transposed views of row-major blocks.
            let (tk, tn) = (Strides(1, k as isize), Strides(1, n as isize));
            if let Some(ga) = accumulate(grads, nodes, *a, va.len()) {
                if plan.merged {
                    gemm(m * plan.a_blocks.len(), n, k, g, rn, vb, tn, 1.0, ga);
                } else {
                    for (blk, (&oa, &ob)) in plan.a_blocks.iter().zip(&plan.b_blocks).enumerate() {
                        let go = &g[blk * m * n..(blk + 1) * m * n];
                        gemm(m, n, k, go, rn, &vb[ob..ob + k * n], tn, 1.0, &mut ga[oa..oa + m * k]);
                    }
                }
            }
            if let Some(gb) = accumulate(grads, nodes, *b, vb.len()) {
                if plan.merged {
                    gemm(k, m * plan.a_blocks.len(), n, va, tk, g, rn, 1.0, gb);
                } else {
                    for (blk, (&oa, &ob)) in plan.a_blocks.iter().zip(&plan.b_blocks).enumerate() {
                        let go = &g[blk * m * n..(blk + 1) * m * n];
                        gemm(k, m, n, &va[oa..oa + m * k], tk, go, rn, 1.0, &mut gb[ob..ob + k * n]);
                    }
                }
            }
        }
        Op::TransposeLast(a) => {
            if let Some(ga) = accumulate(grads, nodes, *a, g.len()) {
                let gt = Tensor::from_parts(node.value.shape().to_vec(), g.to_vec()).transpose_last();
                ga.iter_mut().zip(gt.data()).for_each(|(d, &x)| *d += x);
            }
        }
        Op::ConcatLast(parts) => {
            let total = *node.value.shape().last().unwrap();
            let rows = g.len() / total;
            let mut col = 0;
            for &p in parts {
                let w = *nodes[p].value.shape().last().unwrap();
                if let Some(gp) = accumulate(grads, nodes, p, rows * w) {
                    for r in 0..rows {
                        let src = &g[r * total + col..r * total + col + w];
                        gp[r * w..(r + 1) * w]
                            .iter_mut()
                            .zip(src)
                            .for_each(|(d, &x)| *d += x);
                    }
                }
                col += w;
            }
        }
        Op::SliceLast(a, start) => {
            let src_w = *nodes[*a].value.shape().last().unwrap();
            let w = *node.value.shape().last().unwrap();
            let n_in = nodes[*a].value.numel();
            if let Some(ga) = accumulate(grads, nodes, *a, n_in) {
                for r in 0..g.len() / w {
                    ga[r * src_w + start..r * src_w + start + w]
                        .iter_mut()
                        .zip(&g[r * w..(r + 1) * w])
                        .for_each(|(d, &x)| *d += x);
                }
            }
        }
        Op::Reshape(a) => {
            if let Some(ga) = accumulate(grads, nodes, *a, g.len()) {
                ga.iter_mut().zip(g).for_each(|(d, &x)| *d += x);
            }
        }
        Op::SumAll(a) => {
            let n_in = nodes[*a].value.numel();
            if let Some(ga) = accumulate(grads, nodes, *a, n_in) {
                ga.iter_mut().for_each(|d| *d += g[0]);
            }
        }
        Op::SumLast(a) => {
            let n_in = nodes[*a].value.numel();
            let w = n_in / g.len();
            if let Some(ga) = accumulate(grads, nodes, *a, n_in) {
                for (r, &gr) in g.iter().enumerate() {
                    ga[r * w..(r + 1) * w].iter_mut().for_each(|d| *d += gr);
                }
            }
        }
    }
}

fn stacked_left(a_blocks: &[usize], b_blocks: &[usize], a_size: usize) -> bool {
    b_blocks.iter().all(|&o| o == b_blocks[0])
        && a_blocks.iter().enumerate().all(|(i, &o)| o == i * a_size)
}

impl<'t> Var<'t> {
    pub fn id(&self) -> usize {
        self.id
    }

    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    /// Borrow of the forward value.
    pub fn value_ref(&self) -> Ref<'t, Tensor> {
        Ref::map(self.tape.nodes.borrow(), |n| &n[self.id].value)
    }

    pub fn value(&self) -> Tensor {
        self.value_ref().clone()
    }

    pub fn shape(&self) -> Vec<usize> {
        self.value_ref().shape().to_vec()
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.nodes.borrow()[self.id].tracked
    }

    fn same_tape(&self, other: &Var<'_>) {
        assert!(
            std::ptr::eq(self.tape, other.tape),
            "operands recorded on different tapes"
        );
    }

    fn unary(self, op: Op, f: impl Fn(f64) -> f64) -> Var<'t> {
        let value = self.value_ref().map(f);
        let tracked = self.tape.tracked(&[self.id]);
        self.tape.push(value, op, tracked)
    }

    fn binary(self, other: Var<'t>, kind: BinaryKind, name: &'static str) -> Result<Var<'t>> {
        self.same_tape(&other);
        let (value, layout) = {
            let (a, b) = (self.value_ref(), other.value_ref());
            let out_shape = broadcast_shapes(a.shape(), b.shape()).ok_or_else(|| {
                Error::dim(name, format!("{:?} vs {:?}", a.shape(), b.shape()))
            })?;
            let layout = Layout::plan(a.shape(), b.shape(), &out_shape);
            let (da, db) = (a.data(), b.data());
            let n: usize = out_shape.iter().product();
            let mut data = vec![0.0; n];
            let (na, nb) = (da.len(), db.len());
            match kind {
                BinaryKind::Add => layout.for_each(n, nb, na, |i, ia, ib| data[i] = da[ia] + db[ib]),
                BinaryKind::Sub => layout.for_each(n, nb, na, |i, ia, ib| data[i] = da[ia] - db[ib]),
                BinaryKind::Mul => layout.for_each(n, nb, na, |i, ia, ib| data[i] = da[ia] * db[ib]),
                BinaryKind::Div => layout.for_each(n, nb, na, |i, ia, ib| data[i] = da[ia] / db[ib]),
            }
            (Tensor::from_parts(out_shape, data), layout)
        };
        let tracked = self.tape.tracked(&[self.id, other.id]);
        Ok(self
            .tape
            .push(value, Op::Binary(kind, self.id, other.id, layout), tracked))
    }

    /// Elementwise sum with broadcasting.
    pub fn add(self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(other, BinaryKind::Add, "add")
    }

    pub fn sub(self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(other, BinaryKind::Sub, "sub")
    }

    /// Elementwise product with broadcasting.
    pub fn mul(self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(other, BinaryKind::Mul, "mul")
    }

    pub fn div(self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(other, BinaryKind::Div, "div")
    }

    /// `self * scale + shift`.
    pub fn affine(self, scale: f64, shift: f64) -> Var<'t> {
        self.unary(Op::Affine(self.id, scale), |x| x * scale + shift)
    }

    pub fn scale(self, scale: f64) -> Var<'t> {
        self.affine(scale, 0.0)
    }

    pub fn tanh(self) -> Var<'t> {
        self.unary(Op::Tanh(self.id), f64::tanh)
    }

    pub fn sigmoid(self) -> Var<'t> {
        self.unary(Op::Sigmoid(self.id), |x| {
            if x >= 0.0 {
                1.0 / (1.0 + (-x).exp())
            } else {
                let e = x.exp();
                e / (1.0 + e)
            }
        })
    }

    pub fn relu(self) -> Var<'t> {
        self.unary(Op::Relu(self.id), |x| if x > 0.0 { x } else { 0.0 })
    }

    pub fn abs(self) -> Var<'t> {
        self.unary(Op::Abs(self.id), f64::abs)
    }

    /// Batched matrix product over the last two axes; leading axes broadcast.
    pub fn matmul(self, other: Var<'t>) -> Result<Var<'t>> {
        self.same_tape(&other);
        let (value, plan) = {
            let (a, b) = (self.value_ref(), other.value_ref());
            let (sa, sb) = (a.shape(), b.shape());
            if sa.len() < 2 || sb.len() < 2 || sa[sa.len() - 1] != sb[sb.len() - 2] {
                return Err(Error::dim("matmul", format!("{sa:?} x {sb:?}")));
            }
            let (m, k, n) = (sa[sa.len() - 2], sa[sa.len() - 1], sb[sb.len() - 1]);
            let (ba, bb) = (&sa[..sa.len() - 2], &sb[..sb.len() - 2]);
            let batch = broadcast_shapes(ba, bb)
                .ok_or_else(|| Error::dim("matmul", format!("{sa:?} x {sb:?}")))?;
            let (ia, ib) = broadcast_offsets(ba, bb, &batch);
            let a_blocks: Vec<usize> = ia.iter().map(|o| o * m * k).collect();
            let b_blocks: Vec<usize> = ib.iter().map(|o| o * k * n).collect();
            let (da, db) = (a.data(), b.data());
            let mut out = vec![0.0; a_blocks.len() * m * n];
            let merged = stacked_left(&a_blocks, &b_blocks, m * k);
            if merged {
                gemm(m * a_blocks.len(), k, n, da, Strides(k as isize, 1), db, Strides(n as isize, 1), 0.0, &mut out);
            } else {
                for (blk, (&oa, &ob)) in a_blocks.iter().zip(&b_blocks).enumerate() {
                    gemm(
                        m,
                        k,
                        n,
                        &da[oa..oa + m * k],
                        Strides(k as isize, 1),
                        &db[ob..ob + k * n],
                        Strides(n as isize, 1),
                        0.0,
                        &mut out[blk * m * n..(blk + 1) * m * n],
                    );
                }
            }
            let mut shape = batch;
            shape.extend([m, n]);
            (
                Tensor::from_parts(shape, out),
                MatMulPlan {
                    m,
                    k,
                    n,
                    a_blocks,
                    b_blocks,
                    merged,
                },
            )
        };
        let tracked = self.tape.tracked(&[self.id, other.id]);
        Ok(self
            .tape
            .push(value, Op::MatMul(self.id, other.id, plan), tracked))
    }

    pub fn transpose_last(self) -> Result<Var<'t>> {
        if self.value_ref().ndim() < 2 {
            return Err(Error::dim("transpose_last", format!("{:?}", self.shape())));
        }
        let value = self.value_ref().transpose_last();
        let tracked = self.tape.tracked(&[self.id]);
        Ok(self.tape.push(value, Op::TransposeLast(self.id), tracked))
    }

    pub fn reshape(self, shape: &[usize]) -> Result<Var<'t>> {
        let value = self.value().reshape(shape)?;
        let tracked = self.tape.tracked(&[self.id]);
        Ok(self.tape.push(value, Op::Reshape(self.id), tracked))
    }

    /// Columns `start..start + len` of the last axis.
    pub fn slice_last(self, start: usize, len: usize) -> Result<Var<'t>> {
        let value = {
            let a = self.value_ref();
            let w = *a.shape().last().unwrap();
            if len == 0 || start + len > w {
                return Err(Error::dim(
                    "slice_last",
                    format!("{start}..{} of {:?}", start + len, a.shape()),
                ));
            }
            let data = a
                .data()
                .chunks(w)
                .flat_map(|row| row[start..start + len].iter().copied())
                .collect();
            let mut shape = a.shape().to_vec();
            *shape.last_mut().unwrap() = len;
            Tensor::from_parts(shape, data)
        };
        let tracked = self.tape.tracked(&[self.id]);
        Ok(self.tape.push(value, Op::SliceLast(self.id, start), tracked))
    }

    pub fn sum(self) -> Var<'t> {
        let s = self.value_ref().sum();
        let tracked = self.tape.tracked(&[self.id]);
        self.tape.push(Tensor::scalar(s), Op::SumAll(self.id), tracked)
    }

    /// Sum over the last axis, keeping it with extent 1.
    pub fn sum_last(self) -> Var<'t> {
        let value = {
            let a = self.value_ref();
            let w = *a.shape().last().unwrap();
            let data = a.data().chunks(w).map(|r| r.iter().sum()).collect();
            let mut shape = a.shape().to_vec();
            *shape.last_mut().unwrap() = 1;
            Tensor::from_parts(shape, data)
        };
        let tracked = self.tape.tracked(&[self.id]);
        self.tape.push(value, Op::SumLast(self.id), tracked)
    }

    /// Fails with a numeric error naming `context` if any value is NaN or infinite.
    pub fn ensure_finite(self, context: &str) -> Result<Var<'t>> {
        if self.value_ref().all_finite() {
            Ok(self)
        } else {
            Err(Error::Numeric(format!("non-finite value in {context}")))
        }
    }
}

/// Concatenates along the last axis; all leading axes must agree.
pub fn concat_last<'t>(parts: &[Var<'t>]) -> Result<Var<'t>> {
    let first = parts
        .first()
        .ok_or_else(|| Error::dim("concat_last", "no operands"))?;
    let tape = first.tape;
    let value = {
        let vals: Vec<_> = parts
            .iter()
            .map(|p| {
                first.same_tape(p);
                p.value_ref()
            })
            .collect();
        let lead = &vals[0].shape()[..vals[0].ndim() - 1];
        for (i, v) in vals.iter().enumerate() {
            if v.ndim() != lead.len() + 1 || &v.shape()[..v.ndim() - 1] != lead {
                return Err(Error::dim(
                    "concat_last",
                    format!("operand {i} has shape {:?}, expected leading {lead:?}", v.shape()),
                ));
            }
        }
        let widths: Vec<usize> = vals.iter().map(|v| *v.shape().last().unwrap()).collect();
        let total: usize = widths.iter().sum();
        let rows: usize = lead.iter().product();
        let mut data = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for (v, &w) in vals.iter().zip(&widths) {
                data.extend_from_slice(&v.data()[r * w..(r + 1) * w]);
            }
        }
        let mut shape = lead.to_vec();
        shape.push(total);
        Tensor::from_parts(shape, data)
    };
    let ids: Vec<usize> = parts.iter().map(|p| p.id).collect();
    let tracked = tape.tracked(&ids);
    Ok(tape.push(value, Op::ConcatLast(ids), tracked))
}
