//! Reverse-mode automatic differentiation over [`Tensor`] values.
//!
//! A [`Tape`] records every operation applied to [`Var`] handles. Calling
//! [`Tape::backward`] walks the record in reverse and returns a [`Gradients`]
//! table. Parameters enter the tape through [`Tape::param`], which remembers the
//! owning [`ParamStore`] so gradients can be routed back to it.

use std::cell::{Ref, RefCell};
use std::collections::HashMap;
use std::ops::{Add, Mul, Neg, Sub};

use crate::nn::{ParamId, ParamStore};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Sentinel for [`Var::gather`] / [`Var::scatter_add`] index maps: reads as zero.
pub const NO_INDEX: usize = usize::MAX;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Unary {
    Tanh,
    Sigmoid,
    Exp,
    Ln,
    Silu,
    Relu,
    Square,
}

enum Op<F> {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    AddRow(usize, usize),
    MulRow(usize, usize),
    AddCol(usize, usize),
    MulCol(usize, usize),
    Scale(usize, F),
    Shift(usize),
    MatMul(usize, usize),
    Unary(usize, Unary),
    SumAll(usize),
    SumRows(usize),
    SumCols(usize),
    LogSoftmax(usize),
    Softmax(usize),
    Pick(usize, Vec<usize>),
    Gather(usize, Vec<usize>),
    ScatterAdd(usize, Vec<usize>),
    Reshape(usize),
    ConcatCols(Vec<usize>),
    SliceCols(usize, usize),
    LayerNorm(usize, Vec<F>),
    Attention {
        q: usize,
        k: usize,
        v: usize,
        batch: usize,
        seq: usize,
        heads: usize,
        probs: Vec<F>,
    },
    StraightThrough(usize),
}

struct Node<F> {
    value: Tensor<F>,
    op: Op<F>,
    requires_grad: bool,
}

/// Operation record for one forward pass.
pub struct Tape<F> {
    nodes: RefCell<Vec<Node<F>>>,
    params: RefCell<HashMap<(usize, usize), usize>>,
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t, F> {
    tape: &'t Tape<F>,
    idx: usize,
}

impl<F: Scalar> Default for Tape<F> {
    fn default() -> Self {
        Self::new()
    }
}

impl<F: Scalar> Tape<F> {
    pub fn new() -> Self {
        Tape {
            nodes: RefCell::new(Vec::new()),
            params: RefCell::new(HashMap::new()),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, value: Tensor<F>, op: Op<F>, requires_grad: bool) -> Var<'_, F> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var {
            tape: self,
            idx: nodes.len() - 1,
        }
    }

    /// Input that never receives a gradient.
    pub fn constant(&self, value: Tensor<F>) -> Var<'_, F> {
        self.push(value, Op::Leaf, false)
    }

    /// Differentiable input (e.g. a latent being optimized).
    pub fn leaf(&self, value: Tensor<F>) -> Var<'_, F> {
        self.push(value, Op::Leaf, true)
    }

    /// Parameter `id` of `store`, recorded once per tape.
    pub fn param(&self, store: &ParamStore<F>, id: ParamId) -> Var<'_, F> {
        let key = (store.key(), id.index());
        if let Some(&idx) = self.params.borrow().get(&key) {
            return Var { tape: self, idx };
        }
        let v = self.push(store.get(id).clone(), Op::Leaf, true);
        self.params.borrow_mut().insert(key, v.idx);
        v
    }

    fn value(&self, idx: usize) -> Ref<'_, Tensor<F>> {
        Ref::map(self.nodes.borrow(), |n| &n[idx].value)
    }

    fn rg(&self, idx: usize) -> bool {
        self.nodes.borrow()[idx].requires_grad
    }

    /// Reverse pass from `root`, seeded with ones.
    pub fn backward(&self, root: Var<'_, F>) -> Gradients<F> {
        let nodes = self.nodes.borrow();
        let n = root.idx + 1;
        let mut grads: Vec<Option<Tensor<F>>> = (0..n).map(|_| None).collect();
        let (r, c) = nodes[root.idx].value.shape();
        grads[root.idx] = Some(Tensor::filled(r, c, F::one()));

        for i in (0..n).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &nodes[i];
            if !node.requires_grad {
                grads[i] = Some(g);
                continue;
            }
            backprop(&nodes, i, &g, &mut grads);
            grads[i] = Some(g);
        }

        let params = self
            .params
            .borrow()
            .iter()
            .map(|(&(store, id), &node)| ((store, id), node))
            .collect();
        Gradients { grads, params }
    }
}

fn accumulate<F: Scalar>(
    nodes: &[Node<F>],
    grads: &mut [Option<Tensor<F>>],
    idx: usize,
    g: Tensor<F>,
) {
    if !nodes[idx].requires_grad {
        return;
    }
    match &mut grads[idx] {
        Some(acc) => acc.add_assign(&g),
        slot @ None => *slot = Some(g),
    }
}

fn row_sums<F: Scalar>(t: &Tensor<F>) -> Tensor<F> {
    Tensor::from_fn(t.rows(), 1, |r, _| t.row(r).iter().copied().sum())
}

fn col_sums<F: Scalar>(t: &Tensor<F>) -> Tensor<F> {
    let mut out = Tensor::zeros(1, t.cols());
    for r in 0..t.rows() {
        for (o, &x) in out.data_mut().iter_mut().zip(t.row(r)) {
            *o += x;
        }
    }
    out
}

fn backprop<F: Scalar>(
    nodes: &[Node<F>],
    i: usize,
    g: &Tensor<F>,
    grads: &mut [Option<Tensor<F>>],
) {
    let out = &nodes[i].value;
    let val = |j: usize| &nodes[j].value;
    match &nodes[i].op {
        Op::Leaf => {}
        Op::Add(a, b) => {
            accumulate(nodes, grads, *a, g.clone());
            accumulate(nodes, grads, *b, g.clone());
        }
        Op::Sub(a, b) => {
            accumulate(nodes, grads, *a, g.clone());
            accumulate(nodes, grads, *b, g.map(|x| -x));
        }
        Op::Mul(a, b) => {
            accumulate(nodes, grads, *a, g.zip_map(val(*b), |x, y| x * y));
            accumulate(nodes, grads, *b, g.zip_map(val(*a), |x, y| x * y));
        }
        Op::AddRow(a, row) => {
            accumulate(nodes, grads, *a, g.clone());
            accumulate(nodes, grads, *row, col_sums(g));
        }
        Op::MulRow(a, row) => {
            let rv = val(*row);
            let ga = Tensor::from_fn(g.rows(), g.cols(), |r, c| g.get(r, c) * rv.get(0, c));
            accumulate(nodes, grads, *a, ga);
            let prod = g.zip_map(val(*a), |x, y| x * y);
            accumulate(nodes, grads, *row, col_sums(&prod));
        }
        Op::AddCol(a, col) => {
            accumulate(nodes, grads, *a, g.clone());
            accumulate(nodes, grads, *col, row_sums(g));
        }
        Op::MulCol(a, col) => {
            let cv = val(*col);
            let ga = Tensor::from_fn(g.rows(), g.cols(), |r, c| g.get(r, c) * cv.get(r, 0));
            accumulate(nodes, grads, *a, ga);
            let prod = g.zip_map(val(*a), |x, y| x * y);
            accumulate(nodes, grads, *col, row_sums(&prod));
        }
        Op::Scale(a, k) => {
            let k = *k;
            accumulate(nodes, grads, *a, g.map(|x| x * k));
        }
        Op::Shift(a) => accumulate(nodes, grads, *a, g.clone()),
        Op::MatMul(a, b) => {
            if nodes[*a].requires_grad {
                accumulate(nodes, grads, *a, g.matmul_nt(val(*b)));
            }
            if nodes[*b].requires_grad {
                accumulate(nodes, grads, *b, val(*a).matmul_tn(g));
            }
        }
        Op::Unary(a, kind) => {
            let x = val(*a);
            let ga = match kind {
                Unary::Tanh => g.zip_map(out, |g, y| g * (F::one() - y * y)),
                Unary::Sigmoid => g.zip_map(out, |g, y| g * y * (F::one() - y)),
                Unary::Exp => g.zip_map(out, |g, y| g * y),
                Unary::Ln => g.zip_map(x, |g, x| g / x),
                Unary::Silu => g.zip_map(x, |g, x| {
                    let s = F::one() / (F::one() + (-x).exp());
                    g * s * (F::one() + x * (F::one() - s))
                }),
                Unary::Relu => g.zip_map(x, |g, x| if x > F::zero() { g } else { F::zero() }),
                Unary::Square => g.zip_map(x, |g, x| g * (x + x)),
            };
            accumulate(nodes, grads, *a, ga);
        }
        Op::SumAll(a) => {
            let (r, c) = val(*a).shape();
            accumulate(nodes, grads, *a, Tensor::filled(r, c, g.item()));
        }
        Op::SumRows(a) => {
            let (r, c) = val(*a).shape();
            accumulate(nodes, grads, *a, Tensor::from_fn(r, c, |i, _| g.get(i, 0)));
        }
        Op::SumCols(a) => {
            let (r, c) = val(*a).shape();
            accumulate(nodes, grads, *a, Tensor::from_fn(r, c, |_, j| g.get(0, j)));
        }
        Op::LogSoftmax(a) => {
            let mut ga = g.clone();
            for r in 0..g.rows() {
                let gs: F = g.row(r).iter().copied().sum();
                for (c, o) in ga.row_mut(r).iter_mut().enumerate() {
                    *o -= out.get(r, c).exp() * gs;
                }
            }
            accumulate(nodes, grads, *a, ga);
        }
        Op::Softmax(a) => {
            let mut ga = g.clone();
            for r in 0..g.rows() {
                let dot: F = g.row(r).iter().zip(out.row(r)).map(|(&x, &y)| x * y).sum();
                for (c, o) in ga.row_mut(r).iter_mut().enumerate() {
                    *o = out.get(r, c) * (*o - dot);
                }
            }
            accumulate(nodes, grads, *a, ga);
        }
        Op::Pick(a, idx) => {
            let (r, c) = val(*a).shape();
            let mut ga = Tensor::zeros(r, c);
            for (row, &j) in idx.iter().enumerate() {
                ga.set(row, j, g.get(row, 0));
            }
            accumulate(nodes, grads, *a, ga);
        }
        Op::Gather(a, idx) => {
            let (r, c) = val(*a).shape();
            let mut ga = Tensor::zeros(r, c);
            let d = ga.data_mut();
            for (k, &j) in idx.iter().enumerate() {
                if j != NO_INDEX {
                    d[j] += g.data()[k];
                }
            }
            accumulate(nodes, grads, *a, ga);
        }
        Op::ScatterAdd(a, idx) => {
            let (r, c) = val(*a).shape();
            let gd = g.data();
            let ga = Tensor::from_vec(
                r,
                c,
                idx.iter()
                    .map(|&j| if j == NO_INDEX { F::zero() } else { gd[j] })
                    .collect(),
            )
            .expect("scatter index map matches source size");
            accumulate(nodes, grads, *a, ga);
        }
        Op::Reshape(a) => {
            let (r, c) = val(*a).shape();
            let ga = g.clone().reshaped(r, c).expect("reshape preserves size");
            accumulate(nodes, grads, *a, ga);
        }
        Op::ConcatCols(parts) => {
            let mut offset = 0;
            for &p in parts {
                let w = val(p).cols();
                let gp = Tensor::from_fn(g.rows(), w, |r, c| g.get(r, offset + c));
                accumulate(nodes, grads, p, gp);
                offset += w;
            }
        }
        Op::SliceCols(a, start) => {
            let (r, c) = val(*a).shape();
            let w = g.cols();
            let ga = Tensor::from_fn(r, c, |i, j| {
                if j >= *start && j < start + w {
                    g.get(i, j - start)
                } else {
                    F::zero()
                }
            });
            accumulate(nodes, grads, *a, ga);
        }
        Op::LayerNorm(a, rstd) => {
            let n = F::of_usize(g.cols());
            let mut ga = Tensor::zeros(g.rows(), g.cols());
            for r in 0..g.rows() {
                let gr = g.row(r);
                let yr = out.row(r);
                let mg: F = gr.iter().copied().sum::<F>() / n;
                let mgy: F = gr.iter().zip(yr).map(|(&a, &b)| a * b).sum::<F>() / n;
                for (c, o) in ga.row_mut(r).iter_mut().enumerate() {
                    *o = rstd[r] * (gr[c] - mg - yr[c] * mgy);
                }
            }
            accumulate(nodes, grads, *a, ga);
        }
        Op::Attention {
            q,
            k,
            v,
            batch,
            seq,
            heads,
            probs,
        } => {
            let (gq, gk, gv) =
                attention_backward(val(*q), val(*k), val(*v), g, probs, *batch, *seq, *heads);
            accumulate(nodes, grads, *q, gq);
            accumulate(nodes, grads, *k, gk);
            accumulate(nodes, grads, *v, gv);
        }
        Op::StraightThrough(soft) => accumulate(nodes, grads, *soft, g.clone()),
    }
}

#[allow(clippy::too_many_arguments)]
fn attention_backward<F: Scalar>(
    q: &Tensor<F>,
    k: &Tensor<F>,
    v: &Tensor<F>,
    g: &Tensor<F>,
    probs: &[F],
    batch: usize,
    seq: usize,
    heads: usize,
) -> (Tensor<F>, Tensor<F>, Tensor<F>) {
    let width = q.cols();
    let dh = width / heads;
    let scale = F::one() / F::of_usize(dh).sqrt();
    let mut gq = Tensor::zeros(q.rows(), width);
    let mut gk = Tensor::zeros(k.rows(), width);
    let mut gv = Tensor::zeros(v.rows(), width);
    let mut dp = vec![F::zero(); seq];
    for b in 0..batch {
        for h in 0..heads {
            let p_off = (b * heads + h) * seq * seq;
            let col = h * dh;
            for i in 0..seq {
                let p = &probs[p_off + i * seq..p_off + (i + 1) * seq];
                let gi = b * seq + i;
                for j in 0..seq {
                    let vj = b * seq + j;
                    let mut s = F::zero();
                    for d in 0..dh {
                        s += g.get(gi, col + d) * v.get(vj, col + d);
                    }
                    dp[j] = s;
                    for d in 0..dh {
                        let cur = gv.get(vj, col + d);
                        gv.set(vj, col + d, cur + p[j] * g.get(gi, col + d));
                    }
                }
                let dot: F = dp.iter().zip(p).map(|(&a, &b)| a * b).sum();
                for j in 0..seq {
                    let ds = p[j] * (dp[j] - dot) * scale;
                    if ds == F::zero() {
                        continue;
                    }
                    let kj = b * seq + j;
                    for d in 0..dh {
                        let cq = gq.get(gi, col + d);
                        gq.set(gi, col + d, cq + ds * k.get(kj, col + d));
                        let ck = gk.get(kj, col + d);
                        gk.set(kj, col + d, ck + ds * q.get(gi, col + d));
                    }
                }
            }
        }
    }
    (gq, gk, gv)
}

/// Result of [`Tape::backward`].
pub struct Gradients<F> {
    grads: Vec<Option<Tensor<F>>>,
    params: Vec<((usize, usize), usize)>,
}

impl<F: Scalar> Gradients<F> {
    /// Gradient with respect to `var`, if it was reached.
    pub fn wrt(&self, var: Var<'_, F>) -> Option<&Tensor<F>> {
        self.grads.get(var.idx).and_then(Option::as_ref)
    }

    /// Per-parameter gradients of `store`, indexed by [`ParamId`].
    pub fn for_store(&self, store: &ParamStore<F>) -> Vec<Option<Tensor<F>>> {
        let mut out: Vec<Option<Tensor<F>>> = (0..store.len()).map(|_| None).collect();
        for &((key, id), node) in &self.params {
            if key == store.key() {
                if let Some(g) = self.grads.get(node).and_then(Option::as_ref) {
                    out[id] = Some(g.clone());
                }
            }
        }
        out
    }
}

impl<'t, F: Scalar> Var<'t, F> {
    pub fn tape(&self) -> &'t Tape<F> {
        self.tape
    }

    /// Snapshot of the forward value.
    pub fn value(&self) -> Tensor<F> {
        self.tape.value(self.idx).clone()
    }

    pub fn shape(&self) -> (usize, usize) {
        self.tape.value(self.idx).shape()
    }

    pub fn rows(&self) -> usize {
        self.shape().0
    }

    pub fn cols(&self) -> usize {
        self.shape().1
    }

    /// Scalar value of a 1x1 node.
    pub fn item(&self) -> F {
        self.tape.value(self.idx).item()
    }

    fn unary_op(self, value: Tensor<F>, op: Op<F>) -> Var<'t, F> {
        let rg = self.tape.rg(self.idx);
        self.tape.push(value, op, rg)
    }

    fn binary_op(self, other: Var<'t, F>, value: Tensor<F>, op: Op<F>) -> Var<'t, F> {
        let rg = self.tape.rg(self.idx) || self.tape.rg(other.idx);
        self.tape.push(value, op, rg)
    }

    fn same_shape(&self, other: &Var<'t, F>, what: &str) {
        assert_eq!(self.shape(), other.shape(), "{what}: shape mismatch");
    }

    pub fn mul(self, other: Var<'t, F>) -> Var<'t, F> {
        self.same_shape(&other, "mul");
        let v = {
            let a = self.tape.value(self.idx);
            let b = self.tape.value(other.idx);
            a.zip_map(&b, |x, y| x * y)
        };
        self.binary_op(other, v, Op::Mul(self.idx, other.idx))
    }

    /// Broadcast-add a `1 x cols` row to every row.
    pub fn add_row(self, row: Var<'t, F>) -> Var<'t, F> {
        let v = {
            let a = self.tape.value(self.idx);
            let r = self.tape.value(row.idx);
            assert_eq!(r.shape(), (1, a.cols()), "add_row shape");
            Tensor::from_fn(a.rows(), a.cols(), |i, j| a.get(i, j) + r.get(0, j))
        };
        self.binary_op(row, v, Op::AddRow(self.idx, row.idx))
    }

    /// Broadcast-multiply every row by a `1 x cols` row.
    pub fn mul_row(self, row: Var<'t, F>) -> Var<'t, F> {
        let v = {
            let a = self.tape.value(self.idx);
            let r = self.tape.value(row.idx);
            assert_eq!(r.shape(), (1, a.cols()), "mul_row shape");
            Tensor::from_fn(a.rows(), a.cols(), |i, j| a.get(i, j) * r.get(0, j))
        };
        self.binary_op(row, v, Op::MulRow(self.idx, row.idx))
    }

    /// Broadcast-add a `rows x 1` column to every column.
    pub fn add_col(self, col: Var<'t, F>) -> Var<'t, F> {
        let v = {
            let a = self.tape.value(self.idx);
            let c = self.tape.value(col.idx);
            assert_eq!(c.shape(), (a.rows(), 1), "add_col shape");
            Tensor::from_fn(a.rows(), a.cols(), |i, j| a.get(i, j) + c.get(i, 0))
        };
        self.binary_op(col, v, Op::AddCol(self.idx, col.idx))
    }

    /// Broadcast-multiply every column by a `rows x 1` column.
    pub fn mul_col(self, col: Var<'t, F>) -> Var<'t, F> {
        let v = {
            let a = self.tape.value(self.idx);
            let c = self.tape.value(col.idx);
            assert_eq!(c.shape(), (a.rows(), 1), "mul_col shape");
            Tensor::from_fn(a.rows(), a.cols(), |i, j| a.get(i, j) * c.get(i, 0))
        };
        self.binary_op(col, v, Op::MulCol(self.idx, col.idx))
    }

    pub fn scale(self, k: F) -> Var<'t, F> {
        let v = self.tape.value(self.idx).map(|x| x * k);
        self.unary_op(v, Op::Scale(self.idx, k))
    }

    pub fn shift(self, k: F) -> Var<'t, F> {
        let v = self.tape.value(self.idx).map(|x| x + k);
        self.unary_op(v, Op::Shift(self.idx))
    }

    pub fn matmul(self, other: Var<'t, F>) -> Var<'t, F> {
        let v = {
            let a = self.tape.value(self.idx);
            let b = self.tape.value(other.idx);
            a.matmul(&b)
        };
        self.binary_op(other, v, Op::MatMul(self.idx, other.idx))
    }

    pub fn apply(self, kind: Unary) -> Var<'t, F> {
        let v = {
            let a = self.tape.value(self.idx);
            match kind {
                Unary::Tanh => a.map(F::tanh),
                Unary::Sigmoid => a.map(|x| F::one() / (F::one() + (-x).exp())),
                Unary::Exp => a.map(F::exp),
                Unary::Ln => a.map(F::ln),
                Unary::Silu => a.map(|x| x / (F::one() + (-x).exp())),
                Unary::Relu => a.map(|x| x.max(F::zero())),
                Unary::Square => a.map(|x| x * x),
            }
        };
        self.unary_op(v, Op::Unary(self.idx, kind))
    }

    pub fn tanh(self) -> Var<'t, F> {
        self.apply(Unary::Tanh)
    }

    pub fn sigmoid(self) -> Var<'t, F> {
        self.apply(Unary::Sigmoid)
    }

    pub fn exp(self) -> Var<'t, F> {
        self.apply(Unary::Exp)
    }

    pub fn ln(self) -> Var<'t, F> {
        self.apply(Unary::Ln)
    }

    pub fn silu(self) -> Var<'t, F> {
        self.apply(Unary::Silu)
    }

    pub fn relu(self) -> Var<'t, F> {
        self.apply(Unary::Relu)
    }

    pub fn square(self) -> Var<'t, F> {
        self.apply(Unary::Square)
    }

    pub fn sum(self) -> Var<'t, F> {
        let v = Tensor::scalar(self.tape.value(self.idx).sum());
        self.unary_op(v, Op::SumAll(self.idx))
    }

    pub fn mean(self) -> Var<'t, F> {
        let n = F::of_usize(self.tape.value(self.idx).len());
        self.sum().scale(F::one() / n)
    }

    /// Sum across columns: `rows x cols -> rows x 1`.
    pub fn sum_rows(self) -> Var<'t, F> {
        let v = row_sums(&self.tape.value(self.idx));
        self.unary_op(v, Op::SumRows(self.idx))
    }

    /// Sum down rows: `rows x cols -> 1 x cols`.
    pub fn sum_cols(self) -> Var<'t, F> {
        let v = col_sums(&self.tape.value(self.idx));
        self.unary_op(v, Op::SumCols(self.idx))
    }

    pub fn log_softmax(self) -> Var<'t, F> {
        let v = {
            let a = self.tape.value(self.idx);
            let mut out = a.clone();
            for r in 0..a.rows() {
                let lse = crate::scalar::log_sum_exp(a.row(r));
                for x in out.row_mut(r) {
                    *x -= lse;
                }
            }
            out
        };
        self.unary_op(v, Op::LogSoftmax(self.idx))
    }

    pub fn softmax(self) -> Var<'t, F> {
        let v = {
            let a = self.tape.value(self.idx);
            let mut out = a.clone();
            for r in 0..a.rows() {
                crate::scalar::softmax_into(a.row(r), out.row_mut(r));
            }
            out
        };
        self.unary_op(v, Op::Softmax(self.idx))
    }

    /// One element per row: `out[r] = self[r, idx[r]]`.
    pub fn pick(self, idx: &[usize]) -> Var<'t, F> {
        let v = {
            let a = self.tape.value(self.idx);
            assert_eq!(idx.len(), a.rows(), "pick: one index per row");
            Tensor::from_fn(a.rows(), 1, |r, _| a.get(r, idx[r]))
        };
        self.unary_op(v, Op::Pick(self.idx, idx.to_vec()))
    }

    /// Flat gather: `out.data[k] = self.data[idx[k]]` (zero for [`NO_INDEX`]).
    pub fn gather(self, idx: Vec<usize>, rows: usize, cols: usize) -> Var<'t, F> {
        assert_eq!(idx.len(), rows * cols, "gather: index map size");
        let v = {
            let a = self.tape.value(self.idx);
            let d = a.data();
            Tensor::from_vec(
                rows,
                cols,
                idx.iter()
                    .map(|&j| if j == NO_INDEX { F::zero() } else { d[j] })
                    .collect(),
            )
            .expect("gather size")
        };
        self.unary_op(v, Op::Gather(self.idx, idx))
    }

    /// Flat scatter-add: `out.data[idx[k]] += self.data[k]`.
    pub fn scatter_add(self, idx: Vec<usize>, rows: usize, cols: usize) -> Var<'t, F> {
        let v = {
            let a = self.tape.value(self.idx);
            assert_eq!(idx.len(), a.len(), "scatter_add: index map size");
            let mut out = Tensor::zeros(rows, cols);
            let od = out.data_mut();
            for (k, &j) in idx.iter().enumerate() {
                if j != NO_INDEX {
                    od[j] += a.data()[k];
                }
            }
            out
        };
        self.unary_op(v, Op::ScatterAdd(self.idx, idx))
    }

    /// Rows selected by index (embedding lookup / broadcast).
    pub fn select_rows(self, idx: &[usize]) -> Var<'t, F> {
        let cols = self.cols();
        let map = idx
            .iter()
            .flat_map(|&r| (0..cols).map(move |c| r * cols + c))
            .collect();
        self.gather(map, idx.len(), cols)
    }

    /// Columns selected by index.
    pub fn select_cols(self, idx: &[usize]) -> Var<'t, F> {
        let (rows, cols) = self.shape();
        let map = (0..rows)
            .flat_map(|r| idx.iter().map(move |&c| r * cols + c))
            .collect();
        self.gather(map, rows, idx.len())
    }

    pub fn reshape(self, rows: usize, cols: usize) -> Var<'t, F> {
        let v = self
            .tape
            .value(self.idx)
            .clone()
            .reshaped(rows, cols)
            .expect("reshape size");
        self.unary_op(v, Op::Reshape(self.idx))
    }

    pub fn slice_cols(self, start: usize, end: usize) -> Var<'t, F> {
        let v = {
            let a = self.tape.value(self.idx);
            Tensor::from_fn(a.rows(), end - start, |r, c| a.get(r, start + c))
        };
        self.unary_op(v, Op::SliceCols(self.idx, start))
    }

    pub fn concat_cols(parts: &[Var<'t, F>]) -> Var<'t, F> {
        let tape = parts[0].tape;
        let v = {
            let vals: Vec<_> = parts.iter().map(|p| tape.value(p.idx)).collect();
            let rows = vals[0].rows();
            assert!(vals.iter().all(|v| v.rows() == rows), "concat_cols rows");
            let cols: usize = vals.iter().map(|v| v.cols()).sum();
            let mut out = Tensor::zeros(rows, cols);
            for r in 0..rows {
                let mut off = 0;
                for v in &vals {
                    out.row_mut(r)[off..off + v.cols()].copy_from_slice(v.row(r));
                    off += v.cols();
                }
            }
            out
        };
        let rg = parts.iter().any(|p| tape.rg(p.idx));
        tape.push(v, Op::ConcatCols(parts.iter().map(|p| p.idx).collect()), rg)
    }

    /// Per-row standardization without affine terms.
    pub fn layer_norm(self, eps: F) -> Var<'t, F> {
        let (v, rstd) = {
            let a = self.tape.value(self.idx);
            let n = F::of_usize(a.cols());
            let mut out = a.clone();
            let mut rstd = Vec::with_capacity(a.rows());
            for r in 0..a.rows() {
                let row = a.row(r);
                let mean = row.iter().copied().sum::<F>() / n;
                let var = row.iter().map(|&x| (x - mean) * (x - mean)).sum::<F>() / n;
                let s = F::one() / (var + eps).sqrt();
                for x in out.row_mut(r) {
                    *x = (*x - mean) * s;
                }
                rstd.push(s);
            }
            (out, rstd)
        };
        self.unary_op(v, Op::LayerNorm(self.idx, rstd))
    }

    /// Multi-head bidirectional scaled dot-product attention. `q`, `k`, `v`
    /// are `(batch * seq) x width` with heads laid out as contiguous column blocks.
    pub fn attention(
        q: Var<'t, F>,
        k: Var<'t, F>,
        v: Var<'t, F>,
        batch: usize,
        seq: usize,
        heads: usize,
    ) -> Var<'t, F> {
        let tape = q.tape;
        let (out, probs) = {
            let qv = tape.value(q.idx);
            let kv = tape.value(k.idx);
            let vv = tape.value(v.idx);
            let width = qv.cols();
            assert_eq!(qv.rows(), batch * seq, "attention rows");
            assert_eq!(width % heads, 0, "attention width divisible by heads");
            let dh = width / heads;
            let scale = F::one() / F::of_usize(dh).sqrt();
            let mut out = Tensor::zeros(batch * seq, width);
            let mut probs = vec![F::zero(); batch * heads * seq * seq];
            let mut scores = vec![F::zero(); seq];
            for b in 0..batch {
                for h in 0..heads {
                    let col = h * dh;
                    let p_off = (b * heads + h) * seq * seq;
                    for i in 0..seq {
                        let qi = b * seq + i;
                        for (j, s) in scores.iter_mut().enumerate() {
                            let kj = b * seq + j;
                            let mut acc = F::zero();
                            for d in 0..dh {
                                acc += qv.get(qi, col + d) * kv.get(kj, col + d);
                            }
                            *s = acc * scale;
                        }
                        let p = &mut probs[p_off + i * seq..p_off + (i + 1) * seq];
                        crate::scalar::softmax_into(&scores, p);
                        for (j, &pj) in p.iter().enumerate() {
                            let vj = b * seq + j;
                            for d in 0..dh {
                                let cur = out.get(qi, col + d);
                                out.set(qi, col + d, cur + pj * vv.get(vj, col + d));
                            }
                        }
                    }
                }
            }
            (out, probs)
        };
        let rg = tape.rg(q.idx) || tape.rg(k.idx) || tape.rg(v.idx);
        tape.push(
            out,
            Op::Attention {
                q: q.idx,
                k: k.idx,
                v: v.idx,
                batch,
                seq,
                heads,
                probs,
            },
            rg,
        )
    }

    /// Forward value `hard`, gradient routed to `self` unchanged.
    pub fn straight_through(self, hard: Tensor<F>) -> Var<'t, F> {
        assert_eq!(hard.shape(), self.shape(), "straight_through shape");
        self.unary_op(hard, Op::StraightThrough(self.idx))
    }

    /// Value copied into a new constant; gradients stop here.
    pub fn detach(self) -> Var<'t, F> {
        self.tape.constant(self.value())
    }
}

impl<'t, F: Scalar> Add for Var<'t, F> {
    type Output = Var<'t, F>;
    fn add(self, other: Var<'t, F>) -> Var<'t, F> {
        self.same_shape(&other, "add");
        let v = {
            let a = self.tape.value(self.idx);
            let b = self.tape.value(other.idx);
            a.zip_map(&b, |x, y| x + y)
        };
        self.binary_op(other, v, Op::Add(self.idx, other.idx))
    }
}

impl<'t, F: Scalar> Sub for Var<'t, F> {
    type Output = Var<'t, F>;
    fn sub(self, other: Var<'t, F>) -> Var<'t, F> {
        self.same_shape(&other, "sub");
        let v = {
            let a = self.tape.value(self.idx);
            let b = self.tape.value(other.idx);
            a.zip_map(&b, |x, y| x - y)
        };
        self.binary_op(other, v, Op::Sub(self.idx, other.idx))
    }
}

impl<'t, F: Scalar> Mul for Var<'t, F> {
    type Output = Var<'t, F>;
    fn mul(self, other: Var<'t, F>) -> Var<'t, F> {
        Var::mul(self, other)
    }
}

impl<'t, F: Scalar> Neg for Var<'t, F> {
    type Output = Var<'t, F>;
    fn neg(self) -> Var<'t, F> {
        self.scale(-F::one())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// Central-difference check of `d f / d x` for a scalar-valued builder.
    fn check_grad(
        x0: Tensor<f64>,
        build: impl for<'t> Fn(&'t Tape<f64>, Var<'t, f64>) -> Var<'t, f64>,
    ) {
        let tape = Tape::new();
        let x = tape.leaf(x0.clone());
        let y = build(&tape, x);
        let g = tape.backward(y).wrt(x).unwrap().clone();
        let h = 1e-5;
        for i in 0..x0.len() {
            let mut xp = x0.clone();
            xp.data_mut()[i] += h;
            let mut xm = x0.clone();
            xm.data_mut()[i] -= h;
            let tp = Tape::new();
            let fp = build(&tp, tp.leaf(xp)).item();
            let tm = Tape::new();
            let fm = build(&tm, tm.leaf(xm)).item();
            let fd = (fp - fm) / (2.0 * h);
            let an = g.data()[i];
            let err = (fd - an).abs() / (1.0 + fd.abs().max(an.abs()));
            assert!(err < 1e-6, "element {i}: fd {fd} vs analytic {an}");
        }
    }

    fn rand_t(r: usize, c: usize, seed: u64) -> Tensor<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::randn(r, c, 1.0, &mut rng)
    }

    #[test]
    fn elementwise_and_reductions() {
        let w = rand_t(3, 4, 1);
        check_grad(rand_t(3, 4, 2), |t, x| {
            let w = t.constant(w.clone());
            (x.tanh() * w + x.square().scale(0.3) - x.sigmoid()).sum()
        });
        check_grad(rand_t(3, 4, 3), |_, x| x.silu().sum_rows().square().sum());
        check_grad(rand_t(3, 4, 4), |_, x| x.sum_cols().tanh().sum());
        check_grad(rand_t(2, 3, 5).map(|v| v.abs() + 0.5), |_, x| x.ln().exp().relu().sum());
    }

    #[test]
    fn broadcasts_and_matmul() {
        let a = rand_t(4, 3, 6);
        let row = rand_t(1, 3, 7);
        let col = rand_t(4, 1, 8);
        check_grad(rand_t(3, 2, 9), |t, x| {
            t.constant(a.clone()).matmul(x).tanh().sum()
        });
        check_grad(row.clone(), |t, r| {
            t.constant(a.clone()).mul_row(r).add_row(r.square()).tanh().sum()
        });
        check_grad(col.clone(), |t, c| {
            t.constant(a.clone()).mul_col(c).add_col(c.tanh()).square().sum()
        });
    }

    #[test]
    fn softmax_family() {
        let w = rand_t(3, 5, 10);
        check_grad(rand_t(3, 5, 11), |t, x| (x.log_softmax() * t.constant(w.clone())).sum());
        check_grad(rand_t(3, 5, 12), |t, x| (x.softmax() * t.constant(w.clone())).sum());
        check_grad(rand_t(3, 5, 13), |_, x| x.log_softmax().pick(&[0, 4, 2]).sum());
    }

    #[test]
    fn structural_ops() {
        let w = rand_t(2, 6, 14);
        check_grad(rand_t(3, 4, 15), |t, x| {
            let g = x.gather(vec![0, 5, NO_INDEX, 11, 5, 7, 1, 2, 3, 4, 8, 9], 2, 6);
            (g * t.constant(w.clone())).sum()
        });
        check_grad(rand_t(2, 3, 16), |t, x| {
            let s = x.scatter_add(vec![0, 3, 3, NO_INDEX, 5, 1], 2, 3);
            (s.square() * t.constant(rand_t(2, 3, 17))).sum()
        });
        check_grad(rand_t(2, 6, 18), |_, x| {
            let a = x.slice_cols(0, 2);
            let b = x.slice_cols(3, 6).tanh();
            Var::concat_cols(&[b, a]).reshape(5, 2).square().sum()
        });
        check_grad(rand_t(3, 5, 19), |t, x| {
            (x.layer_norm(1e-5) * t.constant(rand_t(3, 5, 20))).sum()
        });
    }

    #[test]
    fn attention_gradients() {
        let (batch, seq, width, heads) = (2, 3, 4, 2);
        let kv = rand_t(batch * seq, width, 21);
        let w = rand_t(batch * seq, width, 22);
        check_grad(rand_t(batch * seq, width, 23), |t, x| {
            let k = t.constant(kv.clone());
            let out = Var::attention(x, k.tanh(), x.scale(0.5) + k, batch, seq, heads);
            (out * t.constant(w.clone())).sum()
        });
    }

    #[test]
    fn attention_rows_are_convex_combinations() {
        let tape = Tape::new();
        let q = tape.constant(rand_t(3, 2, 24));
        let k = tape.constant(rand_t(3, 2, 25));
        let v = tape.constant(Tensor::filled(3, 2, 1.5));
        let out = Var::attention(q, k, v, 1, 3, 1).value();
        assert!(out.data().iter().all(|&x| (x - 1.5).abs() < 1e-12));
    }

    #[test]
    fn straight_through_routes_gradient() {
        let tape = Tape::new();
        let x = tape.leaf(rand_t(1, 3, 26));
        let hard = Tensor::from_vec(1, 3, vec![0.0, 1.0, 0.0]).unwrap();
        let y = x.softmax().straight_through(hard.clone());
        assert_eq!(y.value(), hard);
        let w = tape.constant(Tensor::from_vec(1, 3, vec![1.0, 2.0, 3.0]).unwrap());
        let loss = (y * w).sum();
        let g = tape.backward(loss).wrt(x).unwrap().clone();
        // gradient equals that of the soft path
        let t2 = Tape::new();
        let x2 = t2.leaf(x.value());
        let w2 = t2.constant(Tensor::from_vec(1, 3, vec![1.0, 2.0, 3.0]).unwrap());
        let l2 = (x2.softmax() * w2).sum();
        let g2 = t2.backward(l2).wrt(x2).unwrap().clone();
        assert!(g.max_abs_diff(&g2) < 1e-12);
    }

    #[test]
    fn constants_receive_no_gradient() {
        let tape = Tape::<f64>::new();
        let c = tape.constant(Tensor::filled(2, 2, 1.0));
        let x = tape.leaf(Tensor::filled(2, 2, 2.0));
        let y = (c * x).sum();
        let g = tape.backward(y);
        assert!(g.wrt(c).is_none());
        assert!(g.wrt(x).is_some());
    }
}
