//! Tape-based reverse-mode differentiation over dense arrays.
//!
//! A [`Tape`] records every operation in evaluation order, so node ids are a
//! topological order by construction and backward is a single reverse sweep.
//! Graphs are rebuilt per evaluation; recorded values are never mutated.
//!
//! Binary operations check shapes and return [`Error::ShapeMismatch`]. The
//! only broadcast supported is a `[cols]` vector over the rows of a
//! `[rows, cols]` matrix ([`Var::add_row`], [`Var::affine`]).

use std::cell::RefCell;

use crate::error::{Error, Result};
use crate::numerics::array::DenseArray;

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    AddRow(usize, usize),
    Scale(usize, f64),
    AddConst(usize),
    Exp(usize),
    Log(usize),
    Tanh(usize),
    Sigmoid(usize),
    Softplus(usize),
    Square(usize),
    Clamp(usize, f64, f64),
    Affine { x: usize, w: usize, b: usize },
    Sum(usize),
    Mean(usize),
    RowSum(usize),
    RowSumSorted(usize),
    RowMean(usize),
    RowLogSumExp(usize),
    RowLogMeanExp(usize),
    Gather(usize, Vec<usize>),
    ConcatRows(Vec<usize>),
    ConcatCols(Vec<usize>),
    Reshape(usize),
    IndexedGaussian(Box<IndexedGaussian>),
    IndexedBernoulli(Box<IndexedBernoulli>),
}

/// Row `n` is `log N(value[value_rows[n]] | mean[mean_rows[n]], exp(log_var))`
/// summed over columns; `log_var` is indexed like `mean` or shared as `[cols]`.
#[derive(Clone, Debug)]
struct IndexedGaussian {
    mean: usize,
    log_var: usize,
    value: usize,
    mean_rows: Vec<usize>,
    value_rows: Vec<usize>,
    shared_var: bool,
}

/// Row `n` is `Σ_j x_j l_j − softplus(l_j)` with `l = logits[logit_rows[n]]`
/// and `x = target[target_rows[n]]`.
#[derive(Clone, Debug)]
struct IndexedBernoulli {
    logits: usize,
    target: usize,
    logit_rows: Vec<usize>,
    target_rows: Vec<usize>,
}

impl Op {
    fn parents(&self) -> Vec<usize> {
        match self {
            Op::Leaf => vec![],
            Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) | Op::AddRow(a, b) => vec![*a, *b],
            Op::Affine { x, w, b } => vec![*x, *w, *b],
            Op::ConcatRows(ids) | Op::ConcatCols(ids) => ids.clone(),
            Op::Scale(a, _)
            | Op::AddConst(a)
            | Op::Exp(a)
            | Op::Log(a)
            | Op::Tanh(a)
            | Op::Sigmoid(a)
            | Op::Softplus(a)
            | Op::Square(a)
            | Op::Clamp(a, _, _)
            | Op::Sum(a)
            | Op::Mean(a)
            | Op::RowSum(a)
            | Op::RowSumSorted(a)
            | Op::RowMean(a)
            | Op::RowLogSumExp(a)
            | Op::RowLogMeanExp(a)
            | Op::Gather(a, _)
            | Op::Reshape(a) => vec![*a],
            Op::IndexedGaussian(g) => vec![g.mean, g.log_var, g.value],
            Op::IndexedBernoulli(b) => vec![b.logits, b.target],
        }
    }
}

struct Node {
    value: DenseArray,
    op: Op,
    requires_grad: bool,
}

/// Operation recorder. One tape per objective evaluation.
#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
}

/// Handle to a recorded node.
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

    /// A differentiable leaf.
    pub fn var(&self, value: DenseArray) -> Var<'_> {
        self.push(value, Op::Leaf, true)
    }

    /// A leaf that never receives a gradient.
    pub fn constant(&self, value: DenseArray) -> Var<'_> {
        self.push(value, Op::Leaf, false)
    }

    pub fn scalar(&self, value: f64) -> Var<'_> {
        self.var(DenseArray::scalar(value))
    }

    fn push(&self, value: DenseArray, op: Op, requires_grad: bool) -> Var<'_> {
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

    fn record(&self, value: DenseArray, op: Op) -> Var<'_> {
        let requires_grad = {
            let nodes = self.nodes.borrow();
            op.parents().iter().any(|&p| nodes[p].requires_grad)
        };
        self.push(value, op, requires_grad)
    }

    fn with_value<R>(&self, id: usize, f: impl FnOnce(&DenseArray) -> R) -> R {
        f(&self.nodes.borrow()[id].value)
    }

    /// Stacks `[r_i, c]` arrays into `[Σr_i, c]`.
    pub fn concat_rows<'t>(&'t self, parts: &[Var<'t>]) -> Result<Var<'t>> {
        let first = parts.first().ok_or(Error::Empty("concat_rows"))?;
        let (value, ids) = {
            let nodes = self.nodes.borrow();
            let f = &nodes[first.id].value;
            let tail = f.shape()[1..].to_vec();
            let mut rows = 0;
            let mut data = Vec::new();
            for p in parts {
                let v = &nodes[p.id].value;
                if v.shape().len() != f.shape().len() || v.shape()[1..] != tail[..] {
                    return Err(Error::shape("concat_rows", f.shape(), v.shape()));
                }
                rows += v.rows();
                data.extend_from_slice(v.data());
            }
            let mut shape = vec![rows];
            shape.extend(tail);
            (DenseArray::new(shape, data)?, parts.iter().map(|p| p.id).collect())
        };
        Ok(self.record(value, Op::ConcatRows(ids)))
    }

    /// Joins `[r, c_i]` matrices side by side into `[r, Σc_i]`.
    pub fn concat_cols<'t>(&'t self, parts: &[Var<'t>]) -> Result<Var<'t>> {
        let first = parts.first().ok_or(Error::Empty("concat_cols"))?;
        let (value, ids) = {
            let nodes = self.nodes.borrow();
            let rows = nodes[first.id].value.rows();
            let mut total = 0;
            for p in parts {
                let v = &nodes[p.id].value;
                if v.shape().len() != 2 || v.rows() != rows {
                    return Err(Error::shape(
                        "concat_cols",
                        nodes[first.id].value.shape(),
                        v.shape(),
                    ));
                }
                total += v.cols();
            }
            let mut data = Vec::with_capacity(rows * total);
            for r in 0..rows {
                for p in parts {
                    data.extend_from_slice(nodes[p.id].value.row(r));
                }
            }
            (
                DenseArray::matrix(rows, total, data)?,
                parts.iter().map(|p| p.id).collect(),
            )
        };
        Ok(self.record(value, Op::ConcatCols(ids)))
    }

    /// Diagonal-Gaussian log density of indexed rows without materializing
    /// the gathered operands. `log_var` is `[A, d]` like `mean` or a shared
    /// `[d]`. Returns `[n]` for `n = mean_rows.len()`.
    pub fn indexed_gaussian_log_prob<'t>(
        &'t self,
        mean: Var<'t>,
        log_var: Var<'t>,
        value: Var<'t>,
        mean_rows: &[usize],
        value_rows: &[usize],
    ) -> Result<Var<'t>> {
        let (out, shared_var) = {
            let nodes = self.nodes.borrow();
            let (mu, lv, v) = (&nodes[mean.id].value, &nodes[log_var.id].value, &nodes[value.id].value);
            if mu.shape().len() != 2 || v.shape().len() != 2 || v.cols() != mu.cols() {
                return Err(Error::shape("indexed_gaussian_log_prob", mu.shape(), v.shape()));
            }
            let d = mu.cols();
            let shared_var = lv.shape() == [d];
            if !shared_var && lv.shape() != mu.shape() {
                return Err(Error::shape("indexed_gaussian_log_prob", mu.shape(), lv.shape()));
            }
            if mean_rows.len() != value_rows.len() {
                return Err(Error::shape("indexed_gaussian_log_prob", &[mean_rows.len()], &[value_rows.len()]));
            }
            check_rows(mean_rows, mu.rows())?;
            check_rows(value_rows, v.rows())?;
            let half_ln_2pi = 0.5 * crate::numerics::LN_2PI;
            let prec = lv.map(|x| (-x).exp());
            let out = mean_rows
                .iter()
                .zip(value_rows)
                .map(|(&a, &r)| {
                    let (lrow, prow) = if shared_var { (lv.data(), prec.data()) } else { (lv.row(a), prec.row(a)) };
                    let (mrow, vrow) = (mu.row(a), v.row(r));
                    (0..d)
                        .map(|j| {
                            let diff = vrow[j] - mrow[j];
                            -0.5 * (lrow[j] + diff * diff * prow[j]) - half_ln_2pi
                        })
                        .sum::<f64>()
                })
                .collect();
            (DenseArray::vector(out), shared_var)
        };
        Ok(self.record(
            out,
            Op::IndexedGaussian(Box::new(IndexedGaussian {
                mean: mean.id,
                log_var: log_var.id,
                value: value.id,
                mean_rows: mean_rows.to_vec(),
                value_rows: value_rows.to_vec(),
                shared_var,
            })),
        ))
    }

    /// Factorized Bernoulli log probability of indexed target rows under
    /// indexed logit rows. Returns `[n]`.
    pub fn indexed_bernoulli_log_prob<'t>(
        &'t self,
        logits: Var<'t>,
        target: Var<'t>,
        logit_rows: &[usize],
        target_rows: &[usize],
    ) -> Result<Var<'t>> {
        let out = {
            let nodes = self.nodes.borrow();
            let (l, x) = (&nodes[logits.id].value, &nodes[target.id].value);
            if l.shape().len() != 2 || x.shape().len() != 2 || l.cols() != x.cols() {
                return Err(Error::shape("indexed_bernoulli_log_prob", l.shape(), x.shape()));
            }
            if logit_rows.len() != target_rows.len() {
                return Err(Error::shape("indexed_bernoulli_log_prob", &[logit_rows.len()], &[target_rows.len()]));
            }
            check_rows(logit_rows, l.rows())?;
            check_rows(target_rows, x.rows())?;
            let sp = l.map(softplus);
            let out = logit_rows
                .iter()
                .zip(target_rows)
                .map(|(&a, &r)| {
                    let (lrow, srow, xrow) = (l.row(a), sp.row(a), x.row(r));
                    (0..lrow.len()).map(|j| xrow[j] * lrow[j] - srow[j]).sum::<f64>()
                })
                .collect();
            DenseArray::vector(out)
        };
        Ok(self.record(
            out,
            Op::IndexedBernoulli(Box::new(IndexedBernoulli {
                logits: logits.id,
                target: target.id,
                logit_rows: logit_rows.to_vec(),
                target_rows: target_rows.to_vec(),
            })),
        ))
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var<'_>) -> Result<Gradients> {
        let nodes = self.nodes.borrow();
        let root = &nodes[loss.id];
        if root.value.len() != 1 {
            return Err(Error::NonScalarLoss(root.value.shape().to_vec()));
        }
        let mut grads: Vec<Option<DenseArray>> = vec![None; nodes.len()];
        grads[loss.id] = Some(DenseArray::full(root.value.shape(), 1.0));

        for id in (0..=loss.id).rev() {
            let node = &nodes[id];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            for p in node.op.parents() {
                if p >= id {
                    return Err(Error::Cycle { node: id, parent: p });
                }
            }
            propagate(&nodes, id, &g, &mut grads);
            grads[id] = Some(g);
        }
        Ok(Gradients { grads })
    }
}

/// Gradients from one backward sweep, indexed by node.
pub struct Gradients {
    grads: Vec<Option<DenseArray>>,
}

impl Gradients {
    /// Gradient of the loss w.r.t. `v`; zeros when `v` was unreachable.
    pub fn wrt(&self, v: Var<'_>) -> DenseArray {
        match self.grads.get(v.id).and_then(|g| g.as_ref()) {
            Some(g) => g.clone(),
            None => DenseArray::zeros(&v.shape()),
        }
    }
}

fn accumulate(grads: &mut [Option<DenseArray>], id: usize, shape: &[usize], f: impl FnOnce(&mut [f64])) {
    let slot = grads[id].get_or_insert_with(|| DenseArray::zeros(shape));
    f(slot.data_mut());
}

fn propagate(nodes: &[Node], id: usize, g: &DenseArray, grads: &mut [Option<DenseArray>]) {
    let out = &nodes[id].value;
    let gd = g.data();
    let needs = |p: usize| nodes[p].requires_grad;
    let val = |p: usize| &nodes[p].value;

    let unary = |grads: &mut [Option<DenseArray>], a: usize, local: &dyn Fn(usize) -> f64| {
        if needs(a) {
            accumulate(grads, a, val(a).shape(), |ga| {
                for (i, x) in ga.iter_mut().enumerate() {
                    *x += gd[i] * local(i);
                }
            });
        }
    };

    match &nodes[id].op {
        Op::Leaf => {}
        Op::Add(a, b) => {
            unary(grads, *a, &|_| 1.0);
            unary(grads, *b, &|_| 1.0);
        }
        Op::Sub(a, b) => {
            unary(grads, *a, &|_| 1.0);
            unary(grads, *b, &|_| -1.0);
        }
        Op::Mul(a, b) => {
            let (va, vb) = (val(*a).data(), val(*b).data());
            unary(grads, *a, &|i| vb[i]);
            unary(grads, *b, &|i| va[i]);
        }
        Op::AddRow(a, b) => {
            unary(grads, *a, &|_| 1.0);
            if needs(*b) {
                let cols = val(*b).len();
                accumulate(grads, *b, val(*b).shape(), |gb| {
                    for row in gd.chunks(cols) {
                        for (x, &d) in gb.iter_mut().zip(row) {
                            *x += d;
                        }
                    }
                });
            }
        }
        Op::Scale(a, c) => unary(grads, *a, &|_| *c),
        Op::AddConst(a) => unary(grads, *a, &|_| 1.0),
        Op::Exp(a) => {
            let o = out.data();
            unary(grads, *a, &|i| o[i]);
        }
        Op::Log(a) => {
            let va = val(*a).data();
            unary(grads, *a, &|i| 1.0 / va[i]);
        }
        Op::Tanh(a) => {
            let o = out.data();
            unary(grads, *a, &|i| 1.0 - o[i] * o[i]);
        }
        Op::Sigmoid(a) => {
            let o = out.data();
            unary(grads, *a, &|i| o[i] * (1.0 - o[i]));
        }
        Op::Softplus(a) => {
            let va = val(*a).data();
            unary(grads, *a, &|i| sigmoid(va[i]));
        }
        Op::Square(a) => {
            let va = val(*a).data();
            unary(grads, *a, &|i| 2.0 * va[i]);
        }
        Op::Clamp(a, lo, hi) => {
            let va = val(*a).data();
            unary(grads, *a, &|i| if va[i] >= *lo && va[i] <= *hi { 1.0 } else { 0.0 });
        }
        Op::Affine { x, w, b } => {
            let (vx, vw) = (val(*x), val(*w));
            let (rows, inp, outp) = (vx.rows(), vx.cols(), vw.shape()[1]);
            if needs(*x) {
                accumulate(grads, *x, vx.shape(), |gx| {
                    // gx += g · wᵀ
                    gemm(rows, outp, inp, gd, (outp, 1), vw.data(), (1, outp), gx);
                });
            }
            if needs(*w) {
                accumulate(grads, *w, vw.shape(), |gw| {
                    // gw += xᵀ · g
                    gemm(inp, rows, outp, vx.data(), (1, inp), gd, (outp, 1), gw);
                });
            }
            if needs(*b) {
                accumulate(grads, *b, val(*b).shape(), |gb| {
                    for row in gd.chunks(outp) {
                        for (x, &d) in gb.iter_mut().zip(row) {
                            *x += d;
                        }
                    }
                });
            }
        }
        Op::Sum(a) | Op::Mean(a) => {
            if needs(*a) {
                let s = match nodes[id].op {
                    Op::Mean(_) => gd[0] / val(*a).len() as f64,
                    _ => gd[0],
                };
                accumulate(grads, *a, val(*a).shape(), |ga| ga.iter_mut().for_each(|x| *x += s));
            }
        }
        Op::RowSum(a) | Op::RowSumSorted(a) | Op::RowMean(a) => {
            if needs(*a) {
                let cols = val(*a).cols();
                let scale = if matches!(nodes[id].op, Op::RowMean(_)) {
                    1.0 / cols as f64
                } else {
                    1.0
                };
                accumulate(grads, *a, val(*a).shape(), |ga| {
                    for (r, row) in ga.chunks_mut(cols).enumerate() {
                        let d = gd[r] * scale;
                        row.iter_mut().for_each(|x| *x += d);
                    }
                });
            }
        }
        Op::RowLogSumExp(a) | Op::RowLogMeanExp(a) => {
            if needs(*a) {
                let va = val(*a);
                let cols = va.cols();
                let o = out.data();
                // The mean variant sits ln(cols) below the sum.
                let shift = if matches!(nodes[id].op, Op::RowLogMeanExp(_)) { (cols as f64).ln() } else { 0.0 };
                accumulate(grads, *a, va.shape(), |ga| {
                    for (r, row) in ga.chunks_mut(cols).enumerate() {
                        if !o[r].is_finite() {
                            continue;
                        }
                        for (c, x) in row.iter_mut().enumerate() {
                            *x += gd[r] * (va.data()[r * cols + c] - o[r] - shift).exp();
                        }
                    }
                });
            }
        }
        Op::Gather(a, idx) => {
            if needs(*a) {
                let cols = val(*a).cols();
                accumulate(grads, *a, val(*a).shape(), |ga| {
                    for (k, &src) in idx.iter().enumerate() {
                        let dst = &mut ga[src * cols..(src + 1) * cols];
                        for (x, &d) in dst.iter_mut().zip(&gd[k * cols..(k + 1) * cols]) {
                            *x += d;
                        }
                    }
                });
            }
        }
        Op::ConcatRows(ids) => {
            let mut offset = 0;
            for &p in ids {
                let n = val(p).len();
                if needs(p) {
                    accumulate(grads, p, val(p).shape(), |gp| {
                        for (x, &d) in gp.iter_mut().zip(&gd[offset..offset + n]) {
                            *x += d;
                        }
                    });
                }
                offset += n;
            }
        }
        Op::ConcatCols(ids) => {
            let total = out.cols();
            let mut offset = 0;
            for &p in ids {
                let c = val(p).cols();
                if needs(p) {
                    accumulate(grads, p, val(p).shape(), |gp| {
                        for (r, row) in gp.chunks_mut(c).enumerate() {
                            let src = &gd[r * total + offset..r * total + offset + c];
                            for (x, &d) in row.iter_mut().zip(src) {
                                *x += d;
                            }
                        }
                    });
                }
                offset += c;
            }
        }
        Op::Reshape(a) => unary(grads, *a, &|_| 1.0),
        Op::IndexedGaussian(op) => {
            let (mu, lv, v) = (val(op.mean), val(op.log_var), val(op.value));
            let d = mu.cols();
            // Per-element (v − μ)·e^{−lv}, the shared factor of all three gradients.
            let mut scaled = vec![0.0; op.mean_rows.len() * d];
            let mut sq = vec![0.0; op.mean_rows.len() * d];
            let precision = lv.map(|x| (-x).exp());
            for (n, (&a, &r)) in op.mean_rows.iter().zip(&op.value_rows).enumerate() {
                let prow = if op.shared_var { precision.data() } else { precision.row(a) };
                for j in 0..d {
                    let diff = v.row(r)[j] - mu.row(a)[j];
                    let prec = prow[j];
                    scaled[n * d + j] = gd[n] * diff * prec;
                    sq[n * d + j] = gd[n] * (diff * diff * prec - 1.0) * 0.5;
                }
            }
            let scatter = |grads: &mut [Option<DenseArray>], p: usize, rows: &[usize], src: &[f64], sign: f64| {
                if needs(p) {
                    accumulate(grads, p, val(p).shape(), |gp| {
                        for (n, &a) in rows.iter().enumerate() {
                            for (x, &s) in gp[a * d..(a + 1) * d].iter_mut().zip(&src[n * d..(n + 1) * d]) {
                                *x += sign * s;
                            }
                        }
                    });
                }
            };
            scatter(grads, op.mean, &op.mean_rows, &scaled, 1.0);
            scatter(grads, op.value, &op.value_rows, &scaled, -1.0);
            if op.shared_var {
                if needs(op.log_var) {
                    accumulate(grads, op.log_var, lv.shape(), |gl| {
                        for row in sq.chunks(d) {
                            for (x, &s) in gl.iter_mut().zip(row) {
                                *x += s;
                            }
                        }
                    });
                }
            } else {
                scatter(grads, op.log_var, &op.mean_rows, &sq, 1.0);
            }
        }
        Op::IndexedBernoulli(op) => {
            let (l, x) = (val(op.logits), val(op.target));
            let d = l.cols();
            if needs(op.logits) {
                let prob = l.map(sigmoid);
                accumulate(grads, op.logits, l.shape(), |gl| {
                    for (n, (&a, &r)) in op.logit_rows.iter().zip(&op.target_rows).enumerate() {
                        for j in 0..d {
                            gl[a * d + j] += gd[n] * (x.row(r)[j] - prob.row(a)[j]);
                        }
                    }
                });
            }
            if needs(op.target) {
                accumulate(grads, op.target, x.shape(), |gx| {
                    for (n, (&a, &r)) in op.logit_rows.iter().zip(&op.target_rows).enumerate() {
                        for j in 0..d {
                            gx[r * d + j] += gd[n] * l.row(a)[j];
                        }
                    }
                });
            }
        }
    }
}

fn check_rows(rows: &[usize], bound: usize) -> Result<()> {
    match rows.iter().find(|&&r| r >= bound) {
        Some(&index) => Err(Error::OutOfBounds { index, bound }),
        None => Ok(()),
    }
}

/// `c += A·B` where `A` is `m×k` and `B` is `k×n`, given (row, col) strides.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    (rsa, csa): (usize, usize),
    b: &[f64],
    (rsb, csb): (usize, usize),
    c: &mut [f64],
) {
    if m == 0 || n == 0 {
        return;
    }
    assert!(c.len() >= m * n);
    // SAFETY: strides describe in-bounds views of `a`, `b` and `c`, checked by
    // the callers' shape validation; `c` is exclusively borrowed.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            1.0,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
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

/// Sums in ascending order so the result does not depend on input order.
pub(crate) fn sorted_sum(values: &mut [f64]) -> f64 {
    values.sort_by(f64::total_cmp);
    values.iter().sum()
}

/// `max(v) + ln Σ exp(v_i − max(v))`.
pub fn logsumexp(values: &[f64]) -> Result<f64> {
    if values.is_empty() {
        return Err(Error::Empty("logsumexp"));
    }
    Ok(row_logsumexp(values))
}

fn row_logsumexp(row: &[f64]) -> f64 {
    let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY || m.is_nan() {
        return m;
    }
    if m == f64::INFINITY {
        return m;
    }
    let mut e: Vec<f64> = row.iter().map(|v| (v - m).exp()).collect();
    m + sorted_sum(&mut e).ln()
}

/// `ln(mean(exp(row)))`, exact for a constant row.
fn row_logmeanexp(row: &[f64]) -> f64 {
    let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !m.is_finite() {
        return m;
    }
    let mut e: Vec<f64> = row.iter().map(|v| (v - m).exp()).collect();
    m + (sorted_sum(&mut e) / row.len() as f64).ln()
}

impl<'t> Var<'t> {
    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn value(&self) -> DenseArray {
        self.tape.with_value(self.id, Clone::clone)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tape.with_value(self.id, |v| v.shape().to_vec())
    }

    /// First element; the value of a scalar node.
    pub fn item(&self) -> f64 {
        self.tape.with_value(self.id, |v| v.item())
    }

    fn map(self, op: Op, f: impl Fn(f64) -> f64) -> Var<'t> {
        let value = self.tape.with_value(self.id, |v| v.map(f));
        self.tape.record(value, op)
    }

    fn zip(self, other: Var<'t>, name: &'static str, op: Op, f: impl Fn(f64, f64) -> f64) -> Result<Var<'t>> {
        let value = {
            let nodes = self.tape.nodes.borrow();
            let (a, b) = (&nodes[self.id].value, &nodes[other.id].value);
            if a.shape() != b.shape() {
                return Err(Error::shape(name, a.shape(), b.shape()));
            }
            let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
            DenseArray::new(a.shape().to_vec(), data)?
        };
        Ok(self.tape.record(value, op))
    }

    pub fn add(self, other: Var<'t>) -> Result<Var<'t>> {
        self.zip(other, "add", Op::Add(self.id, other.id), |a, b| a + b)
    }

    pub fn sub(self, other: Var<'t>) -> Result<Var<'t>> {
        self.zip(other, "sub", Op::Sub(self.id, other.id), |a, b| a - b)
    }

    pub fn mul(self, other: Var<'t>) -> Result<Var<'t>> {
        self.zip(other, "mul", Op::Mul(self.id, other.id), |a, b| a * b)
    }

    /// `[rows, cols] + [cols]`, the vector repeated over rows.
    pub fn add_row(self, bias: Var<'t>) -> Result<Var<'t>> {
        let value = {
            let nodes = self.tape.nodes.borrow();
            let (a, b) = (&nodes[self.id].value, &nodes[bias.id].value);
            if a.shape().len() != 2 || b.shape() != [a.cols()] {
                return Err(Error::shape("add_row", a.shape(), b.shape()));
            }
            let mut data = a.data().to_vec();
            for row in data.chunks_mut(a.cols()) {
                for (x, &d) in row.iter_mut().zip(b.data()) {
                    *x += d;
                }
            }
            DenseArray::new(a.shape().to_vec(), data)?
        };
        Ok(self.tape.record(value, Op::AddRow(self.id, bias.id)))
    }

    pub fn scale(self, c: f64) -> Var<'t> {
        self.map(Op::Scale(self.id, c), |x| x * c)
    }

    pub fn neg(self) -> Var<'t> {
        self.scale(-1.0)
    }

    pub fn add_scalar(self, c: f64) -> Var<'t> {
        self.map(Op::AddConst(self.id), |x| x + c)
    }

    pub fn exp(self) -> Var<'t> {
        self.map(Op::Exp(self.id), f64::exp)
    }

    pub fn log(self) -> Var<'t> {
        self.map(Op::Log(self.id), f64::ln)
    }

    pub fn tanh(self) -> Var<'t> {
        self.map(Op::Tanh(self.id), f64::tanh)
    }

    pub fn sigmoid(self) -> Var<'t> {
        self.map(Op::Sigmoid(self.id), sigmoid)
    }

    /// `ln(1 + eˣ)`, evaluated without overflow.
    pub fn softplus(self) -> Var<'t> {
        self.map(Op::Softplus(self.id), softplus)
    }

    pub fn square(self) -> Var<'t> {
        self.map(Op::Square(self.id), |x| x * x)
    }

    /// Clamps into `[lo, hi]`; the gradient is zero outside.
    pub fn clamp(self, lo: f64, hi: f64) -> Var<'t> {
        self.map(Op::Clamp(self.id, lo, hi), |x| x.clamp(lo, hi))
    }

    /// `x·W + b` for `x: [rows, in]`, `W: [in, out]`, `b: [out]`.
    pub fn affine(self, w: Var<'t>, b: Var<'t>) -> Result<Var<'t>> {
        let value = {
            let nodes = self.tape.nodes.borrow();
            let (x, wv, bv) = (&nodes[self.id].value, &nodes[w.id].value, &nodes[b.id].value);
            if x.shape().len() != 2 || wv.shape().len() != 2 || x.cols() != wv.shape()[0] {
                return Err(Error::shape("affine", x.shape(), wv.shape()));
            }
            let (rows, inp, outp) = (x.rows(), x.cols(), wv.shape()[1]);
            if bv.shape() != [outp] {
                return Err(Error::shape("affine", wv.shape(), bv.shape()));
            }
            let mut data = Vec::with_capacity(rows * outp);
            for _ in 0..rows {
                data.extend_from_slice(bv.data());
            }
            gemm(rows, inp, outp, x.data(), (inp, 1), wv.data(), (outp, 1), &mut data);
            DenseArray::matrix(rows, outp, data)?
        };
        Ok(self.tape.record(
            value,
            Op::Affine {
                x: self.id,
                w: w.id,
                b: b.id,
            },
        ))
    }

    /// Left-to-right sum of every element, as a `[1]` array.
    pub fn sum(self) -> Var<'t> {
        let value = self.tape.with_value(self.id, |v| DenseArray::scalar(v.data().iter().sum()));
        self.tape.record(value, Op::Sum(self.id))
    }

    pub fn mean(self) -> Var<'t> {
        let value = self.tape.with_value(self.id, |v| {
            DenseArray::scalar(v.data().iter().sum::<f64>() / v.len() as f64)
        });
        self.tape.record(value, Op::Mean(self.id))
    }

    fn rowwise(self, name: &'static str, op: Op, f: impl Fn(&[f64]) -> f64) -> Result<Var<'t>> {
        let value = self.tape.with_value(self.id, |v| {
            if v.shape().len() < 2 {
                return Err(Error::shape(name, v.shape(), &[v.len(), 1]));
            }
            let cols = v.cols();
            if cols == 0 {
                return Err(Error::Empty(name));
            }
            Ok(DenseArray::vector(v.data().chunks(cols).map(&f).collect()))
        })?;
        Ok(self.tape.record(value, op))
    }

    /// Per-row sum of a `[rows, cols]` matrix, left to right.
    pub fn row_sum(self) -> Result<Var<'t>> {
        self.rowwise("row_sum", Op::RowSum(self.id), |r| r.iter().sum())
    }

    /// Per-row sum in ascending order; column-permutation invariant.
    pub fn row_sum_sorted(self) -> Result<Var<'t>> {
        self.rowwise("row_sum_sorted", Op::RowSumSorted(self.id), |r| sorted_sum(&mut r.to_vec()))
    }

    /// Per-row mean; summed in sorted order so it is column-permutation invariant.
    pub fn row_mean(self) -> Result<Var<'t>> {
        self.rowwise("row_mean", Op::RowMean(self.id), |r| {
            sorted_sum(&mut r.to_vec()) / r.len() as f64
        })
    }

    /// Per-row log-sum-exp; column-permutation invariant.
    pub fn row_logsumexp(self) -> Result<Var<'t>> {
        self.rowwise("row_logsumexp", Op::RowLogSumExp(self.id), row_logsumexp)
    }

    /// Per-row log-mean-exp.
    pub fn row_logmeanexp(self) -> Result<Var<'t>> {
        self.rowwise("row_logmeanexp", Op::RowLogMeanExp(self.id), row_logmeanexp)
    }

    pub fn gather_rows(self, idx: &[usize]) -> Result<Var<'t>> {
        let value = self.tape.with_value(self.id, |v| v.gather_rows(idx))?;
        Ok(self.tape.record(value, Op::Gather(self.id, idx.to_vec())))
    }

    pub fn reshape(self, shape: &[usize]) -> Result<Var<'t>> {
        let value = self.tape.with_value(self.id, |v| v.reshape(shape))?;
        Ok(self.tape.record(value, Op::Reshape(self.id)))
    }
}
