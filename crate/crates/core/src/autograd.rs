//! Tape-based reverse-mode differentiation over [`Matrix`] values.
//!
//! A [`Graph`] borrows a [`ParamStore`] and records every operation in
//! insertion order, which is already a topological order. [`Graph::backward`]
//! walks the tape in reverse and returns one gradient matrix per parameter.
//!
//! Elementwise nonlinearities are recorded through [`Graph::map`], which
//! stores the pointwise derivative at forward time, so new activations and
//! loss shapes need no dedicated backward code.

use crate::params::{Gradients, ParamId, ParamStore};
use crate::tensor::Matrix;

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

enum Op {
    Param(ParamId),
    Const,
    MatMul(Var, Var),
    MatMulT(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Map(Var, Matrix),
    CausalSoftmax(Var),
    LogSoftmax(Var),
    Normalize { input: Var, inv_std: Vec<f64> },
    Gather { table: Var, ids: Vec<usize> },
    SliceCols { input: Var, start: usize },
    SliceRows { input: Var, start: usize },
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    Pick { input: Var, cols: Vec<usize> },
    SumAll(Var),
    SumRows(Var),
}

struct Node {
    value: Matrix,
    op: Op,
}

pub struct Graph<'p> {
    store: &'p ParamStore,
    nodes: Vec<Node>,
    param_vars: Vec<Option<Var>>,
}

impl<'p> Graph<'p> {
    pub fn new(store: &'p ParamStore) -> Self {
        Self {
            store,
            nodes: Vec::new(),
            param_vars: vec![None; store.len()],
        }
    }

    pub fn store(&self) -> &'p ParamStore {
        self.store
    }

    fn push(&mut self, value: Matrix, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Matrix {
        match self.nodes[v.0].op {
            Op::Param(id) => self.store.get(id),
            _ => &self.nodes[v.0].value,
        }
    }

    /// The single element of a `1 x 1` node.
    pub fn scalar(&self, v: Var) -> f64 {
        self.value(v).item()
    }

    pub fn num_nodes(&self) -> usize {
        self.nodes.len()
    }

    /// Leaf for a trainable parameter; repeated calls return the same node.
    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.param_vars[id] {
            return v;
        }
        let v = self.push(Matrix::zeros(0, 0), Op::Param(id));
        self.param_vars[id] = Some(v);
        v
    }

    pub fn constant(&mut self, value: Matrix) -> Var {
        self.push(value, Op::Const)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).matmul(self.value(b));
        self.push(value, Op::MatMul(a, b))
    }

    /// `a · bᵀ`
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).matmul_t(self.value(b));
        self.push(value, Op::MatMulT(a, b))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let mut value = self.value(a).clone();
        value.add_assign(self.value(b));
        self.push(value, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let (va, vb) = (self.value(a), self.value(b));
        assert_eq!(va.shape(), vb.shape(), "sub shape mismatch");
        let data = va.data().iter().zip(vb.data()).map(|(x, y)| x - y).collect();
        let value = Matrix::from_vec(va.rows(), va.cols(), data);
        self.push(value, Op::Sub(a, b))
    }

    /// Adds a `1 x c` row to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        let (va, vr) = (self.value(a), self.value(row));
        assert_eq!((1, va.cols()), vr.shape(), "add_row expects a 1x{} row", va.cols());
        let mut value = va.clone();
        for r in 0..value.rows() {
            for (x, b) in value.row_mut(r).iter_mut().zip(vr.data()) {
                *x += b;
            }
        }
        self.push(value, Op::AddRow(a, row))
    }

    /// Multiplies every row of `a` elementwise by a `1 x c` row.
    pub fn mul_row(&mut self, a: Var, row: Var) -> Var {
        let (va, vr) = (self.value(a), self.value(row));
        assert_eq!((1, va.cols()), vr.shape(), "mul_row expects a 1x{} row", va.cols());
        let mut value = va.clone();
        for r in 0..value.rows() {
            for (x, b) in value.row_mut(r).iter_mut().zip(vr.data()) {
                *x *= b;
            }
        }
        self.push(value, Op::MulRow(a, row))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let (va, vb) = (self.value(a), self.value(b));
        assert_eq!(va.shape(), vb.shape(), "mul shape mismatch");
        let data = va.data().iter().zip(vb.data()).map(|(x, y)| x * y).collect();
        let value = Matrix::from_vec(va.rows(), va.cols(), data);
        self.push(value, Op::Mul(a, b))
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Var {
        let mut value = self.value(a).clone();
        value.scale_assign(factor);
        self.push(value, Op::Scale(a, factor))
    }

    /// Elementwise map. `f(index, x)` returns `(f(x), f'(x))`.
    pub fn map_indexed(&mut self, a: Var, f: impl Fn(usize, f64) -> (f64, f64)) -> Var {
        let va = self.value(a);
        let (rows, cols) = va.shape();
        let mut value = Vec::with_capacity(va.len());
        let mut deriv = Vec::with_capacity(va.len());
        for (i, &x) in va.data().iter().enumerate() {
            let (y, d) = f(i, x);
            value.push(y);
            deriv.push(d);
        }
        self.push(
            Matrix::from_vec(rows, cols, value),
            Op::Map(a, Matrix::from_vec(rows, cols, deriv)),
        )
    }

    pub fn map(&mut self, a: Var, f: impl Fn(f64) -> (f64, f64)) -> Var {
        self.map_indexed(a, |_, x| f(x))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.map(a, |x| {
            let e = x.exp();
            (e, e)
        })
    }

    pub fn square(&mut self, a: Var) -> Var {
        self.map(a, |x| (x * x, 2.0 * x))
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        self.map(a, |x| (x + c, 1.0))
    }

    /// `log σ(x)`, computed without overflow for large `|x|`.
    pub fn log_sigmoid(&mut self, a: Var) -> Var {
        self.map(a, |x| (log_sigmoid(x), sigmoid(-x)))
    }

    /// `max(0, x)`
    pub fn hinge(&mut self, a: Var) -> Var {
        self.map(a, |x| if x > 0.0 { (x, 1.0) } else { (0.0, 0.0) })
    }

    /// GELU with the tanh approximation.
    pub fn gelu(&mut self, a: Var) -> Var {
        self.map(a, gelu)
    }

    /// Row-wise softmax where row `i` only attends to columns `0..=i + offset`.
    pub fn causal_softmax(&mut self, a: Var) -> Var {
        let va = self.value(a);
        let (rows, cols) = va.shape();
        let offset = cols - rows;
        let mut value = Matrix::zeros(rows, cols);
        for r in 0..rows {
            let visible = r + offset + 1;
            let src = &va.row(r)[..visible];
            let max = src.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let dst = &mut value.row_mut(r)[..visible];
            let mut total = 0.0;
            for (d, &s) in dst.iter_mut().zip(src) {
                *d = (s - max).exp();
                total += *d;
            }
            for d in dst.iter_mut() {
                *d /= total;
            }
        }
        self.push(value, Op::CausalSoftmax(a))
    }

    pub fn log_softmax(&mut self, a: Var) -> Var {
        let va = self.value(a);
        let mut value = va.clone();
        for r in 0..value.rows() {
            let row = value.row_mut(r);
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|x| (x - max).exp()).sum::<f64>().ln();
            for x in row.iter_mut() {
                *x -= lse;
            }
        }
        self.push(value, Op::LogSoftmax(a))
    }

    /// Per-row standardization to zero mean and unit variance.
    pub fn normalize(&mut self, a: Var, eps: f64) -> Var {
        let va = self.value(a);
        let cols = va.cols() as f64;
        let mut value = va.clone();
        let mut inv_std = Vec::with_capacity(va.rows());
        for r in 0..value.rows() {
            let row = value.row_mut(r);
            let mean = row.iter().sum::<f64>() / cols;
            let var = row.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / cols;
            let inv = 1.0 / (var + eps).sqrt();
            for x in row.iter_mut() {
                *x = (*x - mean) * inv;
            }
            inv_std.push(inv);
        }
        self.push(value, Op::Normalize { input: a, inv_std })
    }

    /// Selects rows of `table` (embedding lookup).
    pub fn gather(&mut self, table: Var, ids: &[usize]) -> Var {
        let vt = self.value(table);
        let mut value = Matrix::zeros(ids.len(), vt.cols());
        for (r, &id) in ids.iter().enumerate() {
            value.row_mut(r).copy_from_slice(vt.row(id));
        }
        self.push(
            value,
            Op::Gather {
                table,
                ids: ids.to_vec(),
            },
        )
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Var {
        let va = self.value(a);
        assert!(start + len <= va.cols(), "slice_cols out of range");
        let mut value = Matrix::zeros(va.rows(), len);
        for r in 0..va.rows() {
            value.row_mut(r).copy_from_slice(&va.row(r)[start..start + len]);
        }
        self.push(value, Op::SliceCols { input: a, start })
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Var {
        let va = self.value(a);
        assert!(start + len <= va.rows(), "slice_rows out of range");
        let cols = va.cols();
        let value = Matrix::from_vec(len, cols, va.data()[start * cols..(start + len) * cols].to_vec());
        self.push(value, Op::SliceRows { input: a, start })
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let rows = self.value(parts[0]).rows();
        let cols: usize = parts.iter().map(|&p| self.value(p).cols()).sum();
        let mut value = Matrix::zeros(rows, cols);
        let mut offset = 0;
        for &p in parts {
            let vp = self.value(p);
            assert_eq!(vp.rows(), rows, "concat_cols row mismatch");
            for r in 0..rows {
                value.row_mut(r)[offset..offset + vp.cols()].copy_from_slice(vp.row(r));
            }
            offset += vp.cols();
        }
        self.push(value, Op::ConcatCols(parts.to_vec()))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        let cols = self.value(parts[0]).cols();
        let mut data = Vec::new();
        for &p in parts {
            let vp = self.value(p);
            assert_eq!(vp.cols(), cols, "concat_rows column mismatch");
            data.extend_from_slice(vp.data());
        }
        let rows = data.len() / cols.max(1);
        self.push(Matrix::from_vec(rows, cols, data), Op::ConcatRows(parts.to_vec()))
    }

    /// Picks column `cols[r]` from each row `r`, giving an `n x 1` column.
    pub fn pick(&mut self, a: Var, cols: &[usize]) -> Var {
        let va = self.value(a);
        assert_eq!(va.rows(), cols.len(), "pick needs one column per row");
        let data = cols.iter().enumerate().map(|(r, &c)| va.get(r, c)).collect();
        self.push(
            Matrix::from_vec(cols.len(), 1, data),
            Op::Pick {
                input: a,
                cols: cols.to_vec(),
            },
        )
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let total = self.value(a).sum();
        self.push(Matrix::scalar(total), Op::SumAll(a))
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = self.value(a).len();
        let s = self.sum(a);
        self.scale(s, 1.0 / n as f64)
    }

    /// Row sums as an `n x 1` column.
    pub fn sum_rows(&mut self, a: Var) -> Var {
        let va = self.value(a);
        let data = (0..va.rows()).map(|r| va.row(r).iter().sum()).collect();
        self.push(Matrix::from_vec(va.rows(), 1, data), Op::SumRows(a))
    }

    /// Sum of `terms` weighted by `weights`; every term must be `1 x 1`.
    pub fn weighted_sum(&mut self, terms: &[(f64, Var)]) -> Var {
        let mut acc = self.constant(Matrix::scalar(0.0));
        for &(w, v) in terms {
            let scaled = self.scale(v, w);
            acc = self.add(acc, scaled);
        }
        acc
    }

    /// Gradients of the `1 x 1` node `loss` with respect to every parameter.
    pub fn backward(&self, loss: Var) -> Gradients {
        assert_eq!(self.value(loss).shape(), (1, 1), "backward needs a scalar loss");
        let mut grads: Vec<Option<Matrix>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Matrix::scalar(1.0));
        let mut out = Gradients::zeros_like(self.store);

        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            match &node.op {
                Op::Param(id) => out.accumulate(*id, &g),
                Op::Const => {}
                Op::MatMul(a, b) => {
                    let ga = g.matmul_t(self.value(*b));
                    let gb = self.value(*a).t_matmul(&g);
                    accumulate(&mut grads, *a, ga);
                    accumulate(&mut grads, *b, gb);
                }
                Op::MatMulT(a, b) => {
                    let ga = g.matmul(self.value(*b));
                    let gb = g.t_matmul(self.value(*a));
                    accumulate(&mut grads, *a, ga);
                    accumulate(&mut grads, *b, gb);
                }
                Op::Add(a, b) => {
                    accumulate(&mut grads, *b, g.clone());
                    accumulate(&mut grads, *a, g);
                }
                Op::Sub(a, b) => {
                    let mut neg = g.clone();
                    neg.scale_assign(-1.0);
                    accumulate(&mut grads, *b, neg);
                    accumulate(&mut grads, *a, g);
                }
                Op::AddRow(a, row) => {
                    let mut gr = Matrix::zeros(1, g.cols());
                    for r in 0..g.rows() {
                        for (s, x) in gr.data_mut().iter_mut().zip(g.row(r)) {
                            *s += x;
                        }
                    }
                    accumulate(&mut grads, *row, gr);
                    accumulate(&mut grads, *a, g);
                }
                Op::MulRow(a, row) => {
                    let va = self.value(*a);
                    let vr = self.value(*row);
                    let mut ga = g.clone();
                    let mut gr = Matrix::zeros(1, g.cols());
                    for r in 0..g.rows() {
                        for c in 0..g.cols() {
                            ga.set(r, c, g.get(r, c) * vr.get(0, c));
                            gr.data_mut()[c] += g.get(r, c) * va.get(r, c);
                        }
                    }
                    accumulate(&mut grads, *a, ga);
                    accumulate(&mut grads, *row, gr);
                }
                Op::Mul(a, b) => {
                    let (va, vb) = (self.value(*a), self.value(*b));
                    let ga = zip_with(&g, vb, |x, y| x * y);
                    let gb = zip_with(&g, va, |x, y| x * y);
                    accumulate(&mut grads, *a, ga);
                    accumulate(&mut grads, *b, gb);
                }
                Op::Scale(a, factor) => {
                    let mut ga = g;
                    ga.scale_assign(*factor);
                    accumulate(&mut grads, *a, ga);
                }
                Op::Map(a, deriv) => {
                    accumulate(&mut grads, *a, zip_with(&g, deriv, |x, d| x * d));
                }
                Op::CausalSoftmax(a) => {
                    let y = &node.value;
                    let mut ga = Matrix::zeros(y.rows(), y.cols());
                    for r in 0..y.rows() {
                        let dot: f64 = g.row(r).iter().zip(y.row(r)).map(|(a, b)| a * b).sum();
                        for c in 0..y.cols() {
                            ga.set(r, c, y.get(r, c) * (g.get(r, c) - dot));
                        }
                    }
                    accumulate(&mut grads, *a, ga);
                }
                Op::LogSoftmax(a) => {
                    let y = &node.value;
                    let mut ga = g.clone();
                    for r in 0..y.rows() {
                        let total: f64 = g.row(r).iter().sum();
                        for (d, &ly) in ga.row_mut(r).iter_mut().zip(y.row(r)) {
                            *d -= ly.exp() * total;
                        }
                    }
                    accumulate(&mut grads, *a, ga);
                }
                Op::Normalize { input, inv_std } => {
                    let xhat = &node.value;
                    let n = xhat.cols() as f64;
                    let mut ga = Matrix::zeros(xhat.rows(), xhat.cols());
                    for r in 0..xhat.rows() {
                        let gr = g.row(r);
                        let xr = xhat.row(r);
                        let mean_g = gr.iter().sum::<f64>() / n;
                        let mean_gx = gr.iter().zip(xr).map(|(a, b)| a * b).sum::<f64>() / n;
                        for (c, d) in ga.row_mut(r).iter_mut().enumerate() {
                            *d = inv_std[r] * (gr[c] - mean_g - xr[c] * mean_gx);
                        }
                    }
                    accumulate(&mut grads, *input, ga);
                }
                Op::Gather { table, ids } => {
                    let vt = self.value(*table);
                    let mut gt = Matrix::zeros(vt.rows(), vt.cols());
                    for (r, &id) in ids.iter().enumerate() {
                        for (d, x) in gt.row_mut(id).iter_mut().zip(g.row(r)) {
                            *d += x;
                        }
                    }
                    accumulate(&mut grads, *table, gt);
                }
                Op::SliceCols { input, start } => {
                    let vi = self.value(*input);
                    let mut gi = Matrix::zeros(vi.rows(), vi.cols());
                    for r in 0..g.rows() {
                        gi.row_mut(r)[*start..*start + g.cols()].copy_from_slice(g.row(r));
                    }
                    accumulate(&mut grads, *input, gi);
                }
                Op::SliceRows { input, start } => {
                    let vi = self.value(*input);
                    let mut gi = Matrix::zeros(vi.rows(), vi.cols());
                    for r in 0..g.rows() {
                        gi.row_mut(start + r).copy_from_slice(g.row(r));
                    }
                    accumulate(&mut grads, *input, gi);
                }
                Op::ConcatCols(parts) => {
                    let mut offset = 0;
                    for &p in parts {
                        let cols = self.value(p).cols();
                        let mut gp = Matrix::zeros(g.rows(), cols);
                        for r in 0..g.rows() {
                            gp.row_mut(r).copy_from_slice(&g.row(r)[offset..offset + cols]);
                        }
                        accumulate(&mut grads, p, gp);
                        offset += cols;
                    }
                }
                Op::ConcatRows(parts) => {
                    let mut offset = 0;
                    let cols = g.cols();
                    for &p in parts {
                        let rows = self.value(p).rows();
                        let gp = Matrix::from_vec(
                            rows,
                            cols,
                            g.data()[offset * cols..(offset + rows) * cols].to_vec(),
                        );
                        accumulate(&mut grads, p, gp);
                        offset += rows;
                    }
                }
                Op::Pick { input, cols } => {
                    let vi = self.value(*input);
                    let mut gi = Matrix::zeros(vi.rows(), vi.cols());
                    for (r, &c) in cols.iter().enumerate() {
                        gi.set(r, c, g.get(r, 0));
                    }
                    accumulate(&mut grads, *input, gi);
                }
                Op::SumAll(a) => {
                    let va = self.value(*a);
                    accumulate(&mut grads, *a, Matrix::filled(va.rows(), va.cols(), g.item()));
                }
                Op::SumRows(a) => {
                    let va = self.value(*a);
                    let mut ga = Matrix::zeros(va.rows(), va.cols());
                    for r in 0..va.rows() {
                        let gr = g.get(r, 0);
                        ga.row_mut(r).iter_mut().for_each(|d| *d = gr);
                    }
                    accumulate(&mut grads, *a, ga);
                }
            }
        }
        out
    }
}

fn accumulate(grads: &mut [Option<Matrix>], v: Var, g: Matrix) {
    match &mut grads[v.0] {
        Some(existing) => existing.add_assign(&g),
        slot @ None => *slot = Some(g),
    }
}

fn zip_with(a: &Matrix, b: &Matrix, f: impl Fn(f64, f64) -> f64) -> Matrix {
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
    Matrix::from_vec(a.rows(), a.cols(), data)
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn log_sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        -(-x).exp().ln_1p()
    } else {
        x - x.exp().ln_1p()
    }
}

fn gelu(x: f64) -> (f64, f64) {
    const C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
    let inner = C * (x + 0.044715 * x * x * x);
    let t = inner.tanh();
    let value = 0.5 * x * (1.0 + t);
    let d_inner = C * (1.0 + 3.0 * 0.044715 * x * x);
    let deriv = 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * d_inner;
    (value, deriv)
}
