//! Tape-based reverse-mode differentiation over [`Mat`] values.
//!
//! A [`Tape`] records every operation of one forward pass. Parameters are
//! borrowed from a [`ParamStore`], so building a tape never copies weights.
//! [`Tape::backward`] walks the tape in reverse and returns gradients for
//! every parameter the pass touched; a parameter used twice (the shared
//! encoders) receives the sum of both contributions.

use crate::geometry;
use crate::params::{ParamId, ParamStore};
use crate::tensor::{matmul, Mat};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

const LN_EPS: f64 = 1e-5;
const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

enum Value<'p> {
    Owned(Mat),
    Borrowed(&'p Mat),
}

impl Value<'_> {
    #[inline]
    fn get(&self) -> &Mat {
        match self {
            Value::Owned(m) => m,
            Value::Borrowed(m) => m,
        }
    }
}

enum Op {
    Constant,
    Input,
    Param(ParamId),
    MatMul { a: Var, b: Var, ta: bool, tb: bool },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    Scale(Var, f64),
    Gelu(Var),
    Relu(Var),
    LayerNorm { x: Var, gamma: Var, beta: Var, xhat: Mat, inv_std: Vec<f64> },
    SoftmaxRows(Var),
    SliceCols { a: Var, start: usize },
    ConcatCols(Vec<Var>),
    GatherRows { a: Var, idx: Vec<usize> },
    GroupMax { a: Var, argmax: Vec<usize> },
    Reshape(Var),
    Sum(Var),
    SumSquares(Var),
    ChamferL1 { pred: Var, target: Mat, nn_pred: Vec<usize>, nn_target: Vec<usize> },
}

struct Node<'p> {
    value: Value<'p>,
    op: Op,
    needs_grad: bool,
}

/// One forward pass worth of recorded operations.
pub struct Tape<'p> {
    params: &'p ParamStore,
    nodes: Vec<Node<'p>>,
}

/// Result of [`Tape::backward`].
pub struct Gradients {
    nodes: Vec<Option<Mat>>,
    params: Vec<Option<Mat>>,
}

impl Gradients {
    /// Gradient with respect to an intermediate or input variable, if it
    /// was reached.
    pub fn wrt(&self, v: Var) -> Option<&Mat> {
        self.nodes[v.0].as_ref()
    }

    /// Gradient for a parameter; `None` when the pass did not touch it.
    pub fn param(&self, id: ParamId) -> Option<&Mat> {
        self.params.get(id.0).and_then(Option::as_ref)
    }

    /// Dense per-parameter gradients with zeros for untouched entries.
    pub fn into_param_grads(self, store: &ParamStore) -> Vec<Mat> {
        let mut params = self.params;
        store
            .iter()
            .map(|(id, _, value)| {
                params
                    .get_mut(id.0)
                    .and_then(Option::take)
                    .unwrap_or_else(|| Mat::zeros(value.rows(), value.cols()))
            })
            .collect()
    }
}

fn accumulate(slot: &mut Option<Mat>, g: Mat) {
    match slot {
        Some(acc) => acc.add_scaled(&g, 1.0),
        None => *slot = Some(g),
    }
}

impl<'p> Tape<'p> {
    pub fn new(params: &'p ParamStore) -> Self {
        Tape {
            params,
            nodes: Vec::with_capacity(256),
        }
    }

    pub fn params(&self) -> &'p ParamStore {
        self.params
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    #[inline]
    pub fn value(&self, v: Var) -> &Mat {
        self.nodes[v.0].value.get()
    }

    #[inline]
    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.value(v).shape()
    }

    fn push(&mut self, value: Mat, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value: Value::Owned(value),
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    #[inline]
    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// A value that is never differentiated.
    pub fn constant(&mut self, m: Mat) -> Var {
        self.push(m, Op::Constant, false)
    }

    /// A leaf whose gradient is reported by [`Gradients::wrt`].
    pub fn input(&mut self, m: Mat) -> Var {
        self.push(m, Op::Input, true)
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        self.nodes.push(Node {
            value: Value::Borrowed(self.params.get(id)),
            op: Op::Param(id),
            needs_grad: true,
        });
        Var(self.nodes.len() - 1)
    }

    /// `op(a) · op(b)`, with `ta`/`tb` selecting transposition.
    pub fn matmul_t(&mut self, a: Var, ta: bool, b: Var, tb: bool) -> Var {
        let out = matmul(self.value(a), ta, self.value(b), tb);
        let ng = self.ng(a) || self.ng(b);
        self.push(out, Op::MatMul { a, b, ta, tb }, ng)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        self.matmul_t(a, false, b, false)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a).zip_map(self.value(b), |x, y| x + y);
        let ng = self.ng(a) || self.ng(b);
        self.push(out, Op::Add(a, b), ng)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a).zip_map(self.value(b), |x, y| x - y);
        let ng = self.ng(a) || self.ng(b);
        self.push(out, Op::Sub(a, b), ng)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a).zip_map(self.value(b), |x, y| x * y);
        let ng = self.ng(a) || self.ng(b);
        self.push(out, Op::Mul(a, b), ng)
    }

    /// Adds the `1 × c` row `bias` to every row of `a`.
    pub fn add_row(&mut self, a: Var, bias: Var) -> Var {
        let (rows, cols) = self.shape(a);
        assert_eq!(self.shape(bias), (1, cols), "bias must be 1x{cols}");
        let mut out = self.value(a).clone();
        let b = self.value(bias).data().to_vec();
        for r in 0..rows {
            for (o, bv) in out.row_mut(r).iter_mut().zip(&b) {
                *o += bv;
            }
        }
        let ng = self.ng(a) || self.ng(bias);
        self.push(out, Op::AddRow(a, bias), ng)
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let out = self.value(a).map(|x| x * s);
        let ng = self.ng(a);
        self.push(out, Op::Scale(a, s), ng)
    }

    /// Tanh-approximated GELU.
    pub fn gelu(&mut self, a: Var) -> Var {
        let out = self
            .value(a)
            .map(|x| 0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh()));
        let ng = self.ng(a);
        self.push(out, Op::Gelu(a), ng)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|x| x.max(0.0));
        let ng = self.ng(a);
        self.push(out, Op::Relu(a), ng)
    }

    /// Row-wise layer normalization with affine `1 × c` gain and shift.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Var {
        let xv = self.value(x);
        let (rows, cols) = xv.shape();
        assert_eq!(self.shape(gamma), (1, cols));
        assert_eq!(self.shape(beta), (1, cols));
        let g = self.value(gamma).data();
        let b = self.value(beta).data();
        let mut xhat = Mat::zeros(rows, cols);
        let mut out = Mat::zeros(rows, cols);
        let mut inv_std = Vec::with_capacity(rows);
        for r in 0..rows {
            let row = xv.row(r);
            let mean = row.iter().sum::<f64>() / cols as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / cols as f64;
            let inv = 1.0 / (var + LN_EPS).sqrt();
            inv_std.push(inv);
            let xh = xhat.row_mut(r);
            for c in 0..cols {
                xh[c] = (row[c] - mean) * inv;
            }
            let o = out.row_mut(r);
            let xh = xhat.row(r);
            for c in 0..cols {
                o[c] = xh[c] * g[c] + b[c];
            }
        }
        let ng = self.ng(x) || self.ng(gamma) || self.ng(beta);
        self.push(
            out,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
            ng,
        )
    }

    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let mut out = self.value(a).clone();
        for r in 0..out.rows() {
            let row = out.row_mut(r);
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut total = 0.0;
            for v in row.iter_mut() {
                *v = (*v - max).exp();
                total += *v;
            }
            for v in row.iter_mut() {
                *v /= total;
            }
        }
        let ng = self.ng(a);
        self.push(out, Op::SoftmaxRows(a), ng)
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Var {
        let av = self.value(a);
        assert!(start + len <= av.cols(), "column slice out of range");
        let mut out = Mat::zeros(av.rows(), len);
        for r in 0..av.rows() {
            out.row_mut(r).copy_from_slice(&av.row(r)[start..start + len]);
        }
        let ng = self.ng(a);
        self.push(out, Op::SliceCols { a, start }, ng)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty());
        let rows = self.shape(parts[0]).0;
        let cols: usize = parts.iter().map(|&p| self.shape(p).1).sum();
        let mut out = Mat::zeros(rows, cols);
        let mut offset = 0;
        for &p in parts {
            let pv = self.value(p);
            assert_eq!(pv.rows(), rows, "concat_cols row mismatch");
            for r in 0..rows {
                out.row_mut(r)[offset..offset + pv.cols()].copy_from_slice(pv.row(r));
            }
            offset += pv.cols();
        }
        let ng = parts.iter().any(|&p| self.ng(p));
        self.push(out, Op::ConcatCols(parts.to_vec()), ng)
    }

    pub fn gather_rows(&mut self, a: Var, idx: &[usize]) -> Var {
        let out = self.value(a).select_rows(idx);
        let ng = self.ng(a);
        self.push(
            out,
            Op::GatherRows {
                a,
                idx: idx.to_vec(),
            },
            ng,
        )
    }

    /// Column-wise max over consecutive blocks of `group` rows.
    pub fn group_max(&mut self, a: Var, group: usize) -> Var {
        let av = self.value(a);
        let (rows, cols) = av.shape();
        assert!(group > 0 && rows % group == 0, "rows must divide into groups");
        let n_groups = rows / group;
        let mut out = Mat::zeros(n_groups, cols);
        let mut argmax = vec![0usize; n_groups * cols];
        for g in 0..n_groups {
            for c in 0..cols {
                let mut best = g * group;
                for r in g * group + 1..(g + 1) * group {
                    if av[(r, c)] > av[(best, c)] {
                        best = r;
                    }
                }
                out[(g, c)] = av[(best, c)];
                argmax[g * cols + c] = best;
            }
        }
        let ng = self.ng(a);
        self.push(out, Op::GroupMax { a, argmax }, ng)
    }

    /// Row-major reshape.
    pub fn reshape(&mut self, a: Var, rows: usize, cols: usize) -> Var {
        let out = self.value(a).clone().reshaped(rows, cols);
        let ng = self.ng(a);
        self.push(out, Op::Reshape(a), ng)
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let out = Mat::scalar(self.value(a).sum());
        let ng = self.ng(a);
        self.push(out, Op::Sum(a), ng)
    }

    pub fn sum_squares(&mut self, a: Var) -> Var {
        let out = Mat::scalar(self.value(a).sum_squares());
        let ng = self.ng(a);
        self.push(out, Op::SumSquares(a), ng)
    }

    /// Mean of squared entries.
    pub fn mean_squares(&mut self, a: Var) -> Var {
        let n = self.value(a).len().max(1);
        let s = self.sum_squares(a);
        self.scale(s, 1.0 / n as f64)
    }

    /// Symmetric l1 Chamfer distance between a predicted `n × 3` cloud and a
    /// fixed target, differentiable in the prediction.
    pub fn chamfer_l1(&mut self, pred: Var, target: &Mat) -> Var {
        let pv = self.value(pred);
        assert_eq!(pv.cols(), 3);
        assert_eq!(target.cols(), 3);
        let (nn_pred, d_pred) = geometry::nearest_neighbors(pv, target);
        let (nn_target, d_target) = geometry::nearest_neighbors(target, pv);
        let value = 0.5 * d_pred.iter().sum::<f64>() / d_pred.len() as f64
            + 0.5 * d_target.iter().sum::<f64>() / d_target.len() as f64;
        let ng = self.ng(pred);
        self.push(
            Mat::scalar(value),
            Op::ChamferL1 {
                pred,
                target: target.clone(),
                nn_pred,
                nn_target,
            },
            ng,
        )
    }

    /// Runs reverse accumulation from the scalar `loss`.
    pub fn backward(&self, loss: Var) -> Gradients {
        assert_eq!(self.shape(loss), (1, 1), "backward needs a scalar loss");
        let n = self.nodes.len();
        let mut grads: Vec<Option<Mat>> = (0..n).map(|_| None).collect();
        let mut params: Vec<Option<Mat>> = (0..self.params.len()).map(|_| None).collect();
        grads[loss.0] = Some(Mat::scalar(1.0));

        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            let need = |v: Var| self.nodes[v.0].needs_grad;
            match &node.op {
                Op::Constant => {}
                Op::Input => {
                    grads[i] = Some(g);
                }
                Op::Param(id) => {
                    accumulate(&mut params[id.0], g);
                }
                Op::MatMul { a, b, ta, tb } => {
                    let (av, bv) = (self.value(*a), self.value(*b));
                    if need(*a) {
                        let ga = if *ta {
                            matmul(bv, *tb, &g, true)
                        } else {
                            matmul(&g, false, bv, !*tb)
                        };
                        accumulate(&mut grads[a.0], ga);
                    }
                    if need(*b) {
                        let gb = if *tb {
                            matmul(&g, true, av, *ta)
                        } else {
                            matmul(av, !*ta, &g, false)
                        };
                        accumulate(&mut grads[b.0], gb);
                    }
                }
                Op::Add(a, b) => {
                    if need(*b) {
                        accumulate(&mut grads[b.0], g.clone());
                    }
                    if need(*a) {
                        accumulate(&mut grads[a.0], g);
                    }
                }
                Op::Sub(a, b) => {
                    if need(*b) {
                        accumulate(&mut grads[b.0], g.map(|v| -v));
                    }
                    if need(*a) {
                        accumulate(&mut grads[a.0], g);
                    }
                }
                Op::Mul(a, b) => {
                    if need(*a) {
                        accumulate(&mut grads[a.0], g.zip_map(self.value(*b), |x, y| x * y));
                    }
                    if need(*b) {
                        accumulate(&mut grads[b.0], g.zip_map(self.value(*a), |x, y| x * y));
                    }
                }
                Op::AddRow(a, bias) => {
                    if need(*bias) {
                        accumulate(&mut grads[bias.0], column_sums(&g));
                    }
                    if need(*a) {
                        accumulate(&mut grads[a.0], g);
                    }
                }
                Op::Scale(a, s) => {
                    let s = *s;
                    accumulate(&mut grads[a.0], g.map(|v| v * s));
                }
                Op::Gelu(a) => {
                    let da = g.zip_map(self.value(*a), |gv, x| gv * gelu_grad(x));
                    accumulate(&mut grads[a.0], da);
                }
                Op::Relu(a) => {
                    let da = g.zip_map(self.value(*a), |gv, x| if x > 0.0 { gv } else { 0.0 });
                    accumulate(&mut grads[a.0], da);
                }
                Op::LayerNorm {
                    x,
                    gamma,
                    beta,
                    xhat,
                    inv_std,
                } => {
                    let (rows, cols) = g.shape();
                    if need(*gamma) {
                        let mut gg = Mat::zeros(1, cols);
                        for r in 0..rows {
                            for c in 0..cols {
                                gg[(0, c)] += g[(r, c)] * xhat[(r, c)];
                            }
                        }
                        accumulate(&mut grads[gamma.0], gg);
                    }
                    if need(*beta) {
                        accumulate(&mut grads[beta.0], column_sums(&g));
                    }
                    if need(*x) {
                        let gam = self.value(*gamma).data();
                        let mut dx = Mat::zeros(rows, cols);
                        let n = cols as f64;
                        for r in 0..rows {
                            let (gr, xh) = (g.row(r), xhat.row(r));
                            let mut sum_d = 0.0;
                            let mut sum_dx = 0.0;
                            for c in 0..cols {
                                let d = gr[c] * gam[c];
                                sum_d += d;
                                sum_dx += d * xh[c];
                            }
                            let scale = inv_std[r] / n;
                            let out = dx.row_mut(r);
                            for c in 0..cols {
                                let d = gr[c] * gam[c];
                                out[c] = scale * (n * d - sum_d - xh[c] * sum_dx);
                            }
                        }
                        accumulate(&mut grads[x.0], dx);
                    }
                }
                Op::SoftmaxRows(a) => {
                    let y = node.value.get();
                    let mut da = Mat::zeros(y.rows(), y.cols());
                    for r in 0..y.rows() {
                        let (yr, gr) = (y.row(r), g.row(r));
                        let dot: f64 = yr.iter().zip(gr).map(|(p, q)| p * q).sum();
                        for (o, (yv, gv)) in da.row_mut(r).iter_mut().zip(yr.iter().zip(gr)) {
                            *o = yv * (gv - dot);
                        }
                    }
                    accumulate(&mut grads[a.0], da);
                }
                Op::SliceCols { a, start } => {
                    let (rows, cols) = self.shape(*a);
                    let mut da = Mat::zeros(rows, cols);
                    let len = g.cols();
                    for r in 0..rows {
                        da.row_mut(r)[*start..*start + len].copy_from_slice(g.row(r));
                    }
                    accumulate(&mut grads[a.0], da);
                }
                Op::ConcatCols(parts) => {
                    let mut offset = 0;
                    for &p in parts {
                        let (rows, cols) = self.shape(p);
                        if need(p) {
                            let mut dp = Mat::zeros(rows, cols);
                            for r in 0..rows {
                                dp.row_mut(r).copy_from_slice(&g.row(r)[offset..offset + cols]);
                            }
                            accumulate(&mut grads[p.0], dp);
                        }
                        offset += cols;
                    }
                }
                Op::GatherRows { a, idx } => {
                    let (rows, cols) = self.shape(*a);
                    let mut da = Mat::zeros(rows, cols);
                    for (k, &src) in idx.iter().enumerate() {
                        for (o, v) in da.row_mut(src).iter_mut().zip(g.row(k)) {
                            *o += v;
                        }
                    }
                    accumulate(&mut grads[a.0], da);
                }
                Op::GroupMax { a, argmax } => {
                    let (rows, cols) = self.shape(*a);
                    let mut da = Mat::zeros(rows, cols);
                    for gi in 0..g.rows() {
                        for c in 0..cols {
                            da[(argmax[gi * cols + c], c)] += g[(gi, c)];
                        }
                    }
                    accumulate(&mut grads[a.0], da);
                }
                Op::Reshape(a) => {
                    let (rows, cols) = self.shape(*a);
                    accumulate(&mut grads[a.0], g.reshaped(rows, cols));
                }
                Op::Sum(a) => {
                    let (rows, cols) = self.shape(*a);
                    accumulate(&mut grads[a.0], Mat::filled(rows, cols, g.item()));
                }
                Op::SumSquares(a) => {
                    let s = 2.0 * g.item();
                    accumulate(&mut grads[a.0], self.value(*a).map(|v| v * s));
                }
                Op::ChamferL1 {
                    pred,
                    target,
                    nn_pred,
                    nn_target,
                } => {
                    let pv = self.value(*pred);
                    let gs = g.item();
                    let mut dp = Mat::zeros(pv.rows(), 3);
                    let wp = 0.5 * gs / pv.rows() as f64;
                    for (i, &j) in nn_pred.iter().enumerate() {
                        add_unit_direction(&mut dp, i, pv.row(i), target.row(j), wp);
                    }
                    let wt = 0.5 * gs / target.rows() as f64;
                    for (j, &i) in nn_target.iter().enumerate() {
                        add_unit_direction(&mut dp, i, pv.row(i), target.row(j), wt);
                    }
                    accumulate(&mut grads[pred.0], dp);
                }
            }
        }
        Gradients {
            nodes: grads,
            params,
        }
    }
}

/// `out[row] += w * (p - q) / |p - q|`, skipping coincident points.
fn add_unit_direction(out: &mut Mat, row: usize, p: &[f64], q: &[f64], w: f64) {
    let d = [p[0] - q[0], p[1] - q[1], p[2] - q[2]];
    let norm = (d[0] * d[0] + d[1] * d[1] + d[2] * d[2]).sqrt();
    if norm > 0.0 {
        let o = out.row_mut(row);
        for k in 0..3 {
            o[k] += w * d[k] / norm;
        }
    }
}

fn column_sums(g: &Mat) -> Mat {
    let mut out = Mat::zeros(1, g.cols());
    for r in 0..g.rows() {
        for (o, v) in out.data_mut().iter_mut().zip(g.row(r)) {
            *o += v;
        }
    }
    out
}

#[inline]
fn gelu_grad(x: f64) -> f64 {
    let u = GELU_C * (x + GELU_A * x * x * x);
    let t = u.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_mat(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Mat {
        Mat::from_vec(
            rows,
            cols,
            (0..rows * cols).map(|_| rng.random_range(-1.0..1.0)).collect(),
        )
    }

    /// Checks d(loss)/d(input) of `build` against central differences.
    fn check_input_grad(input: Mat, build: impl Fn(&mut Tape, Var) -> Var) {
        let store = ParamStore::new();
        let mut tape = Tape::new(&store);
        let x = tape.input(input.clone());
        let loss = build(&mut tape, x);
        let grads = tape.backward(loss);
        let analytic = grads.wrt(x).cloned().unwrap_or_else(|| Mat::zeros(input.rows(), input.cols()));
        let h = 1e-6;
        for k in 0..input.len() {
            let eval = |delta: f64| {
                let mut m = input.clone();
                m.data_mut()[k] += delta;
                let mut t = Tape::new(&store);
                let v = t.input(m);
                let l = build(&mut t, v);
                t.value(l).item()
            };
            let numeric = (eval(h) - eval(-h)) / (2.0 * h);
            let a = analytic.data()[k];
            let tol = 1e-6 * a.abs().max(numeric.abs()).max(1e-3);
            assert!((a - numeric).abs() <= tol, "entry {k}: analytic {a} vs numeric {numeric}");
        }
    }

    #[test]
    fn matmul_transposes_have_correct_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let w = random_mat(&mut rng, 4, 3);
        for (ta, tb) in [(false, false), (true, false), (false, true), (true, true)] {
            let w = w.clone();
            let input = if ta { random_mat(&mut rng, 4, 2) } else { random_mat(&mut rng, 2, 4) };
            check_input_grad(input, move |t, x| {
                let wv = t.constant(if tb { w.transpose() } else { w.clone() });
                let y = t.matmul_t(x, ta, wv, tb);
                let y2 = t.matmul_t(wv, !tb, x, !ta);
                let s = t.sum_squares(y);
                let s2 = t.sum(y2);
                t.add(s, s2)
            });
        }
    }

    #[test]
    fn layer_norm_and_softmax_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let gamma = random_mat(&mut rng, 1, 5);
        let beta = random_mat(&mut rng, 1, 5);
        let probe = random_mat(&mut rng, 3, 5);
        check_input_grad(random_mat(&mut rng, 3, 5), move |t, x| {
            let g = t.constant(gamma.clone());
            let b = t.constant(beta.clone());
            let y = t.layer_norm(x, g, b);
            let s = t.softmax_rows(y);
            let p = t.constant(probe.clone());
            let m = t.mul(s, p);
            t.sum(m)
        });
    }

    #[test]
    fn structural_ops_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let bias = random_mat(&mut rng, 1, 4);
        check_input_grad(random_mat(&mut rng, 6, 4), move |t, x| {
            let a = t.slice_cols(x, 1, 2);
            let b = t.slice_cols(x, 0, 2);
            let c = t.concat_cols(&[a, b]);
            let g = t.gather_rows(c, &[5, 0, 0, 3, 2, 2]);
            let m = t.group_max(g, 2);
            let bv = t.constant(bias.clone());
            let r = t.add_row(m, bv);
            let e = t.gelu(r);
            let s = t.reshape(e, 2, 6);
            let q = t.scale(s, 1.7);
            let d = t.sub(q, s);
            t.sum_squares(d)
        });
    }

    #[test]
    fn chamfer_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let target = random_mat(&mut rng, 7, 3);
        check_input_grad(random_mat(&mut rng, 5, 3), move |t, x| t.chamfer_l1(x, &target));
    }

    #[test]
    fn shared_parameter_gradients_accumulate() {
        let mut store = ParamStore::new();
        let w = store.add("w", Mat::from_vec(1, 1, vec![3.0]));
        let mut tape = Tape::new(&store);
        let a = tape.param(w);
        let b = tape.param(w);
        let y = tape.mul(a, b);
        let grads = tape.backward(y);
        assert_eq!(grads.param(w).unwrap().item(), 6.0);
    }
}
