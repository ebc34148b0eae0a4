//! Recorded forward trace with reverse-mode differentiation.
//!
//! Every operation appends a node holding its output value. `backward`
//! walks the nodes in reverse and accumulates parameter gradients into the
//! [`ParameterStore`]. A graph is built per forward pass and dropped after.

use super::tensor::{matmul_at_into, matmul_bt_into};
use super::{NumericsError, ParamId, ParameterStore, Tensor};

const LN_EPS: f64 = 1e-5;
const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    Param(ParamId),
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    Scale(Var, f64),
    Tanh(Var),
    Gelu(Var),
    Softmax(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    Attention {
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        weights: Vec<f64>,
    },
    GatherRows(Var, Vec<usize>),
    ScatterRows(Var, Vec<usize>),
    Conv1d {
        x: Var,
        w: Var,
        b: Var,
        width: usize,
    },
    MaskedMse {
        pred: Var,
        target: Tensor,
        weights: Vec<f64>,
    },
    Sum(Var),
}

struct Node {
    value: Tensor,
    op: Op,
}

/// A single forward trace.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

fn mismatch(op: &'static str, a: &Tensor, b: &Tensor) -> NumericsError {
    NumericsError::ShapeMismatch {
        op,
        left: a.shape().to_vec(),
        right: b.shape().to_vec(),
    }
}

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let u = GELU_C * (x + 0.044715 * x * x * x);
    let t = u.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * 0.044715 * x * x)
}

/// Row-wise softmax of a flat `[rows, cols]` buffer.
pub fn softmax_rows(data: &[f64], cols: usize) -> Vec<f64> {
    let mut out = data.to_vec();
    for row in out.chunks_mut(cols) {
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        for v in row.iter_mut() {
            *v /= sum;
        }
    }
    out
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf)
    }

    pub fn param(&mut self, store: &ParameterStore, id: ParamId) -> Var {
        self.push(store.value(id).clone(), Op::Param(id))
    }

    /// Post-softmax attention weights recorded by an attention node,
    /// laid out `[heads, queries, keys]`.
    pub fn attention_weights(&self, v: Var) -> Option<&[f64]> {
        match &self.nodes[v.0].op {
            Op::Attention { weights, .. } => Some(weights),
            _ => None,
        }
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, NumericsError> {
        let out = self.value(a).matmul(self.value(b))?;
        Ok(self.push(out, Op::MatMul(a, b)))
    }

    /// `x W + b` with `b` broadcast over rows.
    pub fn affine(&mut self, x: Var, w: Var, b: Var) -> Result<Var, NumericsError> {
        let xw = self.matmul(x, w)?;
        self.add_row(xw, b)
    }

    fn zip_same(
        &mut self,
        a: Var,
        b: Var,
        name: &'static str,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Tensor, NumericsError> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(mismatch(name, ta, tb));
        }
        let data = ta.data().iter().zip(tb.data()).map(|(x, y)| f(*x, *y)).collect();
        Ok(Tensor::new(ta.shape().to_vec(), data).unwrap())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, NumericsError> {
        let t = self.zip_same(a, b, "add", |x, y| x + y)?;
        Ok(self.push(t, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, NumericsError> {
        let t = self.zip_same(a, b, "sub", |x, y| x - y)?;
        Ok(self.push(t, Op::Sub(a, b)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, NumericsError> {
        let t = self.zip_same(a, b, "mul", |x, y| x * y)?;
        Ok(self.push(t, Op::Mul(a, b)))
    }

    /// Adds the vector `bias` (length = cols of `a`) to every row of `a`.
    pub fn add_row(&mut self, a: Var, bias: Var) -> Result<Var, NumericsError> {
        let (ta, tb) = (self.value(a), self.value(bias));
        let cols = ta.cols();
        if tb.len() != cols {
            return Err(mismatch("add_row", ta, tb));
        }
        let mut out = ta.clone();
        for row in out.data_mut().chunks_mut(cols) {
            for (o, b) in row.iter_mut().zip(tb.data()) {
                *o += b;
            }
        }
        Ok(self.push(out, Op::AddRow(a, bias)))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let mut out = self.value(a).clone();
        out.data_mut().iter_mut().for_each(|v| *v *= c);
        self.push(out, Op::Scale(a, c))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let mut out = self.value(a).clone();
        out.data_mut().iter_mut().for_each(|v| *v = v.tanh());
        self.push(out, Op::Tanh(a))
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, a: Var) -> Var {
        let mut out = self.value(a).clone();
        out.data_mut().iter_mut().for_each(|v| *v = gelu(*v));
        self.push(out, Op::Gelu(a))
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let data = softmax_rows(t.data(), t.cols());
        let out = Tensor::new(t.shape().to_vec(), data).unwrap();
        self.push(out, Op::Softmax(a))
    }

    /// Per-row layer normalization with affine `gamma`, `beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var, NumericsError> {
        let tx = self.value(x);
        let cols = tx.cols();
        let (tg, tb) = (self.value(gamma), self.value(beta));
        if tg.len() != cols || tb.len() != cols {
            return Err(mismatch("layer_norm", tx, tg));
        }
        let rows = tx.rows();
        let mut xhat = vec![0.0; tx.len()];
        let mut inv_std = vec![0.0; rows];
        let mut out = vec![0.0; tx.len()];
        for r in 0..rows {
            let row = tx.row(r);
            let mean = row.iter().sum::<f64>() / cols as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / cols as f64;
            let is = 1.0 / (var + LN_EPS).sqrt();
            inv_std[r] = is;
            for c in 0..cols {
                let h = (row[c] - mean) * is;
                xhat[r * cols + c] = h;
                out[r * cols + c] = h * tg.data()[c] + tb.data()[c];
            }
        }
        let out = Tensor::new(tx.shape().to_vec(), out).unwrap();
        Ok(self.push(
            out,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
        ))
    }

    /// Multi-head scaled dot-product attention without masking.
    ///
    /// `q` is `[nq, D]`, `k` and `v` are `[nk, D]`; `D` is split evenly
    /// into `heads` column groups and the per-head outputs are concatenated.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, heads: usize) -> Result<Var, NumericsError> {
        let (tq, tk, tv) = (self.value(q), self.value(k), self.value(v));
        let dim = tq.cols();
        if heads == 0 || dim % heads != 0 {
            return Err(NumericsError::HeadSplit { dim, heads });
        }
        if tk.cols() != dim || tv.cols() != dim {
            return Err(mismatch("attention", tq, tk));
        }
        if tk.rows() != tv.rows() {
            return Err(mismatch("attention", tk, tv));
        }
        let (nq, nk) = (tq.rows(), tk.rows());
        let dh = dim / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut weights = vec![0.0; heads * nq * nk];
        let mut out = vec![0.0; nq * dim];
        for h in 0..heads {
            let w = &mut weights[h * nq * nk..(h + 1) * nq * nk];
            for i in 0..nq {
                let qi = &tq.row(i)[h * dh..(h + 1) * dh];
                for j in 0..nk {
                    let kj = &tk.row(j)[h * dh..(h + 1) * dh];
                    w[i * nk + j] = qi.iter().zip(kj).map(|(a, b)| a * b).sum::<f64>() * scale;
                }
            }
            let p = softmax_rows(w, nk);
            w.copy_from_slice(&p);
            for i in 0..nq {
                for j in 0..nk {
                    let pij = w[i * nk + j];
                    let vj = &tv.row(j)[h * dh..(h + 1) * dh];
                    let o = &mut out[i * dim + h * dh..i * dim + (h + 1) * dh];
                    for (oo, vv) in o.iter_mut().zip(vj) {
                        *oo += pij * vv;
                    }
                }
            }
        }
        let out = Tensor::new(vec![nq, dim], out).unwrap();
        Ok(self.push(
            out,
            Op::Attention {
                q,
                k,
                v,
                heads,
                weights,
            },
        ))
    }

    /// Selects rows `idx` of `src` (repeats allowed).
    pub fn gather_rows(&mut self, src: Var, idx: &[usize]) -> Result<Var, NumericsError> {
        let t = self.value(src);
        let cols = t.cols();
        if let Some(&bad) = idx.iter().find(|&&i| i >= t.rows()) {
            return Err(NumericsError::ShapeMismatch {
                op: "gather_rows",
                left: t.shape().to_vec(),
                right: vec![bad],
            });
        }
        let mut data = Vec::with_capacity(idx.len() * cols);
        for &i in idx {
            data.extend_from_slice(t.row(i));
        }
        let out = Tensor::new(vec![idx.len(), cols], data).unwrap();
        Ok(self.push(out, Op::GatherRows(src, idx.to_vec())))
    }

    /// Places row `r` of `src` at row `idx[r]` of a zero `[n_rows, cols]`
    /// matrix; colliding destinations add.
    pub fn scatter_rows(&mut self, src: Var, idx: &[usize], n_rows: usize) -> Result<Var, NumericsError> {
        let t = self.value(src);
        if idx.len() != t.rows() || idx.iter().any(|&i| i >= n_rows) {
            return Err(NumericsError::ShapeMismatch {
                op: "scatter_rows",
                left: t.shape().to_vec(),
                right: vec![idx.len(), n_rows],
            });
        }
        let cols = t.cols();
        let mut out = Tensor::zeros(&[n_rows, cols]);
        for (r, &i) in idx.iter().enumerate() {
            for (o, v) in out.row_mut(i).iter_mut().zip(t.row(r)) {
                *o += v;
            }
        }
        Ok(self.push(out, Op::ScatterRows(src, idx.to_vec())))
    }

    /// Zero-padded "same" 1-D convolution over rows (time).
    ///
    /// `x` is `[T, c_in]`, `w` is `[width * c_in, c_out]` with tap-major
    /// rows, `b` is `[c_out]`. `width` must be odd.
    pub fn conv1d(&mut self, x: Var, w: Var, b: Var, width: usize) -> Result<Var, NumericsError> {
        let (tx, tw, tb) = (self.value(x), self.value(w), self.value(b));
        let cin = tx.cols();
        let cout = tw.cols();
        if width.is_multiple_of(2) || tw.rows() != width * cin || tb.len() != cout {
            return Err(mismatch("conv1d", tx, tw));
        }
        let steps = tx.rows();
        let half = (width / 2) as isize;
        let mut out = vec![0.0; steps * cout];
        for t in 0..steps {
            out[t * cout..(t + 1) * cout].copy_from_slice(tb.data());
            for tap in 0..width {
                let src = t as isize + tap as isize - half;
                if src < 0 || src >= steps as isize {
                    continue;
                }
                let xrow = tx.row(src as usize);
                for (c, &xv) in xrow.iter().enumerate() {
                    let wrow = tw.row(tap * cin + c);
                    for (o, wv) in out[t * cout..(t + 1) * cout].iter_mut().zip(wrow) {
                        *o += xv * wv;
                    }
                }
            }
        }
        let out = Tensor::new(vec![steps, cout], out).unwrap();
        Ok(self.push(out, Op::Conv1d { x, w, b, width }))
    }

    /// Weighted mean over rows of the squared row error:
    /// `sum_r w_r ||pred_r - target_r||^2 / sum_r w_r`, or 0 when all
    /// weights vanish.
    pub fn masked_mse(&mut self, pred: Var, target: &Tensor, weights: &[f64]) -> Result<Var, NumericsError> {
        let tp = self.value(pred);
        if tp.shape() != target.shape() || weights.len() != tp.rows() {
            return Err(mismatch("masked_mse", tp, target));
        }
        let denom: f64 = weights.iter().sum();
        let mut loss = 0.0;
        if denom > 0.0 {
            for (r, &w) in weights.iter().enumerate() {
                if w == 0.0 {
                    continue;
                }
                loss += w * tp.row(r).iter().zip(target.row(r)).map(|(a, b)| (a - b) * (a - b)).sum::<f64>();
            }
            loss /= denom;
        }
        Ok(self.push(
            Tensor::scalar(loss),
            Op::MaskedMse {
                pred,
                target: target.clone(),
                weights: weights.to_vec(),
            },
        ))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().sum();
        self.push(Tensor::scalar(s), Op::Sum(a))
    }

    /// Accumulates `d loss / d param` into `store` for every parameter node.
    pub fn backward(&self, loss: Var, store: &mut ParameterStore) -> Result<(), NumericsError> {
        let lt = self.value(loss);
        if lt.len() != 1 {
            return Err(NumericsError::NotScalar(lt.shape().to_vec()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = (0..=loss.0).map(|_| None).collect();
        grads[loss.0] = Some(vec![1.0]);
        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            let mut acc = |v: Var, f: &dyn Fn(&mut [f64])| {
                let n = self.nodes[v.0].value.len();
                let slot = grads[v.0].get_or_insert_with(|| vec![0.0; n]);
                f(slot);
            };
            match &node.op {
                Op::Leaf => {}
                Op::Param(id) => {
                    for (a, b) in store.grad_mut(*id).data_mut().iter_mut().zip(&g) {
                        *a += b;
                    }
                }
                Op::MatMul(a, b) => {
                    let (ta, tb) = (self.value(*a), self.value(*b));
                    let (n, k, m) = (ta.rows(), ta.cols(), tb.cols());
                    acc(*a, &|s| matmul_bt_into(&g, tb.data(), s, n, m, k));
                    acc(*b, &|s| matmul_at_into(ta.data(), &g, s, n, k, m));
                }
                Op::Add(a, b) => {
                    acc(*a, &|s| s.iter_mut().zip(&g).for_each(|(x, y)| *x += y));
                    acc(*b, &|s| s.iter_mut().zip(&g).for_each(|(x, y)| *x += y));
                }
                Op::Sub(a, b) => {
                    acc(*a, &|s| s.iter_mut().zip(&g).for_each(|(x, y)| *x += y));
                    acc(*b, &|s| s.iter_mut().zip(&g).for_each(|(x, y)| *x -= y));
                }
                Op::Mul(a, b) => {
                    let (ta, tb) = (self.value(*a), self.value(*b));
                    acc(*a, &|s| {
                        for ((x, gv), bv) in s.iter_mut().zip(&g).zip(tb.data()) {
                            *x += gv * bv;
                        }
                    });
                    acc(*b, &|s| {
                        for ((x, gv), av) in s.iter_mut().zip(&g).zip(ta.data()) {
                            *x += gv * av;
                        }
                    });
                }
                Op::AddRow(a, bias) => {
                    let cols = self.value(*bias).len();
                    acc(*a, &|s| s.iter_mut().zip(&g).for_each(|(x, y)| *x += y));
                    acc(*bias, &|s| {
                        for row in g.chunks(cols) {
                            s.iter_mut().zip(row).for_each(|(x, y)| *x += y);
                        }
                    });
                }
                Op::Scale(a, c) => {
                    acc(*a, &|s| s.iter_mut().zip(&g).for_each(|(x, y)| *x += c * y));
                }
                Op::Tanh(a) => {
                    let out = node.value.data();
                    acc(*a, &|s| {
                        for ((x, gv), o) in s.iter_mut().zip(&g).zip(out) {
                            *x += gv * (1.0 - o * o);
                        }
                    });
                }
                Op::Gelu(a) => {
                    let inp = self.value(*a).data();
                    acc(*a, &|s| {
                        for ((x, gv), i) in s.iter_mut().zip(&g).zip(inp) {
                            *x += gv * gelu_grad(*i);
                        }
                    });
                }
                Op::Softmax(a) => {
                    let p = node.value.data();
                    let cols = node.value.cols();
                    acc(*a, &|s| {
                        for ((srow, grow), prow) in s.chunks_mut(cols).zip(g.chunks(cols)).zip(p.chunks(cols)) {
                            let dot: f64 = grow.iter().zip(prow).map(|(x, y)| x * y).sum();
                            for ((x, gv), pv) in srow.iter_mut().zip(grow).zip(prow) {
                                *x += pv * (gv - dot);
                            }
                        }
                    });
                }
                Op::LayerNorm {
                    x,
                    gamma,
                    beta,
                    xhat,
                    inv_std,
                } => {
                    let cols = self.value(*gamma).len();
                    let gam = self.value(*gamma).data();
                    acc(*gamma, &|s| {
                        for (grow, hrow) in g.chunks(cols).zip(xhat.chunks(cols)) {
                            for ((x, gv), h) in s.iter_mut().zip(grow).zip(hrow) {
                                *x += gv * h;
                            }
                        }
                    });
                    acc(*beta, &|s| {
                        for grow in g.chunks(cols) {
                            s.iter_mut().zip(grow).for_each(|(x, y)| *x += y);
                        }
                    });
                    acc(*x, &|s| {
                        let n = cols as f64;
                        for (r, ((srow, grow), hrow)) in
                            s.chunks_mut(cols).zip(g.chunks(cols)).zip(xhat.chunks(cols)).enumerate()
                        {
                            let dh: Vec<f64> = grow.iter().zip(gam).map(|(a, b)| a * b).collect();
                            let sum_dh: f64 = dh.iter().sum();
                            let sum_dh_h: f64 = dh.iter().zip(hrow).map(|(a, b)| a * b).sum();
                            for c in 0..cols {
                                srow[c] += inv_std[r] / n * (n * dh[c] - sum_dh - hrow[c] * sum_dh_h);
                            }
                        }
                    });
                }
                Op::Attention {
                    q,
                    k,
                    v,
                    heads,
                    weights,
                } => {
                    let (tq, tk, tv) = (self.value(*q), self.value(*k), self.value(*v));
                    let dim = tq.cols();
                    let (nq, nk) = (tq.rows(), tk.rows());
                    let dh = dim / heads;
                    let scale = 1.0 / (dh as f64).sqrt();
                    let mut gq = vec![0.0; nq * dim];
                    let mut gk = vec![0.0; nk * dim];
                    let mut gv = vec![0.0; nk * dim];
                    let mut ds = vec![0.0; nq * nk];
                    for h in 0..*heads {
                        let p = &weights[h * nq * nk..(h + 1) * nq * nk];
                        let cols = h * dh..(h + 1) * dh;
                        for i in 0..nq {
                            let go = &g[i * dim + cols.start..i * dim + cols.end];
                            let mut dot = 0.0;
                            for j in 0..nk {
                                let vj = &tv.row(j)[cols.clone()];
                                let dp: f64 = go.iter().zip(vj).map(|(a, b)| a * b).sum();
                                ds[i * nk + j] = dp;
                                dot += dp * p[i * nk + j];
                                let pij = p[i * nk + j];
                                for (x, gg) in gv[j * dim + cols.start..j * dim + cols.end].iter_mut().zip(go) {
                                    *x += pij * gg;
                                }
                            }
                            for j in 0..nk {
                                ds[i * nk + j] = p[i * nk + j] * (ds[i * nk + j] - dot) * scale;
                            }
                        }
                        for i in 0..nq {
                            for j in 0..nk {
                                let d = ds[i * nk + j];
                                if d == 0.0 {
                                    continue;
                                }
                                let kj = &tk.row(j)[cols.clone()];
                                let qi = &tq.row(i)[cols.clone()];
                                for c in 0..dh {
                                    gq[i * dim + cols.start + c] += d * kj[c];
                                    gk[j * dim + cols.start + c] += d * qi[c];
                                }
                            }
                        }
                    }
                    acc(*q, &|s| s.iter_mut().zip(&gq).for_each(|(x, y)| *x += y));
                    acc(*k, &|s| s.iter_mut().zip(&gk).for_each(|(x, y)| *x += y));
                    acc(*v, &|s| s.iter_mut().zip(&gv).for_each(|(x, y)| *x += y));
                }
                Op::GatherRows(src, idx) => {
                    let cols = node.value.cols();
                    acc(*src, &|s| {
                        for (r, &i) in idx.iter().enumerate() {
                            for (x, y) in s[i * cols..(i + 1) * cols].iter_mut().zip(&g[r * cols..(r + 1) * cols]) {
                                *x += y;
                            }
                        }
                    });
                }
                Op::ScatterRows(src, idx) => {
                    let cols = node.value.cols();
                    acc(*src, &|s| {
                        for (r, &i) in idx.iter().enumerate() {
                            for (x, y) in s[r * cols..(r + 1) * cols].iter_mut().zip(&g[i * cols..(i + 1) * cols]) {
                                *x += y;
                            }
                        }
                    });
                }
                Op::Conv1d { x, w, b, width } => {
                    let (tx, tw) = (self.value(*x), self.value(*w));
                    let cin = tx.cols();
                    let cout = tw.cols();
                    let steps = tx.rows();
                    let half = (*width / 2) as isize;
                    acc(*b, &|s| {
                        for grow in g.chunks(cout) {
                            s.iter_mut().zip(grow).for_each(|(x, y)| *x += y);
                        }
                    });
                    let taps = |t: usize| {
                        (0..*width).filter_map(move |tap| {
                            let src = t as isize + tap as isize - half;
                            (src >= 0 && src < steps as isize).then_some((tap, src as usize))
                        })
                    };
                    acc(*w, &|s| {
                        for t in 0..steps {
                            let grow = &g[t * cout..(t + 1) * cout];
                            for (tap, src) in taps(t) {
                                for (c, &xv) in tx.row(src).iter().enumerate() {
                                    let r = tap * cin + c;
                                    for (x, gv) in s[r * cout..(r + 1) * cout].iter_mut().zip(grow) {
                                        *x += xv * gv;
                                    }
                                }
                            }
                        }
                    });
                    acc(*x, &|s| {
                        for t in 0..steps {
                            let grow = &g[t * cout..(t + 1) * cout];
                            for (tap, src) in taps(t) {
                                for c in 0..cin {
                                    let wrow = tw.row(tap * cin + c);
                                    s[src * cin + c] += wrow.iter().zip(grow).map(|(a, b)| a * b).sum::<f64>();
                                }
                            }
                        }
                    });
                }
                Op::MaskedMse { pred, target, weights } => {
                    let tp = self.value(*pred);
                    let cols = tp.cols();
                    let denom: f64 = weights.iter().sum();
                    if denom > 0.0 {
                        acc(*pred, &|s| {
                            for (r, &w) in weights.iter().enumerate() {
                                if w == 0.0 {
                                    continue;
                                }
                                let f = 2.0 * w * g[0] / denom;
                                for c in 0..cols {
                                    s[r * cols + c] += f * (tp.row(r)[c] - target.row(r)[c]);
                                }
                            }
                        });
                    }
                }
                Op::Sum(a) => {
                    acc(*a, &|s| s.iter_mut().for_each(|x| *x += g[0]));
                }
            }
        }
        Ok(())
    }
}
