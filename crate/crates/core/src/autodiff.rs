//! Tape-based reverse-mode differentiation over [`Mat`] values.
//!
//! A [`Graph`] is built for one forward pass, then [`Graph::backward`]
//! walks the tape in reverse. Nodes are appended in topological order, so a
//! node's parents always have smaller indices.

use crate::tensor::{gemm, Mat};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// Identifies a trainable parameter: `group` selects a parameter store,
/// `index` the tensor inside it.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamRef {
    pub group: usize,
    pub index: usize,
}

#[derive(Debug)]
struct LstmCache {
    /// Post-activation gates per time index, columns `[i | f | g | o]`.
    gates: Mat,
    cell: Mat,
    cell_tanh: Mat,
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    MatMulT(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Scale(Var, f64),
    Relu(Var),
    Gelu(Var),
    Tanh(Var),
    Softmax(Var),
    LayerNorm { x: Var, gamma: Var, beta: Var, xhat: Mat, inv_std: Vec<f64> },
    SliceCols { x: Var, start: usize },
    ConcatCols(Vec<Var>),
    SelectRows { x: Var, rows: Vec<usize> },
    MeanRows(Var),
    ReplaceRows { x: Var, rows: Vec<usize>, fill: Var },
    Dropout { x: Var, mask: Mat },
    Lstm { x: Var, w_ih: Var, w_hh: Var, bias: Var, reverse: bool, cache: LstmCache },
    NormalizeRows { x: Var, norms: Vec<f64> },
    CrossEntropy { logits: Var, targets: Vec<usize>, probs: Mat },
    AmSoftmax { cos: Var, targets: Vec<usize>, scale: f64, probs: Mat },
    WeightedSum(Vec<(Var, f64)>),
}

#[derive(Debug)]
struct Node {
    value: Mat,
    op: Op,
}

#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    params: Vec<(Var, ParamRef)>,
}

pub struct Gradients {
    grads: Vec<Option<Mat>>,
    params: Vec<(Var, ParamRef)>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Mat> {
        self.grads[v.0].as_ref()
    }

    /// Gradients of every bound parameter that received one.
    pub fn params(&self) -> impl Iterator<Item = (ParamRef, &Mat)> + '_ {
        self.params.iter().filter_map(|(v, p)| self.grads[v.0].as_ref().map(|g| (*p, g)))
    }
}

pub const LAYER_NORM_EPS: f64 = 1e-5;

#[inline]
fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

#[inline]
fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())
}

#[inline]
fn gelu_grad(x: f64) -> f64 {
    let u = GELU_C * (x + 0.044715 * x * x * x);
    let t = u.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * 0.044715 * x * x)
}

/// Row-wise log-sum-exp stabilised softmax.
pub fn softmax_rows(x: &Mat) -> Mat {
    let mut out = x.clone();
    for r in 0..out.rows() {
        let row = out.row_mut(r);
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
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

/// Mean softmax cross-entropy of `logits` rows against `targets`, plus the
/// softmax probabilities.
pub fn cross_entropy(logits: &Mat, targets: &[usize]) -> (f64, Mat) {
    assert_eq!(logits.rows(), targets.len());
    let mut probs = Mat::zeros(logits.rows(), logits.cols());
    let mut total = 0.0;
    for (r, &y) in targets.iter().enumerate() {
        let row = logits.row(r);
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
        total += if row[y] == max {
            // log1p keeps full relative precision for near-zero losses
            let rest: f64 = row.iter().enumerate().filter(|&(j, _)| j != y).map(|(_, v)| (v - max).exp()).sum();
            rest.ln_1p()
        } else {
            lse - row[y]
        };
        for (p, v) in probs.row_mut(r).iter_mut().zip(row) {
            *p = (v - lse).exp();
        }
    }
    (total / targets.len().max(1) as f64, probs)
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

    fn push(&mut self, value: Mat, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Mat {
        &self.nodes[v.0].value
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value.data()[0]
    }

    pub fn input(&mut self, value: Mat) -> Var {
        self.push(value, Op::Leaf)
    }

    pub fn param(&mut self, value: &Mat, r: ParamRef) -> Var {
        let v = self.push(value.clone(), Op::Leaf);
        self.params.push((v, r));
        v
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).matmul(self.value(b));
        self.push(value, Op::MatMul(a, b))
    }

    /// `a * b^T`.
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).matmul_t(self.value(b));
        self.push(value, Op::MatMulT(a, b))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let mut value = self.value(a).clone();
        value.add_assign(self.value(b));
        self.push(value, Op::Add(a, b))
    }

    /// Adds the `1 x n` row `b` to every row of `a`.
    pub fn add_row(&mut self, a: Var, b: Var) -> Var {
        let mut value = self.value(a).clone();
        let bias = self.value(b);
        assert_eq!(bias.shape(), (1, value.cols()), "add_row bias shape");
        for r in 0..value.rows() {
            for (v, b) in value.row_mut(r).iter_mut().zip(bias.data()) {
                *v += b;
            }
        }
        self.push(value, Op::AddRow(a, b))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let value = self.value(a).map(|v| v * c);
        self.push(value, Op::Scale(a, c))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let value = self.value(a).map(|v| v.max(0.0));
        self.push(value, Op::Relu(a))
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        let value = self.value(a).map(gelu);
        self.push(value, Op::Gelu(a))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let value = self.value(a).map(f64::tanh);
        self.push(value, Op::Tanh(a))
    }

    pub fn softmax(&mut self, a: Var) -> Var {
        let value = softmax_rows(self.value(a));
        self.push(value, Op::Softmax(a))
    }

    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Var {
        let xv = self.value(x);
        let (rows, cols) = xv.shape();
        let mut xhat = Mat::zeros(rows, cols);
        let mut inv_std = Vec::with_capacity(rows);
        for r in 0..rows {
            let row = xv.row(r);
            let mean = row.iter().sum::<f64>() / cols as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / cols as f64;
            let is = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            for (h, v) in xhat.row_mut(r).iter_mut().zip(row) {
                *h = (v - mean) * is;
            }
            inv_std.push(is);
        }
        let (g, b) = (self.value(gamma), self.value(beta));
        let mut value = xhat.clone();
        for r in 0..rows {
            for ((v, gg), bb) in value.row_mut(r).iter_mut().zip(g.data()).zip(b.data()) {
                *v = *v * gg + bb;
            }
        }
        self.push(value, Op::LayerNorm { x, gamma, beta, xhat, inv_std })
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Var {
        let xv = self.value(x);
        let mut value = Mat::zeros(xv.rows(), len);
        for r in 0..xv.rows() {
            value.row_mut(r).copy_from_slice(&xv.row(r)[start..start + len]);
        }
        self.push(value, Op::SliceCols { x, start })
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let rows = self.value(parts[0]).rows();
        let cols: usize = parts.iter().map(|p| self.value(*p).cols()).sum();
        let mut value = Mat::zeros(rows, cols);
        for r in 0..rows {
            let mut off = 0;
            for p in parts {
                let pv = self.value(*p);
                assert_eq!(pv.rows(), rows, "concat_cols row mismatch");
                value.row_mut(r)[off..off + pv.cols()].copy_from_slice(pv.row(r));
                off += pv.cols();
            }
        }
        self.push(value, Op::ConcatCols(parts.to_vec()))
    }

    pub fn select_rows(&mut self, x: Var, rows: &[usize]) -> Var {
        let value = self.value(x).select_rows(rows);
        self.push(value, Op::SelectRows { x, rows: rows.to_vec() })
    }

    pub fn mean_rows(&mut self, x: Var) -> Var {
        let value = self.value(x).mean_rows();
        self.push(value, Op::MeanRows(x))
    }

    /// Replaces the listed rows of `x` with the `1 x n` row `fill`.
    pub fn replace_rows(&mut self, x: Var, rows: &[usize], fill: Var) -> Var {
        let mut value = self.value(x).clone();
        let f = self.value(fill).clone();
        assert_eq!(f.shape(), (1, value.cols()), "replace_rows fill shape");
        for &r in rows {
            value.row_mut(r).copy_from_slice(f.data());
        }
        self.push(value, Op::ReplaceRows { x, rows: rows.to_vec(), fill })
    }

    /// Inverted dropout with a caller-supplied keep mask (entries 0 or 1).
    pub fn dropout(&mut self, x: Var, keep: &Mat, p: f64) -> Var {
        let scale = 1.0 / (1.0 - p);
        let mask = keep.map(|k| k * scale);
        let mut value = self.value(x).clone();
        for (v, m) in value.data_mut().iter_mut().zip(mask.data()) {
            *v *= m;
        }
        self.push(value, Op::Dropout { x, mask })
    }

    /// Single-direction LSTM over the rows of `x` (gate order i, f, g, o).
    /// With `reverse`, time runs from the last row to the first; output row
    /// `t` always holds the hidden state produced at input row `t`.
    pub fn lstm(&mut self, x: Var, w_ih: Var, w_hh: Var, bias: Var, reverse: bool) -> Var {
        let xv = self.value(x);
        let whh = self.value(w_hh);
        let hidden = whh.rows();
        let steps = xv.rows();
        let mut pre = xv.matmul(self.value(w_ih));
        let b = self.value(bias);
        for r in 0..steps {
            for (v, bb) in pre.row_mut(r).iter_mut().zip(b.data()) {
                *v += bb;
            }
        }
        let mut gates = Mat::zeros(steps, 4 * hidden);
        let mut cell = Mat::zeros(steps, hidden);
        let mut cell_tanh = Mat::zeros(steps, hidden);
        let mut out = Mat::zeros(steps, hidden);
        let mut h_prev = Mat::zeros(1, hidden);
        let mut c_prev = vec![0.0; hidden];
        let mut rec = Mat::zeros(1, 4 * hidden);
        for k in 0..steps {
            let t = if reverse { steps - 1 - k } else { k };
            gemm(1.0, &h_prev, false, whh, false, 0.0, &mut rec);
            let z = pre.row(t);
            let grow = gates.row_mut(t);
            for j in 0..hidden {
                grow[j] = sigmoid(z[j] + rec.data()[j]);
                grow[hidden + j] = sigmoid(z[hidden + j] + rec.data()[hidden + j]);
                grow[2 * hidden + j] = (z[2 * hidden + j] + rec.data()[2 * hidden + j]).tanh();
                grow[3 * hidden + j] = sigmoid(z[3 * hidden + j] + rec.data()[3 * hidden + j]);
            }
            for j in 0..hidden {
                let (i, f, g, o) = (grow[j], grow[hidden + j], grow[2 * hidden + j], grow[3 * hidden + j]);
                let c = f * c_prev[j] + i * g;
                let ct = c.tanh();
                cell[(t, j)] = c;
                cell_tanh[(t, j)] = ct;
                out[(t, j)] = o * ct;
                c_prev[j] = c;
            }
            h_prev.data_mut().copy_from_slice(out.row(t));
        }
        let cache = LstmCache { gates, cell, cell_tanh };
        self.push(out, Op::Lstm { x, w_ih, w_hh, bias, reverse, cache })
    }

    /// Scales each row to unit L2 norm. Rows must be nonzero.
    pub fn normalize_rows(&mut self, x: Var) -> Var {
        let mut value = self.value(x).clone();
        let mut norms = Vec::with_capacity(value.rows());
        for r in 0..value.rows() {
            let row = value.row_mut(r);
            let n = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            for v in row.iter_mut() {
                *v /= n;
            }
            norms.push(n);
        }
        self.push(value, Op::NormalizeRows { x, norms })
    }

    /// Mean softmax cross-entropy, a `1 x 1` node.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Var {
        let (loss, probs) = cross_entropy(self.value(logits), targets);
        self.push(Mat::filled(1, 1, loss), Op::CrossEntropy { logits, targets: targets.to_vec(), probs })
    }

    /// Additive-margin softmax over a cosine matrix: target logits are
    /// `scale * (cos - margin)`, all others `scale * cos`.
    pub fn am_softmax(&mut self, cos: Var, targets: &[usize], margin: f64, scale: f64) -> Var {
        let logits = margin_logits(self.value(cos), targets, margin, scale);
        let (loss, probs) = cross_entropy(&logits, targets);
        self.push(Mat::filled(1, 1, loss), Op::AmSoftmax { cos, targets: targets.to_vec(), scale, probs })
    }

    pub fn weighted_sum(&mut self, terms: &[(Var, f64)]) -> Var {
        let mut value = Mat::zeros(self.value(terms[0].0).rows(), self.value(terms[0].0).cols());
        for &(v, w) in terms {
            value.add_scaled(self.value(v), w);
        }
        self.push(value, Op::WeightedSum(terms.to_vec()))
    }

    /// Reverse sweep from the scalar node `loss`.
    pub fn backward(&self, loss: Var) -> Gradients {
        assert_eq!(self.value(loss).shape(), (1, 1), "backward needs a scalar");
        let mut grads: Vec<Option<Mat>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Mat::filled(1, 1, 1.0));
        for idx in (0..=loss.0).rev() {
            let Some(dy) = grads[idx].take() else { continue };
            self.propagate(idx, &dy, &mut grads);
            grads[idx] = Some(dy);
        }
        Gradients { grads, params: self.params.clone() }
    }

    fn propagate(&self, idx: usize, dy: &Mat, grads: &mut [Option<Mat>]) {
        let node = &self.nodes[idx];
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                accumulate_gemm(grads, *a, dy, false, bv, true, av.shape());
                accumulate_gemm(grads, *b, av, true, dy, false, bv.shape());
            }
            Op::MatMulT(a, b) => {
                // y = a b^T: da = dy b, db = dy^T a
                let (av, bv) = (self.value(*a), self.value(*b));
                accumulate_gemm(grads, *a, dy, false, bv, false, av.shape());
                accumulate_gemm(grads, *b, dy, true, av, false, bv.shape());
            }
            Op::Add(a, b) => {
                accumulate(grads, *a, dy);
                accumulate(grads, *b, dy);
            }
            Op::AddRow(a, b) => {
                accumulate(grads, *a, dy);
                let mut db = Mat::zeros(1, dy.cols());
                for r in 0..dy.rows() {
                    for (d, v) in db.data_mut().iter_mut().zip(dy.row(r)) {
                        *d += v;
                    }
                }
                accumulate(grads, *b, &db);
            }
            Op::Scale(a, c) => accumulate(grads, *a, &dy.map(|v| v * c)),
            Op::Relu(a) => {
                let av = self.value(*a);
                let dx = zip_map(dy, av, |d, x| if x > 0.0 { d } else { 0.0 });
                accumulate(grads, *a, &dx);
            }
            Op::Gelu(a) => {
                let dx = zip_map(dy, self.value(*a), |d, x| d * gelu_grad(x));
                accumulate(grads, *a, &dx);
            }
            Op::Tanh(a) => {
                let dx = zip_map(dy, &node.value, |d, y| d * (1.0 - y * y));
                accumulate(grads, *a, &dx);
            }
            Op::Softmax(a) => {
                let p = &node.value;
                let mut dx = Mat::zeros(p.rows(), p.cols());
                for r in 0..p.rows() {
                    let dot: f64 = p.row(r).iter().zip(dy.row(r)).map(|(p, d)| p * d).sum();
                    for ((o, pp), d) in dx.row_mut(r).iter_mut().zip(p.row(r)).zip(dy.row(r)) {
                        *o = pp * (d - dot);
                    }
                }
                accumulate(grads, *a, &dx);
            }
            Op::LayerNorm { x, gamma, beta, xhat, inv_std } => {
                let g = self.value(*gamma);
                let (rows, cols) = xhat.shape();
                let mut dgamma = Mat::zeros(1, cols);
                let mut dbeta = Mat::zeros(1, cols);
                let mut dx = Mat::zeros(rows, cols);
                let n = cols as f64;
                let mut dxhat = vec![0.0; cols];
                for r in 0..rows {
                    let (dyr, xr) = (dy.row(r), xhat.row(r));
                    for j in 0..cols {
                        dgamma.data_mut()[j] += dyr[j] * xr[j];
                        dbeta.data_mut()[j] += dyr[j];
                        dxhat[j] = dyr[j] * g.data()[j];
                    }
                    let sum: f64 = dxhat.iter().sum();
                    let dot: f64 = dxhat.iter().zip(xr).map(|(a, b)| a * b).sum();
                    for (j, o) in dx.row_mut(r).iter_mut().enumerate() {
                        *o = inv_std[r] / n * (n * dxhat[j] - sum - xr[j] * dot);
                    }
                }
                accumulate(grads, *x, &dx);
                accumulate(grads, *gamma, &dgamma);
                accumulate(grads, *beta, &dbeta);
            }
            Op::SliceCols { x, start } => {
                let xv = self.value(*x);
                let mut dx = Mat::zeros(xv.rows(), xv.cols());
                for r in 0..dy.rows() {
                    dx.row_mut(r)[*start..*start + dy.cols()].copy_from_slice(dy.row(r));
                }
                accumulate(grads, *x, &dx);
            }
            Op::ConcatCols(parts) => {
                let mut off = 0;
                for p in parts {
                    let cols = self.value(*p).cols();
                    let mut dp = Mat::zeros(dy.rows(), cols);
                    for r in 0..dy.rows() {
                        dp.row_mut(r).copy_from_slice(&dy.row(r)[off..off + cols]);
                    }
                    accumulate(grads, *p, &dp);
                    off += cols;
                }
            }
            Op::SelectRows { x, rows } => {
                let xv = self.value(*x);
                let mut dx = Mat::zeros(xv.rows(), xv.cols());
                for (o, &r) in rows.iter().enumerate() {
                    for (d, v) in dx.row_mut(r).iter_mut().zip(dy.row(o)) {
                        *d += v;
                    }
                }
                accumulate(grads, *x, &dx);
            }
            Op::MeanRows(x) => {
                let xv = self.value(*x);
                let mut dx = Mat::zeros(xv.rows(), xv.cols());
                let inv = 1.0 / xv.rows() as f64;
                for r in 0..xv.rows() {
                    for (d, v) in dx.row_mut(r).iter_mut().zip(dy.data()) {
                        *d = v * inv;
                    }
                }
                accumulate(grads, *x, &dx);
            }
            Op::ReplaceRows { x, rows, fill } => {
                let mut dx = dy.clone();
                let mut dfill = Mat::zeros(1, dy.cols());
                let mut seen = vec![false; dy.rows()];
                for &r in rows {
                    if !seen[r] {
                        seen[r] = true;
                        dfill.add_assign(&Mat::row_vector(dy.row(r)));
                    }
                    dx.row_mut(r).fill(0.0);
                }
                accumulate(grads, *x, &dx);
                accumulate(grads, *fill, &dfill);
            }
            Op::Dropout { x, mask } => accumulate(grads, *x, &zip_map(dy, mask, |d, m| d * m)),
            Op::Lstm { x, w_ih, w_hh, bias, reverse, cache } => {
                let (dx, dw_ih, dw_hh, db) = self.lstm_backward(*x, *w_ih, *w_hh, *reverse, cache, &node.value, dy);
                accumulate(grads, *x, &dx);
                accumulate(grads, *w_ih, &dw_ih);
                accumulate(grads, *w_hh, &dw_hh);
                accumulate(grads, *bias, &db);
            }
            Op::NormalizeRows { x, norms } => {
                let y = &node.value;
                let mut dx = Mat::zeros(y.rows(), y.cols());
                for r in 0..y.rows() {
                    let dot: f64 = y.row(r).iter().zip(dy.row(r)).map(|(a, b)| a * b).sum();
                    for ((o, yy), d) in dx.row_mut(r).iter_mut().zip(y.row(r)).zip(dy.row(r)) {
                        *o = (d - yy * dot) / norms[r];
                    }
                }
                accumulate(grads, *x, &dx);
            }
            Op::CrossEntropy { logits, targets, probs } => {
                let dx = softmax_ce_grad(probs, targets, dy.data()[0], 1.0);
                accumulate(grads, *logits, &dx);
            }
            Op::AmSoftmax { cos, targets, scale, probs } => {
                let dx = softmax_ce_grad(probs, targets, dy.data()[0], *scale);
                accumulate(grads, *cos, &dx);
            }
            Op::WeightedSum(terms) => {
                for &(v, w) in terms {
                    accumulate(grads, v, &dy.map(|d| d * w));
                }
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn lstm_backward(
        &self,
        x: Var,
        w_ih: Var,
        w_hh: Var,
        reverse: bool,
        cache: &LstmCache,
        out: &Mat,
        dy: &Mat,
    ) -> (Mat, Mat, Mat, Mat) {
        let (xv, wih, whh) = (self.value(x), self.value(w_ih), self.value(w_hh));
        let hidden = whh.rows();
        let steps = xv.rows();
        let mut dz = Mat::zeros(steps, 4 * hidden);
        // Row t of h_prev holds the hidden state fed into step t.
        let mut h_prev = Mat::zeros(steps, hidden);
        let mut dh_next = Mat::zeros(1, hidden);
        let mut dc_next = vec![0.0; hidden];
        for k in (0..steps).rev() {
            let t = if reverse { steps - 1 - k } else { k };
            let prev = if k == 0 { None } else { Some(if reverse { t + 1 } else { t - 1 }) };
            if let Some(p) = prev {
                h_prev.row_mut(t).copy_from_slice(out.row(p));
            }
            let g = cache.gates.row(t);
            let dzr = dz.row_mut(t);
            for j in 0..hidden {
                let (i, f, gg, o) = (g[j], g[hidden + j], g[2 * hidden + j], g[3 * hidden + j]);
                let ct = cache.cell_tanh[(t, j)];
                let c_prev = prev.map_or(0.0, |p| cache.cell[(p, j)]);
                let dh = dy[(t, j)] + dh_next.data()[j];
                let d_o = dh * ct;
                let dc = dh * o * (1.0 - ct * ct) + dc_next[j];
                dzr[j] = dc * gg * i * (1.0 - i);
                dzr[hidden + j] = dc * c_prev * f * (1.0 - f);
                dzr[2 * hidden + j] = dc * i * (1.0 - gg * gg);
                dzr[3 * hidden + j] = d_o * o * (1.0 - o);
                dc_next[j] = dc * f;
            }
            let dz_row = Mat::row_vector(dz.row(t));
            gemm(1.0, &dz_row, false, whh, true, 0.0, &mut dh_next);
        }
        let mut dx = Mat::zeros(steps, xv.cols());
        gemm(1.0, &dz, false, wih, true, 0.0, &mut dx);
        let dw_ih = xv.t_matmul(&dz);
        let dw_hh = h_prev.t_matmul(&dz);
        let mut db = Mat::zeros(1, 4 * hidden);
        for r in 0..steps {
            for (d, v) in db.data_mut().iter_mut().zip(dz.row(r)) {
                *d += v;
            }
        }
        (dx, dw_ih, dw_hh, db)
    }
}

/// Logit matrix `scale * (cos - margin * onehot(target))`.
pub fn margin_logits(cos: &Mat, targets: &[usize], margin: f64, scale: f64) -> Mat {
    let mut logits = cos.map(|c| c * scale);
    for (r, &y) in targets.iter().enumerate() {
        logits[(r, y)] -= scale * margin;
    }
    logits
}

fn softmax_ce_grad(probs: &Mat, targets: &[usize], upstream: f64, scale: f64) -> Mat {
    let n = targets.len().max(1) as f64;
    let mut dx = probs.clone();
    for (r, &y) in targets.iter().enumerate() {
        dx[(r, y)] -= 1.0;
    }
    dx.scale_in_place(upstream * scale / n);
    dx
}

fn zip_map(a: &Mat, b: &Mat, f: impl Fn(f64, f64) -> f64) -> Mat {
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
    Mat::from_vec(a.rows(), a.cols(), data)
}

fn accumulate(grads: &mut [Option<Mat>], v: Var, g: &Mat) {
    match &mut grads[v.0] {
        Some(existing) => existing.add_assign(g),
        slot @ None => *slot = Some(g.clone()),
    }
}

fn accumulate_gemm(
    grads: &mut [Option<Mat>],
    v: Var,
    a: &Mat,
    a_t: bool,
    b: &Mat,
    b_t: bool,
    shape: (usize, usize),
) {
    let slot = &mut grads[v.0];
    let (target, beta) = match slot {
        Some(existing) => (existing, 1.0),
        None => (slot.insert(Mat::zeros(shape.0, shape.1)), 0.0),
    };
    gemm(1.0, a, a_t, b, b_t, beta, target);
}
