//! Reverse-mode autodiff over `f64` matrices.
//!
//! Every differentiable computation in the crate (field MLPs, the fusion
//! transformer, volume compositing, losses) is expressed as ops on a [`Tape`].
//! Ops are an enum so each backward rule is a single audited match arm; the
//! gradient test suites check them against central finite differences.

use std::cell::Cell;

use ndarray::{s, Array1, Array2, Axis};

pub type Matrix = Array2<f64>;

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct VarId(pub(crate) usize);

enum Op {
    Leaf,
    /// A (m,k) @ B (k,n)
    MatMul(VarId, VarId),
    /// A (m,k) @ B(n,k)^T
    MatMulNT(VarId, VarId),
    Add(VarId, VarId),
    Sub(VarId, VarId),
    Mul(VarId, VarId),
    /// X (m,n) + row (1,n) broadcast over rows
    AddRow(VarId, VarId),
    Scale(VarId, f64),
    Relu(VarId),
    Softplus(VarId),
    Sigmoid(VarId),
    SoftmaxRows(VarId),
    LayerNorm {
        x: VarId,
        gain: VarId,
        bias: VarId,
        eps: f64,
    },
    ConcatCols(VarId, VarId),
    Reshape(VarId),
    SumAll(VarId),
    /// Multi-head attention over `blocks` independent row blocks.
    /// q: (blocks*q_len, d), k/v: (blocks*kv_len, d).
    BlockAttention {
        q: VarId,
        k: VarId,
        v: VarId,
        blocks: usize,
        q_len: usize,
        kv_len: usize,
        heads: usize,
    },
    /// sigmas (B,n) -> compositing weights (B,n); deltas are constants.
    RenderWeights { sigmas: VarId, deltas: Matrix },
    /// weights (B,n), attrs (B*n,C) -> (B,C)
    WeightedSum { weights: VarId, attrs: VarId },
    /// probs (B,L) -> (1,1): mean over rows of lambda_b * -ln(max(p[b,target_b], clamp))
    NllPick {
        probs: VarId,
        targets: Vec<usize>,
        lambdas: Vec<f64>,
        clamp: f64,
    },
}

struct Node {
    value: Matrix,
    op: Op,
}

/// Gradients of one scalar node with respect to every tape node.
pub struct Gradients {
    grads: Vec<Option<Matrix>>,
}

impl Gradients {
    pub fn get(&self, id: VarId) -> Option<&Matrix> {
        self.grads.get(id.0).and_then(|g| g.as_ref())
    }
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    clamp_hits: Cell<u64>,
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

    /// Times the clamp in [`Tape::nll_pick`] fired since tape creation.
    pub fn clamp_hits(&self) -> u64 {
        self.clamp_hits.get()
    }

    pub fn value(&self, id: VarId) -> &Matrix {
        &self.nodes[id.0].value
    }

    pub fn shape(&self, id: VarId) -> (usize, usize) {
        let d = self.nodes[id.0].value.dim();
        (d.0, d.1)
    }

    fn push(&mut self, value: Matrix, op: Op) -> VarId {
        self.nodes.push(Node { value, op });
        VarId(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, value: Matrix) -> VarId {
        self.push(value, Op::Leaf)
    }

    pub fn matmul(&mut self, a: VarId, b: VarId) -> VarId {
        let (ar, ac) = self.shape(a);
        let (br, bc) = self.shape(b);
        assert_eq!(ac, br, "matmul: inner dims {ar}x{ac} @ {br}x{bc}");
        let v = self.value(a).dot(self.value(b));
        self.push(v, Op::MatMul(a, b))
    }

    pub fn matmul_nt(&mut self, a: VarId, b: VarId) -> VarId {
        let (_, ac) = self.shape(a);
        let (_, bc) = self.shape(b);
        assert_eq!(ac, bc, "matmul_nt: inner dims must match");
        let v = self.value(a).dot(&self.value(b).t());
        self.push(v, Op::MatMulNT(a, b))
    }

    pub fn add(&mut self, a: VarId, b: VarId) -> VarId {
        assert_eq!(self.shape(a), self.shape(b), "add: shape mismatch");
        let v = self.value(a) + self.value(b);
        self.push(v, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: VarId, b: VarId) -> VarId {
        assert_eq!(self.shape(a), self.shape(b), "sub: shape mismatch");
        let v = self.value(a) - self.value(b);
        self.push(v, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: VarId, b: VarId) -> VarId {
        assert_eq!(self.shape(a), self.shape(b), "mul: shape mismatch");
        let v = self.value(a) * self.value(b);
        self.push(v, Op::Mul(a, b))
    }

    pub fn add_row(&mut self, x: VarId, row: VarId) -> VarId {
        let (_, xc) = self.shape(x);
        let (rr, rc) = self.shape(row);
        assert_eq!((rr, rc), (1, xc), "add_row: row must be (1,{xc})");
        let v = self.value(x) + &self.value(row).row(0);
        self.push(v, Op::AddRow(x, row))
    }

    pub fn scale(&mut self, x: VarId, c: f64) -> VarId {
        let v = self.value(x) * c;
        self.push(v, Op::Scale(x, c))
    }

    pub fn relu(&mut self, x: VarId) -> VarId {
        let v = self.value(x).mapv(|e| e.max(0.0));
        self.push(v, Op::Relu(x))
    }

    pub fn softplus(&mut self, x: VarId) -> VarId {
        let v = self.value(x).mapv(softplus);
        self.push(v, Op::Softplus(x))
    }

    pub fn sigmoid(&mut self, x: VarId) -> VarId {
        let v = self.value(x).mapv(sigmoid);
        self.push(v, Op::Sigmoid(x))
    }

    pub fn softmax_rows(&mut self, x: VarId) -> VarId {
        let mut v = self.value(x).clone();
        for mut row in v.rows_mut() {
            softmax_row_inplace(&mut row);
        }
        self.push(v, Op::SoftmaxRows(x))
    }

    pub fn layer_norm(&mut self, x: VarId, gain: VarId, bias: VarId, eps: f64) -> VarId {
        let (_, d) = self.shape(x);
        assert_eq!(self.shape(gain), (1, d), "layer_norm: gain must be (1,{d})");
        assert_eq!(self.shape(bias), (1, d), "layer_norm: bias must be (1,{d})");
        let g = self.value(gain).row(0).to_owned();
        let b = self.value(bias).row(0).to_owned();
        let mut v = self.value(x).clone();
        for mut row in v.rows_mut() {
            let (mu, var) = row_mean_var(&row.view());
            let inv = 1.0 / (var + eps).sqrt();
            for (j, e) in row.iter_mut().enumerate() {
                *e = ((*e - mu) * inv) * g[j] + b[j];
            }
        }
        self.push(v, Op::LayerNorm { x, gain, bias, eps })
    }

    pub fn concat_cols(&mut self, a: VarId, b: VarId) -> VarId {
        let (ar, ac) = self.shape(a);
        let (br, bc) = self.shape(b);
        assert_eq!(ar, br, "concat_cols: row counts differ");
        let mut v = Matrix::zeros((ar, ac + bc));
        v.slice_mut(s![.., ..ac]).assign(self.value(a));
        v.slice_mut(s![.., ac..]).assign(self.value(b));
        self.push(v, Op::ConcatCols(a, b))
    }

    pub fn reshape(&mut self, x: VarId, rows: usize, cols: usize) -> VarId {
        let (xr, xc) = self.shape(x);
        assert_eq!(xr * xc, rows * cols, "reshape: element count mismatch");
        let v = Matrix::from_shape_vec((rows, cols), self.value(x).iter().cloned().collect())
            .expect("reshape");
        self.push(v, Op::Reshape(x))
    }

    pub fn sum_all(&mut self, x: VarId) -> VarId {
        let s = self.value(x).sum();
        self.push(Matrix::from_elem((1, 1), s), Op::SumAll(x))
    }

    /// Multi-head scaled dot-product attention applied independently to each
    /// of `blocks` row blocks. Softmax over the key axis per head.
    pub fn block_attention(
        &mut self,
        q: VarId,
        k: VarId,
        v: VarId,
        blocks: usize,
        heads: usize,
    ) -> VarId {
        let (qr, d) = self.shape(q);
        let (kr, kd) = self.shape(k);
        assert_eq!(self.shape(v), (kr, kd), "block_attention: k/v shapes differ");
        assert_eq!(d, kd, "block_attention: q/k dims differ");
        assert_eq!(qr % blocks, 0, "block_attention: q rows not divisible");
        assert_eq!(kr % blocks, 0, "block_attention: kv rows not divisible");
        assert_eq!(d % heads, 0, "block_attention: dim not divisible by heads");
        let q_len = qr / blocks;
        let kv_len = kr / blocks;
        let out = block_attention_forward(
            self.value(q),
            self.value(k),
            self.value(v),
            blocks,
            q_len,
            kv_len,
            heads,
        );
        self.push(
            out,
            Op::BlockAttention {
                q,
                k,
                v,
                blocks,
                q_len,
                kv_len,
                heads,
            },
        )
    }

    /// Compositing weights per ray row: w_i = exp(-sum_{j<i} d_j s_j) * (1 - exp(-d_i s_i)).
    pub fn render_weights(&mut self, sigmas: VarId, deltas: Matrix) -> VarId {
        let dim = self.shape(sigmas);
        assert_eq!(deltas.dim(), dim, "render_weights: deltas shape mismatch");
        debug_assert!(self.value(sigmas).iter().all(|&s| s >= 0.0));
        debug_assert!(deltas.iter().all(|&d| d > 0.0));
        let mut w = Matrix::zeros(dim);
        for (i, row) in self.value(sigmas).rows().into_iter().enumerate() {
            let wr = crate::volume::weights_from_row(
                row.as_slice().expect("contiguous"),
                deltas.row(i).as_slice().expect("contiguous"),
            );
            w.row_mut(i).assign(&Array1::from(wr));
        }
        self.push(w, Op::RenderWeights { sigmas, deltas })
    }

    /// Per-row weighted sum of attribute rows: out[b] = sum_i w[b,i] * attrs[b*n+i].
    pub fn weighted_sum(&mut self, weights: VarId, attrs: VarId) -> VarId {
        let (b, n) = self.shape(weights);
        let (ar, c) = self.shape(attrs);
        assert_eq!(ar, b * n, "weighted_sum: attrs rows must be B*n");
        let mut out = Matrix::zeros((b, c));
        let w = self.value(weights);
        let a = self.value(attrs);
        for bi in 0..b {
            let mut acc = out.row_mut(bi);
            for i in 0..n {
                let wi = w[[bi, i]];
                acc.scaled_add(wi, &a.row(bi * n + i));
            }
        }
        self.push(out, Op::WeightedSum { weights, attrs })
    }

    /// Mean over rows of `lambda_b * -ln(max(probs[b, target_b], clamp))`.
    pub fn nll_pick(
        &mut self,
        probs: VarId,
        targets: Vec<usize>,
        lambdas: Vec<f64>,
        clamp: f64,
    ) -> VarId {
        let (b, l) = self.shape(probs);
        assert_eq!(targets.len(), b, "nll_pick: one target per row");
        assert_eq!(lambdas.len(), b, "nll_pick: one lambda per row");
        assert!(targets.iter().all(|&t| t < l), "nll_pick: target < L");
        let p = self.value(probs);
        let mut total = 0.0;
        for bi in 0..b {
            let pv = p[[bi, targets[bi]]];
            if pv < clamp {
                self.clamp_hits.set(self.clamp_hits.get() + 1);
            }
            total += lambdas[bi] * -(pv.max(clamp)).ln();
        }
        let v = Matrix::from_elem((1, 1), total / b as f64);
        self.push(
            v,
            Op::NllPick {
                probs,
                targets,
                lambdas,
                clamp,
            },
        )
    }

    /// Backpropagate from a scalar (1,1) node.
    pub fn backward(&self, loss: VarId) -> Gradients {
        assert_eq!(self.shape(loss), (1, 1), "backward: loss must be scalar");
        let mut grads: Vec<Option<Matrix>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Matrix::from_elem((1, 1), 1.0));

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            match &self.nodes[i].op {
                Op::Leaf => {
                    grads[i] = Some(g);
                    continue;
                }
                Op::MatMul(a, b) => {
                    let da = g.dot(&self.value(*b).t());
                    let db = self.value(*a).t().dot(&g);
                    acc(&mut grads, *a, da);
                    acc(&mut grads, *b, db);
                }
                Op::MatMulNT(a, b) => {
                    let da = g.dot(self.value(*b));
                    let db = g.t().dot(self.value(*a));
                    acc(&mut grads, *a, da);
                    acc(&mut grads, *b, db);
                }
                Op::Add(a, b) => {
                    acc(&mut grads, *a, g.clone());
                    acc(&mut grads, *b, g);
                }
                Op::Sub(a, b) => {
                    acc(&mut grads, *a, g.clone());
                    acc(&mut grads, *b, -g);
                }
                Op::Mul(a, b) => {
                    let da = &g * self.value(*b);
                    let db = &g * self.value(*a);
                    acc(&mut grads, *a, da);
                    acc(&mut grads, *b, db);
                }
                Op::AddRow(x, row) => {
                    let dr = g.sum_axis(Axis(0)).insert_axis(Axis(0));
                    acc(&mut grads, *x, g);
                    acc(&mut grads, *row, dr);
                }
                Op::Scale(x, c) => acc(&mut grads, *x, g * *c),
                Op::Relu(x) => {
                    let mut dx = g;
                    dx.zip_mut_with(self.value(*x), |d, &xv| {
                        if xv <= 0.0 {
                            *d = 0.0;
                        }
                    });
                    acc(&mut grads, *x, dx);
                }
                Op::Softplus(x) => {
                    let mut dx = g;
                    dx.zip_mut_with(self.value(*x), |d, &xv| *d *= sigmoid(xv));
                    acc(&mut grads, *x, dx);
                }
                Op::Sigmoid(x) => {
                    let mut dx = g;
                    dx.zip_mut_with(&self.nodes[i].value, |d, &yv| *d *= yv * (1.0 - yv));
                    acc(&mut grads, *x, dx);
                }
                Op::SoftmaxRows(x) => {
                    let y = &self.nodes[i].value;
                    let mut dx = Matrix::zeros(y.dim());
                    for r in 0..y.nrows() {
                        let yr = y.row(r);
                        let gr = g.row(r);
                        let dot: f64 = yr.iter().zip(gr.iter()).map(|(a, b)| a * b).sum();
                        for c in 0..y.ncols() {
                            dx[[r, c]] = yr[c] * (gr[c] - dot);
                        }
                    }
                    acc(&mut grads, *x, dx);
                }
                Op::LayerNorm { x, gain, bias, eps } => {
                    let xv = self.value(*x);
                    let gv = self.value(*gain).row(0).to_owned();
                    let d = xv.ncols() as f64;
                    let mut dx = Matrix::zeros(xv.dim());
                    let mut dgain = Matrix::zeros((1, xv.ncols()));
                    let mut dbias = Matrix::zeros((1, xv.ncols()));
                    for r in 0..xv.nrows() {
                        let row = xv.row(r);
                        let (mu, var) = row_mean_var(&row);
                        let inv = 1.0 / (var + eps).sqrt();
                        let xhat: Vec<f64> = row.iter().map(|&e| (e - mu) * inv).collect();
                        let gr = g.row(r);
                        let mut mean_dxhat = 0.0;
                        let mut mean_dxhat_xhat = 0.0;
                        for j in 0..xhat.len() {
                            let dxh = gr[j] * gv[j];
                            mean_dxhat += dxh;
                            mean_dxhat_xhat += dxh * xhat[j];
                            dgain[[0, j]] += gr[j] * xhat[j];
                            dbias[[0, j]] += gr[j];
                        }
                        mean_dxhat /= d;
                        mean_dxhat_xhat /= d;
                        for j in 0..xhat.len() {
                            let dxh = gr[j] * gv[j];
                            dx[[r, j]] = inv * (dxh - mean_dxhat - xhat[j] * mean_dxhat_xhat);
                        }
                    }
                    acc(&mut grads, *x, dx);
                    acc(&mut grads, *gain, dgain);
                    acc(&mut grads, *bias, dbias);
                }
                Op::ConcatCols(a, b) => {
                    let (_, ac) = self.shape(*a);
                    let da = g.slice(s![.., ..ac]).to_owned();
                    let db = g.slice(s![.., ac..]).to_owned();
                    acc(&mut grads, *a, da);
                    acc(&mut grads, *b, db);
                }
                Op::Reshape(x) => {
                    let (xr, xc) = self.shape(*x);
                    let dx = Matrix::from_shape_vec((xr, xc), g.iter().cloned().collect())
                        .expect("reshape grad");
                    acc(&mut grads, *x, dx);
                }
                Op::SumAll(x) => {
                    let (xr, xc) = self.shape(*x);
                    acc(&mut grads, *x, Matrix::from_elem((xr, xc), g[[0, 0]]));
                }
                Op::BlockAttention {
                    q,
                    k,
                    v,
                    blocks,
                    q_len,
                    kv_len,
                    heads,
                } => {
                    let (dq, dk, dv) = block_attention_backward(
                        self.value(*q),
                        self.value(*k),
                        self.value(*v),
                        &g,
                        *blocks,
                        *q_len,
                        *kv_len,
                        *heads,
                    );
                    acc(&mut grads, *q, dq);
                    acc(&mut grads, *k, dk);
                    acc(&mut grads, *v, dv);
                }
                Op::RenderWeights { sigmas, deltas } => {
                    let sv = self.value(*sigmas);
                    let wv = &self.nodes[i].value;
                    let (b, n) = sv.dim();
                    let mut ds = Matrix::zeros((b, n));
                    for bi in 0..b {
                        // T_{k+1} = exp(-sum_{j<=k} d_j s_j); suffix = sum_{i>k} w_i g_i
                        let mut trans_next = vec![0.0; n];
                        let mut t = 1.0;
                        for j in 0..n {
                            t *= (-deltas[[bi, j]] * sv[[bi, j]]).exp();
                            trans_next[j] = t;
                        }
                        let mut suffix = 0.0;
                        for kk in (0..n).rev() {
                            ds[[bi, kk]] =
                                deltas[[bi, kk]] * (trans_next[kk] * g[[bi, kk]] - suffix);
                            suffix += wv[[bi, kk]] * g[[bi, kk]];
                        }
                    }
                    acc(&mut grads, *sigmas, ds);
                }
                Op::WeightedSum { weights, attrs } => {
                    let w = self.value(*weights);
                    let a = self.value(*attrs);
                    let (b, n) = w.dim();
                    let mut dw = Matrix::zeros((b, n));
                    let mut da = Matrix::zeros(a.dim());
                    for bi in 0..b {
                        let gr = g.row(bi);
                        for ii in 0..n {
                            let ar = a.row(bi * n + ii);
                            dw[[bi, ii]] = ar.iter().zip(gr.iter()).map(|(x, y)| x * y).sum();
                            da.row_mut(bi * n + ii).scaled_add(w[[bi, ii]], &gr);
                        }
                    }
                    acc(&mut grads, *weights, dw);
                    acc(&mut grads, *attrs, da);
                }
                Op::NllPick {
                    probs,
                    targets,
                    lambdas,
                    clamp,
                } => {
                    let p = self.value(*probs);
                    let (b, l) = p.dim();
                    let scale = g[[0, 0]] / b as f64;
                    let mut dp = Matrix::zeros((b, l));
                    for bi in 0..b {
                        let t = targets[bi];
                        let pv = p[[bi, t]];
                        if pv >= *clamp {
                            dp[[bi, t]] = -lambdas[bi] * scale / pv;
                        }
                    }
                    acc(&mut grads, *probs, dp);
                }
            }
        }
        Gradients { grads }
    }
}

fn acc(grads: &mut [Option<Matrix>], id: VarId, delta: Matrix) {
    match &mut grads[id.0] {
        Some(m) => *m += &delta,
        slot @ None => *slot = Some(delta),
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

fn row_mean_var(row: &ndarray::ArrayView1<f64>) -> (f64, f64) {
    let d = row.len() as f64;
    let mu = row.sum() / d;
    let var = row.iter().map(|&e| (e - mu) * (e - mu)).sum::<f64>() / d;
    (mu, var)
}

fn softmax_row_inplace(row: &mut ndarray::ArrayViewMut1<f64>) {
    let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for e in row.iter_mut() {
        *e = (*e - m).exp();
        sum += *e;
    }
    for e in row.iter_mut() {
        *e /= sum;
    }
}

#[allow(clippy::too_many_arguments)]
fn block_attention_forward(
    q: &Matrix,
    k: &Matrix,
    v: &Matrix,
    blocks: usize,
    q_len: usize,
    kv_len: usize,
    heads: usize,
) -> Matrix {
    use rayon::prelude::*;
    let d = q.ncols();
    let hd = d / heads;
    let scale = 1.0 / (hd as f64).sqrt();
    let per_block: Vec<Matrix> = (0..blocks)
        .into_par_iter()
        .map(|b| {
            let qb = q.slice(s![b * q_len..(b + 1) * q_len, ..]);
            let kb = k.slice(s![b * kv_len..(b + 1) * kv_len, ..]);
            let vb = v.slice(s![b * kv_len..(b + 1) * kv_len, ..]);
            let mut out_b = Matrix::zeros((q_len, d));
            for h in 0..heads {
                let cols = s![.., h * hd..(h + 1) * hd];
                let qh = qb.slice(cols);
                let kh = kb.slice(cols);
                let vh = vb.slice(cols);
                let mut scores = qh.dot(&kh.t()) * scale;
                for mut row in scores.rows_mut() {
                    softmax_row_inplace(&mut row);
                }
                let oh = scores.dot(&vh);
                out_b.slice_mut(s![.., h * hd..(h + 1) * hd]).assign(&oh);
            }
            out_b
        })
        .collect();
    let mut out = Matrix::zeros((blocks * q_len, d));
    for (b, out_b) in per_block.into_iter().enumerate() {
        out.slice_mut(s![b * q_len..(b + 1) * q_len, ..]).assign(&out_b);
    }
    out
}

#[allow(clippy::too_many_arguments)]
fn block_attention_backward(
    q: &Matrix,
    k: &Matrix,
    v: &Matrix,
    g: &Matrix,
    blocks: usize,
    q_len: usize,
    kv_len: usize,
    heads: usize,
) -> (Matrix, Matrix, Matrix) {
    use rayon::prelude::*;
    let d = q.ncols();
    let hd = d / heads;
    let scale = 1.0 / (hd as f64).sqrt();
    let per_block: Vec<(Matrix, Matrix, Matrix)> = (0..blocks)
        .into_par_iter()
        .map(|b| {
            let qrows = s![b * q_len..(b + 1) * q_len, ..];
            let krows = s![b * kv_len..(b + 1) * kv_len, ..];
            let mut dq_b = Matrix::zeros((q_len, d));
            let mut dk_b = Matrix::zeros((kv_len, d));
            let mut dv_b = Matrix::zeros((kv_len, d));
            for h in 0..heads {
                let hcols = h * hd..(h + 1) * hd;
                let qh = q.slice(qrows).slice(s![.., hcols.clone()]).to_owned();
                let kh = k.slice(krows).slice(s![.., hcols.clone()]).to_owned();
                let vh = v.slice(krows).slice(s![.., hcols.clone()]).to_owned();
                let gh = g.slice(qrows).slice(s![.., hcols.clone()]).to_owned();

                // Recompute softmax probs rather than caching them.
                let mut probs = qh.dot(&kh.t()) * scale;
                for mut row in probs.rows_mut() {
                    softmax_row_inplace(&mut row);
                }
                let dvh = probs.t().dot(&gh);
                let dprobs = gh.dot(&vh.t());
                // softmax backward per row
                let mut dscores = Matrix::zeros(probs.dim());
                for r in 0..probs.nrows() {
                    let pr = probs.row(r);
                    let dpr = dprobs.row(r);
                    let dot: f64 = pr.iter().zip(dpr.iter()).map(|(a, b)| a * b).sum();
                    for c in 0..probs.ncols() {
                        dscores[[r, c]] = pr[c] * (dpr[c] - dot);
                    }
                }
                let dqh = dscores.dot(&kh) * scale;
                let dkh = dscores.t().dot(&qh) * scale;
                dq_b.slice_mut(s![.., hcols.clone()]).assign(&dqh);
                dk_b.slice_mut(s![.., hcols.clone()]).assign(&dkh);
                dv_b.slice_mut(s![.., hcols]).assign(&dvh);
            }
            (dq_b, dk_b, dv_b)
        })
        .collect();
    let mut dq = Matrix::zeros(q.dim());
    let mut dk = Matrix::zeros(k.dim());
    let mut dv = Matrix::zeros(v.dim());
    for (b, (dq_b, dk_b, dv_b)) in per_block.into_iter().enumerate() {
        dq.slice_mut(s![b * q_len..(b + 1) * q_len, ..]).assign(&dq_b);
        dk.slice_mut(s![b * kv_len..(b + 1) * kv_len, ..]).assign(&dk_b);
        dv.slice_mut(s![b * kv_len..(b + 1) * kv_len, ..]).assign(&dv_b);
    }
    (dq, dk, dv)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;
    use rand_chacha::rand_core::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn randm(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Matrix {
        Matrix::from_shape_fn((r, c), |_| rng.random_range(-1.0..1.0))
    }

    /// Central-difference check of d(scalar)/d(leaf) for an arbitrary graph.
    fn fd_check<F>(leaves: &[Matrix], build: F, step: f64, tol: f64)
    where
        F: Fn(&mut Tape, &[VarId]) -> VarId,
    {
        let mut tape = Tape::new();
        let ids: Vec<VarId> = leaves.iter().map(|m| tape.leaf(m.clone())).collect();
        let loss = build(&mut tape, &ids);
        let grads = tape.backward(loss);

        for (li, leaf) in leaves.iter().enumerate() {
            let g = grads.get(ids[li]).expect("leaf grad");
            for r in 0..leaf.nrows() {
                for c in 0..leaf.ncols() {
                    let eval = |delta: f64| {
                        let mut pert: Vec<Matrix> = leaves.to_vec();
                        pert[li][[r, c]] += delta;
                        let mut t = Tape::new();
                        let ids: Vec<VarId> = pert.into_iter().map(|m| t.leaf(m)).collect();
                        let l = build(&mut t, &ids);
                        t.value(l)[[0, 0]]
                    };
                    let fd = (eval(step) - eval(-step)) / (2.0 * step);
                    let an = g[[r, c]];
                    let denom = an.abs().max(fd.abs()).max(1e-8);
                    assert!(
                        (fd - an).abs() / denom < tol,
                        "leaf {li} [{r},{c}]: analytic {an} vs fd {fd}"
                    );
                }
            }
        }
    }

    #[test]
    fn mlp_chain_gradients_match_fd() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = randm(&mut rng, 4, 3);
        let w1 = randm(&mut rng, 3, 5);
        let b1 = randm(&mut rng, 1, 5);
        let w2 = randm(&mut rng, 5, 2);
        fd_check(
            &[x, w1, b1, w2],
            |t, ids| {
                let h = t.matmul(ids[0], ids[1]);
                let h = t.add_row(h, ids[2]);
                let h = t.relu(h);
                let y = t.matmul(h, ids[3]);
                let y2 = t.mul(y, y);
                t.sum_all(y2)
            },
            1e-5,
            1e-6,
        );
    }

    #[test]
    fn activation_gradients_match_fd() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = randm(&mut rng, 3, 4);
        fd_check(
            &[x],
            |t, ids| {
                let a = t.softplus(ids[0]);
                let b = t.sigmoid(a);
                let c = t.softmax_rows(b);
                let d = t.mul(c, c);
                t.sum_all(d)
            },
            1e-5,
            1e-6,
        );
    }

    #[test]
    fn layer_norm_gradients_match_fd() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = randm(&mut rng, 4, 6);
        let g = randm(&mut rng, 1, 6);
        let b = randm(&mut rng, 1, 6);
        let coef = randm(&mut rng, 4, 6);
        fd_check(
            &[x, g, b, coef],
            |t, ids| {
                let y = t.layer_norm(ids[0], ids[1], ids[2], 1e-5);
                let y = t.mul(y, ids[3]);
                t.sum_all(y)
            },
            1e-5,
            1e-5,
        );
    }

    #[test]
    fn concat_reshape_scale_gradients_match_fd() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let a = randm(&mut rng, 3, 2);
        let b = randm(&mut rng, 3, 4);
        fd_check(
            &[a, b],
            |t, ids| {
                let c = t.concat_cols(ids[0], ids[1]);
                let r = t.reshape(c, 2, 9);
                let s = t.scale(r, -0.7);
                let m = t.mul(s, s);
                t.sum_all(m)
            },
            1e-5,
            1e-6,
        );
    }

    #[test]
    fn matmul_nt_and_sub_gradients_match_fd() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let a = randm(&mut rng, 3, 4);
        let b = randm(&mut rng, 2, 4);
        let c = randm(&mut rng, 3, 2);
        fd_check(
            &[a, b, c],
            |t, ids| {
                let y = t.matmul_nt(ids[0], ids[1]);
                let e = t.sub(y, ids[2]);
                let e2 = t.mul(e, e);
                t.sum_all(e2)
            },
            1e-5,
            1e-6,
        );
    }

    #[test]
    fn block_attention_gradients_match_fd() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        // 2 blocks, q_len 3, kv_len 2, dim 4, heads 2
        let q = randm(&mut rng, 6, 4);
        let k = randm(&mut rng, 4, 4);
        let v = randm(&mut rng, 4, 4);
        let coef = randm(&mut rng, 6, 4);
        fd_check(
            &[q, k, v, coef],
            |t, ids| {
                let o = t.block_attention(ids[0], ids[1], ids[2], 2, 2);
                let o = t.mul(o, ids[3]);
                t.sum_all(o)
            },
            1e-5,
            1e-5,
        );
    }

    #[test]
    fn single_key_attention_passes_value_through() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let q = randm(&mut rng, 3, 4);
        let k = randm(&mut rng, 1, 4);
        let v = randm(&mut rng, 1, 4);
        let mut tape = Tape::new();
        let qi = tape.leaf(q);
        let ki = tape.leaf(k);
        let vi = tape.leaf(v.clone());
        let o = tape.block_attention(qi, ki, vi, 1, 2);
        // softmax over a single key is exactly 1, so every query row gets v
        for r in 0..3 {
            for c in 0..4 {
                assert!((tape.value(o)[[r, c]] - v[[0, c]]).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn render_weights_gradients_match_fd() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let sigmas = Matrix::from_shape_fn((3, 5), |_| rng.random_range(0.1..2.0));
        let deltas = Matrix::from_shape_fn((3, 5), |_| rng.random_range(0.05..0.5));
        let coef = randm(&mut rng, 3, 5);
        fd_check(
            &[sigmas, coef],
            move |t, ids| {
                let w = t.render_weights(ids[0], deltas.clone());
                let w = t.mul(w, ids[1]);
                t.sum_all(w)
            },
            1e-5,
            1e-5,
        );
    }

    #[test]
    fn weighted_sum_gradients_match_fd() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let w = randm(&mut rng, 2, 3);
        let attrs = randm(&mut rng, 6, 4);
        let coef = randm(&mut rng, 2, 4);
        fd_check(
            &[w, attrs, coef],
            |t, ids| {
                let o = t.weighted_sum(ids[0], ids[1]);
                let o = t.mul(o, ids[2]);
                t.sum_all(o)
            },
            1e-5,
            1e-6,
        );
    }

    #[test]
    fn nll_pick_gradients_match_fd() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let logits = randm(&mut rng, 4, 3);
        fd_check(
            &[logits],
            |t, ids| {
                let p = t.softmax_rows(ids[0]);
                t.nll_pick(p, vec![0, 2, 1, 1], vec![1.0, 0.001, 1.0, 0.5], 1e-12)
            },
            1e-6,
            1e-5,
        );
    }

    #[test]
    fn nll_pick_counts_clamped_rows() {
        let mut tape = Tape::new();
        let p = tape.leaf(Matrix::from_shape_vec((2, 2), vec![1.0, 0.0, 0.5, 0.5]).unwrap());
        let _ = tape.nll_pick(p, vec![1, 0], vec![1.0, 1.0], 1e-12);
        assert_eq!(tape.clamp_hits(), 1);
    }

    #[test]
    fn aliased_parents_accumulate() {
        // mul(x, x) must produce 2x as the gradient of sum
        let mut tape = Tape::new();
        let x = tape.leaf(Matrix::from_elem((1, 1), 3.0));
        let y = tape.mul(x, x);
        let l = tape.sum_all(y);
        let g = tape.backward(l);
        assert!((g.get(x).unwrap()[[0, 0]] - 6.0).abs() < 1e-12);
    }
}
