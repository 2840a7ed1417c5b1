//! Reverse-mode accumulation over a linear tape of matrix operations.
//!
//! Every primitive records its inputs and whatever forward quantities its
//! backward rule needs; [`Tape::backward`] walks the tape once in reverse.
//! Parameters are borrowed from a [`ParamStore`] rather than copied.

use alloc::vec;
use alloc::vec::Vec;

use super::{AttnMask, ParamId, ParamStore, Tensor};
use crate::{Error, Result};

const LN_EPS: f64 = 1e-5;
const LOG_2PI: f64 = 1.837_877_066_409_345_3;
const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Input,
    Param(ParamId),
    MatMul(Var, Var),
    MatMulBt(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Gelu(Var),
    Tanh(Var),
    Exp(Var),
    Clamp(Var, f64, f64),
    Softmax(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Tensor,
        inv_std: Vec<f64>,
    },
    ConcatCols(Vec<Var>),
    SliceCols(Var, usize),
    SliceRows(Var, usize),
    ShiftDown(Var, usize),
    BroadcastRows(Var),
    Sum(Var),
    KlDiag {
        mean_q: Var,
        logvar_q: Var,
        mean_p: Var,
        logvar_p: Var,
    },
    GmmNll {
        logits: Var,
        means: Var,
        logvars: Var,
        target: Tensor,
        resp: Tensor,
        weights: Tensor,
    },
}

#[derive(Debug)]
struct Node {
    value: Option<Tensor>,
    op: Op,
}

pub struct Tape<'p> {
    params: &'p ParamStore,
    nodes: Vec<Node>,
}

impl<'p> Tape<'p> {
    pub fn new(params: &'p ParamStore) -> Self {
        Self {
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

    pub fn value(&self, v: Var) -> &Tensor {
        let node = &self.nodes[v.0];
        match (&node.value, &node.op) {
            (Some(t), _) => t,
            (None, Op::Param(id)) => self.params.value(*id),
            _ => unreachable!("node without value"),
        }
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        self.nodes.push(Node { value: Some(value), op });
        Var(self.nodes.len() - 1)
    }

    /// A constant leaf; gradients w.r.t. it are still reported by
    /// [`Gradients::wrt`].
    pub fn input(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Input)
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        self.nodes.push(Node {
            value: None,
            op: Op::Param(id),
        });
        Var(self.nodes.len() - 1)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a).matmul(self.value(b));
        self.push(out, Op::MatMul(a, b))
    }

    /// `a · bᵀ`
    pub fn matmul_bt(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a).matmul_bt(self.value(b));
        self.push(out, Op::MatMulBt(a, b))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let mut out = self.value(a).clone();
        out.add_assign(self.value(b));
        self.push(out, Op::Add(a, b))
    }

    /// Adds a `1 × c` row to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        let r = self.value(row);
        assert_eq!(r.rows(), 1, "add_row expects a row vector");
        let mut out = self.value(a).clone();
        assert_eq!(out.cols(), r.cols(), "add_row width");
        for i in 0..out.rows() {
            for (o, b) in out.row_mut(i).iter_mut().zip(r.data()) {
                *o += b;
            }
        }
        self.push(out, Op::AddRow(a, row))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let (x, y) = (self.value(a), self.value(b));
        assert_eq!(x.shape(), y.shape(), "mul shapes");
        let data = x.data().iter().zip(y.data()).map(|(p, q)| p * q).collect();
        let out = Tensor::from_vec(x.rows(), x.cols(), data);
        self.push(out, Op::Mul(a, b))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let out = self.value(a).scale(s);
        self.push(out, Op::Scale(a, s))
    }

    /// Tanh-approximated GELU.
    pub fn gelu(&mut self, a: Var) -> Var {
        let out = self.value(a).map(gelu);
        self.push(out, Op::Gelu(a))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let out = self.value(a).map(libm::tanh);
        self.push(out, Op::Tanh(a))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let out = self.value(a).map(libm::exp);
        self.push(out, Op::Exp(a))
    }

    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Var {
        let out = self.value(a).map(|v| v.clamp(lo, hi));
        self.push(out, Op::Clamp(a, lo, hi))
    }

    /// Row-wise softmax; blocked entries get probability exactly zero.
    pub fn softmax(&mut self, a: Var, mask: Option<&AttnMask>) -> Result<Var> {
        let x = self.value(a);
        if let Some(m) = mask {
            if m.shape() != x.shape() {
                return Err(Error::Shape {
                    op: "softmax",
                    expected: alloc::format!("{:?}", x.shape()),
                    got: alloc::format!("{:?}", m.shape()),
                });
            }
        }
        let mut out = Tensor::zeros(x.rows(), x.cols());
        for r in 0..x.rows() {
            let open = |c: usize| mask.map_or(true, |m| !m.is_blocked(r, c));
            let row = x.row(r);
            let mut max = f64::NEG_INFINITY;
            for (c, &v) in row.iter().enumerate() {
                if open(c) && v > max {
                    max = v;
                }
            }
            if max == f64::NEG_INFINITY {
                return Err(Error::FullyMaskedRow(r));
            }
            let mut total = 0.0;
            let out_row = out.row_mut(r);
            for (c, &v) in row.iter().enumerate() {
                if open(c) {
                    let e = libm::exp(v - max);
                    out_row[c] = e;
                    total += e;
                }
            }
            for o in out_row.iter_mut() {
                *o /= total;
            }
        }
        Ok(self.push(out, Op::Softmax(a)))
    }

    /// Per-row normalization followed by an elementwise affine map.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Var {
        let xv = self.value(x);
        let (rows, cols) = xv.shape();
        let mut xhat = Tensor::zeros(rows, cols);
        let mut inv_std = Vec::with_capacity(rows);
        for r in 0..rows {
            let row = xv.row(r);
            let mean = row.iter().sum::<f64>() / cols as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / cols as f64;
            let is = 1.0 / libm::sqrt(var + LN_EPS);
            inv_std.push(is);
            for (h, v) in xhat.row_mut(r).iter_mut().zip(row) {
                *h = (v - mean) * is;
            }
        }
        let g = self.value(gain);
        let b = self.value(bias);
        let mut out = xhat.clone();
        for r in 0..rows {
            for ((o, gv), bv) in out.row_mut(r).iter_mut().zip(g.data()).zip(b.data()) {
                *o = *o * gv + bv;
            }
        }
        self.push(
            out,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            },
        )
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let rows = self.value(parts[0]).rows();
        let cols: usize = parts.iter().map(|&p| self.value(p).cols()).sum();
        let mut out = Tensor::zeros(rows, cols);
        let mut offset = 0;
        for &p in parts {
            let t = self.value(p);
            assert_eq!(t.rows(), rows, "concat_cols row counts");
            for r in 0..rows {
                out.row_mut(r)[offset..offset + t.cols()].copy_from_slice(t.row(r));
            }
            offset += t.cols();
        }
        self.push(out, Op::ConcatCols(parts.to_vec()))
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, count: usize) -> Var {
        let out = self.value(a).slice_cols(start, count);
        self.push(out, Op::SliceCols(a, start))
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, count: usize) -> Var {
        let out = self.value(a).slice_rows(start, count);
        self.push(out, Op::SliceRows(a, start))
    }

    /// Row `t` of the output is row `t - k` of the input, zero for `t < k`.
    pub fn shift_down(&mut self, a: Var, k: usize) -> Var {
        let x = self.value(a);
        let mut out = Tensor::zeros(x.rows(), x.cols());
        for t in k..x.rows() {
            out.row_mut(t).copy_from_slice(x.row(t - k));
        }
        self.push(out, Op::ShiftDown(a, k))
    }

    /// Repeat a `1 × c` row `rows` times.
    pub fn broadcast_rows(&mut self, a: Var, rows: usize) -> Var {
        let x = self.value(a);
        assert_eq!(x.rows(), 1, "broadcast_rows expects a row vector");
        let mut out = Tensor::zeros(rows, x.cols());
        for r in 0..rows {
            out.row_mut(r).copy_from_slice(x.data());
        }
        self.push(out, Op::BroadcastRows(a))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).sum();
        self.push(Tensor::from_vec(1, 1, vec![s]), Op::Sum(a))
    }

    /// Closed-form `KL(q ‖ p)` between diagonal Gaussians given as
    /// `1 × d` mean / log-variance rows.
    pub fn kl_diag(&mut self, mean_q: Var, logvar_q: Var, mean_p: Var, logvar_p: Var) -> Var {
        let kl = kl_diag_value(
            self.value(mean_q).data(),
            self.value(logvar_q).data(),
            self.value(mean_p).data(),
            self.value(logvar_p).data(),
        );
        self.push(
            Tensor::from_vec(1, 1, vec![kl]),
            Op::KlDiag {
                mean_q,
                logvar_q,
                mean_p,
                logvar_p,
            },
        )
    }

    /// Negative log-likelihood of `target` (`T × D`) under per-row diagonal
    /// Gaussian mixtures: `logits` is `T × K`, `means` and `logvars` are
    /// `T × (K·D)` with component `k` occupying columns `k·D..(k+1)·D`.
    pub fn gmm_nll(&mut self, logits: Var, means: Var, logvars: Var, target: Tensor) -> Result<Var> {
        let (steps, k) = self.value(logits).shape();
        let d = target.cols();
        if target.rows() != steps || self.value(means).shape() != (steps, k * d) || self.value(logvars).shape() != (steps, k * d) {
            return Err(Error::Shape {
                op: "gmm_nll",
                expected: alloc::format!("{steps}x{} means/logvars and {steps}x{d} target", k * d),
                got: alloc::format!(
                    "{:?} / {:?} / {:?}",
                    self.value(means).shape(),
                    self.value(logvars).shape(),
                    target.shape()
                ),
            });
        }
        let mut resp = Tensor::zeros(steps, k);
        let mut weights = Tensor::zeros(steps, k);
        let mut nll = 0.0;
        {
            let lg = self.value(logits);
            let mu = self.value(means);
            let lv = self.value(logvars);
            for t in 0..steps {
                let log_w = log_softmax(lg.row(t));
                let mut joint = vec![0.0; k];
                for c in 0..k {
                    let mut ll = 0.0;
                    for j in 0..d {
                        let idx = c * d + j;
                        let diff = target[(t, j)] - mu[(t, idx)];
                        ll -= 0.5 * (LOG_2PI + lv[(t, idx)] + diff * diff * libm::exp(-lv[(t, idx)]));
                    }
                    joint[c] = log_w[c] + ll;
                }
                let lse = log_sum_exp(&joint);
                if !lse.is_finite() {
                    return Err(Error::NonFiniteLikelihood { step: t });
                }
                nll -= lse;
                for c in 0..k {
                    resp[(t, c)] = libm::exp(joint[c] - lse);
                    weights[(t, c)] = libm::exp(log_w[c]);
                }
            }
        }
        Ok(self.push(
            Tensor::from_vec(1, 1, vec![nll]),
            Op::GmmNll {
                logits,
                means,
                logvars,
                target,
                resp,
                weights,
            },
        ))
    }

    /// Gradients of the scalar `loss` with respect to every node.
    pub fn backward(&self, loss: Var) -> Gradients {
        assert_eq!(self.value(loss).shape(), (1, 1), "backward expects a scalar loss");
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Tensor::from_vec(1, 1, vec![1.0]));
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            self.backward_node(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        let param_nodes = self
            .nodes
            .iter()
            .enumerate()
            .filter_map(|(i, n)| match n.op {
                Op::Param(id) => Some((i, id)),
                _ => None,
            })
            .collect();
        Gradients {
            nodes: grads,
            param_nodes,
        }
    }

    fn backward_node(&self, i: usize, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let out = || self.nodes[i].value.as_ref().expect("value");
        match &self.nodes[i].op {
            Op::Input | Op::Param(_) => {}
            Op::MatMul(a, b) => {
                let da = g.matmul_bt(self.value(*b));
                let db = self.value(*a).matmul_at(g);
                accumulate(grads, *a, da);
                accumulate(grads, *b, db);
            }
            Op::MatMulBt(a, b) => {
                let da = g.matmul(self.value(*b));
                let db = g.matmul_at(self.value(*a));
                accumulate(grads, *a, da);
                accumulate(grads, *b, db);
            }
            Op::Add(a, b) => {
                accumulate(grads, *a, g.clone());
                accumulate(grads, *b, g.clone());
            }
            Op::AddRow(a, row) => {
                accumulate(grads, *a, g.clone());
                accumulate(grads, *row, g.sum_rows());
            }
            Op::Mul(a, b) => {
                let (x, y) = (self.value(*a), self.value(*b));
                let da = zip_map(g, y, |gv, yv| gv * yv);
                let db = zip_map(g, x, |gv, xv| gv * xv);
                accumulate(grads, *a, da);
                accumulate(grads, *b, db);
            }
            Op::Scale(a, s) => accumulate(grads, *a, g.scale(*s)),
            Op::Gelu(a) => {
                let da = zip_map(g, self.value(*a), |gv, x| gv * gelu_grad(x));
                accumulate(grads, *a, da);
            }
            Op::Tanh(a) => {
                let da = zip_map(g, out(), |gv, y| gv * (1.0 - y * y));
                accumulate(grads, *a, da);
            }
            Op::Exp(a) => {
                let da = zip_map(g, out(), |gv, y| gv * y);
                accumulate(grads, *a, da);
            }
            Op::Clamp(a, lo, hi) => {
                let da = zip_map(g, self.value(*a), |gv, x| if x >= *lo && x <= *hi { gv } else { 0.0 });
                accumulate(grads, *a, da);
            }
            Op::Softmax(a) => {
                let y = out();
                let mut da = Tensor::zeros(y.rows(), y.cols());
                for r in 0..y.rows() {
                    let inner: f64 = y.row(r).iter().zip(g.row(r)).map(|(p, q)| p * q).sum();
                    for ((d, p), q) in da.row_mut(r).iter_mut().zip(y.row(r)).zip(g.row(r)) {
                        *d = p * (q - inner);
                    }
                }
                accumulate(grads, *a, da);
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            } => {
                let gv = self.value(*gain);
                let (rows, cols) = xhat.shape();
                let n = cols as f64;
                let mut dx = Tensor::zeros(rows, cols);
                let mut dgain = Tensor::zeros(1, cols);
                let mut dbias = Tensor::zeros(1, cols);
                for r in 0..rows {
                    let gr = g.row(r);
                    let hr = xhat.row(r);
                    let mut dxhat = vec![0.0; cols];
                    for c in 0..cols {
                        dxhat[c] = gr[c] * gv.data()[c];
                        dgain.data_mut()[c] += gr[c] * hr[c];
                        dbias.data_mut()[c] += gr[c];
                    }
                    let sum_d: f64 = dxhat.iter().sum();
                    let sum_dh: f64 = dxhat.iter().zip(hr).map(|(a, b)| a * b).sum();
                    for c in 0..cols {
                        dx[(r, c)] = inv_std[r] / n * (n * dxhat[c] - sum_d - hr[c] * sum_dh);
                    }
                }
                accumulate(grads, *x, dx);
                accumulate(grads, *gain, dgain);
                accumulate(grads, *bias, dbias);
            }
            Op::ConcatCols(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let w = self.value(p).cols();
                    accumulate(grads, p, g.slice_cols(offset, w));
                    offset += w;
                }
            }
            Op::SliceCols(a, start) => {
                let src = self.value(*a);
                let mut da = Tensor::zeros(src.rows(), src.cols());
                for r in 0..g.rows() {
                    da.row_mut(r)[*start..*start + g.cols()].copy_from_slice(g.row(r));
                }
                accumulate(grads, *a, da);
            }
            Op::SliceRows(a, start) => {
                let src = self.value(*a);
                let mut da = Tensor::zeros(src.rows(), src.cols());
                for r in 0..g.rows() {
                    da.row_mut(start + r).copy_from_slice(g.row(r));
                }
                accumulate(grads, *a, da);
            }
            Op::ShiftDown(a, k) => {
                let mut da = Tensor::zeros(g.rows(), g.cols());
                for t in *k..g.rows() {
                    da.row_mut(t - k).copy_from_slice(g.row(t));
                }
                accumulate(grads, *a, da);
            }
            Op::BroadcastRows(a) => accumulate(grads, *a, g.sum_rows()),
            Op::Sum(a) => {
                let src = self.value(*a);
                accumulate(grads, *a, Tensor::filled(src.rows(), src.cols(), g[(0, 0)]));
            }
            Op::KlDiag {
                mean_q,
                logvar_q,
                mean_p,
                logvar_p,
            } => {
                let s = g[(0, 0)];
                let (mq, lq, mp, lp) = (
                    self.value(*mean_q),
                    self.value(*logvar_q),
                    self.value(*mean_p),
                    self.value(*logvar_p),
                );
                let n = mq.cols();
                let mut d_mq = Tensor::zeros(1, n);
                let mut d_lq = Tensor::zeros(1, n);
                let mut d_mp = Tensor::zeros(1, n);
                let mut d_lp = Tensor::zeros(1, n);
                for j in 0..n {
                    let inv_vp = libm::exp(-lp.data()[j]);
                    let diff = mq.data()[j] - mp.data()[j];
                    let vq = libm::exp(lq.data()[j]);
                    d_mq.data_mut()[j] = s * diff * inv_vp;
                    d_mp.data_mut()[j] = -s * diff * inv_vp;
                    d_lq.data_mut()[j] = s * 0.5 * (vq * inv_vp - 1.0);
                    d_lp.data_mut()[j] = s * 0.5 * (1.0 - (vq + diff * diff) * inv_vp);
                }
                accumulate(grads, *mean_q, d_mq);
                accumulate(grads, *logvar_q, d_lq);
                accumulate(grads, *mean_p, d_mp);
                accumulate(grads, *logvar_p, d_lp);
            }
            Op::GmmNll {
                logits,
                means,
                logvars,
                target,
                resp,
                weights,
            } => {
                let s = g[(0, 0)];
                let mu = self.value(*means);
                let lv = self.value(*logvars);
                let (steps, k) = resp.shape();
                let d = target.cols();
                let mut d_logits = Tensor::zeros(steps, k);
                let mut d_mu = Tensor::zeros(steps, k * d);
                let mut d_lv = Tensor::zeros(steps, k * d);
                for t in 0..steps {
                    for c in 0..k {
                        let r = resp[(t, c)];
                        d_logits[(t, c)] = s * (weights[(t, c)] - r);
                        for j in 0..d {
                            let idx = c * d + j;
                            let inv_var = libm::exp(-lv[(t, idx)]);
                            let diff = target[(t, j)] - mu[(t, idx)];
                            d_mu[(t, idx)] = -s * r * diff * inv_var;
                            d_lv[(t, idx)] = s * r * 0.5 * (1.0 - diff * diff * inv_var);
                        }
                    }
                }
                accumulate(grads, *logits, d_logits);
                accumulate(grads, *means, d_mu);
                accumulate(grads, *logvars, d_lv);
            }
        }
    }
}

fn accumulate(grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
    match &mut grads[v.0] {
        Some(existing) => existing.add_assign(&g),
        slot @ None => *slot = Some(g),
    }
}

fn zip_map(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    let data = a.data().iter().zip(b.data()).map(|(x, y)| f(*x, *y)).collect();
    Tensor::from_vec(a.rows(), a.cols(), data)
}

/// Result of [`Tape::backward`].
pub struct Gradients {
    nodes: Vec<Option<Tensor>>,
    param_nodes: Vec<(usize, ParamId)>,
}

impl Gradients {
    /// Gradient w.r.t. any node, `None` if the loss does not depend on it.
    pub fn wrt(&self, v: Var) -> Option<&Tensor> {
        self.nodes[v.0].as_ref()
    }

    /// Add parameter gradients into `store`'s accumulators.
    pub fn accumulate_into(&self, store: &mut ParamStore) {
        for &(node, id) in &self.param_nodes {
            if let Some(g) = &self.nodes[node] {
                store.get_mut(id).grad.add_assign(g);
            }
        }
    }

    /// Dense per-parameter gradients, zero where a parameter was unused.
    pub fn to_param_grads(&self, store: &ParamStore) -> Vec<Tensor> {
        let mut out: Vec<Tensor> = store
            .iter()
            .map(|(_, p)| Tensor::zeros(p.value.rows(), p.value.cols()))
            .collect();
        for &(node, id) in &self.param_nodes {
            if let Some(g) = &self.nodes[node] {
                out[id.index()].add_assign(g);
            }
        }
        out
    }
}

pub(crate) fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + libm::tanh(GELU_C * (x + GELU_A * x * x * x)))
}

fn gelu_grad(x: f64) -> f64 {
    let t = libm::tanh(GELU_C * (x + GELU_A * x * x * x));
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}

pub(crate) fn log_sum_exp(xs: &[f64]) -> f64 {
    let max = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        return max;
    }
    max + libm::log(xs.iter().map(|x| libm::exp(x - max)).sum::<f64>())
}

pub(crate) fn log_softmax(xs: &[f64]) -> Vec<f64> {
    let lse = log_sum_exp(xs);
    xs.iter().map(|x| x - lse).collect()
}

/// `KL(N(mq, e^lq) ‖ N(mp, e^lp))` summed over dimensions.
pub fn kl_diag_value(mq: &[f64], lq: &[f64], mp: &[f64], lp: &[f64]) -> f64 {
    let mut kl = 0.0;
    for j in 0..mq.len() {
        let diff = mq[j] - mp[j];
        kl += 0.5 * (lp[j] - lq[j] + (libm::exp(lq[j]) + diff * diff) * libm::exp(-lp[j]) - 1.0);
    }
    kl
}
