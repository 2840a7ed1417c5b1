use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{ParamId, ParamStore, Tape, Tensor, Var};
use crate::{Error, Result};

/// Architecture hyperparameters shared by every network of a branch.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NetConfig {
    pub d_model: usize,
    pub n_heads: usize,
    pub n_layers: usize,
    pub d_ff: usize,
    pub d_z: usize,
    pub n_mix: usize,
    pub dropout: f64,
}

impl Default for NetConfig {
    fn default() -> Self {
        Self {
            d_model: 64,
            n_heads: 4,
            n_layers: 2,
            d_ff: 128,
            d_z: 16,
            n_mix: 3,
            dropout: 0.1,
        }
    }
}

impl NetConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_heads == 0 || self.d_model % self.n_heads != 0 {
            return Err(Error::Config(format!(
                "d_model {} must be divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        // Token = input embedding (d_model/2) ++ positional encoding (d_model/2),
        // and the encoding width must be even.
        if self.d_model % 4 != 0 {
            return Err(Error::Config(format!("d_model {} must be a multiple of 4", self.d_model)));
        }
        if self.n_mix == 0 || self.d_z == 0 || self.d_ff == 0 || self.n_layers == 0 {
            return Err(Error::Config(String::from("n_mix, d_z, d_ff and n_layers must be >= 1")));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("dropout {} outside [0, 1)", self.dropout)));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }

    /// Width of the positional-encoding half of a token.
    pub fn pe_dim(&self) -> usize {
        self.d_model / 2
    }
}

/// `true` entries are blocked.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AttnMask {
    rows: usize,
    cols: usize,
    blocked: Vec<bool>,
}

impl AttnMask {
    pub fn new(rows: usize, cols: usize, blocked: Vec<bool>) -> Self {
        assert_eq!(blocked.len(), rows * cols);
        Self { rows, cols, blocked }
    }

    /// Blocks every key strictly after the query position.
    pub fn causal(len: usize) -> Self {
        let blocked = (0..len * len).map(|i| i % len > i / len).collect();
        Self {
            rows: len,
            cols: len,
            blocked,
        }
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    #[inline]
    pub fn is_blocked(&self, r: usize, c: usize) -> bool {
        self.blocked[r * self.cols + c]
    }
}

/// Sinusoidal encoding of positions `start..start + len`.
pub fn positional_encoding_from(start: usize, len: usize, d_model: usize) -> Result<Tensor> {
    if d_model == 0 || d_model % 2 != 0 {
        return Err(Error::Config(format!("positional encoding width {d_model} must be even")));
    }
    if len == 0 {
        return Err(Error::Config(String::from("positional encoding length must be >= 1")));
    }
    let mut pe = Tensor::zeros(len, d_model);
    for r in 0..len {
        let t = (start + r) as f64;
        for i in 0..d_model / 2 {
            let freq = libm::pow(10000.0, (2 * i) as f64 / d_model as f64);
            pe[(r, 2 * i)] = libm::sin(t / freq);
            pe[(r, 2 * i + 1)] = libm::cos(t / freq);
        }
    }
    Ok(pe)
}

pub fn positional_encoding(len: usize, d_model: usize) -> Result<Tensor> {
    positional_encoding_from(0, len, d_model)
}

/// Scaled dot-product attention recorded on `tape`.
pub fn attention(tape: &mut Tape<'_>, q: Var, k: Var, v: Var, mask: Option<&AttnMask>) -> Result<Var> {
    let (lq, dk) = tape.value(q).shape();
    let (lk, dk2) = tape.value(k).shape();
    let lv = tape.value(v).rows();
    if dk != dk2 || lk != lv {
        return Err(Error::Shape {
            op: "attention",
            expected: format!("Q {lq}x{dk}, K {lk}x{dk}, V {lk}x_"),
            got: format!("K {lk}x{dk2}, V {lv}x_"),
        });
    }
    if let Some(m) = mask {
        if m.shape() != (lq, lk) {
            return Err(Error::Shape {
                op: "attention mask",
                expected: format!("{lq}x{lk}"),
                got: format!("{:?}", m.shape()),
            });
        }
    }
    let scores = tape.matmul_bt(q, k);
    let scaled = tape.scale(scores, 1.0 / libm::sqrt(dk as f64));
    let weights = tape.softmax(scaled, mask)?;
    Ok(tape.matmul(weights, v))
}

/// Attention on plain tensors (no gradient bookkeeping beyond a throwaway tape).
pub fn attention_values(q: &Tensor, k: &Tensor, v: &Tensor, mask: Option<&AttnMask>) -> Result<Tensor> {
    let store = ParamStore::new();
    let mut tape = Tape::new(&store);
    let (qv, kv, vv) = (tape.input(q.clone()), tape.input(k.clone()), tape.input(v.clone()));
    let out = attention(&mut tape, qv, kv, vv, mask)?;
    Ok(tape.value(out).clone())
}

/// Training-time state threaded through forward passes.
pub struct ForwardCtx<'r> {
    pub dropout: f64,
    pub rng: Option<&'r mut ChaCha8Rng>,
}

impl ForwardCtx<'_> {
    pub fn eval() -> Self {
        Self { dropout: 0.0, rng: None }
    }

    /// Inverted dropout; identity at evaluation.
    pub fn dropout(&mut self, tape: &mut Tape<'_>, x: Var) -> Var {
        let p = self.dropout;
        let Some(rng) = self.rng.as_deref_mut() else { return x };
        if p <= 0.0 {
            return x;
        }
        let (rows, cols) = tape.value(x).shape();
        let keep = 1.0 / (1.0 - p);
        let mask = (0..rows * cols)
            .map(|_| if rng.random::<f64>() < p { 0.0 } else { keep })
            .collect();
        let m = tape.input(Tensor::from_vec(rows, cols, mask));
        tape.mul(x, m)
    }
}

#[derive(Debug, Clone, Copy)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl Linear {
    pub fn new(store: &mut ParamStore, name: &str, fan_in: usize, fan_out: usize, rng: &mut impl Rng) -> Self {
        let weight = store.uniform(format!("{name}.w"), fan_in, fan_out, rng);
        let bias = store.insert(format!("{name}.b"), Tensor::zeros(1, fan_out));
        Self { weight, bias }
    }

    pub fn forward(&self, tape: &mut Tape<'_>, x: Var) -> Var {
        let w = tape.param(self.weight);
        let b = tape.param(self.bias);
        let xw = tape.matmul(x, w);
        tape.add_row(xw, b)
    }

    pub fn in_dim(&self, store: &ParamStore) -> usize {
        store.value(self.weight).rows()
    }
}

#[derive(Debug, Clone, Copy)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub bias: ParamId,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, width: usize) -> Self {
        let gain = store.insert(format!("{name}.gain"), Tensor::filled(1, width, 1.0));
        let bias = store.insert(format!("{name}.bias"), Tensor::zeros(1, width));
        Self { gain, bias }
    }

    pub fn forward(&self, tape: &mut Tape<'_>, x: Var) -> Var {
        let g = tape.param(self.gain);
        let b = tape.param(self.bias);
        tape.layer_norm(x, g, b)
    }
}

/// Per-head query/key/value projections packed as `d_model × d_model`
/// matrices (head `h` owns columns `h·d_k..(h+1)·d_k`) plus the output map.
#[derive(Debug, Clone, Copy)]
pub struct MultiHead {
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
    pub output: Linear,
    pub n_heads: usize,
}

impl MultiHead {
    pub fn new(store: &mut ParamStore, name: &str, d_model: usize, n_heads: usize, rng: &mut impl Rng) -> Self {
        Self {
            query: Linear::new(store, &format!("{name}.q"), d_model, d_model, rng),
            key: Linear::new(store, &format!("{name}.k"), d_model, d_model, rng),
            value: Linear::new(store, &format!("{name}.v"), d_model, d_model, rng),
            output: Linear::new(store, &format!("{name}.o"), d_model, d_model, rng),
            n_heads,
        }
    }

    /// Attention of `x` over `memory` (`memory = x` for self-attention).
    pub fn forward(&self, tape: &mut Tape<'_>, x: Var, memory: Var, mask: Option<&AttnMask>) -> Result<Var> {
        let d_model = tape.params().value(self.query.weight).rows();
        for (what, v) in [("x", x), ("memory", memory)] {
            let cols = tape.value(v).cols();
            if cols != d_model {
                return Err(Error::Config(format!("multi-head {what} width {cols} != d_model {d_model}")));
            }
        }
        if self.n_heads == 0 || d_model % self.n_heads != 0 {
            return Err(Error::Config(format!("d_model {d_model} not divisible by {} heads", self.n_heads)));
        }
        let dk = d_model / self.n_heads;
        let q = self.query.forward(tape, x);
        let k = self.key.forward(tape, memory);
        let v = self.value.forward(tape, memory);
        let mut heads = Vec::with_capacity(self.n_heads);
        for h in 0..self.n_heads {
            let qh = tape.slice_cols(q, h * dk, dk);
            let kh = tape.slice_cols(k, h * dk, dk);
            let vh = tape.slice_cols(v, h * dk, dk);
            heads.push(attention(tape, qh, kh, vh, mask)?);
        }
        let joined = if heads.len() == 1 { heads[0] } else { tape.concat_cols(&heads) };
        Ok(self.output.forward(tape, joined))
    }
}

#[derive(Debug, Clone, Copy)]
pub struct FeedForward {
    pub inner: Linear,
    pub outer: Linear,
}

impl FeedForward {
    pub fn new(store: &mut ParamStore, name: &str, d_model: usize, d_ff: usize, rng: &mut impl Rng) -> Self {
        Self {
            inner: Linear::new(store, &format!("{name}.ff1"), d_model, d_ff, rng),
            outer: Linear::new(store, &format!("{name}.ff2"), d_ff, d_model, rng),
        }
    }

    pub fn forward(&self, tape: &mut Tape<'_>, x: Var) -> Var {
        let h = self.inner.forward(tape, x);
        let h = tape.gelu(h);
        self.outer.forward(tape, h)
    }
}

/// Pre-norm residual block: self-attention, optional attention over a
/// memory sequence, then feedforward.
#[derive(Debug, Clone, Copy)]
pub struct Block {
    pub norm_self: LayerNorm,
    pub self_attn: MultiHead,
    pub cross: Option<(LayerNorm, MultiHead)>,
    pub norm_ff: LayerNorm,
    pub ff: FeedForward,
}

impl Block {
    pub fn new(store: &mut ParamStore, name: &str, cfg: &NetConfig, with_cross: bool, rng: &mut impl Rng) -> Self {
        let d = cfg.d_model;
        let norm_self = LayerNorm::new(store, &format!("{name}.ln_self"), d);
        let self_attn = MultiHead::new(store, &format!("{name}.self"), d, cfg.n_heads, rng);
        let cross = with_cross.then(|| {
            (
                LayerNorm::new(store, &format!("{name}.ln_cross"), d),
                MultiHead::new(store, &format!("{name}.cross"), d, cfg.n_heads, rng),
            )
        });
        let norm_ff = LayerNorm::new(store, &format!("{name}.ln_ff"), d);
        let ff = FeedForward::new(store, name, d, cfg.d_ff, rng);
        Self {
            norm_self,
            self_attn,
            cross,
            norm_ff,
            ff,
        }
    }

    pub fn forward(
        &self,
        tape: &mut Tape<'_>,
        ctx: &mut ForwardCtx<'_>,
        x: Var,
        mask: Option<&AttnMask>,
        memory: Option<Var>,
    ) -> Result<Var> {
        let n = self.norm_self.forward(tape, x);
        let a = self.self_attn.forward(tape, n, n, mask)?;
        let a = ctx.dropout(tape, a);
        let mut h = tape.add(x, a);
        if let Some((norm, attn)) = &self.cross {
            let memory = memory.ok_or_else(|| Error::Config(String::from("cross-attention block needs a memory")))?;
            let n = norm.forward(tape, h);
            let c = attn.forward(tape, n, memory, None)?;
            let c = ctx.dropout(tape, c);
            h = tape.add(h, c);
        }
        let n = self.norm_ff.forward(tape, h);
        let f = self.ff.forward(tape, n);
        let f = ctx.dropout(tape, f);
        Ok(tape.add(h, f))
    }
}
