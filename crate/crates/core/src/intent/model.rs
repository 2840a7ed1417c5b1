use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{GaussianParams, GmmSequence, GmmStep, LOG_VAR_RANGE, OUT_DIM, VARIANCE_FLOOR};
use crate::nn::{positional_encoding_from, AttnMask, Block, ForwardCtx, LayerNorm, Linear, NetConfig, ParamStore, Tape, Tensor, Var};
use crate::trajectory::{Branch, StateSample, WindowPair};
use crate::{Error, Result, Vec3};

const STD_FLOOR: f64 = 1e-3;
const CONV_KERNEL: usize = 3;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub branch: Branch,
    pub net: NetConfig,
    pub obs_len: usize,
    pub fut_len: usize,
}

impl ModelConfig {
    pub fn new(branch: Branch, net: NetConfig) -> Self {
        Self {
            branch,
            net,
            obs_len: 8,
            fut_len: 12,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.net.validate()?;
        if self.obs_len < 2 || self.fut_len < 1 {
            return Err(Error::Config(format!(
                "window lengths must satisfy obs >= 2, fut >= 1 (got {}, {})",
                self.obs_len, self.fut_len
            )));
        }
        Ok(())
    }

    pub fn input_dim(&self) -> usize {
        self.branch.input_dim()
    }
}

/// Per-feature affine normalization. Positions are first expressed relative
/// to the last observed position (the anchor), so predictions are emitted in
/// absolute coordinates by adding the anchor back.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Normalizer {
    pub in_mean: Vec<f64>,
    pub in_std: Vec<f64>,
    pub out_mean: Vec<f64>,
    pub out_std: Vec<f64>,
}

impl Normalizer {
    pub fn identity(input_dim: usize) -> Self {
        Self {
            in_mean: vec![0.0; input_dim],
            in_std: vec![1.0; input_dim],
            out_mean: vec![0.0; OUT_DIM],
            out_std: vec![1.0; OUT_DIM],
        }
    }

    /// Mean and standard deviation of anchor-relative features over `windows`.
    pub fn fit(branch: Branch, windows: &[WindowPair]) -> Result<Self> {
        if windows.is_empty() {
            return Err(Error::EmptyCorpus);
        }
        let dim = branch.input_dim();
        let mut inputs = Moments::new(dim);
        let mut outputs = Moments::new(OUT_DIM);
        for w in windows {
            let anchor = w.past[w.past.len() - 1].pos;
            for s in &w.past {
                inputs.push(&relative_features(s, anchor, branch));
            }
            for s in &w.future {
                outputs.push(&relative_features(s, anchor, Branch::Robot));
            }
        }
        let (in_mean, in_std) = inputs.finish();
        let (out_mean, out_std) = outputs.finish();
        Ok(Self {
            in_mean,
            in_std,
            out_mean,
            out_std,
        })
    }
}

struct Moments {
    n: f64,
    sum: Vec<f64>,
    sum_sq: Vec<f64>,
}

impl Moments {
    fn new(dim: usize) -> Self {
        Self {
            n: 0.0,
            sum: vec![0.0; dim],
            sum_sq: vec![0.0; dim],
        }
    }

    fn push(&mut self, x: &[f64]) {
        self.n += 1.0;
        for (i, v) in x.iter().enumerate() {
            self.sum[i] += v;
            self.sum_sq[i] += v * v;
        }
    }

    /// Per-axis means; one scale per 3-vector (position, velocity, force)
    /// pooled over its axes, so an axis that never moves in the corpus does
    /// not blow up small deviations at inference time.
    fn finish(self) -> (Vec<f64>, Vec<f64>) {
        let mean: Vec<f64> = self.sum.iter().map(|s| s / self.n).collect();
        let var: Vec<f64> = self
            .sum_sq
            .iter()
            .zip(&mean)
            .map(|(sq, m)| (sq / self.n - m * m).max(0.0))
            .collect();
        let std = var
            .chunks(3)
            .flat_map(|g| {
                let pooled = libm::sqrt(g.iter().sum::<f64>() / g.len() as f64).max(STD_FLOOR);
                core::iter::repeat_n(pooled, g.len())
            })
            .collect();
        (mean, std)
    }
}

fn relative_features(s: &StateSample, anchor: Vec3, branch: Branch) -> Vec<f64> {
    let mut f = s.features(branch);
    for i in 0..3 {
        f[i] -= anchor[i];
    }
    f
}

#[derive(Debug, Clone)]
struct Encoder {
    embed: Linear,
    blocks: Vec<Block>,
    norm: LayerNorm,
    head_hidden: Linear,
    head_out: Linear,
}

impl Encoder {
    fn new(store: &mut ParamStore, name: &str, cfg: &NetConfig, input: usize, cross: bool, rng: &mut ChaCha8Rng) -> Self {
        let d = cfg.d_model;
        Self {
            embed: Linear::new(store, &format!("{name}.embed"), input, d - cfg.pe_dim(), rng),
            blocks: (0..cfg.n_layers)
                .map(|i| Block::new(store, &format!("{name}.blk{i}"), cfg, cross, rng))
                .collect(),
            norm: LayerNorm::new(store, &format!("{name}.norm"), d),
            head_hidden: Linear::new(store, &format!("{name}.head1"), d, d, rng),
            head_out: Linear::new(store, &format!("{name}.head2"), d, 2 * cfg.d_z, rng),
        }
    }
}

#[derive(Debug, Clone)]
struct Decoder {
    conv: Linear,
    input: Linear,
    blocks: Vec<Block>,
    norm: LayerNorm,
    gmm: Linear,
}

/// Tape handles for a latent Gaussian.
#[derive(Debug, Clone, Copy)]
pub(crate) struct LatentVars {
    pub mean: Var,
    pub log_var: Var,
}

/// Tape handles for the mixture head output.
#[derive(Debug, Clone, Copy)]
pub(crate) struct MixtureVars {
    pub logits: Var,
    pub means: Var,
    pub log_vars: Var,
}

/// One CVAE branch: parameters, architecture handles and normalization.
#[derive(Debug, Clone)]
pub struct BranchModel {
    config: ModelConfig,
    store: ParamStore,
    norm: Normalizer,
    past: Encoder,
    future: Encoder,
    decoder: Decoder,
}

impl BranchModel {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let cfg = config.net;
        let input = config.input_dim();
        let d = cfg.d_model;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let past = Encoder::new(&mut store, "past", &cfg, input, false, &mut rng);
        let future = Encoder::new(&mut store, "future", &cfg, OUT_DIM, true, &mut rng);
        let decoder = Decoder {
            conv: Linear::new(&mut store, "dec.conv", CONV_KERNEL * input, d, &mut rng),
            input: Linear::new(&mut store, "dec.input", cfg.pe_dim() + cfg.d_z + d, d, &mut rng),
            blocks: (0..cfg.n_layers)
                .map(|i| Block::new(&mut store, &format!("dec.blk{i}"), &cfg, true, &mut rng))
                .collect(),
            norm: LayerNorm::new(&mut store, "dec.norm", d),
            gmm: Linear::new(&mut store, "dec.gmm", d, cfg.n_mix * (1 + 2 * OUT_DIM), &mut rng),
        };
        Ok(Self {
            config,
            store,
            norm: Normalizer::identity(input),
            past,
            future,
            decoder,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn branch(&self) -> Branch {
        self.config.branch
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    pub fn normalizer(&self) -> &Normalizer {
        &self.norm
    }

    pub fn set_normalizer(&mut self, norm: Normalizer) -> Result<()> {
        if norm.in_mean.len() != self.config.input_dim()
            || norm.in_std.len() != self.config.input_dim()
            || norm.out_mean.len() != OUT_DIM
            || norm.out_std.len() != OUT_DIM
        {
            return Err(Error::Config(format!(
                "normalizer dimensions do not match a {:?}-branch model",
                self.branch()
            )));
        }
        self.norm = norm;
        Ok(())
    }

    /// Handles of the future-past attention output projections, in layer order.
    pub fn cross_attention_outputs(&self) -> Vec<Linear> {
        self.future
            .blocks
            .iter()
            .filter_map(|b| b.cross.map(|(_, attn)| attn.output))
            .collect()
    }

    fn check_past(&self, past: &[StateSample]) -> Result<()> {
        if past.len() != self.config.obs_len {
            return Err(Error::Config(format!(
                "past window has {} samples, model expects {}",
                past.len(),
                self.config.obs_len
            )));
        }
        if self.branch() == Branch::Human && past.iter().any(|s| s.force.is_none()) {
            return Err(Error::Config(format!(
                "human-branch model expects {}-dim inputs (position, velocity, force)",
                self.config.input_dim()
            )));
        }
        Ok(())
    }

    fn check_future(&self, future: &[StateSample]) -> Result<()> {
        if future.len() != self.config.fut_len {
            return Err(Error::Config(format!(
                "future window has {} samples, model expects {}",
                future.len(),
                self.config.fut_len
            )));
        }
        Ok(())
    }

    /// Normalized past features and the anchor position.
    pub(crate) fn past_tensor(&self, past: &[StateSample]) -> Result<(Tensor, Vec3)> {
        self.check_past(past)?;
        let anchor = past[past.len() - 1].pos;
        let dim = self.config.input_dim();
        let mut data = Vec::with_capacity(past.len() * dim);
        for s in past {
            let f = relative_features(s, anchor, self.branch());
            data.extend(f.iter().enumerate().map(|(i, v)| (v - self.norm.in_mean[i]) / self.norm.in_std[i]));
        }
        Ok((Tensor::from_vec(past.len(), dim, data), anchor))
    }

    pub(crate) fn future_tensor(&self, future: &[StateSample], anchor: Vec3) -> Result<Tensor> {
        self.check_future(future)?;
        let mut data = Vec::with_capacity(future.len() * OUT_DIM);
        for s in future {
            let f = relative_features(s, anchor, Branch::Robot);
            data.extend(f.iter().enumerate().map(|(i, v)| (v - self.norm.out_mean[i]) / self.norm.out_std[i]));
        }
        Ok(Tensor::from_vec(future.len(), OUT_DIM, data))
    }

    fn tokens(&self, tape: &mut Tape<'_>, embed: &Linear, x: Var, start: usize) -> Result<Var> {
        let len = tape.value(x).rows();
        let e = embed.forward(tape, x);
        let pe = tape.input(positional_encoding_from(start, len, self.config.net.pe_dim())?);
        Ok(tape.concat_cols(&[e, pe]))
    }

    fn head(&self, tape: &mut Tape<'_>, enc: &Encoder, h: Var) -> LatentVars {
        let dz = self.config.net.d_z;
        let last = tape.slice_rows(h, tape.value(h).rows() - 1, 1);
        let hidden = enc.head_hidden.forward(tape, last);
        let hidden = tape.gelu(hidden);
        let out = enc.head_out.forward(tape, hidden);
        let mean = tape.slice_cols(out, 0, dz);
        let raw = tape.slice_cols(out, dz, dz);
        let log_var = tape.clamp(raw, LOG_VAR_RANGE.0, LOG_VAR_RANGE.1);
        LatentVars { mean, log_var }
    }

    /// Past encoder: returns the normalized past features (memory for the
    /// future encoder) and the parameters of `p(Z|X)`.
    pub(crate) fn run_past(&self, tape: &mut Tape<'_>, ctx: &mut ForwardCtx<'_>, x: Var) -> Result<(Var, LatentVars)> {
        let mut h = self.tokens(tape, &self.past.embed, x, 0)?;
        for b in &self.past.blocks {
            h = b.forward(tape, ctx, h, None, None)?;
        }
        let features = self.past.norm.forward(tape, h);
        let latent = self.head(tape, &self.past, features);
        Ok((features, latent))
    }

    /// Future encoder with future-past attention: parameters of `q(Z|X,Y)`.
    pub(crate) fn run_future(&self, tape: &mut Tape<'_>, ctx: &mut ForwardCtx<'_>, memory: Var, y: Var) -> Result<LatentVars> {
        let mut h = self.tokens(tape, &self.future.embed, y, self.config.obs_len)?;
        for b in &self.future.blocks {
            h = b.forward(tape, ctx, h, None, Some(memory))?;
        }
        let h = self.future.norm.forward(tape, h);
        Ok(self.head(tape, &self.future, h))
    }

    /// Causal temporal convolution of the past (kernel 3, zero left padding).
    pub(crate) fn run_conv(&self, tape: &mut Tape<'_>, x: Var) -> Var {
        let mut taps = vec![x];
        for k in 1..CONV_KERNEL {
            taps.push(tape.shift_down(x, k));
        }
        let stacked = tape.concat_cols(&taps);
        let c = self.decoder.conv.forward(tape, stacked);
        tape.gelu(c)
    }

    /// Decoder input tokens: future positional encodings with the latent
    /// sample and the last convolution output broadcast over steps.
    pub(crate) fn decoder_tokens(&self, tape: &mut Tape<'_>, conv: Var, z: Var) -> Result<Var> {
        let fut = self.config.fut_len;
        let pe = tape.input(positional_encoding_from(self.config.obs_len, fut, self.config.net.pe_dim())?);
        let summary = tape.slice_rows(conv, tape.value(conv).rows() - 1, 1);
        let zb = tape.broadcast_rows(z, fut);
        let cb = tape.broadcast_rows(summary, fut);
        let joined = tape.concat_cols(&[pe, zb, cb]);
        Ok(self.decoder.input.forward(tape, joined))
    }

    pub(crate) fn run_decoder_tokens(
        &self,
        tape: &mut Tape<'_>,
        ctx: &mut ForwardCtx<'_>,
        tokens: Var,
        conv: Var,
    ) -> Result<MixtureVars> {
        let fut = tape.value(tokens).rows();
        let mask = AttnMask::causal(fut);
        let mut h = tokens;
        for b in &self.decoder.blocks {
            h = b.forward(tape, ctx, h, Some(&mask), Some(conv))?;
        }
        let h = self.decoder.norm.forward(tape, h);
        let out = self.decoder.gmm.forward(tape, h);
        let k = self.config.net.n_mix;
        let logits = tape.slice_cols(out, 0, k);
        let means = tape.slice_cols(out, k, k * OUT_DIM);
        let raw = tape.slice_cols(out, k + k * OUT_DIM, k * OUT_DIM);
        let log_vars = tape.clamp(raw, LOG_VAR_RANGE.0, LOG_VAR_RANGE.1);
        Ok(MixtureVars { logits, means, log_vars })
    }

    pub(crate) fn run_decoder(&self, tape: &mut Tape<'_>, ctx: &mut ForwardCtx<'_>, x: Var, z: Var) -> Result<MixtureVars> {
        let conv = self.run_conv(tape, x);
        let tokens = self.decoder_tokens(tape, conv, z)?;
        self.run_decoder_tokens(tape, ctx, tokens, conv)
    }

    /// Convert normalized mixture outputs to absolute units.
    pub(crate) fn mixture_to_gmm(&self, tape: &Tape<'_>, mix: &MixtureVars, anchor: Vec3) -> GmmSequence {
        let k = self.config.net.n_mix;
        let logits = tape.value(mix.logits);
        let means = tape.value(mix.means);
        let log_vars = tape.value(mix.log_vars);
        let steps = (0..logits.rows())
            .map(|t| {
                let log_w = crate::nn::log_softmax_row(logits.row(t));
                let mut step = GmmStep {
                    weights: log_w.iter().map(|l| libm::exp(*l)).collect(),
                    means: Vec::with_capacity(k),
                    variances: Vec::with_capacity(k),
                };
                for c in 0..k {
                    let mut mean = [0.0; OUT_DIM];
                    let mut var = [0.0; OUT_DIM];
                    for j in 0..OUT_DIM {
                        let idx = c * OUT_DIM + j;
                        let scale = self.norm.out_std[j];
                        mean[j] = means[(t, idx)] * scale + self.norm.out_mean[j] + if j < 3 { anchor[j] } else { 0.0 };
                        var[j] = (libm::exp(log_vars[(t, idx)]) * scale * scale).max(VARIANCE_FLOOR);
                    }
                    step.means.push(mean);
                    step.variances.push(var);
                }
                step
            })
            .collect();
        GmmSequence { steps }
    }

    fn latent(tape: &Tape<'_>, v: &LatentVars) -> GaussianParams {
        GaussianParams {
            mean: tape.value(v.mean).data().to_vec(),
            log_var: tape.value(v.log_var).data().to_vec(),
        }
    }

    /// Parameters of `p(Z|X)`.
    pub fn encode_past(&self, past: &[StateSample]) -> Result<GaussianParams> {
        let (x, _) = self.past_tensor(past)?;
        let mut tape = Tape::new(&self.store);
        let xv = tape.input(x);
        let (_, latent) = self.run_past(&mut tape, &mut ForwardCtx::eval(), xv)?;
        Ok(Self::latent(&tape, &latent))
    }

    /// Parameters of `q(Z|X,Y)`.
    pub fn encode_future(&self, past: &[StateSample], future: &[StateSample]) -> Result<GaussianParams> {
        let (x, anchor) = self.past_tensor(past)?;
        let y = self.future_tensor(future, anchor)?;
        let mut tape = Tape::new(&self.store);
        let xv = tape.input(x);
        let yv = tape.input(y);
        let mut ctx = ForwardCtx::eval();
        let (memory, _) = self.run_past(&mut tape, &mut ctx, xv)?;
        let latent = self.run_future(&mut tape, &mut ctx, memory, yv)?;
        Ok(Self::latent(&tape, &latent))
    }

    /// Per-step mixture over absolute `[pos, vel]` given a latent sample.
    pub fn decode(&self, past: &[StateSample], z: &[f64]) -> Result<GmmSequence> {
        let (x, anchor) = self.past_tensor(past)?;
        self.decode_normalized(x, anchor, z)
    }

    pub(crate) fn decode_normalized(&self, x: Tensor, anchor: Vec3, z: &[f64]) -> Result<GmmSequence> {
        if z.len() != self.config.net.d_z || z.iter().any(|v| !v.is_finite()) {
            return Err(Error::Config(format!(
                "latent sample must be {} finite values",
                self.config.net.d_z
            )));
        }
        let mut tape = Tape::new(&self.store);
        let xv = tape.input(x);
        let zv = tape.input(Tensor::row_vector(z.to_vec()));
        let mix = self.run_decoder(&mut tape, &mut ForwardCtx::eval(), xv, zv)?;
        Ok(self.mixture_to_gmm(&tape, &mix, anchor))
    }
}
