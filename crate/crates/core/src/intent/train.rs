use alloc::format;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::{BranchModel, LossWeights, Normalizer};
use crate::nn::{Adam, ForwardCtx, StepOutcome, Tape, Tensor};
use crate::trajectory::WindowPair;
use crate::{derive_seed, Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainOptions {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub weights: LossWeights,
    pub seed: u64,
    /// Global gradient-norm clip; `None` disables clipping.
    pub clip: Option<f64>,
    /// Refit normalization statistics on the training windows first.
    pub fit_normalizer: bool,
}

impl Default for TrainOptions {
    fn default() -> Self {
        Self {
            epochs: 20,
            batch_size: 32,
            lr: 1e-3,
            weights: LossWeights::default(),
            seed: 0,
            clip: Some(5.0),
            fit_normalizer: true,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub loss: f64,
    pub kl: f64,
    pub recon: f64,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct TrainReport {
    pub epochs: Vec<EpochStats>,
    /// Optimizer steps skipped because of non-finite gradients.
    pub skipped_steps: usize,
}

/// Loss terms of one window (normalized units).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WindowLoss {
    pub loss: f64,
    pub kl: f64,
    pub recon: f64,
}

/// Weighted ELBO of one window with a reparameterized latent sample from
/// `q(Z|X,Y)`, plus per-parameter gradients in store order. Dropout is active
/// when `train` is set.
pub fn window_loss(
    model: &BranchModel,
    window: &WindowPair,
    w: &LossWeights,
    rng: &mut ChaCha8Rng,
    train: bool,
) -> Result<(WindowLoss, Vec<Tensor>)> {
    let (x, anchor) = model.past_tensor(&window.past)?;
    let y = model.future_tensor(&window.future, anchor)?;
    let dz = model.config().net.d_z;
    let eps: Vec<f64> = (0..dz).map(|_| StandardNormal.sample(&mut *rng)).collect();
    let mut ctx = if train {
        ForwardCtx {
            dropout: model.config().net.dropout,
            rng: Some(rng),
        }
    } else {
        ForwardCtx::eval()
    };
    let mut tape = Tape::new(model.store());
    let xv = tape.input(x);
    let yv = tape.input(y.clone());
    let (memory, p) = model.run_past(&mut tape, &mut ctx, xv)?;
    let q = model.run_future(&mut tape, &mut ctx, memory, yv)?;
    let half = tape.scale(q.log_var, 0.5);
    let std = tape.exp(half);
    let e = tape.input(Tensor::row_vector(eps));
    let noise = tape.mul(std, e);
    let z = tape.add(q.mean, noise);
    let mix = model.run_decoder(&mut tape, &mut ctx, xv, z)?;
    let nll = tape.gmm_nll(mix.logits, mix.means, mix.log_vars, y)?;
    let kl = tape.kl_diag(q.mean, q.log_var, p.mean, p.log_var);
    let a = tape.scale(kl, w.kl_weight);
    let b = tape.scale(nll, w.recon_weight);
    let loss = tape.add(a, b);
    let stats = WindowLoss {
        loss: tape.value(loss)[(0, 0)],
        kl: tape.value(kl)[(0, 0)],
        recon: tape.value(nll)[(0, 0)],
    };
    let grads = tape.backward(loss).to_param_grads(model.store());
    Ok((stats, grads))
}

#[cfg(feature = "std")]
fn map_indices<T: Send>(n: usize, f: impl Fn(usize) -> T + Sync + Send) -> Vec<T> {
    use rayon::prelude::*;
    (0..n).into_par_iter().map(f).collect()
}

#[cfg(not(feature = "std"))]
fn map_indices<T>(n: usize, f: impl Fn(usize) -> T) -> Vec<T> {
    (0..n).map(f).collect()
}

fn check_windows(model: &BranchModel, windows: &[WindowPair]) -> Result<()> {
    if windows.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    let cfg = model.config();
    for (i, w) in windows.iter().enumerate() {
        if w.branch != cfg.branch {
            return Err(Error::Validation(format!(
                "window {i} is {:?}-branch, model is {:?}",
                w.branch, cfg.branch
            )));
        }
        if w.past.len() != cfg.obs_len || w.future.len() != cfg.fut_len {
            return Err(Error::Validation(format!(
                "window {i} has lengths {}/{}, model expects {}/{}",
                w.past.len(),
                w.future.len(),
                cfg.obs_len,
                cfg.fut_len
            )));
        }
    }
    Ok(())
}

/// Minibatch Adam on the weighted ELBO. Per-window gradients may be computed
/// in parallel; they are reduced in window order so results do not depend on
/// the thread count.
pub fn train(model: &mut BranchModel, windows: &[WindowPair], opts: &TrainOptions) -> Result<TrainReport> {
    train_with(model, windows, opts, |_| {})
}

/// As [`train`], calling `on_epoch` after every epoch.
pub fn train_with(
    model: &mut BranchModel,
    windows: &[WindowPair],
    opts: &TrainOptions,
    mut on_epoch: impl FnMut(&EpochStats),
) -> Result<TrainReport> {
    check_windows(model, windows)?;
    opts.weights.validate()?;
    if opts.batch_size == 0 || !(opts.lr > 0.0) {
        return Err(Error::Config(format!(
            "batch size must be >= 1 and lr > 0 (got {}, {})",
            opts.batch_size, opts.lr
        )));
    }
    if opts.fit_normalizer {
        model.set_normalizer(Normalizer::fit(model.branch(), windows)?)?;
    }
    let mut adam = Adam::new(model.store(), opts.lr);
    let mut report = TrainReport::default();
    let mut order: Vec<usize> = (0..windows.len()).collect();
    for epoch in 0..opts.epochs {
        let epoch_seed = derive_seed(opts.seed, epoch as u64);
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(epoch_seed));
        let (mut loss_sum, mut kl_sum, mut recon_sum, mut batches) = (0.0, 0.0, 0.0, 0usize);
        for (batch, chunk) in order.chunks(opts.batch_size).enumerate() {
            let start = batch * opts.batch_size;
            let shared: &BranchModel = model;
            let results = map_indices(chunk.len(), |i| {
                let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(epoch_seed, (start + i) as u64));
                window_loss(shared, &windows[chunk[i]], &opts.weights, &mut rng, true)
            });
            let n = chunk.len() as f64;
            let mut stats = WindowLoss {
                loss: 0.0,
                kl: 0.0,
                recon: 0.0,
            };
            model.store_mut().zero_grad();
            for r in results {
                let (s, grads) = r.map_err(|e| match e {
                    Error::NonFiniteLikelihood { .. } => Error::NonFiniteLoss { epoch, batch },
                    other => other,
                })?;
                stats.loss += s.loss / n;
                stats.kl += s.kl / n;
                stats.recon += s.recon / n;
                for (p, g) in model.store_mut().tensors_mut().iter_mut().zip(&grads) {
                    p.grad.add_scaled(g, 1.0 / n);
                }
            }
            if !stats.loss.is_finite() {
                return Err(Error::NonFiniteLoss { epoch, batch });
            }
            if let Some(max) = opts.clip {
                clip_gradients(model, max);
            }
            if adam.step(model.store_mut()) == StepOutcome::SkippedNonFinite {
                report.skipped_steps += 1;
            }
            loss_sum += stats.loss;
            kl_sum += stats.kl;
            recon_sum += stats.recon;
            batches += 1;
        }
        let b = batches as f64;
        let stats = EpochStats {
            epoch,
            loss: loss_sum / b,
            kl: kl_sum / b,
            recon: recon_sum / b,
        };
        on_epoch(&stats);
        report.epochs.push(stats);
    }
    Ok(report)
}

fn clip_gradients(model: &mut BranchModel, max: f64) {
    let norm_sq: f64 = model
        .store()
        .iter()
        .map(|(_, p)| p.grad.data().iter().map(|g| g * g).sum::<f64>())
        .sum();
    let norm = libm::sqrt(norm_sq);
    if norm > max && norm.is_finite() {
        let s = max / norm;
        for p in model.store_mut().tensors_mut() {
            p.grad = p.grad.scale(s);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::intent::{mean_position_error, ModelConfig};
    use crate::nn::NetConfig;
    use crate::trajectory::{Branch, StateSample};
    use crate::Vec3;

    fn toy_net() -> NetConfig {
        NetConfig {
            d_model: 8,
            n_heads: 2,
            n_layers: 1,
            d_ff: 8,
            d_z: 2,
            n_mix: 2,
            dropout: 0.0,
        }
    }

    fn curve_window(branch: Branch, obs: usize, fut: usize, phase: f64) -> WindowPair {
        let dt = 0.05;
        let samples: Vec<StateSample> = (0..obs + fut)
            .map(|i| {
                let t = i as f64 * dt;
                let pos = Vec3::new(0.3 * t, 0.1 * libm::sin(3.0 * t + phase), 0.02 * t * t);
                let vel = Vec3::new(0.3, 0.3 * libm::cos(3.0 * t + phase), 0.04 * t);
                let force = (branch == Branch::Human).then(|| Vec3::new(libm::sin(t + phase), 0.5, -0.2 * t));
                StateSample::new(t, pos, vel, force)
            })
            .collect();
        WindowPair::new(branch, dt, samples[..obs].to_vec(), samples[obs..].to_vec()).unwrap()
    }

    #[test]
    fn elbo_gradient_matches_finite_differences() {
        let cfg = ModelConfig {
            branch: Branch::Human,
            net: toy_net(),
            obs_len: 4,
            fut_len: 3,
        };
        let mut model = BranchModel::new(cfg, 21).unwrap();
        let window = curve_window(Branch::Human, 4, 3, 0.4);
        model
            .set_normalizer(Normalizer::fit(Branch::Human, core::slice::from_ref(&window)).unwrap())
            .unwrap();
        let w = LossWeights {
            kl_weight: 0.7,
            recon_weight: 1.3,
        };
        let eval = |m: &BranchModel| {
            let mut rng = ChaCha8Rng::seed_from_u64(9);
            window_loss(m, &window, &w, &mut rng, false).unwrap()
        };
        let (base, analytic) = eval(&model);
        let eps = 1e-5;
        // Central differences cannot resolve gradients below their roundoff
        // (≈ ε·|L|/h); those are compared absolutely, ten times above it.
        let floor = (1e5 * f64::EPSILON * base.loss.abs() / eps).max(1e-6);
        let mut worst: f64 = 0.0;
        let mut probe = model.clone();
        let ids: Vec<_> = model.store().iter().map(|(id, _)| id).collect();
        for id in ids {
            for i in 0..model.store().value(id).len() {
                let orig = model.store().value(id).data()[i];
                probe.store_mut().value_mut(id).data_mut()[i] = orig + eps;
                let up = eval(&probe).0.loss;
                probe.store_mut().value_mut(id).data_mut()[i] = orig - eps;
                let down = eval(&probe).0.loss;
                probe.store_mut().value_mut(id).data_mut()[i] = orig;
                let numeric = (up - down) / (2.0 * eps);
                let a = analytic[id.index()].data()[i];
                worst = worst.max((a - numeric).abs() / a.abs().max(numeric.abs()).max(floor));
            }
        }
        assert!(worst < 1e-4, "worst relative error {worst:e}");
    }

    #[test]
    fn training_is_deterministic_and_rejects_bad_input() {
        let cfg = ModelConfig {
            branch: Branch::Robot,
            net: NetConfig { dropout: 0.1, ..toy_net() },
            obs_len: 4,
            fut_len: 3,
        };
        let windows: Vec<WindowPair> = (0..6).map(|i| curve_window(Branch::Robot, 4, 3, i as f64)).collect();
        let opts = TrainOptions {
            epochs: 3,
            batch_size: 4,
            lr: 1e-2,
            seed: 17,
            ..TrainOptions::default()
        };
        let mut a = BranchModel::new(cfg, 1).unwrap();
        let mut b = BranchModel::new(cfg, 1).unwrap();
        let ra = train(&mut a, &windows, &opts).unwrap();
        let rb = train(&mut b, &windows, &opts).unwrap();
        assert_eq!(ra, rb);
        assert!(ra.epochs.iter().all(|e| e.loss.is_finite()));
        for ((_, pa), (_, pb)) in a.store().iter().zip(b.store().iter()) {
            assert_eq!(pa.value, pb.value);
        }
        assert_eq!(train(&mut a, &[], &opts), Err(Error::EmptyCorpus));
        let human = curve_window(Branch::Human, 4, 3, 0.0);
        assert!(matches!(train(&mut a, &[human], &opts), Err(Error::Validation(_))));
    }

    #[test]
    fn overfits_a_single_window() {
        let cfg = ModelConfig::new(Branch::Robot, NetConfig::default());
        let mut model = BranchModel::new(cfg, 2).unwrap();
        let window = curve_window(Branch::Robot, 8, 12, 0.0);
        let opts = TrainOptions {
            epochs: 200,
            batch_size: 1,
            lr: 3e-3,
            seed: 4,
            ..TrainOptions::default()
        };
        train(&mut model, core::slice::from_ref(&window), &opts).unwrap();
        let pred: Vec<Vec3> = model
            .sample_most_likely(&window.past)
            .unwrap()
            .iter()
            .map(|r| Vec3::new(r[0], r[1], r[2]))
            .collect();
        let ade = mean_position_error(&pred, &window.future_positions());
        assert!(ade < 1e-2, "ADE {ade} m");
    }
}
