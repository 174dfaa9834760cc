//! Action-conditioned latent dynamics: ẑ_{t+T_p} = f(z_t, A_t), trained on
//! latents of a frozen encoder.

use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::Rng;

use crate::diffusion::LatentEncoder;
use crate::error::{contract, shape_err, Result};
use crate::nn::{Activation, Mlp, MlpVars};
use crate::optim::AdamState;
use crate::real::Real;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;
use crate::trajectory::{stream_rng, Trajectory};

#[derive(Debug, Clone, PartialEq)]
pub struct DynamicsModel {
    pub predictor: Mlp,
    pub latent_dim: usize,
    pub pred_horizon: usize,
    /// Checksum of the encoder whose latents the model was built for.
    pub encoder_checksum: u64,
}

impl DynamicsModel {
    pub fn new<R: Rng + ?Sized>(
        encoder: &LatentEncoder,
        pred_horizon: usize,
        hidden: &[usize],
        rng: &mut R,
    ) -> Result<Self> {
        let d = encoder.latent_dim();
        let mut widths = alloc::vec![d + 2 * pred_horizon];
        widths.extend_from_slice(hidden);
        widths.push(d);
        let predictor = Mlp::new(&widths, Activation::Tanh, rng)?;
        Self::from_predictor(predictor, d, pred_horizon, encoder.checksum())
    }

    pub fn from_predictor(
        predictor: Mlp,
        latent_dim: usize,
        pred_horizon: usize,
        encoder_checksum: u64,
    ) -> Result<Self> {
        if predictor.input_dim() != latent_dim + 2 * pred_horizon {
            return Err(shape_err(&[latent_dim + 2 * pred_horizon], &[predictor.input_dim()]));
        }
        if predictor.output_dim() != latent_dim {
            return Err(shape_err(&[latent_dim], &[predictor.output_dim()]));
        }
        Ok(Self {
            predictor,
            latent_dim,
            pred_horizon,
            encoder_checksum,
        })
    }

    pub fn chunk_dim(&self) -> usize {
        2 * self.pred_horizon
    }

    /// Fails unless `encoder` is bit-identical to the one the model was built for.
    pub fn check_encoder(&self, encoder: &LatentEncoder) -> Result<()> {
        if encoder.checksum() != self.encoder_checksum {
            return Err(contract("encoder does not match the dynamics model"));
        }
        if encoder.latent_dim() != self.latent_dim {
            return Err(shape_err(&[self.latent_dim], &[encoder.latent_dim()]));
        }
        Ok(())
    }

    fn check_inputs(&self, z: &[f32], chunk: &[f32]) -> Result<()> {
        if z.len() != self.latent_dim {
            return Err(shape_err(&[self.latent_dim], &[z.len()]));
        }
        if chunk.len() != self.chunk_dim() {
            return Err(shape_err(&[self.chunk_dim()], &[chunk.len()]));
        }
        Ok(())
    }

    pub fn predict(&self, z: &[f32], chunk: &[f32]) -> Result<Vec<f32>> {
        self.check_inputs(z, chunk)?;
        let mut x = Vec::with_capacity(self.predictor.input_dim());
        x.extend_from_slice(z);
        x.extend_from_slice(chunk);
        self.predictor.forward_rows(&x, x.len())
    }

    /// Taped prediction with frozen weights; `z` and `chunk` are `[1, ·]` rows.
    pub fn predict_on_tape<T: Real>(&self, tape: &mut Tape<T>, vars: &MlpVars, z: Var, chunk: Var) -> Result<Var> {
        let x = tape.concat_cols(&[z, chunk])?;
        self.predictor.forward_on_tape(tape, vars, x)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DynTrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f32,
    pub seed: u64,
    /// Probability of drawing an expert window; `None` draws uniformly from
    /// the concatenation of both sets.
    pub expert_weight: Option<f32>,
}

impl Default for DynTrainConfig {
    fn default() -> Self {
        Self {
            epochs: 100,
            batch_size: 64,
            lr: 5e-4,
            seed: 0,
            expert_weight: None,
        }
    }
}

impl DynTrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 || !(self.lr > 0.0) {
            return Err(contract("dynamics training values must be positive"));
        }
        if let Some(w) = self.expert_weight {
            if !(0.0..=1.0).contains(&w) {
                return Err(contract("mixture weights must lie in [0, 1] and sum to 1"));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct DynTrainLog {
    pub epoch_loss: Vec<f32>,
    /// Held-out MSE after each epoch; empty without a held-out set.
    pub heldout_mse: Vec<f32>,
}

/// `(z_t, A_t) → z_{t+T_p}` windows, row-major.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct DynWindows {
    pub inputs: Vec<f32>,
    pub targets: Vec<f32>,
    pub input_dim: usize,
    pub latent_dim: usize,
}

impl DynWindows {
    pub fn len(&self) -> usize {
        if self.latent_dim == 0 {
            0
        } else {
            self.targets.len() / self.latent_dim
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn input(&self, i: usize) -> &[f32] {
        &self.inputs[i * self.input_dim..(i + 1) * self.input_dim]
    }

    pub fn target(&self, i: usize) -> &[f32] {
        &self.targets[i * self.latent_dim..(i + 1) * self.latent_dim]
    }
}

/// Slices every full window; windows that would run past a trajectory's end
/// are dropped.
pub fn dyn_windows(encoder: &LatentEncoder, trajs: &[Trajectory], pred_horizon: usize) -> Result<DynWindows> {
    let d = encoder.latent_dim();
    let mut w = DynWindows {
        input_dim: d + 2 * pred_horizon,
        latent_dim: d,
        ..Default::default()
    };
    for t in trajs {
        if t.len() < pred_horizon {
            continue;
        }
        let obs: Vec<&[f32]> = t.observations.iter().map(|o| o.as_slice()).collect();
        let z = encoder.encode_frames(&obs)?;
        for s in 0..=t.len() - pred_horizon {
            w.inputs.extend_from_slice(&z[s * d..(s + 1) * d]);
            for a in &t.actions[s..s + pred_horizon] {
                w.inputs.extend_from_slice(a);
            }
            let e = s + pred_horizon;
            w.targets.extend_from_slice(&z[e * d..(e + 1) * d]);
        }
    }
    Ok(w)
}

#[derive(Debug, Clone, PartialEq)]
pub struct DynEval {
    pub mse: f32,
    /// Per-window mean squared error.
    pub per_window: Vec<f32>,
    /// Mean per-coordinate variance of the targets.
    pub target_variance: f32,
}

pub fn eval_windows(model: &DynamicsModel, w: &DynWindows) -> Result<DynEval> {
    if w.is_empty() {
        return Err(contract("held-out set is empty"));
    }
    let d = w.latent_dim;
    let mut per_window = Vec::with_capacity(w.len());
    for chunk in (0..w.len()).collect::<Vec<_>>().chunks(256) {
        let lo = chunk[0];
        let hi = lo + chunk.len();
        let pred = model
            .predictor
            .forward_rows(&w.inputs[lo * w.input_dim..hi * w.input_dim], w.input_dim)?;
        for (r, i) in (lo..hi).enumerate() {
            let mut s = 0.0f64;
            for (p, t) in pred[r * d..(r + 1) * d].iter().zip(w.target(i)) {
                let e = (*p - *t) as f64;
                s += e * e;
            }
            per_window.push((s / d as f64) as f32);
        }
    }
    let mse = per_window.iter().map(|v| *v as f64).sum::<f64>() / per_window.len() as f64;
    let n = w.len() as f64;
    let mut var = 0.0f64;
    for j in 0..d {
        let mean = (0..w.len()).map(|i| w.target(i)[j] as f64).sum::<f64>() / n;
        var += (0..w.len())
            .map(|i| {
                let e = w.target(i)[j] as f64 - mean;
                e * e
            })
            .sum::<f64>()
            / n;
    }
    Ok(DynEval {
        mse: mse as f32,
        per_window,
        target_variance: (var / d as f64) as f32,
    })
}

pub fn eval_dynamics(model: &DynamicsModel, encoder: &LatentEncoder, heldout: &[Trajectory]) -> Result<DynEval> {
    model.check_encoder(encoder)?;
    eval_windows(model, &dyn_windows(encoder, heldout, model.pred_horizon)?)
}

fn gather(w: &DynWindows, idx: &[usize]) -> (Vec<f32>, Vec<f32>) {
    let mut x = Vec::with_capacity(idx.len() * w.input_dim);
    let mut y = Vec::with_capacity(idx.len() * w.latent_dim);
    for &i in idx {
        x.extend_from_slice(w.input(i));
        y.extend_from_slice(w.target(i));
    }
    (x, y)
}

fn train_step(model: &mut DynamicsModel, adam: &mut AdamState, x: Vec<f32>, y: Vec<f32>, b: usize) -> Result<f32> {
    let mut tape: Tape<f32> = Tape::new();
    let vars = model.predictor.bind(&mut tape, true);
    let xi = tape.constant(Tensor::new(&[b, model.predictor.input_dim()], x)?);
    let yi = tape.constant(Tensor::new(&[b, model.latent_dim], y)?);
    let pred = model.predictor.forward_on_tape(&mut tape, &vars, xi)?;
    let diff = tape.sub(pred, yi)?;
    let loss = tape.mean_squares(diff);
    let lv = tape.value(loss).data()[0];
    let g = tape.backward(loss)?;
    let grads = vars.grads(&model.predictor, &g);
    adam.step(&mut model.predictor.params_mut(), &grads)?;
    Ok(lv)
}

/// Fits the predictor on expert and rollout windows. The encoder is only read.
pub fn dyn_train(
    model: &mut DynamicsModel,
    encoder: &LatentEncoder,
    expert: &[Trajectory],
    rollouts: &[Trajectory],
    heldout: &[Trajectory],
    cfg: &DynTrainConfig,
) -> Result<DynTrainLog> {
    cfg.validate()?;
    model.check_encoder(encoder)?;
    let we = dyn_windows(encoder, expert, model.pred_horizon)?;
    let wr = dyn_windows(encoder, rollouts, model.pred_horizon)?;
    let wh = if heldout.is_empty() {
        None
    } else {
        Some(dyn_windows(encoder, heldout, model.pred_horizon)?)
    };
    train_on_windows(model, &we, &wr, wh.as_ref(), cfg)
}

pub fn train_on_windows(
    model: &mut DynamicsModel,
    expert: &DynWindows,
    rollouts: &DynWindows,
    heldout: Option<&DynWindows>,
    cfg: &DynTrainConfig,
) -> Result<DynTrainLog> {
    cfg.validate()?;
    let total = expert.len() + rollouts.len();
    if total == 0 {
        return Err(contract("dynamics dataset is empty"));
    }
    let mut all = expert.clone();
    all.inputs.extend_from_slice(&rollouts.inputs);
    all.targets.extend_from_slice(&rollouts.targets);
    if all.latent_dim == 0 {
        all.latent_dim = rollouts.latent_dim;
        all.input_dim = rollouts.input_dim;
    }
    if all.input_dim != model.predictor.input_dim() || all.latent_dim != model.latent_dim {
        return Err(shape_err(&[model.predictor.input_dim()], &[all.input_dim]));
    }

    let mut rng = stream_rng(cfg.seed, 21);
    let mut adam = AdamState::new(&model.predictor.params(), cfg.lr);
    let mut log = DynTrainLog::default();
    let mut order: Vec<usize> = (0..total).collect();
    for _ in 0..cfg.epochs {
        match cfg.expert_weight {
            None => order.shuffle(&mut rng),
            Some(w) => {
                for slot in order.iter_mut() {
                    let from_expert = if expert.is_empty() {
                        false
                    } else if rollouts.is_empty() {
                        true
                    } else {
                        rng.random::<f32>() < w
                    };
                    *slot = if from_expert {
                        rng.random_range(0..expert.len())
                    } else {
                        expert.len() + rng.random_range(0..rollouts.len())
                    };
                }
            }
        }
        let mut sum = 0.0f64;
        for batch in order.chunks(cfg.batch_size) {
            let (x, y) = gather(&all, batch);
            let l = train_step(model, &mut adam, x, y, batch.len())?;
            sum += l as f64 * batch.len() as f64;
        }
        log.epoch_loss.push((sum / total as f64) as f32);
        if let Some(h) = heldout {
            if !h.is_empty() {
                log.heldout_mse.push(eval_windows(model, h)?.mse);
            }
        }
    }
    Ok(log)
}
