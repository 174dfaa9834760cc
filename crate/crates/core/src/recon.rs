//! Autoencoder-trained latent space, an alternative to the policy encoder
//! for scoring and dynamics.

use alloc::vec::Vec;

use rand::seq::SliceRandom;

use crate::diffusion::LatentEncoder;
use crate::error::{contract, numeric, Result};
use crate::nn::{Activation, Mlp};
use crate::optim::AdamState;
use crate::tape::Tape;
use crate::tensor::Tensor;
use crate::trajectory::{stream_rng, Trajectory};

#[derive(Debug, Clone, PartialEq)]
pub struct ReconConfig {
    pub hidden: Vec<usize>,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f32,
    pub seed: u64,
}

impl Default for ReconConfig {
    fn default() -> Self {
        Self {
            hidden: alloc::vec![128],
            epochs: 100,
            batch_size: 64,
            lr: 1e-3,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Autoencoder {
    pub encoder: LatentEncoder,
    pub decoder: Mlp,
}

impl Autoencoder {
    pub fn new(obs_dim: usize, frames: usize, latent_dim: usize, cfg: &ReconConfig) -> Result<Self> {
        let mut rng = stream_rng(cfg.seed, 31);
        let input = obs_dim * frames;
        let mut ew = alloc::vec![input];
        ew.extend_from_slice(&cfg.hidden);
        ew.push(latent_dim);
        let mut dw = alloc::vec![latent_dim];
        dw.extend(cfg.hidden.iter().rev());
        dw.push(input);
        let enc = Mlp::new(&ew, Activation::Relu, &mut rng)?;
        let decoder = Mlp::new(&dw, Activation::Relu, &mut rng)?;
        Ok(Self {
            encoder: LatentEncoder::new(enc, frames, obs_dim)?,
            decoder,
        })
    }

    /// Reconstruction of a stacked window.
    pub fn reconstruct(&self, window: &[&[f32]]) -> Result<Vec<f32>> {
        let z = self.encoder.encode(window)?;
        self.decoder.forward_rows(&z, z.len())
    }
}

/// Stacked observation windows of every timestep of every trajectory.
fn recon_inputs(trajs: &[Trajectory], frames: usize) -> Vec<Vec<f32>> {
    let mut out = Vec::new();
    for tr in trajs {
        for t in 0..tr.observations.len() {
            out.push(tr.obs_window(t, frames).concat());
        }
    }
    out
}

/// Fits encoder and decoder to reconstruct expert observation windows.
/// Returns the per-epoch mean loss.
pub fn train_autoencoder(ae: &mut Autoencoder, demos: &[Trajectory], cfg: &ReconConfig) -> Result<Vec<f32>> {
    if cfg.epochs == 0 || cfg.batch_size == 0 || !(cfg.lr > 0.0) {
        return Err(contract("reconstruction training values must be positive"));
    }
    let frames = ae.encoder.frames;
    let width = frames * ae.encoder.obs_dim;
    let rows = recon_inputs(demos, frames);
    if rows.is_empty() {
        return Err(contract("reconstruction dataset is empty"));
    }
    if rows.iter().any(|r| r.len() != width) {
        return Err(contract("demonstration observation width does not match the autoencoder"));
    }
    let mut rng = stream_rng(cfg.seed, 32);
    let mut params = ae.encoder.net.params();
    params.extend(ae.decoder.params());
    let mut adam = AdamState::new(&params, cfg.lr);
    let mut order: Vec<usize> = (0..rows.len()).collect();
    let mut losses = Vec::with_capacity(cfg.epochs);
    for _ in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0f64;
        for batch in order.chunks(cfg.batch_size) {
            let mut x = Vec::with_capacity(batch.len() * width);
            for &i in batch {
                x.extend_from_slice(&rows[i]);
            }
            let mut tape: Tape<f32> = Tape::new();
            let ev = ae.encoder.net.bind(&mut tape, true);
            let dv = ae.decoder.bind(&mut tape, true);
            let xv = tape.constant(Tensor::new(&[batch.len(), width], x)?);
            let z = ae.encoder.net.forward_on_tape(&mut tape, &ev, xv)?;
            let y = ae.decoder.forward_on_tape(&mut tape, &dv, z)?;
            let diff = tape.sub(y, xv)?;
            let loss = tape.mean_squares(diff);
            let lv = tape.value(loss).data()[0];
            if !lv.is_finite() {
                return Err(numeric("non-finite reconstruction loss"));
            }
            let g = tape.backward(loss)?;
            let mut grads = ev.grads(&ae.encoder.net, &g);
            grads.extend(dv.grads(&ae.decoder, &g));
            let mut ps = ae.encoder.net.params_mut();
            ps.extend(ae.decoder.params_mut());
            adam.step(&mut ps, &grads)?;
            total += lv as f64 * batch.len() as f64;
        }
        losses.push((total / rows.len() as f64) as f32);
    }
    Ok(losses)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::env::{InitMode, ObsMode, PointPush};

    #[test]
    fn reconstruction_loss_falls() {
        let env = PointPush::new(Default::default(), ObsMode::Vector);
        let demos = crate::agent::expert_demos(&env, 3, 0, InitMode::InDist).unwrap();
        let cfg = ReconConfig {
            epochs: 30,
            ..Default::default()
        };
        let mut ae = Autoencoder::new(env.obs_dim(), 2, 8, &cfg).unwrap();
        let l = train_autoencoder(&mut ae, &demos, &cfg).unwrap();
        assert!(l[29] < 0.5 * l[0], "{} -> {}", l[0], l[29]);
        assert_eq!(ae.encoder.latent_dim(), 8);
    }
}
