//! Observation-conditioned action diffusion: schedule, encoder, noise network,
//! DDPM/DDIM samplers with an optional guidance hook, and BC training.

use alloc::vec;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{contract, numeric, shape_err, Result};
use crate::fnv::Fnv64;
use crate::nn::{Activation, Mlp};
use crate::optim::AdamState;
use crate::tape::Tape;
use crate::tensor::Tensor;
use crate::trajectory::{stream_rng, Trajectory};

/// Width of the sinusoidal timestep features.
pub const TIME_EMB_DIM: usize = 16;

/// Squared-cosine offset.
const COSINE_S: f64 = 0.008;
const MAX_BETA: f64 = 0.999;

#[derive(Debug, Clone, PartialEq)]
pub struct DdpmSchedule {
    betas: Vec<f64>,
    alpha_bars: Vec<f64>,
}

impl DdpmSchedule {
    /// Squared-cosine schedule with `k` steps.
    pub fn cosine(k: usize) -> Result<Self> {
        if k == 0 {
            return Err(contract("diffusion step count must be positive"));
        }
        let f = |t: f64| {
            let c = libm::cos((t + COSINE_S) / (1.0 + COSINE_S) * core::f64::consts::FRAC_PI_2);
            c * c
        };
        let mut betas = Vec::with_capacity(k);
        for i in 0..k {
            let t1 = i as f64 / k as f64;
            let t2 = (i + 1) as f64 / k as f64;
            betas.push((1.0 - f(t2) / f(t1)).min(MAX_BETA));
        }
        Self::from_betas(betas)
    }

    pub fn from_betas(betas: Vec<f64>) -> Result<Self> {
        if betas.is_empty() || betas.iter().any(|b| !(*b > 0.0 && *b < 1.0)) {
            return Err(contract("betas must lie in (0, 1)"));
        }
        let mut alpha_bars = Vec::with_capacity(betas.len() + 1);
        alpha_bars.push(1.0);
        let mut acc = 1.0;
        for b in &betas {
            acc *= 1.0 - b;
            alpha_bars.push(acc);
        }
        Ok(Self { betas, alpha_bars })
    }

    pub fn steps(&self) -> usize {
        self.betas.len()
    }

    /// β_k for `k` in `1..=K`.
    pub fn beta(&self, k: usize) -> f64 {
        self.betas[k - 1]
    }

    pub fn alpha(&self, k: usize) -> f64 {
        1.0 - self.betas[k - 1]
    }

    /// ᾱ_k for `k` in `0..=K`; ᾱ_0 = 1.
    pub fn alpha_bar(&self, k: usize) -> f64 {
        self.alpha_bars[k]
    }

    /// Variance of the posterior q(A^{k-1} | A^k, A^0).
    pub fn posterior_variance(&self, k: usize) -> f64 {
        (1.0 - self.alpha_bar(k - 1)) / (1.0 - self.alpha_bar(k)) * self.beta(k)
    }

    /// `√ᾱ_k · x0 + √(1−ᾱ_k) · noise`.
    pub fn add_noise(&self, x0: &[f32], noise: &[f32], k: usize) -> Vec<f32> {
        let a = libm::sqrt(self.alpha_bar(k)) as f32;
        let s = libm::sqrt(1.0 - self.alpha_bar(k)) as f32;
        x0.iter().zip(noise).map(|(x, e)| a * x + s * e).collect()
    }
}

/// Sinusoidal features of the diffusion step.
pub fn timestep_embedding(k: usize) -> [f32; TIME_EMB_DIM] {
    let half = TIME_EMB_DIM / 2;
    let mut out = [0.0; TIME_EMB_DIM];
    for i in 0..half {
        let freq = libm::exp(-libm::log(10_000.0) * i as f64 / half as f64);
        let arg = k as f64 * freq;
        out[i] = libm::sin(arg) as f32;
        out[half + i] = libm::cos(arg) as f32;
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Horizons {
    /// T_o: observation frames fed to the encoder.
    pub obs: usize,
    /// T_p: predicted chunk length.
    pub pred: usize,
    /// T_a: actions executed per replan.
    pub exec: usize,
}

impl Default for Horizons {
    fn default() -> Self {
        Self {
            obs: 2,
            pred: 16,
            exec: 8,
        }
    }
}

impl Horizons {
    pub fn validate(&self) -> Result<()> {
        if self.obs == 0 || self.pred == 0 || self.exec == 0 {
            return Err(contract("horizons must be positive"));
        }
        if self.exec > self.pred {
            return Err(contract("execution horizon exceeds prediction horizon"));
        }
        Ok(())
    }
}

/// Maps a stack of observation frames to a latent vector.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentEncoder {
    pub net: Mlp,
    pub frames: usize,
    pub obs_dim: usize,
}

impl LatentEncoder {
    pub fn new(net: Mlp, frames: usize, obs_dim: usize) -> Result<Self> {
        if net.input_dim() != frames * obs_dim {
            return Err(shape_err(&[frames * obs_dim], &[net.input_dim()]));
        }
        Ok(Self { net, frames, obs_dim })
    }

    pub fn latent_dim(&self) -> usize {
        self.net.output_dim()
    }

    pub fn encode(&self, window: &[&[f32]]) -> Result<Vec<f32>> {
        if window.len() != self.frames {
            return Err(contract("observation window has the wrong frame count"));
        }
        let mut x = Vec::with_capacity(self.frames * self.obs_dim);
        for f in window {
            if f.len() != self.obs_dim {
                return Err(shape_err(&[self.obs_dim], &[f.len()]));
            }
            x.extend_from_slice(f);
        }
        self.net.forward_rows(&x, x.len())
    }

    /// Latent of a single frame, replicated across the stack.
    pub fn encode_frame(&self, obs: &[f32]) -> Result<Vec<f32>> {
        let w: Vec<&[f32]> = vec![obs; self.frames];
        self.encode(&w)
    }

    /// Single-frame latents of many observations, row-major `[n, D]`.
    pub fn encode_frames(&self, obs: &[&[f32]]) -> Result<Vec<f32>> {
        let mut x = Vec::with_capacity(obs.len() * self.frames * self.obs_dim);
        for o in obs {
            if o.len() != self.obs_dim {
                return Err(shape_err(&[self.obs_dim], &[o.len()]));
            }
            for _ in 0..self.frames {
                x.extend_from_slice(o);
            }
        }
        let mut out = Vec::with_capacity(obs.len() * self.latent_dim());
        for chunk in x.chunks(256 * self.frames * self.obs_dim) {
            out.extend(self.net.forward_rows(chunk, self.frames * self.obs_dim)?);
        }
        Ok(out)
    }

    pub fn checksum(&self) -> u64 {
        self.net.checksum()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PolicyConfig {
    pub obs_dim: usize,
    pub horizons: Horizons,
    pub latent_dim: usize,
    pub encoder_hidden: Vec<usize>,
    pub noise_hidden: Vec<usize>,
    pub diffusion_steps: usize,
    pub activation: Activation,
    /// Clamp the sampler's internal estimate of A^0 to the action bounds at
    /// every update. The iterates A^k themselves are never clamped.
    pub clip_sample: bool,
}

impl PolicyConfig {
    pub fn for_obs_dim(obs_dim: usize, latent_dim: usize) -> Self {
        Self {
            obs_dim,
            horizons: Horizons::default(),
            latent_dim,
            encoder_hidden: vec![128],
            noise_hidden: vec![256, 256],
            diffusion_steps: 100,
            activation: Activation::Relu,
            clip_sample: true,
        }
    }

    pub fn chunk_dim(&self) -> usize {
        self.horizons.pred * 2
    }

    fn encoder_widths(&self) -> Vec<usize> {
        let mut w = vec![self.horizons.obs * self.obs_dim];
        w.extend_from_slice(&self.encoder_hidden);
        w.push(self.latent_dim);
        w
    }

    fn noise_widths(&self) -> Vec<usize> {
        let mut w = vec![self.chunk_dim() + self.latent_dim + TIME_EMB_DIM];
        w.extend_from_slice(&self.noise_hidden);
        w.push(self.chunk_dim());
        w
    }
}

/// Where the sampler is when a guidance hook is consulted.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SampleStep {
    /// Diffusion step index of the current iterate `A^k`.
    pub k: usize,
    /// Denoising updates left including this one (1 on the final update).
    pub remaining: usize,
    pub alpha_bar: f64,
}

/// Replaces the noise prediction at selected sampler steps.
pub trait GuidanceHook {
    /// Returns the noise prediction to use for iterate `a_k`; `eps` is the
    /// network's unmodified prediction.
    fn guide(&mut self, step: SampleStep, a_k: &[f32], eps: Vec<f32>) -> Result<Vec<f32>>;
}

/// Hook that returns the prediction unchanged.
pub struct IdentityHook;

impl GuidanceHook for IdentityHook {
    fn guide(&mut self, _step: SampleStep, _a_k: &[f32], eps: Vec<f32>) -> Result<Vec<f32>> {
        Ok(eps)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DiffusionPolicy {
    pub config: PolicyConfig,
    pub encoder: LatentEncoder,
    pub noise_net: Mlp,
    pub schedule: DdpmSchedule,
}

impl DiffusionPolicy {
    pub fn new<R: Rng + ?Sized>(config: PolicyConfig, rng: &mut R) -> Result<Self> {
        config.horizons.validate()?;
        let enc = Mlp::new(&config.encoder_widths(), config.activation, rng)?;
        let noise_net = Mlp::new(&config.noise_widths(), config.activation, rng)?;
        Self::from_parts(config, enc, noise_net)
    }

    pub fn from_parts(config: PolicyConfig, encoder: Mlp, noise_net: Mlp) -> Result<Self> {
        config.horizons.validate()?;
        if encoder.widths() != config.encoder_widths().as_slice() {
            return Err(shape_err(&config.encoder_widths(), encoder.widths()));
        }
        if noise_net.widths() != config.noise_widths().as_slice() {
            return Err(shape_err(&config.noise_widths(), noise_net.widths()));
        }
        let schedule = DdpmSchedule::cosine(config.diffusion_steps)?;
        let encoder = LatentEncoder::new(encoder, config.horizons.obs, config.obs_dim)?;
        Ok(Self {
            config,
            encoder,
            noise_net,
            schedule,
        })
    }

    pub fn horizons(&self) -> Horizons {
        self.config.horizons
    }

    pub fn chunk_dim(&self) -> usize {
        self.config.chunk_dim()
    }

    pub fn encode(&self, window: &[&[f32]]) -> Result<Vec<f32>> {
        self.encoder.encode(window)
    }

    /// ε_θ(A^k, k | z).
    pub fn predict_noise(&self, z: &[f32], a_k: &[f32], k: usize) -> Result<Vec<f32>> {
        if a_k.len() != self.chunk_dim() {
            return Err(shape_err(&[self.chunk_dim()], &[a_k.len()]));
        }
        if z.len() != self.config.latent_dim {
            return Err(shape_err(&[self.config.latent_dim], &[z.len()]));
        }
        let mut x = Vec::with_capacity(self.noise_net.input_dim());
        x.extend_from_slice(a_k);
        x.extend_from_slice(z);
        x.extend_from_slice(&timestep_embedding(k));
        self.noise_net.forward_rows(&x, x.len())
    }

    fn standard_normal<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<f32> {
        (0..self.chunk_dim())
            .map(|_| StandardNormal.sample(rng))
            .collect()
    }

    fn consult(
        &self,
        hook: &mut Option<&mut dyn GuidanceHook>,
        step: SampleStep,
        a: &[f32],
        eps: Vec<f32>,
    ) -> Result<Vec<f32>> {
        match hook {
            None => Ok(eps),
            Some(h) => {
                let out = h.guide(step, a, eps)?;
                if out.len() != self.chunk_dim() {
                    return Err(contract("guidance hook returned a wrongly shaped prediction"));
                }
                Ok(out)
            }
        }
    }

    /// Ancestral DDPM sampling conditioned on latent `z`.
    /// The random stream is consumed identically with or without a hook.
    pub fn sample_ddpm_latent<R: Rng + ?Sized>(
        &self,
        z: &[f32],
        rng: &mut R,
        mut hook: Option<&mut dyn GuidanceHook>,
    ) -> Result<Vec<f32>> {
        let big_k = self.schedule.steps();
        let mut a = self.standard_normal(rng);
        for k in (1..=big_k).rev() {
            let eps = self.predict_noise(z, &a, k)?;
            let step = SampleStep {
                k,
                remaining: k,
                alpha_bar: self.schedule.alpha_bar(k),
            };
            let eps = self.consult(&mut hook, step, &a, eps)?;
            self.posterior_mean(&mut a, &eps, k);
            if k > 1 {
                let sigma = libm::sqrt(self.schedule.posterior_variance(k)) as f32;
                let noise = self.standard_normal(rng);
                for (x, n) in a.iter_mut().zip(&noise) {
                    *x += sigma * n;
                }
            }
        }
        if a.iter().any(|v| !v.is_finite()) {
            return Err(numeric("sampler produced a non-finite action"));
        }
        clamp_chunk(&mut a);
        Ok(a)
    }

    /// Replaces `a` (= A^k) with the posterior mean of A^{k-1} given ε̂.
    fn posterior_mean(&self, a: &mut [f32], eps: &[f32], k: usize) {
        let sc = &self.schedule;
        if self.config.clip_sample {
            let ab = sc.alpha_bar(k);
            let ab_prev = sc.alpha_bar(k - 1);
            let s_ab = libm::sqrt(ab) as f32;
            let s_1ab = libm::sqrt(1.0 - ab) as f32;
            let c0 = (libm::sqrt(ab_prev) * sc.beta(k) / (1.0 - ab)) as f32;
            let ct = (libm::sqrt(sc.alpha(k)) * (1.0 - ab_prev) / (1.0 - ab)) as f32;
            for (x, e) in a.iter_mut().zip(eps) {
                let x0 = ((*x - s_1ab * e) / s_ab).clamp(-1.0, 1.0);
                *x = c0 * x0 + ct * *x;
            }
        } else {
            let c1 = (1.0 / libm::sqrt(sc.alpha(k))) as f32;
            let c2 = (sc.beta(k) / libm::sqrt(1.0 - sc.alpha_bar(k))) as f32;
            for (x, e) in a.iter_mut().zip(eps) {
                *x = c1 * (*x - c2 * e);
            }
        }
    }

    pub fn ddpm_sample<R: Rng + ?Sized>(
        &self,
        window: &[&[f32]],
        rng: &mut R,
        hook: Option<&mut dyn GuidanceHook>,
    ) -> Result<Vec<f32>> {
        let z = self.encode(window)?;
        self.sample_ddpm_latent(&z, rng, hook)
    }

    /// Deterministic DDIM over `n_steps` evenly spaced diffusion steps.
    /// Only the initial noise is drawn from `rng`.
    pub fn sample_ddim_latent<R: Rng + ?Sized>(
        &self,
        z: &[f32],
        n_steps: usize,
        rng: &mut R,
        mut hook: Option<&mut dyn GuidanceHook>,
    ) -> Result<Vec<f32>> {
        let big_k = self.schedule.steps();
        if n_steps == 0 || n_steps > big_k {
            return Err(contract("DDIM step count must be in 1..=K"));
        }
        let ts = ddim_timesteps(big_k, n_steps);
        let mut a = self.standard_normal(rng);
        for i in (0..ts.len()).rev() {
            let k = ts[i];
            let prev = if i == 0 { 0 } else { ts[i - 1] };
            let eps = self.predict_noise(z, &a, k)?;
            let step = SampleStep {
                k,
                remaining: i + 1,
                alpha_bar: self.schedule.alpha_bar(k),
            };
            let eps = self.consult(&mut hook, step, &a, eps)?;
            let ab = self.schedule.alpha_bar(k);
            let ab_prev = self.schedule.alpha_bar(prev);
            let s_ab = libm::sqrt(ab) as f32;
            let s_1ab = libm::sqrt(1.0 - ab) as f32;
            let s_abp = libm::sqrt(ab_prev) as f32;
            let s_1abp = libm::sqrt(1.0 - ab_prev) as f32;
            let clip = self.config.clip_sample;
            for (x, e) in a.iter_mut().zip(&eps) {
                let mut x0 = (*x - s_1ab * e) / s_ab;
                if clip {
                    x0 = x0.clamp(-1.0, 1.0);
                }
                *x = s_abp * x0 + s_1abp * e;
            }
        }
        if a.iter().any(|v| !v.is_finite()) {
            return Err(numeric("sampler produced a non-finite action"));
        }
        clamp_chunk(&mut a);
        Ok(a)
    }

    pub fn ddim_sample<R: Rng + ?Sized>(
        &self,
        window: &[&[f32]],
        n_steps: usize,
        rng: &mut R,
        hook: Option<&mut dyn GuidanceHook>,
    ) -> Result<Vec<f32>> {
        let z = self.encode(window)?;
        self.sample_ddim_latent(&z, n_steps, rng, hook)
    }

    pub fn checksum(&self) -> u64 {
        let mut h = Fnv64::new();
        h.write(&self.encoder.checksum().to_le_bytes());
        h.write(&self.noise_net.checksum().to_le_bytes());
        h.finish()
    }
}

/// Evenly spaced diffusion steps `t_1 < … < t_n = K`.
pub fn ddim_timesteps(k: usize, n: usize) -> Vec<usize> {
    (1..=n).map(|i| (i * k) / n).collect()
}

fn clamp_chunk(a: &mut [f32]) {
    for v in a {
        *v = v.clamp(-1.0, 1.0);
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BcTrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f32,
    pub seed: u64,
    /// Epochs (1-based, after completion) at which a snapshot is kept.
    pub checkpoints: Vec<usize>,
    /// Anneal the learning rate to zero along a half cosine over all steps.
    pub cosine_decay: bool,
}

impl Default for BcTrainConfig {
    fn default() -> Self {
        Self {
            epochs: 500,
            batch_size: 64,
            lr: 1e-4,
            seed: 0,
            checkpoints: Vec::new(),
            cosine_decay: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct TrainRunLog {
    pub epoch_loss: Vec<f32>,
    pub checkpoint_epochs: Vec<usize>,
    pub seed: u64,
}

/// Training windows `(trajectory, t)` for every executed action.
fn bc_windows(demos: &[Trajectory]) -> Vec<(usize, usize)> {
    let mut w = Vec::new();
    for (i, d) in demos.iter().enumerate() {
        for t in 0..d.len() {
            w.push((i, t));
        }
    }
    w
}

/// One optimizer step of the denoising objective on the given windows.
/// Returns the batch loss.
fn bc_step<R: Rng + ?Sized>(
    policy: &mut DiffusionPolicy,
    adam: &mut AdamState,
    demos: &[Trajectory],
    batch: &[(usize, usize)],
    rng: &mut R,
) -> Result<f32> {
    let h = policy.horizons();
    let b = batch.len();
    let od = policy.config.obs_dim;
    let cd = policy.chunk_dim();
    let big_k = policy.schedule.steps();

    let mut obs = Vec::with_capacity(b * h.obs * od);
    let mut noisy = Vec::with_capacity(b * cd);
    let mut target = Vec::with_capacity(b * cd);
    let mut temb = Vec::with_capacity(b * TIME_EMB_DIM);
    for &(i, t) in batch {
        for f in demos[i].obs_window(t, h.obs) {
            obs.extend_from_slice(f);
        }
        let chunk = demos[i].action_chunk(t, h.pred);
        let k = rng.random_range(1..=big_k);
        let eps: Vec<f32> = (0..cd).map(|_| StandardNormal.sample(rng)).collect();
        noisy.extend(policy.schedule.add_noise(&chunk, &eps, k));
        target.extend(eps);
        temb.extend_from_slice(&timestep_embedding(k));
    }

    let mut tape: Tape<f32> = Tape::new();
    let ev = policy.encoder.net.bind(&mut tape, true);
    let nv = policy.noise_net.bind(&mut tape, true);
    let x_obs = tape.constant(Tensor::new(&[b, h.obs * od], obs)?);
    let z = policy.encoder.net.forward_on_tape(&mut tape, &ev, x_obs)?;
    let x_a = tape.constant(Tensor::new(&[b, cd], noisy)?);
    let x_t = tape.constant(Tensor::new(&[b, TIME_EMB_DIM], temb)?);
    let inp = tape.concat_cols(&[x_a, z, x_t])?;
    let pred = policy.noise_net.forward_on_tape(&mut tape, &nv, inp)?;
    let y = tape.constant(Tensor::new(&[b, cd], target)?);
    let diff = tape.sub(pred, y)?;
    let loss = tape.mean_squares(diff);
    let loss_val = tape.value(loss).data()[0];
    if !loss_val.is_finite() {
        return Err(numeric("non-finite BC loss"));
    }
    let g = tape.backward(loss)?;
    let mut grads = ev.grads(&policy.encoder.net, &g);
    grads.extend(nv.grads(&policy.noise_net, &g));
    let mut params = policy.encoder.net.params_mut();
    params.extend(policy.noise_net.params_mut());
    adam.step(&mut params, &grads)?;
    Ok(loss_val)
}

fn policy_adam(policy: &DiffusionPolicy, lr: f32) -> AdamState {
    let mut p = policy.encoder.net.params();
    p.extend(policy.noise_net.params());
    AdamState::new(&p, lr)
}

/// Trains encoder and noise network jointly with the denoising objective.
/// Returns the log and a snapshot for each requested checkpoint epoch.
pub fn bc_train(
    policy: &mut DiffusionPolicy,
    demos: &[Trajectory],
    cfg: &BcTrainConfig,
) -> Result<(TrainRunLog, Vec<(usize, DiffusionPolicy)>)> {
    let mut windows = bc_windows(demos);
    if windows.is_empty() {
        return Err(contract("BC dataset is empty"));
    }
    if cfg.batch_size == 0 {
        return Err(contract("batch size must be positive"));
    }
    if cfg.checkpoints.windows(2).any(|w| w[0] >= w[1]) {
        return Err(contract("checkpoint epochs must be strictly increasing"));
    }
    for d in demos {
        if d.observations.iter().any(|o| o.len() != policy.config.obs_dim) {
            return Err(contract("demonstration observation width does not match the policy"));
        }
    }
    let mut rng = stream_rng(cfg.seed, 11);
    let mut adam = policy_adam(policy, cfg.lr);
    let mut log = TrainRunLog {
        seed: cfg.seed,
        ..Default::default()
    };
    let mut snaps = Vec::new();
    let per_epoch = windows.len().div_ceil(cfg.batch_size);
    let total_steps = (per_epoch * cfg.epochs) as f64;
    let mut step = 0usize;
    for epoch in 1..=cfg.epochs {
        windows.shuffle(&mut rng);
        let mut total = 0.0f64;
        let mut count = 0usize;
        for batch in windows.chunks(cfg.batch_size) {
            if cfg.cosine_decay {
                let c = libm::cos(core::f64::consts::PI * step as f64 / total_steps);
                adam.lr = (cfg.lr as f64 * 0.5 * (1.0 + c)) as f32;
            }
            step += 1;
            let l = bc_step(policy, &mut adam, demos, batch, &mut rng)?;
            total += l as f64 * batch.len() as f64;
            count += batch.len();
        }
        log.epoch_loss.push((total / count as f64) as f32);
        if cfg.checkpoints.contains(&epoch) {
            log.checkpoint_epochs.push(epoch);
            snaps.push((epoch, policy.clone()));
        }
    }
    Ok((log, snaps))
}

/// Repeats one fixed batch for `steps` updates; returns the loss sequence.
pub fn bc_overfit(
    policy: &mut DiffusionPolicy,
    demos: &[Trajectory],
    steps: usize,
    lr: f32,
    seed: u64,
) -> Result<Vec<f32>> {
    let windows = bc_windows(demos);
    if windows.is_empty() {
        return Err(contract("BC dataset is empty"));
    }
    let mut adam = policy_adam(policy, lr);
    let mut out = Vec::with_capacity(steps);
    for _ in 0..steps {
        let mut rng = stream_rng(seed, 12);
        out.push(bc_step(policy, &mut adam, demos, &windows, &mut rng)?);
    }
    Ok(out)
}
