//! Flat run configuration: a named preset, optionally overlaid by a TOML
//! file and `key=value` overrides. Unknown keys are rejected.

use std::path::{Path, PathBuf};

use lpb_core::agent::Sampler;
use lpb_core::barrier::{GuidanceConfig, IndexBackend};
use lpb_core::diffusion::{BcTrainConfig, Horizons, PolicyConfig};
use lpb_core::dynamics::DynTrainConfig;
use lpb_core::env::{EnvConfig, InitMode, ObsMode, PerturbSpec, PointPush};
use lpb_core::harness::{BarrierBuild, EvalSpec, Method, SweepAxis};
use lpb_core::nn::Activation;
use lpb_core::rollout::{schedule_epochs, RolloutSchedule, Source};
use serde::{Deserialize, Serialize};

use crate::codec::{init_mode_from_name, obs_mode_from_name};
use crate::error::{Error, Result};

pub const PRESETS: [&str; 3] = ["pointpush", "paper-pusht", "smoke"];
pub const OUT_DIR_ENV: &str = "LPB_OUT_DIR";
pub const RESOLVED_NAME: &str = "config.resolved.toml";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub preset: String,
    pub seed: u64,
    /// Empty means `$LPB_OUT_DIR`, else `runs`.
    pub out_dir: String,

    pub obs_mode: String,
    pub goal_x: f32,
    pub goal_y: f32,
    pub block_radius: f32,
    pub block_angle_range: f32,
    pub agent_spread_x: f32,
    pub agent_spread_y: f32,
    pub ood_inner: f32,
    pub ood_outer: f32,
    pub episode_cap: u32,

    pub obs_horizon: usize,
    pub pred_horizon: usize,
    pub exec_horizon: usize,
    pub latent_dim: usize,
    pub encoder_hidden: Vec<usize>,
    pub noise_hidden: Vec<usize>,
    pub diffusion_steps: usize,
    pub clip_sample: bool,

    pub n_demos: usize,
    pub bc_epochs: usize,
    pub bc_batch: usize,
    pub bc_lr: f32,
    pub bc_cosine: bool,

    pub ckpt_start: usize,
    pub ckpt_interval: usize,
    pub ckpt_final: usize,
    pub rollouts_per_ckpt: usize,

    pub dyn_hidden: Vec<usize>,
    pub dyn_epochs: usize,
    pub dyn_batch: usize,
    pub dyn_lr: f32,
    /// Probability of drawing an expert window; absent means uniform over
    /// the concatenated data.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dyn_expert_weight: Option<f32>,

    pub index_backend: String,
    pub eta: f32,
    /// Fixed τ (squared latent distance); absent means calibrate.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tau: Option<f32>,
    pub tau_percentile: f64,
    pub k_guide: usize,
    /// `ddpm` or `ddim-N`.
    pub sampler: String,
    pub mpc_candidates: usize,
    pub gd_steps: usize,
    pub gd_step_size: f32,

    pub method: String,
    pub episodes: usize,
    pub init_mode: String,
    pub perturb_p: f32,
    pub perturb_sigma: f32,
    pub eval_seed: u64,
    /// Evaluate the final `k` checkpoints of the schedule.
    pub eval_last_k: usize,

    pub curate_source: String,
    pub curate_noise_p: f32,
    pub eps_episodes: usize,

    pub sweep_axis: String,
    pub sweep_values: Vec<f64>,

    pub recon_epochs: usize,
}

impl RunConfig {
    pub fn pointpush() -> Self {
        let env = EnvConfig::default();
        Self {
            preset: "pointpush".into(),
            seed: 0,
            out_dir: String::new(),
            obs_mode: "vector".into(),
            goal_x: env.goal[0],
            goal_y: env.goal[1],
            block_radius: env.block_radius,
            block_angle_range: env.block_angle_range,
            agent_spread_x: env.agent_spread[0],
            agent_spread_y: env.agent_spread[1],
            ood_inner: env.ood_inner,
            ood_outer: env.ood_outer,
            episode_cap: env.episode_cap,
            obs_horizon: 2,
            pred_horizon: 16,
            exec_horizon: 8,
            latent_dim: 32,
            encoder_hidden: vec![128],
            noise_hidden: vec![256, 256],
            diffusion_steps: 100,
            clip_sample: true,
            n_demos: 40,
            bc_epochs: 200,
            bc_batch: 16,
            bc_lr: 1e-3,
            bc_cosine: false,
            ckpt_start: 50,
            ckpt_interval: 25,
            ckpt_final: 200,
            rollouts_per_ckpt: 30,
            dyn_hidden: vec![256, 256],
            dyn_epochs: 100,
            dyn_batch: 64,
            dyn_lr: 5e-4,
            dyn_expert_weight: None,
            index_backend: "kdtree".into(),
            eta: 32.0,
            tau: None,
            tau_percentile: 5.0,
            k_guide: 10,
            sampler: "ddpm".into(),
            mpc_candidates: 16,
            gd_steps: 10,
            gd_step_size: 0.05,
            method: "lpb".into(),
            episodes: 50,
            init_mode: "ood".into(),
            perturb_p: 0.0,
            perturb_sigma: 0.3,
            eval_seed: 100_000,
            eval_last_k: 1,
            curate_source: "mixed".into(),
            curate_noise_p: 0.3,
            eps_episodes: 30,
            sweep_axis: "perturb-p".into(),
            sweep_values: vec![0.0, 0.1, 0.2, 0.3, 0.4],
            recon_epochs: 100,
        }
    }

    pub fn preset(name: &str) -> Result<Self> {
        let mut c = Self::pointpush();
        match name {
            "pointpush" => {}
            "paper-pusht" => {
                c.preset = name.into();
                c.n_demos = 41;
                c.bc_epochs = 500;
                c.bc_batch = 64;
                c.bc_lr = 1e-4;
                c.ckpt_start = 150;
                c.ckpt_interval = 40;
                c.ckpt_final = 470;
                c.rollouts_per_ckpt = 30;
                c.eta = 0.05;
                c.tau = Some(3.2);
                c.eval_last_k = 3;
            }
            "smoke" => {
                c.preset = name.into();
                c.n_demos = 10;
                c.bc_epochs = 20;
                c.ckpt_start = 10;
                c.ckpt_interval = 5;
                c.ckpt_final = 20;
                c.rollouts_per_ckpt = 4;
                c.dyn_epochs = 10;
                c.episodes = 20;
                c.eps_episodes = 4;
                c.recon_epochs = 10;
                c.sweep_values = vec![0.0, 0.3];
            }
            _ => return Err(Error::Config(format!("unknown preset {name:?}; known: {}", PRESETS.join(", ")))),
        }
        Ok(c)
    }

    /// Preset, then the file at `file`, then `key=value` overrides.
    pub fn resolve(preset: &str, file: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let base = Self::preset(preset)?;
        let mut table = toml::Table::try_from(&base).map_err(|e| Error::Config(e.to_string()))?;
        if let Some(p) = file {
            let text = std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
            let t: toml::Table = text.parse().map_err(|e: toml::de::Error| Error::Config(format!("{}: {e}", p.display())))?;
            for (k, v) in t {
                table.insert(k, v);
            }
        }
        for o in overrides {
            let (k, v) = o
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("override {o:?} is not key=value")))?;
            let k = k.trim();
            let v = v.trim();
            let parsed: toml::Value = format!("x = {v}")
                .parse::<toml::Table>()
                .ok()
                .and_then(|mut t| t.remove("x"))
                .unwrap_or_else(|| toml::Value::String(v.to_string()));
            table.insert(k.to_string(), parsed);
        }
        let cfg: RunConfig = table.try_into().map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.env_config()?;
        self.policy_config()?.horizons.validate()?;
        self.schedule().validate()?;
        self.guidance(self.tau.unwrap_or(f32::INFINITY))?.validate(self.diffusion_steps)?;
        self.method()?;
        self.init()?;
        self.source()?;
        self.axis()?;
        self.backend()?;
        if self.eval_last_k == 0 {
            return Err(Error::Config("eval_last_k must be at least 1".into()));
        }
        Ok(())
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("flat config always serializes")
    }

    pub fn out_root(&self) -> PathBuf {
        if !self.out_dir.is_empty() {
            return PathBuf::from(&self.out_dir);
        }
        std::env::var_os(OUT_DIR_ENV).map(PathBuf::from).unwrap_or_else(|| PathBuf::from("runs"))
    }

    pub fn obs_mode(&self) -> Result<ObsMode> {
        obs_mode_from_name(&self.obs_mode).ok_or_else(|| Error::Config(format!("unknown obs_mode {:?}", self.obs_mode)))
    }

    pub fn env_config(&self) -> Result<EnvConfig> {
        self.obs_mode()?;
        Ok(EnvConfig {
            goal: [self.goal_x, self.goal_y],
            block_radius: self.block_radius,
            block_angle_range: self.block_angle_range,
            agent_spread: [self.agent_spread_x, self.agent_spread_y],
            ood_inner: self.ood_inner,
            ood_outer: self.ood_outer,
            episode_cap: self.episode_cap,
            ..EnvConfig::default()
        })
    }

    pub fn env(&self) -> Result<PointPush> {
        Ok(PointPush::new(self.env_config()?, self.obs_mode()?))
    }

    pub fn policy_config(&self) -> Result<PolicyConfig> {
        let env = self.env()?;
        Ok(PolicyConfig {
            obs_dim: env.obs_dim(),
            horizons: Horizons {
                obs: self.obs_horizon,
                pred: self.pred_horizon,
                exec: self.exec_horizon,
            },
            latent_dim: self.latent_dim,
            encoder_hidden: self.encoder_hidden.clone(),
            noise_hidden: self.noise_hidden.clone(),
            diffusion_steps: self.diffusion_steps,
            activation: Activation::Relu,
            clip_sample: self.clip_sample,
        })
    }

    pub fn schedule(&self) -> RolloutSchedule {
        RolloutSchedule {
            t0: self.ckpt_start,
            dt: self.ckpt_interval,
            t_final: self.ckpt_final,
            n: self.rollouts_per_ckpt,
        }
    }

    pub fn checkpoint_epochs(&self) -> Result<Vec<usize>> {
        Ok(schedule_epochs(&self.schedule())?)
    }

    /// The final `eval_last_k` checkpoint epochs.
    pub fn eval_epochs(&self) -> Result<Vec<usize>> {
        let e = self.checkpoint_epochs()?;
        Ok(e[e.len().saturating_sub(self.eval_last_k)..].to_vec())
    }

    pub fn bc_config(&self) -> Result<BcTrainConfig> {
        let mut checkpoints = self.checkpoint_epochs()?;
        if self.bc_epochs < *checkpoints.last().unwrap() {
            return Err(Error::Config(format!(
                "bc_epochs {} ends before the last checkpoint {}",
                self.bc_epochs,
                checkpoints.last().unwrap()
            )));
        }
        checkpoints.dedup();
        Ok(BcTrainConfig {
            epochs: self.bc_epochs,
            batch_size: self.bc_batch,
            lr: self.bc_lr,
            seed: self.seed,
            checkpoints,
            cosine_decay: self.bc_cosine,
        })
    }

    pub fn dyn_config(&self) -> DynTrainConfig {
        DynTrainConfig {
            epochs: self.dyn_epochs,
            batch_size: self.dyn_batch,
            lr: self.dyn_lr,
            seed: self.seed,
            expert_weight: self.dyn_expert_weight,
        }
    }

    pub fn backend(&self) -> Result<IndexBackend> {
        Ok(IndexBackend::from_name(&self.index_backend)?)
    }

    pub fn barrier_build(&self) -> Result<BarrierBuild> {
        Ok(BarrierBuild {
            pred_horizon: self.pred_horizon,
            hidden: self.dyn_hidden.clone(),
            dyn_cfg: self.dyn_config(),
            tau_percentile: self.tau_percentile,
            backend: self.backend()?,
            init_seed: self.seed,
        })
    }

    pub fn sampler(&self) -> Result<Sampler> {
        parse_sampler(&self.sampler)
    }

    pub fn guidance(&self, tau: f32) -> Result<GuidanceConfig> {
        Ok(GuidanceConfig {
            eta: self.eta,
            tau,
            k_guide: self.k_guide,
            sampler: self.sampler()?,
        })
    }

    pub fn method(&self) -> Result<Method> {
        Ok(Method::from_name(&self.method)?)
    }

    pub fn init(&self) -> Result<InitMode> {
        init_mode_from_name(&self.init_mode).ok_or_else(|| Error::Config(format!("unknown init_mode {:?}", self.init_mode)))
    }

    pub fn source(&self) -> Result<Source> {
        Ok(Source::from_name(&self.curate_source)?)
    }

    pub fn axis(&self) -> Result<SweepAxis> {
        Ok(SweepAxis::from_name(&self.sweep_axis)?)
    }

    pub fn perturbation(&self) -> Result<Option<PerturbSpec>> {
        if self.perturb_p == 0.0 {
            return Ok(None);
        }
        Ok(Some(PerturbSpec::new(self.perturb_p, self.perturb_sigma, self.eval_seed)?))
    }

    pub fn eval_spec(&self) -> Result<EvalSpec> {
        Ok(EvalSpec {
            method: self.method()?,
            episodes: self.episodes,
            init_mode: self.init()?,
            perturbation: self.perturbation()?,
            seed_base: self.eval_seed,
            checkpoints: self.eval_epochs()?,
        })
    }
}

pub fn parse_sampler(s: &str) -> Result<Sampler> {
    if s == "ddpm" {
        return Ok(Sampler::Ddpm);
    }
    if let Some(n) = s.strip_prefix("ddim-") {
        if let Ok(n) = n.parse::<usize>() {
            if n > 0 {
                return Ok(Sampler::Ddim(n));
            }
        }
    }
    Err(Error::Config(format!("unknown sampler {s:?}; use ddpm or ddim-N")))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_validate_and_round_trip() {
        for p in PRESETS {
            let c = RunConfig::preset(p).unwrap();
            c.validate().unwrap();
            let back: RunConfig = toml::from_str(&c.to_toml()).unwrap();
            assert_eq!(back, c);
        }
    }

    #[test]
    fn unknown_key_rejected() {
        let e = RunConfig::resolve("smoke", None, &["learning_rate=3".into()]).unwrap_err();
        assert_eq!(e.kind(), "config");
    }

    #[test]
    fn overrides_parse_values() {
        let c = RunConfig::resolve("pointpush", None, &["eta=0.2".into(), "method=expert-bc".into(), "tau=1.5".into()])
            .unwrap();
        assert_eq!(c.eta, 0.2);
        assert_eq!(c.method, "expert-bc");
        assert_eq!(c.tau, Some(1.5));
    }

    #[test]
    fn paper_pusht_values() {
        let c = RunConfig::preset("paper-pusht").unwrap();
        assert_eq!((c.exec_horizon, c.pred_horizon, c.diffusion_steps), (8, 16, 100));
        assert_eq!((c.eta, c.tau), (0.05, Some(3.2)));
        assert_eq!(c.schedule().total_trajectories().unwrap(), 270);
    }

    #[test]
    fn sampler_names() {
        assert_eq!(parse_sampler("ddim-16").unwrap(), Sampler::Ddim(16));
        assert!(parse_sampler("ddim-0").is_err());
        assert!(parse_sampler("euler").is_err());
    }
}
