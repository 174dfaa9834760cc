//! Typed artifacts on top of the container: what goes into the metadata and
//! in which order the float blocks are written.
//!
//! * policy: encoder layers then noise-network layers, each as weight then
//!   bias.
//! * dynamics: predictor layers, weight then bias.
//! * index: one block of `n × dim` latents.
//! * dataset: per trajectory, observations, states (9 values per state:
//!   agent xy, block xy, angle, goal xy, goal angle, step), actions and
//!   perturbation flags (0 or 1).
//! * report: no blocks; everything is in the metadata. Wall-clock time is
//!   not part of the file.

use std::path::Path;

use lpb_core::barrier::{ExpertLatentIndex, IndexBackend};
use lpb_core::diffusion::{DiffusionPolicy, Horizons, PolicyConfig};
use lpb_core::dynamics::DynamicsModel;
use lpb_core::env::{EnvState, InitMode, ObsMode};
use lpb_core::harness::{CheckpointReport, EpisodeRecord, Method, SuccessReport};
use lpb_core::nn::{Activation, Mlp};
use lpb_core::rollout::{CuratedDataset, Origin, Provenance, Source};
use lpb_core::trajectory::Trajectory;
use serde_json::{json, Value};

use crate::artifact::{checksum, write_atomic, Container, FormatError, Kind};
use crate::error::{Error, Result};

const STATE_WIDTH: usize = 9;

/// Metadata text always starts right after the fixed 11-byte header.
const META_OFFSET: usize = 11;

fn meta_err(msg: impl Into<String>) -> FormatError {
    FormatError::Metadata {
        offset: META_OFFSET,
        msg: msg.into(),
    }
}

fn get<'a>(v: &'a Value, key: &str) -> std::result::Result<&'a Value, FormatError> {
    v.get(key).ok_or_else(|| meta_err(format!("metadata lacks {key:?}")))
}

fn get_u64(v: &Value, key: &str) -> std::result::Result<u64, FormatError> {
    get(v, key)?
        .as_u64()
        .ok_or_else(|| meta_err(format!("metadata {key:?} is not an unsigned integer")))
}

fn get_usize(v: &Value, key: &str) -> std::result::Result<usize, FormatError> {
    get_u64(v, key).map(|x| x as usize)
}

fn get_str<'a>(v: &'a Value, key: &str) -> std::result::Result<&'a str, FormatError> {
    get(v, key)?
        .as_str()
        .ok_or_else(|| meta_err(format!("metadata {key:?} is not a string")))
}

fn get_bool(v: &Value, key: &str) -> std::result::Result<bool, FormatError> {
    get(v, key)?
        .as_bool()
        .ok_or_else(|| meta_err(format!("metadata {key:?} is not a boolean")))
}

fn get_f64(v: &Value, key: &str) -> std::result::Result<f64, FormatError> {
    get(v, key)?
        .as_f64()
        .ok_or_else(|| meta_err(format!("metadata {key:?} is not a number")))
}

fn get_usizes(v: &Value, key: &str) -> std::result::Result<Vec<usize>, FormatError> {
    get(v, key)?
        .as_array()
        .and_then(|a| a.iter().map(|x| x.as_u64().map(|u| u as usize)).collect::<Option<Vec<_>>>())
        .ok_or_else(|| meta_err(format!("metadata {key:?} is not a list of unsigned integers")))
}

fn mlp_meta(net: &Mlp) -> Value {
    json!({ "widths": net.widths(), "activation": net.activation().name() })
}

fn push_mlp(net: &Mlp, blocks: &mut Vec<Vec<f32>>) {
    for p in net.params() {
        blocks.push(p.data().to_vec());
    }
}

/// Rebuilds an MLP described by `meta` from blocks starting at `*next`.
fn read_mlp(c: &Container, meta: &Value, next: &mut usize, what: &str) -> std::result::Result<Mlp, FormatError> {
    let widths = get_usizes(meta, "widths")?;
    let act = Activation::from_name(get_str(meta, "activation")?).map_err(|e| meta_err(e.to_string()))?;
    let mut net = Mlp::zeros(&widths, act).map_err(|e| meta_err(format!("{what}: {e}")))?;
    for p in net.params_mut() {
        let b = c.check_block(*next, p.len(), what)?;
        p.data_mut().copy_from_slice(b);
        *next += 1;
    }
    Ok(net)
}

fn finish_read(c: &Container, next: usize) -> std::result::Result<(), FormatError> {
    if next != c.blocks.len() {
        return Err(FormatError::Shape {
            offset: c.offset_of(next),
            msg: format!("metadata accounts for {next} blocks, payload has {}", c.blocks.len()),
        });
    }
    Ok(())
}

/// A policy checkpoint with the epoch and training seed that produced it.
#[derive(Debug, Clone, PartialEq)]
pub struct PolicyFile {
    pub policy: DiffusionPolicy,
    pub epoch: usize,
    pub seed: u64,
}

impl PolicyFile {
    pub fn to_container(&self) -> Container {
        let cfg = &self.policy.config;
        let meta = json!({
            "epoch": self.epoch,
            "seed": self.seed,
            "obs_dim": cfg.obs_dim,
            "obs_horizon": cfg.horizons.obs,
            "pred_horizon": cfg.horizons.pred,
            "exec_horizon": cfg.horizons.exec,
            "latent_dim": cfg.latent_dim,
            "encoder_hidden": cfg.encoder_hidden,
            "noise_hidden": cfg.noise_hidden,
            "diffusion_steps": cfg.diffusion_steps,
            "activation": cfg.activation.name(),
            "clip_sample": cfg.clip_sample,
            "encoder": mlp_meta(&self.policy.encoder.net),
            "noise_net": mlp_meta(&self.policy.noise_net),
            "checksum": self.policy.checksum(),
        });
        let mut blocks = Vec::new();
        push_mlp(&self.policy.encoder.net, &mut blocks);
        push_mlp(&self.policy.noise_net, &mut blocks);
        Container::new(Kind::Policy, meta, blocks)
    }

    pub fn from_container(c: &Container) -> Result<Self> {
        c.expect_kind(Kind::Policy)?;
        let m = &c.meta;
        let config = PolicyConfig {
            obs_dim: get_usize(m, "obs_dim")?,
            horizons: Horizons {
                obs: get_usize(m, "obs_horizon")?,
                pred: get_usize(m, "pred_horizon")?,
                exec: get_usize(m, "exec_horizon")?,
            },
            latent_dim: get_usize(m, "latent_dim")?,
            encoder_hidden: get_usizes(m, "encoder_hidden")?,
            noise_hidden: get_usizes(m, "noise_hidden")?,
            diffusion_steps: get_usize(m, "diffusion_steps")?,
            activation: Activation::from_name(get_str(m, "activation")?)?,
            clip_sample: get_bool(m, "clip_sample")?,
        };
        let mut next = 0;
        let enc = read_mlp(c, get(m, "encoder")?, &mut next, "encoder")?;
        let noise = read_mlp(c, get(m, "noise_net")?, &mut next, "noise network")?;
        finish_read(c, next)?;
        Ok(Self {
            policy: DiffusionPolicy::from_parts(config, enc, noise)?,
            epoch: get_usize(m, "epoch")?,
            seed: get_u64(m, "seed")?,
        })
    }
}

pub fn dynamics_to_container(d: &DynamicsModel) -> Container {
    let meta = json!({
        "latent_dim": d.latent_dim,
        "pred_horizon": d.pred_horizon,
        "encoder_checksum": d.encoder_checksum,
        "predictor": mlp_meta(&d.predictor),
    });
    let mut blocks = Vec::new();
    push_mlp(&d.predictor, &mut blocks);
    Container::new(Kind::Dynamics, meta, blocks)
}

pub fn dynamics_from_container(c: &Container) -> Result<DynamicsModel> {
    c.expect_kind(Kind::Dynamics)?;
    let m = &c.meta;
    let mut next = 0;
    let pred = read_mlp(c, get(m, "predictor")?, &mut next, "predictor")?;
    finish_read(c, next)?;
    Ok(DynamicsModel::from_predictor(
        pred,
        get_usize(m, "latent_dim")?,
        get_usize(m, "pred_horizon")?,
        get_u64(m, "encoder_checksum")?,
    )?)
}

pub fn index_to_container(idx: &ExpertLatentIndex) -> Container {
    let meta = json!({
        "dim": idx.dim(),
        "points": idx.len(),
        "backend": idx.backend().name(),
        "encoder_checksum": idx.encoder_checksum,
    });
    Container::new(Kind::Index, meta, vec![idx.points().to_vec()])
}

pub fn index_from_container(c: &Container) -> Result<ExpertLatentIndex> {
    c.expect_kind(Kind::Index)?;
    let m = &c.meta;
    let dim = get_usize(m, "dim")?;
    let n = get_usize(m, "points")?;
    let pts = c.check_block(0, n * dim, "expert latents")?.to_vec();
    finish_read(c, 1)?;
    let mut idx = ExpertLatentIndex::build(pts, dim, IndexBackend::from_name(get_str(m, "backend")?)?)?;
    idx.encoder_checksum = get_u64(m, "encoder_checksum")?;
    Ok(idx)
}

fn obs_mode_name(m: ObsMode) -> &'static str {
    match m {
        ObsMode::Vector => "vector",
        ObsMode::Grid => "grid",
    }
}

pub fn obs_mode_from_name(s: &str) -> Option<ObsMode> {
    match s {
        "vector" => Some(ObsMode::Vector),
        "grid" => Some(ObsMode::Grid),
        _ => None,
    }
}

pub fn init_mode_name(m: InitMode) -> &'static str {
    match m {
        InitMode::InDist => "in-dist",
        InitMode::Ood => "ood",
    }
}

pub fn init_mode_from_name(s: &str) -> Option<InitMode> {
    match s {
        "in-dist" => Some(InitMode::InDist),
        "ood" => Some(InitMode::Ood),
        _ => None,
    }
}

fn state_values(s: &EnvState) -> [f32; STATE_WIDTH] {
    [
        s.agent[0],
        s.agent[1],
        s.block[0],
        s.block[1],
        s.angle,
        s.goal[0],
        s.goal[1],
        s.goal_angle,
        s.step as f32,
    ]
}

fn state_from(v: &[f32]) -> EnvState {
    EnvState {
        agent: [v[0], v[1]],
        block: [v[2], v[3]],
        angle: v[4],
        goal: [v[5], v[6]],
        goal_angle: v[7],
        step: v[8] as u32,
    }
}

/// A curated dataset with the observation width it was recorded at.
#[derive(Debug, Clone, PartialEq)]
pub struct DatasetFile {
    pub obs_dim: usize,
    pub obs_mode: ObsMode,
    pub data: CuratedDataset,
}

impl DatasetFile {
    pub fn to_container(&self) -> Container {
        let mut trajs = Vec::new();
        let mut blocks = Vec::new();
        for (t, p) in self.data.trajectories.iter().zip(&self.data.provenance) {
            let (origin, id) = match p.origin {
                Origin::Demo(i) => ("demo", i),
                Origin::Checkpoint(e) => ("checkpoint", e),
            };
            trajs.push(json!({
                "frames": t.observations.len(),
                "steps": t.actions.len(),
                "success": t.success,
                "origin": origin,
                "origin_id": id,
                "seed": p.seed,
                "provenance_success": p.success,
            }));
            blocks.push(t.observations.concat());
            blocks.push(t.states.iter().flat_map(state_values).collect());
            blocks.push(t.actions.iter().flat_map(|a| *a).collect());
            blocks.push(t.perturbed.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect());
        }
        let meta = json!({
            "source": self.data.source.name(),
            "obs_dim": self.obs_dim,
            "obs_mode": obs_mode_name(self.obs_mode),
            "trajectories": trajs,
        });
        Container::new(Kind::Dataset, meta, blocks)
    }

    pub fn from_container(c: &Container) -> Result<Self> {
        c.expect_kind(Kind::Dataset)?;
        let m = &c.meta;
        let obs_dim = get_usize(m, "obs_dim")?;
        let obs_mode =
            obs_mode_from_name(get_str(m, "obs_mode")?).ok_or_else(|| meta_err("unknown observation mode"))?;
        let source = Source::from_name(get_str(m, "source")?)?;
        let list = get(m, "trajectories")?
            .as_array()
            .ok_or_else(|| meta_err("metadata \"trajectories\" is not a list"))?;
        let mut data = CuratedDataset {
            source,
            trajectories: Vec::with_capacity(list.len()),
            provenance: Vec::with_capacity(list.len()),
        };
        let mut next = 0;
        for t in list {
            let frames = get_usize(t, "frames")?;
            let steps = get_usize(t, "steps")?;
            let obs = c.check_block(next, frames * obs_dim, "observations")?;
            let states = c.check_block(next + 1, frames * STATE_WIDTH, "states")?;
            let actions = c.check_block(next + 2, steps * 2, "actions")?;
            let flags = c.check_block(next + 3, steps, "perturbation flags")?;
            next += 4;
            let observations = if obs_dim == 0 {
                vec![Vec::new(); frames]
            } else {
                obs.chunks_exact(obs_dim).map(|o| o.to_vec()).collect()
            };
            data.trajectories.push(Trajectory {
                obs_mode,
                observations,
                states: states.chunks_exact(STATE_WIDTH).map(state_from).collect(),
                actions: actions.chunks_exact(2).map(|a| [a[0], a[1]]).collect(),
                perturbed: flags.iter().map(|&f| f != 0.0).collect(),
                success: get_bool(t, "success")?,
            });
            let id = get_usize(t, "origin_id")?;
            let origin = match get_str(t, "origin")? {
                "demo" => Origin::Demo(id),
                "checkpoint" => Origin::Checkpoint(id),
                o => return Err(meta_err(format!("unknown origin {o:?}")).into()),
            };
            data.provenance.push(Provenance {
                origin,
                seed: get_u64(t, "seed")?,
                success: get_bool(t, "provenance_success")?,
            });
        }
        finish_read(c, next)?;
        Ok(Self { obs_dim, obs_mode, data })
    }
}

pub fn report_to_container(r: &SuccessReport) -> Container {
    let cks: Vec<Value> = r
        .per_checkpoint
        .iter()
        .map(|c| {
            json!({
                "epoch": c.epoch,
                "rate": c.rate,
                "episodes": c.episodes.iter().map(|e| json!({
                    "seed": e.seed,
                    "success": e.success,
                    "steps": e.steps,
                    "guided_steps": e.guided_steps,
                    "recovered": e.recovered,
                })).collect::<Vec<_>>(),
            })
        })
        .collect();
    let meta = json!({
        "method": r.method.name(),
        "init_mode": init_mode_name(r.init_mode),
        "perturb_prob": r.perturb_prob,
        "seed_base": r.seed_base,
        "episodes": r.episodes,
        "mean": r.mean,
        "std": r.std,
        "checkpoints": cks,
    });
    Container::new(Kind::Report, meta, Vec::new())
}

pub fn report_from_container(c: &Container) -> Result<SuccessReport> {
    c.expect_kind(Kind::Report)?;
    let m = &c.meta;
    finish_read(c, 0)?;
    let mut per_checkpoint = Vec::new();
    for ck in get(m, "checkpoints")?
        .as_array()
        .ok_or_else(|| meta_err("metadata \"checkpoints\" is not a list"))?
    {
        let mut episodes = Vec::new();
        for e in get(ck, "episodes")?
            .as_array()
            .ok_or_else(|| meta_err("metadata \"episodes\" is not a list"))?
        {
            episodes.push(EpisodeRecord {
                seed: get_u64(e, "seed")?,
                success: get_bool(e, "success")?,
                steps: get_usize(e, "steps")?,
                guided_steps: get_usize(e, "guided_steps")?,
                recovered: get_bool(e, "recovered")?,
            });
        }
        per_checkpoint.push(CheckpointReport {
            epoch: get_usize(ck, "epoch")?,
            rate: get_f64(ck, "rate")?,
            episodes,
        });
    }
    Ok(SuccessReport {
        method: Method::from_name(get_str(m, "method")?)?,
        init_mode: init_mode_from_name(get_str(m, "init_mode")?).ok_or_else(|| meta_err("unknown init mode"))?,
        perturb_prob: get_f64(m, "perturb_prob")? as f32,
        seed_base: get_u64(m, "seed_base")?,
        episodes: get_usize(m, "episodes")?,
        per_checkpoint,
        mean: get_f64(m, "mean")?,
        std: get_f64(m, "std")?,
        wall_clock_secs: 0.0,
    })
}

/// Any artifact kind, for code that handles files generically.
#[derive(Debug, Clone, PartialEq)]
pub enum Artifact {
    Dataset(DatasetFile),
    Policy(PolicyFile),
    Dynamics(DynamicsModel),
    Index(ExpertLatentIndex),
    Report(SuccessReport),
}

impl Artifact {
    pub fn kind(&self) -> Kind {
        match self {
            Artifact::Dataset(_) => Kind::Dataset,
            Artifact::Policy(_) => Kind::Policy,
            Artifact::Dynamics(_) => Kind::Dynamics,
            Artifact::Index(_) => Kind::Index,
            Artifact::Report(_) => Kind::Report,
        }
    }

    pub fn to_container(&self) -> Container {
        match self {
            Artifact::Dataset(d) => d.to_container(),
            Artifact::Policy(p) => p.to_container(),
            Artifact::Dynamics(d) => dynamics_to_container(d),
            Artifact::Index(i) => index_to_container(i),
            Artifact::Report(r) => report_to_container(r),
        }
    }

    pub fn from_container(c: &Container) -> Result<Self> {
        Ok(match c.kind {
            Kind::Dataset => Artifact::Dataset(DatasetFile::from_container(c)?),
            Kind::Policy => Artifact::Policy(PolicyFile::from_container(c)?),
            Kind::Dynamics => Artifact::Dynamics(dynamics_from_container(c)?),
            Kind::Index => Artifact::Index(index_from_container(c)?),
            Kind::Report => Artifact::Report(report_from_container(c)?),
        })
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        self.to_container().to_bytes()
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        Self::from_container(&Container::from_bytes(bytes)?)
    }
}

/// Writes an artifact atomically and returns the checksum of its bytes.
pub fn save_artifact(a: &Artifact, path: &Path) -> Result<u64> {
    let bytes = a.to_bytes();
    write_atomic(path, &bytes).map_err(|e| Error::io(path, e))?;
    Ok(checksum(&bytes))
}

pub fn read_container(path: &Path) -> Result<Container> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(Container::from_bytes(&bytes)?)
}

pub fn load_artifact(path: &Path) -> Result<Artifact> {
    Artifact::from_container(&read_container(path)?)
}

pub fn load_policy(path: &Path) -> Result<PolicyFile> {
    PolicyFile::from_container(&read_container(path)?)
}

pub fn load_dataset(path: &Path) -> Result<DatasetFile> {
    DatasetFile::from_container(&read_container(path)?)
}

pub fn load_dynamics(path: &Path) -> Result<DynamicsModel> {
    dynamics_from_container(&read_container(path)?)
}

pub fn load_index(path: &Path) -> Result<ExpertLatentIndex> {
    index_from_container(&read_container(path)?)
}

pub fn load_report(path: &Path) -> Result<SuccessReport> {
    report_from_container(&read_container(path)?)
}
