//! Seeded evaluation campaigns: success-rate reports, parameter sweeps,
//! per-episode steering traces and the latent-space comparison.

use alloc::string::String;
use alloc::vec::Vec;

use crate::agent::{act_receding_horizon, Actor, EpisodeNoise, EpisodeOutcome, PolicyActor};
use crate::barrier::{calibrate_tau, ExpertLatentIndex, GuidanceConfig, IndexBackend, LpbActor, Steering, SteeringTrace};
use crate::diffusion::{DiffusionPolicy, LatentEncoder};
use crate::dynamics::{dyn_train, DynTrainConfig, DynTrainLog, DynamicsModel};
use crate::env::{EnvState, InitMode, PerturbSpec, PointPush, DEFAULT_PERTURB_SIGMA};
use crate::error::{contract, Error, Result};
use crate::stats::mean_std;
use crate::trajectory::{stream_rng, Trajectory};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Method {
    ExpertBc,
    MixedBc,
    FilteredBc,
    Lpb,
    LpbMpc,
    LpbGd,
}

impl Method {
    pub const ALL: [Method; 6] = [
        Method::ExpertBc,
        Method::MixedBc,
        Method::FilteredBc,
        Method::Lpb,
        Method::LpbMpc,
        Method::LpbGd,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Method::ExpertBc => "expert-bc",
            Method::MixedBc => "mixed-bc",
            Method::FilteredBc => "filtered-bc",
            Method::Lpb => "lpb",
            Method::LpbMpc => "lpb-mpc",
            Method::LpbGd => "lpb-gd",
        }
    }

    pub fn from_name(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| contract(alloc::format!("unknown method {s:?}")))
    }

    /// Whether the method needs a dynamics model and an expert index.
    pub fn steered(self) -> bool {
        matches!(self, Method::Lpb | Method::LpbMpc | Method::LpbGd)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalSpec {
    pub method: Method,
    pub episodes: usize,
    pub init_mode: InitMode,
    pub perturbation: Option<PerturbSpec>,
    pub seed_base: u64,
    /// Checkpoint epochs to evaluate, each over the same seeds.
    pub checkpoints: Vec<usize>,
}

impl EvalSpec {
    pub fn validate(&self) -> Result<()> {
        if self.episodes == 0 {
            return Err(contract("evaluation needs at least one episode"));
        }
        if self.checkpoints.is_empty() {
            return Err(contract("evaluation needs at least one checkpoint"));
        }
        if let Some(p) = &self.perturbation {
            p.validate()?;
        }
        Ok(())
    }

    pub fn episode_seed(&self, i: usize) -> u64 {
        self.seed_base + i as u64
    }
}

/// Steering components tied to one latent space.
#[derive(Clone, Copy)]
pub struct BarrierParts<'a> {
    pub model: &'a DynamicsModel,
    pub index: &'a ExpertLatentIndex,
    pub latent: &'a LatentEncoder,
}

#[derive(Clone)]
pub struct Checkpoint<'a> {
    pub epoch: usize,
    pub policy: &'a DiffusionPolicy,
    pub barrier: Option<BarrierParts<'a>>,
}

/// Everything an evaluation reads. The policy of each checkpoint is the one
/// the method deploys (the expert-BC policy for the steered methods).
#[derive(Clone)]
pub struct Artifacts<'a> {
    pub env: &'a PointPush,
    pub checkpoints: Vec<Checkpoint<'a>>,
    pub guidance: GuidanceConfig,
    pub mpc_candidates: usize,
    pub gd_steps: usize,
    pub gd_step_size: f32,
}

impl<'a> Artifacts<'a> {
    pub fn new(env: &'a PointPush, guidance: GuidanceConfig) -> Self {
        Self {
            env,
            checkpoints: Vec::new(),
            guidance,
            mpc_candidates: 16,
            gd_steps: 10,
            gd_step_size: 0.05,
        }
    }

    pub fn with_checkpoint(mut self, epoch: usize, policy: &'a DiffusionPolicy, barrier: Option<BarrierParts<'a>>) -> Self {
        self.checkpoints.push(Checkpoint { epoch, policy, barrier });
        self
    }

    pub fn checkpoint(&self, epoch: usize) -> Result<&Checkpoint<'a>> {
        self.checkpoints
            .iter()
            .find(|c| c.epoch == epoch)
            .ok_or_else(|| contract(alloc::format!("missing artifact: policy checkpoint for epoch {epoch}")))
    }

    fn steering(&self, method: Method) -> Steering {
        match method {
            Method::LpbMpc => Steering::Mpc {
                candidates: self.mpc_candidates,
            },
            Method::LpbGd => Steering::Gd {
                steps: self.gd_steps,
                step_size: self.gd_step_size,
            },
            _ => Steering::Guided,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpisodeRecord {
    pub seed: u64,
    pub success: bool,
    pub steps: usize,
    /// Replans on which steering was active.
    pub guided_steps: usize,
    /// δ went above τ and later came back to at most τ.
    pub recovered: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CheckpointReport {
    pub epoch: usize,
    pub rate: f64,
    pub episodes: Vec<EpisodeRecord>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SuccessReport {
    pub method: Method,
    pub init_mode: InitMode,
    pub perturb_prob: f32,
    pub seed_base: u64,
    pub episodes: usize,
    pub per_checkpoint: Vec<CheckpointReport>,
    pub mean: f64,
    /// Population standard deviation of the per-checkpoint rates.
    pub std: f64,
    /// Filled in by callers that time the run; not part of the result.
    pub wall_clock_secs: f64,
}

impl SuccessReport {
    pub fn rates(&self) -> Vec<f64> {
        self.per_checkpoint.iter().map(|c| c.rate).collect()
    }

    /// Outcomes of one checkpoint, in seed order.
    pub fn outcomes(&self, epoch: usize) -> Option<Vec<bool>> {
        self.per_checkpoint
            .iter()
            .find(|c| c.epoch == epoch)
            .map(|c| c.episodes.iter().map(|e| e.success).collect())
    }

    pub fn successes(&self) -> usize {
        self.per_checkpoint
            .iter()
            .flat_map(|c| &c.episodes)
            .filter(|e| e.success)
            .count()
    }
}

fn recovered(trace: &SteeringTrace, tau: f32) -> bool {
    match trace.iter().position(|r| r.delta > tau) {
        Some(i) => trace[i + 1..].iter().any(|r| r.delta <= tau),
        None => false,
    }
}

/// One seeded episode. The reset, the sampler stream and the action-noise
/// stream all derive from `seed`, so different methods see identical draws.
pub fn run_episode(
    arts: &Artifacts<'_>,
    ckpt: &Checkpoint<'_>,
    method: Method,
    seed: u64,
    init_mode: InitMode,
    perturbation: Option<&PerturbSpec>,
) -> Result<(EpisodeOutcome, Option<SteeringTrace>)> {
    let env = arts.env;
    let init: EnvState = env.sample_initial(seed, init_mode);
    let cap = env.config.episode_cap as usize;
    let noise = perturbation.map(|spec| EpisodeNoise {
        spec,
        rng: spec.rng_for_episode(seed),
    });
    let mut rng = stream_rng(seed, 1);
    if method.steered() {
        let b = ckpt
            .barrier
            .ok_or_else(|| contract(alloc::format!("missing artifact: dynamics model and expert index for epoch {}", ckpt.epoch)))?;
        let mut actor = LpbActor::new(ckpt.policy, b.model, b.index, b.latent, arts.guidance, arts.steering(method))?;
        let out = act_receding_horizon(env, &mut actor as &mut dyn Actor, init, cap, noise, &mut rng)?;
        Ok((out, Some(actor.trace)))
    } else {
        let mut actor = PolicyActor {
            policy: ckpt.policy,
            sampler: arts.guidance.sampler,
        };
        Ok((act_receding_horizon(env, &mut actor, init, cap, noise, &mut rng)?, None))
    }
}

pub fn run_eval(spec: &EvalSpec, arts: &Artifacts<'_>) -> Result<SuccessReport> {
    spec.validate()?;
    let ckpts = spec
        .checkpoints
        .iter()
        .map(|&e| arts.checkpoint(e))
        .collect::<Result<Vec<_>>>()?;
    if spec.method.steered() {
        for c in &ckpts {
            if c.barrier.is_none() {
                return Err(contract(alloc::format!(
                    "missing artifact: dynamics model and expert index for epoch {}",
                    c.epoch
                )));
            }
        }
    }
    let tau = arts.guidance.tau;
    let mut per_checkpoint = Vec::with_capacity(ckpts.len());
    for c in ckpts {
        let mut episodes = Vec::with_capacity(spec.episodes);
        for i in 0..spec.episodes {
            let seed = spec.episode_seed(i);
            let (out, trace) = run_episode(arts, c, spec.method, seed, spec.init_mode, spec.perturbation.as_ref())?;
            let (guided_steps, rec) = match &trace {
                Some(t) => (t.iter().filter(|r| r.active).count(), recovered(t, tau)),
                None => (0, false),
            };
            episodes.push(EpisodeRecord {
                seed,
                success: out.trajectory.success,
                steps: out.trajectory.len(),
                guided_steps,
                recovered: rec,
            });
        }
        let ok = episodes.iter().filter(|e| e.success).count();
        per_checkpoint.push(CheckpointReport {
            epoch: c.epoch,
            rate: ok as f64 / spec.episodes as f64,
            episodes,
        });
    }
    let rates: Vec<f64> = per_checkpoint.iter().map(|c| c.rate).collect();
    let (mean, std) = mean_std(&rates);
    Ok(SuccessReport {
        method: spec.method,
        init_mode: spec.init_mode,
        perturb_prob: spec.perturbation.map_or(0.0, |p| p.prob),
        seed_base: spec.seed_base,
        episodes: spec.episodes,
        per_checkpoint,
        mean,
        std,
        wall_clock_secs: 0.0,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SweepAxis {
    PerturbP,
    DemoFraction,
    RolloutCount,
    Eta,
    KGuide,
}

impl SweepAxis {
    pub fn name(self) -> &'static str {
        match self {
            SweepAxis::PerturbP => "perturb-p",
            SweepAxis::DemoFraction => "demo-fraction",
            SweepAxis::RolloutCount => "rollout-count",
            SweepAxis::Eta => "eta",
            SweepAxis::KGuide => "k-guide",
        }
    }

    pub fn from_name(s: &str) -> Result<Self> {
        [
            SweepAxis::PerturbP,
            SweepAxis::DemoFraction,
            SweepAxis::RolloutCount,
            SweepAxis::Eta,
            SweepAxis::KGuide,
        ]
        .into_iter()
        .find(|a| a.name() == s)
        .ok_or_else(|| contract(alloc::format!("unknown sweep axis {s:?}")))
    }

    /// Axes that change trained artifacts rather than evaluation settings.
    pub fn retrains(self) -> bool {
        matches!(self, SweepAxis::DemoFraction | SweepAxis::RolloutCount)
    }
}

/// The `EvalSpec` for one cell. Only the perturbation axis lives in it;
/// other axes are applied to the artifacts by the cell runner.
pub fn cell_spec(axis: SweepAxis, value: f64, base: &EvalSpec) -> Result<EvalSpec> {
    let mut s = base.clone();
    if axis == SweepAxis::PerturbP {
        let (sigma, seed) = base
            .perturbation
            .map_or((DEFAULT_PERTURB_SIGMA, base.seed_base), |p| (p.sigma, p.seed));
        s.perturbation = Some(PerturbSpec::new(value as f32, sigma, seed)?);
    }
    Ok(s)
}

/// Guidance settings for one cell of the η or K_guide axes.
pub fn cell_guidance(axis: SweepAxis, value: f64, base: GuidanceConfig) -> Result<GuidanceConfig> {
    let mut g = base;
    match axis {
        SweepAxis::Eta => g.eta = value as f32,
        SweepAxis::KGuide => {
            if value < 0.0 || libm::trunc(value) != value {
                return Err(contract("K_guide values must be non-negative integers"));
            }
            g.k_guide = value as usize;
        }
        _ => {}
    }
    Ok(g)
}

#[derive(Debug)]
pub struct SweepRow {
    pub value: f64,
    pub method: Method,
    pub outcome: core::result::Result<SuccessReport, Error>,
}

/// Runs every `(value, method)` cell through `run`, which receives the cell
/// spec (perturbation applied) and the raw axis value. A failing cell is
/// recorded and the sweep continues. All cells share the base seeds.
pub fn sweep<F>(axis: SweepAxis, values: &[f64], bases: &[EvalSpec], mut run: F) -> Result<Vec<SweepRow>>
where
    F: FnMut(&EvalSpec, f64) -> Result<SuccessReport>,
{
    if values.is_empty() {
        return Err(contract("sweep needs at least one value"));
    }
    if bases.is_empty() {
        return Err(contract("sweep needs at least one method"));
    }
    let mut rows = Vec::with_capacity(values.len() * bases.len());
    for &v in values {
        for base in bases {
            let outcome = cell_spec(axis, v, base).and_then(|s| run(&s, v));
            rows.push(SweepRow {
                value: v,
                method: base.method,
                outcome,
            });
        }
    }
    Ok(rows)
}

/// [`sweep`] for the axes that need no retraining.
pub fn sweep_fixed(axis: SweepAxis, values: &[f64], bases: &[EvalSpec], arts: &Artifacts<'_>) -> Result<Vec<SweepRow>> {
    if axis.retrains() {
        return Err(contract(alloc::format!("axis {} needs retrained artifacts", axis.name())));
    }
    sweep(axis, values, bases, |spec, v| {
        let mut a = arts.clone();
        a.guidance = cell_guidance(axis, v, arts.guidance)?;
        run_eval(spec, &a)
    })
}

/// Rates of one method along the axis, in value order; failed cells are skipped.
pub fn series(rows: &[SweepRow], method: Method) -> (Vec<f64>, Vec<f64>) {
    rows.iter()
        .filter(|r| r.method == method)
        .filter_map(|r| r.outcome.as_ref().ok().map(|rep| (r.value, rep.mean)))
        .unzip()
}

#[derive(Debug, Clone, PartialEq)]
pub struct FrameSummary {
    pub t: usize,
    pub agent: [f32; 2],
    pub block: [f32; 2],
    pub angle: f32,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpisodeTrace {
    pub seed: u64,
    pub success: bool,
    pub tau: f32,
    pub records: SteeringTrace,
    /// Environment state at each record's replan time.
    pub frames: Vec<FrameSummary>,
}

/// A single LPB episode with its full steering trace.
pub fn trace_episode(arts: &Artifacts<'_>, epoch: usize, seed: u64, init_mode: InitMode) -> Result<EpisodeTrace> {
    let ckpt = arts.checkpoint(epoch)?;
    let (out, trace) = run_episode(arts, ckpt, Method::Lpb, seed, init_mode, None)?;
    let records = trace.unwrap_or_default();
    let frames = records
        .iter()
        .map(|r| {
            let s = &out.trajectory.states[r.t];
            FrameSummary {
                t: r.t,
                agent: s.agent,
                block: s.block,
                angle: s.angle,
            }
        })
        .collect();
    Ok(EpisodeTrace {
        seed,
        success: out.trajectory.success,
        tau: arts.guidance.tau,
        records,
        frames,
    })
}

/// Steering components built for one latent space.
#[derive(Debug, Clone)]
pub struct BarrierBundle {
    pub model: DynamicsModel,
    pub index: ExpertLatentIndex,
    pub tau: f32,
    pub log: DynTrainLog,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BarrierBuild {
    pub pred_horizon: usize,
    pub hidden: Vec<usize>,
    pub dyn_cfg: DynTrainConfig,
    pub tau_percentile: f64,
    pub backend: IndexBackend,
    /// Seed for the predictor's initial weights.
    pub init_seed: u64,
}

impl Default for BarrierBuild {
    fn default() -> Self {
        Self {
            pred_horizon: 16,
            hidden: alloc::vec![256, 256],
            dyn_cfg: DynTrainConfig::default(),
            tau_percentile: 95.0,
            backend: IndexBackend::KdTree,
            init_seed: 0,
        }
    }
}

/// Single-frame latents of every observation in `trajs`, row-major.
pub fn trajectory_latents(encoder: &LatentEncoder, trajs: &[Trajectory]) -> Result<Vec<f32>> {
    let obs: Vec<&[f32]> = trajs.iter().flat_map(|t| t.observations.iter().map(|o| o.as_slice())).collect();
    encoder.encode_frames(&obs)
}

/// Index over expert latents, dynamics model over expert and rollout
/// windows, and τ from `calibration` trajectories, all in `encoder`'s space.
pub fn build_barrier(
    encoder: &LatentEncoder,
    demos: &[Trajectory],
    rollouts: &[Trajectory],
    calibration: &[Trajectory],
    b: &BarrierBuild,
) -> Result<BarrierBundle> {
    let index = ExpertLatentIndex::from_demos(encoder, demos, b.backend)?;
    let mut model = DynamicsModel::new(encoder, b.pred_horizon, &b.hidden, &mut stream_rng(b.init_seed, 41))?;
    let log = dyn_train(&mut model, encoder, demos, rollouts, &[], &b.dyn_cfg)?;
    let tau = calibrate_tau(&index, &trajectory_latents(encoder, calibration)?, b.tau_percentile)?;
    Ok(BarrierBundle { model, index, tau, log })
}

pub struct LatentStudy<'a> {
    pub env: &'a PointPush,
    pub policy: &'a DiffusionPolicy,
    pub demos: &'a [Trajectory],
    pub rollouts: &'a [Trajectory],
    pub calibration: &'a [Trajectory],
    pub build: BarrierBuild,
    pub guidance: GuidanceConfig,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LatentRow {
    pub label: String,
    /// τ calibrated in this latent space; infinite for the base row.
    pub tau: f32,
    pub report: SuccessReport,
}

/// Evaluates the base policy, then LPB once per encoder variant with its
/// own index, dynamics model and τ. Every row uses the seeds of `spec`.
pub fn compare_latent_spaces(
    variants: &[(&str, &LatentEncoder)],
    study: &LatentStudy<'_>,
    spec: &EvalSpec,
) -> Result<Vec<LatentRow>> {
    let epoch = *spec
        .checkpoints
        .last()
        .ok_or_else(|| contract("evaluation needs at least one checkpoint"))?;
    let one = EvalSpec {
        checkpoints: alloc::vec![epoch],
        ..spec.clone()
    };
    let base_arts = Artifacts::new(study.env, study.guidance).with_checkpoint(epoch, study.policy, None);
    let mut rows = alloc::vec![LatentRow {
        label: "base".into(),
        tau: f32::INFINITY,
        report: run_eval(&EvalSpec { method: Method::ExpertBc, ..one.clone() }, &base_arts)?,
    }];
    for (label, enc) in variants {
        let bundle = build_barrier(enc, study.demos, study.rollouts, study.calibration, &study.build)?;
        let mut g = study.guidance;
        g.tau = bundle.tau;
        let parts = BarrierParts {
            model: &bundle.model,
            index: &bundle.index,
            latent: enc,
        };
        let arts = Artifacts::new(study.env, g).with_checkpoint(epoch, study.policy, Some(parts));
        rows.push(LatentRow {
            label: (*label).into(),
            tau: bundle.tau,
            report: run_eval(&EvalSpec { method: Method::Lpb, ..one.clone() }, &arts)?,
        });
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::agent::ExpertActor;

    #[test]
    fn method_names_round_trip() {
        for m in Method::ALL {
            assert_eq!(Method::from_name(m.name()).unwrap(), m);
        }
        assert!(Method::from_name("dagger").is_err());
    }

    #[test]
    fn recovery_needs_a_later_return() {
        let rec = |d: f32| crate::barrier::TraceRecord {
            t: 0,
            delta: d,
            nearest: 0,
            active: d > 1.0,
            pred_delta_pre: None,
            pred_delta_post: 0.0,
            fallbacks: 0,
            actions: Vec::new(),
        };
        assert!(recovered(&alloc::vec![rec(0.5), rec(2.0), rec(0.9)], 1.0));
        assert!(!recovered(&alloc::vec![rec(0.5), rec(2.0), rec(3.0)], 1.0));
        assert!(!recovered(&alloc::vec![rec(0.5)], 1.0));
    }

    #[test]
    fn perturb_axis_sets_probability_only() {
        let base = EvalSpec {
            method: Method::Lpb,
            episodes: 3,
            init_mode: InitMode::InDist,
            perturbation: None,
            seed_base: 9,
            checkpoints: alloc::vec![1],
        };
        let s = cell_spec(SweepAxis::PerturbP, 0.2, &base).unwrap();
        let p = s.perturbation.unwrap();
        assert_eq!((p.prob, p.sigma, p.seed), (0.2, DEFAULT_PERTURB_SIGMA, 9));
        assert_eq!(cell_spec(SweepAxis::Eta, 0.2, &base).unwrap(), base);
        assert!(cell_guidance(SweepAxis::KGuide, 2.5, GuidanceConfig::default()).is_err());
    }

    #[test]
    fn expert_actor_episode_succeeds_on_solvable_seed() {
        let env = PointPush::new(Default::default(), crate::env::ObsMode::Vector);
        let init = env.sample_initial(3, InitMode::InDist);
        let out = act_receding_horizon(&env, &mut ExpertActor, init, 400, None, &mut stream_rng(3, 1)).unwrap();
        assert!(out.trajectory.success);
    }
}
