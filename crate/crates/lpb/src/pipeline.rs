//! Pipeline stages over a run directory. Each stage reads its inputs from
//! files written by earlier stages and writes its own outputs atomically.
//!
//! Run directory layout:
//!
//! ```text
//! config.resolved.toml        resolved configuration of the last stage run
//! demos.lpbf                  expert demonstrations
//! policy-e<E>.lpbf            expert-BC checkpoints (also used by LPB)
//! policy-<src>-e<E>.lpbf      checkpoints trained on a curated dataset
//! rollouts.lpbf               checkpoint rollouts
//! curated-<src>.lpbf          curated datasets
//! dynamics-e<E>.lpbf          dynamics model in checkpoint E's latent space
//! index-e<E>.lpbf             expert latents in checkpoint E's latent space
//! tau-e<E>.json               calibrated OOD threshold
//! report-<method>-<init>.lpbf evaluation report (plus .csv and .timing.json)
//! ```

use std::path::{Path, PathBuf};
use std::time::Instant;

use lpb_core::barrier::{calibrate_tau, ExpertLatentIndex};
use lpb_core::diffusion::{bc_train, DiffusionPolicy};
use lpb_core::dynamics::{dyn_train, DynamicsModel};
use lpb_core::harness::{
    cell_guidance, run_eval, sweep, trace_episode, trajectory_latents, Artifacts, BarrierParts, EpisodeTrace, EvalSpec,
    Method, SuccessReport, SweepAxis, SweepRow,
};
use lpb_core::rollout::{collect, curate, expert_dataset, CurateInputs, CuratedDataset, Origin, Source};
use lpb_core::trajectory::{stream_rng, Trajectory};
use serde_json::json;

use crate::codec::{
    dynamics_to_container, index_to_container, init_mode_name, load_dataset, load_dynamics, load_index, load_policy,
    report_to_container, Artifact, DatasetFile, PolicyFile,
};
use crate::config::{RunConfig, RESOLVED_NAME};
use crate::error::{Error, Result};
use crate::report;

pub fn demos_path(dir: &Path) -> PathBuf {
    dir.join("demos.lpbf")
}

pub fn rollouts_path(dir: &Path) -> PathBuf {
    dir.join("rollouts.lpbf")
}

pub fn curated_path(dir: &Path, source: Source) -> PathBuf {
    dir.join(format!("curated-{}.lpbf", source.name()))
}

/// File-name prefix of the policy a method deploys.
pub fn policy_prefix(method: Method) -> &'static str {
    match method {
        Method::MixedBc => "policy-mixed",
        Method::FilteredBc => "policy-filtered",
        _ => "policy",
    }
}

pub fn policy_path(dir: &Path, prefix: &str, epoch: usize) -> PathBuf {
    dir.join(format!("{prefix}-e{epoch}.lpbf"))
}

pub fn dynamics_path(dir: &Path, epoch: usize) -> PathBuf {
    dir.join(format!("dynamics-e{epoch}.lpbf"))
}

pub fn index_path(dir: &Path, epoch: usize) -> PathBuf {
    dir.join(format!("index-e{epoch}.lpbf"))
}

pub fn tau_path(dir: &Path, epoch: usize) -> PathBuf {
    dir.join(format!("tau-e{epoch}.json"))
}

pub fn report_path(dir: &Path, method: Method, init: lpb_core::env::InitMode) -> PathBuf {
    dir.join(format!("report-{}-{}.lpbf", method.name(), init_mode_name(init)))
}

fn require(path: &Path, what: &str) -> Result<()> {
    if path.exists() {
        Ok(())
    } else {
        Err(Error::MissingArtifact(format!("{what} ({})", path.display())))
    }
}

fn save(a: &Artifact, path: &Path) -> Result<u64> {
    crate::codec::save_artifact(a, path)
}

pub fn write_resolved(cfg: &RunConfig, dir: &Path) -> Result<()> {
    report::write_text(&dir.join(RESOLVED_NAME), &cfg.to_toml())
}

pub fn gen_demos(cfg: &RunConfig, dir: &Path) -> Result<DatasetFile> {
    let env = cfg.env()?;
    let data = expert_dataset(&env, cfg.n_demos, cfg.seed)?;
    let file = DatasetFile {
        obs_dim: env.obs_dim(),
        obs_mode: env.obs_mode,
        data,
    };
    save(&Artifact::Dataset(file.clone()), &demos_path(dir))?;
    Ok(file)
}

/// Trains a policy on the dataset at `data` and writes every scheduled
/// checkpoint plus the final epoch. Returns the written epochs.
pub fn train_policy(cfg: &RunConfig, dir: &Path, data: &Path, prefix: &str) -> Result<Vec<usize>> {
    require(data, "training dataset")?;
    let ds = load_dataset(data)?;
    let mut bc = cfg.bc_config()?;
    if !bc.checkpoints.contains(&bc.epochs) {
        bc.checkpoints.push(bc.epochs);
    }
    let mut policy = DiffusionPolicy::new(cfg.policy_config()?, &mut stream_rng(cfg.seed, 0))?;
    let (log, snaps) = bc_train(&mut policy, &ds.data.trajectories, &bc)?;
    let mut epochs = Vec::new();
    for (epoch, p) in snaps {
        save(
            &Artifact::Policy(PolicyFile {
                policy: p,
                epoch,
                seed: cfg.seed,
            }),
            &policy_path(dir, prefix, epoch),
        )?;
        epochs.push(epoch);
    }
    let mut text = String::from("epoch,loss\n");
    for (i, l) in log.epoch_loss.iter().enumerate() {
        text.push_str(&format!("{},{}\n", i + 1, l));
    }
    report::write_text(&dir.join(format!("{prefix}-train.csv")), &text)?;
    Ok(epochs)
}

pub fn load_checkpoints(dir: &Path, prefix: &str, epochs: &[usize]) -> Result<Vec<(usize, DiffusionPolicy)>> {
    epochs
        .iter()
        .map(|&e| {
            let p = policy_path(dir, prefix, e);
            require(&p, &format!("policy checkpoint for epoch {e}"))?;
            Ok((e, load_policy(&p)?.policy))
        })
        .collect()
}

pub fn collect_rollouts(cfg: &RunConfig, dir: &Path) -> Result<DatasetFile> {
    let env = cfg.env()?;
    let ckpts = load_checkpoints(dir, "policy", &cfg.checkpoint_epochs()?)?;
    let refs: Vec<(usize, &DiffusionPolicy)> = ckpts.iter().map(|(e, p)| (*e, p)).collect();
    let data = collect(&env, &refs, &cfg.schedule(), cfg.sampler()?, cfg.seed)?;
    let file = DatasetFile {
        obs_dim: env.obs_dim(),
        obs_mode: env.obs_mode,
        data,
    };
    save(&Artifact::Dataset(file.clone()), &rollouts_path(dir))?;
    Ok(file)
}

pub fn curate_stage(cfg: &RunConfig, dir: &Path, source: Source) -> Result<DatasetFile> {
    let env = cfg.env()?;
    require(&demos_path(dir), "expert demonstrations")?;
    let demos = load_dataset(&demos_path(dir))?.data;
    let rollouts = match source {
        Source::Mixed | Source::Filtered | Source::RolloutOnly => {
            require(&rollouts_path(dir), "checkpoint rollouts")?;
            Some(load_dataset(&rollouts_path(dir))?.data)
        }
        _ => None,
    };
    let final_policy = if source == Source::EpsGreedy {
        let last = *cfg.checkpoint_epochs()?.last().unwrap();
        Some((last, load_checkpoints(dir, "policy", &[last])?.remove(0).1))
    } else {
        None
    };
    let noise = lpb_core::env::PerturbSpec::new(cfg.curate_noise_p, cfg.perturb_sigma, cfg.seed)?;
    let inp = CurateInputs {
        env: &env,
        demos: &demos,
        rollouts: rollouts.as_ref(),
        noise,
        final_policy: final_policy.as_ref().map(|(e, p)| (*e, p)),
        sampler: cfg.sampler()?,
        eps_episodes: cfg.eps_episodes,
        seed: cfg.seed,
    };
    let data = curate(&inp, source)?;
    let file = DatasetFile {
        obs_dim: env.obs_dim(),
        obs_mode: env.obs_mode,
        data,
    };
    save(&Artifact::Dataset(file.clone()), &curated_path(dir, source))?;
    Ok(file)
}

/// Rollouts recorded from checkpoint `epoch`, used for τ calibration.
pub fn checkpoint_rollouts(rollouts: &CuratedDataset, epoch: usize) -> Vec<Trajectory> {
    rollouts
        .trajectories
        .iter()
        .zip(&rollouts.provenance)
        .filter(|(_, p)| p.origin == Origin::Checkpoint(epoch))
        .map(|(t, _)| t.clone())
        .collect()
}

/// A deterministic, nested subset of `n` rollouts: the same seed always
/// yields prefixes of one fixed permutation.
pub fn rollout_subset(rollouts: &[Trajectory], n: usize, seed: u64) -> Vec<Trajectory> {
    use rand::seq::SliceRandom;
    let mut order: Vec<usize> = (0..rollouts.len()).collect();
    order.shuffle(&mut stream_rng(seed, 51));
    order.into_iter().take(n).map(|i| rollouts[i].clone()).collect()
}

/// Dynamics model and expert index for each evaluated checkpoint.
pub fn train_dynamics_stage(cfg: &RunConfig, dir: &Path) -> Result<()> {
    require(&demos_path(dir), "expert demonstrations")?;
    require(&rollouts_path(dir), "checkpoint rollouts")?;
    let demos = load_dataset(&demos_path(dir))?.data.trajectories;
    let rollouts = load_dataset(&rollouts_path(dir))?.data.trajectories;
    for (epoch, policy) in load_checkpoints(dir, "policy", &cfg.eval_epochs()?)? {
        let (model, index) = fit_barrier(cfg, &policy, &demos, &rollouts)?;
        save(&Artifact::Dynamics(model), &dynamics_path(dir, epoch))?;
        save(&Artifact::Index(index), &index_path(dir, epoch))?;
    }
    Ok(())
}

pub fn fit_barrier(
    cfg: &RunConfig,
    policy: &DiffusionPolicy,
    demos: &[Trajectory],
    rollouts: &[Trajectory],
) -> Result<(DynamicsModel, ExpertLatentIndex)> {
    let enc = &policy.encoder;
    let b = cfg.barrier_build()?;
    let index = ExpertLatentIndex::from_demos(enc, demos, b.backend)?;
    let mut model = DynamicsModel::new(enc, b.pred_horizon, &b.hidden, &mut stream_rng(b.init_seed, 41))?;
    dyn_train(&mut model, enc, demos, rollouts, &[], &b.dyn_cfg)?;
    Ok((model, index))
}

pub fn calibrate_stage(cfg: &RunConfig, dir: &Path) -> Result<Vec<(usize, f32)>> {
    require(&rollouts_path(dir), "checkpoint rollouts")?;
    let rollouts = load_dataset(&rollouts_path(dir))?.data;
    let mut out = Vec::new();
    for (epoch, policy) in load_checkpoints(dir, "policy", &cfg.eval_epochs()?)? {
        require(&index_path(dir, epoch), &format!("expert index for epoch {epoch}"))?;
        let index = load_index(&index_path(dir, epoch))?;
        let cal = checkpoint_rollouts(&rollouts, epoch);
        let latents = trajectory_latents(&policy.encoder, &cal)?;
        let tau = calibrate_tau(&index, &latents, cfg.tau_percentile)?;
        let text = serde_json::to_string_pretty(&json!({
            "epoch": epoch,
            "tau": tau,
            "percentile": cfg.tau_percentile,
            "calibration_trajectories": cal.len(),
        }))
        .expect("JSON values always serialize");
        report::write_text(&tau_path(dir, epoch), &text)?;
        out.push((epoch, tau));
    }
    Ok(out)
}

/// τ for `epoch`: the configured value, else the calibrated one.
pub fn resolve_tau(cfg: &RunConfig, dir: &Path, epoch: usize) -> Result<f32> {
    if let Some(t) = cfg.tau {
        return Ok(t);
    }
    let p = tau_path(dir, epoch);
    require(&p, &format!("calibrated tau for epoch {epoch}"))?;
    let text = std::fs::read_to_string(&p).map_err(|e| Error::io(&p, e))?;
    let v: serde_json::Value = serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", p.display())))?;
    v.get("tau")
        .and_then(|t| t.as_f64())
        .map(|t| t as f32)
        .ok_or_else(|| Error::Config(format!("{}: no tau value", p.display())))
}

/// Owned artifacts for one evaluation.
pub struct Loaded {
    pub policies: Vec<(usize, DiffusionPolicy)>,
    pub barriers: Vec<Option<(DynamicsModel, ExpertLatentIndex)>>,
    pub taus: Vec<f32>,
}

impl Loaded {
    pub fn artifacts<'a>(&'a self, cfg: &RunConfig, env: &'a lpb_core::env::PointPush) -> Result<Artifacts<'a>> {
        // Per-checkpoint τ is only meaningful for a single checkpoint; with
        // several, the first one's τ is used for all.
        let tau = self.taus.first().copied().unwrap_or(f32::INFINITY);
        let mut arts = Artifacts::new(env, cfg.guidance(tau)?);
        arts.mpc_candidates = cfg.mpc_candidates;
        arts.gd_steps = cfg.gd_steps;
        arts.gd_step_size = cfg.gd_step_size;
        for ((epoch, p), b) in self.policies.iter().zip(&self.barriers) {
            let parts = b.as_ref().map(|(m, i)| BarrierParts {
                model: m,
                index: i,
                latent: &p.encoder,
            });
            arts = arts.with_checkpoint(*epoch, p, parts);
        }
        Ok(arts)
    }
}

pub fn load_for_eval(cfg: &RunConfig, dir: &Path, method: Method) -> Result<Loaded> {
    let epochs = cfg.eval_epochs()?;
    let policies = load_checkpoints(dir, policy_prefix(method), &epochs)?;
    let mut barriers = Vec::new();
    let mut taus = Vec::new();
    for &e in &epochs {
        if method.steered() {
            let dp = dynamics_path(dir, e);
            require(&dp, &format!("dynamics model for epoch {e}"))?;
            let ip = index_path(dir, e);
            require(&ip, &format!("expert index for epoch {e}"))?;
            barriers.push(Some((load_dynamics(&dp)?, load_index(&ip)?)));
            taus.push(resolve_tau(cfg, dir, e)?);
        } else {
            barriers.push(None);
        }
    }
    Ok(Loaded {
        policies,
        barriers,
        taus,
    })
}

/// Runs the configured evaluation and writes the report, its CSV and a
/// separate timing file (so the report itself is reproducible byte for byte).
pub fn evaluate_stage(cfg: &RunConfig, dir: &Path) -> Result<(SuccessReport, PathBuf)> {
    let method = cfg.method()?;
    let env = cfg.env()?;
    let loaded = load_for_eval(cfg, dir, method)?;
    let arts = loaded.artifacts(cfg, &env)?;
    let spec = cfg.eval_spec()?;
    let t = Instant::now();
    let mut rep = run_eval(&spec, &arts)?;
    rep.wall_clock_secs = t.elapsed().as_secs_f64();
    let path = report_path(dir, method, spec.init_mode);
    save(&Artifact::Report(rep.clone()), &path)?;
    report::write_report_csv(&path.with_extension("csv"), &rep)?;
    report::write_text(
        &path.with_extension("timing.json"),
        &json!({ "wall_clock_secs": rep.wall_clock_secs }).to_string(),
    )?;
    Ok((rep, path))
}

fn methods_for_sweep(cfg: &RunConfig) -> Result<Vec<Method>> {
    let m = cfg.method()?;
    Ok(if m == Method::ExpertBc || m.steered() {
        let mut v = vec![Method::ExpertBc];
        if m != Method::ExpertBc {
            v.push(m);
        }
        v
    } else {
        vec![m]
    })
}

/// Sweeps the configured axis for the base policy and the configured method.
/// Retraining axes rebuild what they change inside a scratch directory.
pub fn sweep_stage(cfg: &RunConfig, dir: &Path) -> Result<Vec<SweepRow>> {
    let axis = cfg.axis()?;
    let base = cfg.eval_spec()?;
    let bases: Vec<EvalSpec> = methods_for_sweep(cfg)?
        .into_iter()
        .map(|method| EvalSpec { method, ..base.clone() })
        .collect();
    let env = cfg.env()?;
    let rows = match axis {
        SweepAxis::PerturbP | SweepAxis::Eta | SweepAxis::KGuide => {
            let needs_barrier = bases.iter().any(|b| b.method.steered());
            let loaded = load_for_eval(cfg, dir, if needs_barrier { Method::Lpb } else { Method::ExpertBc })?;
            let arts = loaded.artifacts(cfg, &env)?;
            sweep(axis, &cfg.sweep_values, &bases, |spec, v| {
                let mut a = arts.clone();
                a.guidance = cell_guidance(axis, v, arts.guidance)?;
                run_eval(spec, &a)
            })?
        }
        SweepAxis::RolloutCount => {
            let demos = load_dataset(&demos_path(dir))?.data.trajectories;
            require(&rollouts_path(dir), "checkpoint rollouts")?;
            let rollouts = load_dataset(&rollouts_path(dir))?.data;
            let epoch = *cfg.eval_epochs()?.last().unwrap();
            let policy = load_checkpoints(dir, "policy", &[epoch])?.remove(0).1;
            let cal = checkpoint_rollouts(&rollouts, epoch);
            sweep(axis, &cfg.sweep_values, &bases, |spec, v| {
                let sub = rollout_subset(&rollouts.trajectories, v as usize, cfg.seed);
                rollout_count_cell(cfg, &env, &policy, &demos, &sub, &cal, spec)
            })?
        }
        SweepAxis::DemoFraction => {
            let demos = load_dataset(&demos_path(dir))?;
            sweep(axis, &cfg.sweep_values, &bases, |spec, v| {
                demo_fraction_cell(cfg, &env, &demos, v, spec).map_err(|e| match e {
                    Error::Core(c) => c,
                    other => lpb_core::Error::Contract(other.to_string()),
                })
            })?
        }
    };
    report::write_sweep(dir, axis, &rows)?;
    Ok(rows)
}

/// LPB with a dynamics model fit on demos plus the given rollouts; the
/// base-policy method ignores the rollouts.
pub fn rollout_count_cell(
    cfg: &RunConfig,
    env: &lpb_core::env::PointPush,
    policy: &DiffusionPolicy,
    demos: &[Trajectory],
    rollouts: &[Trajectory],
    calibration: &[Trajectory],
    spec: &EvalSpec,
) -> lpb_core::Result<SuccessReport> {
    let epoch = *spec.checkpoints.last().unwrap();
    let one = EvalSpec {
        checkpoints: vec![epoch],
        ..spec.clone()
    };
    if !spec.method.steered() {
        let arts = Artifacts::new(env, cfg.guidance(f32::INFINITY).map_err(to_core)?).with_checkpoint(epoch, policy, None);
        return run_eval(&one, &arts);
    }
    let (model, index) = fit_barrier(cfg, policy, demos, rollouts).map_err(to_core)?;
    let tau = match cfg.tau {
        Some(t) => t,
        None => calibrate_tau(&index, &trajectory_latents(&policy.encoder, calibration)?, cfg.tau_percentile)?,
    };
    let parts = BarrierParts {
        model: &model,
        index: &index,
        latent: &policy.encoder,
    };
    let mut arts = Artifacts::new(env, cfg.guidance(tau).map_err(to_core)?).with_checkpoint(epoch, policy, Some(parts));
    arts.mpc_candidates = cfg.mpc_candidates;
    arts.gd_steps = cfg.gd_steps;
    arts.gd_step_size = cfg.gd_step_size;
    run_eval(&one, &arts)
}

fn to_core(e: Error) -> lpb_core::Error {
    match e {
        Error::Core(c) => c,
        other => lpb_core::Error::Contract(other.to_string()),
    }
}

/// Retrains the policy on the first `fraction` of the demos, recollects
/// rollouts with the schedule, fits the barrier and evaluates.
fn demo_fraction_cell(
    cfg: &RunConfig,
    env: &lpb_core::env::PointPush,
    demos: &DatasetFile,
    fraction: f64,
    spec: &EvalSpec,
) -> Result<SuccessReport> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(Error::Config(format!("demo fraction {fraction} is outside (0, 1]")));
    }
    let n = ((demos.data.len() as f64 * fraction).ceil() as usize).max(1);
    let subset = &demos.data.trajectories[..n.min(demos.data.len())];
    let mut bc = cfg.bc_config()?;
    if !bc.checkpoints.contains(&bc.epochs) {
        bc.checkpoints.push(bc.epochs);
    }
    let mut policy = DiffusionPolicy::new(cfg.policy_config()?, &mut stream_rng(cfg.seed, 0))?;
    let (_, snaps) = bc_train(&mut policy, subset, &bc)?;
    let refs: Vec<(usize, &DiffusionPolicy)> = snaps.iter().map(|(e, p)| (*e, p)).collect();
    let epoch = *spec.checkpoints.last().unwrap();
    let final_policy = refs
        .iter()
        .find(|(e, _)| *e == epoch)
        .map(|(_, p)| *p)
        .ok_or_else(|| Error::MissingArtifact(format!("policy checkpoint for epoch {epoch}")))?;
    if !spec.method.steered() {
        return Ok(rollout_count_cell(cfg, env, final_policy, subset, &[], &[], spec)?);
    }
    let rollouts = collect(env, &refs, &cfg.schedule(), cfg.sampler()?, cfg.seed)?;
    let cal = checkpoint_rollouts(&rollouts, epoch);
    Ok(rollout_count_cell(cfg, env, final_policy, subset, &rollouts.trajectories, &cal, spec)?)
}

pub fn trace_stage(cfg: &RunConfig, dir: &Path, seed: u64) -> Result<EpisodeTrace> {
    let env = cfg.env()?;
    let loaded = load_for_eval(cfg, dir, Method::Lpb)?;
    let arts = loaded.artifacts(cfg, &env)?;
    let epoch = *cfg.eval_epochs()?.last().unwrap();
    let t = trace_episode(&arts, epoch, seed, cfg.init()?)?;
    report::write_trace(dir, &t)?;
    Ok(t)
}

/// gen-demos → train-policy → collect-rollouts → train-dynamics →
/// calibrate-tau → evaluate. Returns the report path.
pub fn run_pipeline(cfg: &RunConfig, dir: &Path) -> Result<PathBuf> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    write_resolved(cfg, dir)?;
    gen_demos(cfg, dir)?;
    train_policy(cfg, dir, &demos_path(dir), "policy")?;
    collect_rollouts(cfg, dir)?;
    train_dynamics_stage(cfg, dir)?;
    if cfg.tau.is_none() {
        calibrate_stage(cfg, dir)?;
    }
    Ok(evaluate_stage(cfg, dir)?.1)
}

/// Summary lines for `inspect`.
pub fn describe(a: &Artifact) -> Vec<String> {
    let mut out = vec![format!("kind: {}", a.kind().name())];
    match a {
        Artifact::Dataset(d) => {
            out.push(format!("source: {}", d.data.source.name()));
            out.push(format!("trajectories: {}", d.data.len()));
            out.push(format!("steps: {}", d.data.trajectories.iter().map(|t| t.len()).sum::<usize>()));
            out.push(format!("success rate: {:.3}", d.data.success_rate()));
            let mut hist: std::collections::BTreeMap<String, usize> = Default::default();
            for p in &d.data.provenance {
                let key = match p.origin {
                    Origin::Demo(_) => "demo".to_string(),
                    Origin::Checkpoint(e) => format!("checkpoint-e{e}"),
                };
                *hist.entry(key).or_default() += 1;
            }
            for (k, v) in hist {
                out.push(format!("provenance {k}: {v}"));
            }
        }
        Artifact::Policy(p) => {
            out.push(format!("epoch: {}", p.epoch));
            out.push(format!("obs_dim: {}", p.policy.config.obs_dim));
            out.push(format!("latent_dim: {}", p.policy.config.latent_dim));
            let h = p.policy.horizons();
            out.push(format!("horizons: T_o={} T_p={} T_a={}", h.obs, h.pred, h.exec));
            out.push(format!("checksum: {:016x}", p.policy.checksum()));
        }
        Artifact::Dynamics(d) => {
            out.push(format!("latent_dim: {}", d.latent_dim));
            out.push(format!("pred_horizon: {}", d.pred_horizon));
            out.push(format!("widths: {:?}", d.predictor.widths()));
        }
        Artifact::Index(i) => {
            out.push(format!("points: {}", i.len()));
            out.push(format!("dim: {}", i.dim()));
            out.push(format!("backend: {}", i.backend().name()));
        }
        Artifact::Report(r) => {
            out.push(format!("method: {}", r.method.name()));
            out.push(format!("init_mode: {}", init_mode_name(r.init_mode)));
            out.push(format!("episodes: {}", r.episodes));
            for c in &r.per_checkpoint {
                out.push(format!("epoch {}: rate {:.3}", c.epoch, c.rate));
            }
            out.push(format!("mean: {:.4} std: {:.4}", r.mean, r.std));
        }
    }
    out
}

pub fn save_dynamics(m: &DynamicsModel, path: &Path) -> Result<u64> {
    crate::artifact::write_atomic(path, &dynamics_to_container(m).to_bytes()).map_err(|e| Error::io(path, e))?;
    Ok(crate::artifact::checksum(&dynamics_to_container(m).to_bytes()))
}

pub fn save_index(i: &ExpertLatentIndex, path: &Path) -> Result<u64> {
    let bytes = index_to_container(i).to_bytes();
    crate::artifact::write_atomic(path, &bytes).map_err(|e| Error::io(path, e))?;
    Ok(crate::artifact::checksum(&bytes))
}

pub fn save_report(r: &SuccessReport, path: &Path) -> Result<u64> {
    let bytes = report_to_container(r).to_bytes();
    crate::artifact::write_atomic(path, &bytes).map_err(|e| Error::io(path, e))?;
    Ok(crate::artifact::checksum(&bytes))
}
