//! Closed-loop execution: anything that maps an observation window to an
//! action chunk, run in receding-horizon fashion against PointPush.

use alloc::vec::Vec;

use rand_chacha::ChaCha8Rng;

use crate::diffusion::{DiffusionPolicy, GuidanceHook};
use crate::env::{perturb, EnvState, PerturbSpec, PointPush};
use crate::error::{contract, Result};
use crate::trajectory::Trajectory;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Sampler {
    #[default]
    Ddpm,
    Ddim(usize),
}

/// What an actor sees when asked for a chunk.
pub struct ActContext<'a> {
    pub window: Vec<&'a [f32]>,
    pub state: &'a EnvState,
    pub env: &'a PointPush,
}

pub trait Actor {
    /// Observation frames per window.
    fn obs_frames(&self) -> usize;
    /// Actions executed from each chunk before replanning.
    fn exec_horizon(&self) -> usize;
    fn act(&mut self, ctx: &ActContext<'_>, rng: &mut ChaCha8Rng) -> Result<Vec<[f32; 2]>>;
}

pub fn chunk_pairs(flat: &[f32]) -> Vec<[f32; 2]> {
    flat.chunks_exact(2).map(|c| [c[0], c[1]]).collect()
}

/// Runs `policy`'s sampler, optionally through a guidance hook.
pub fn sample_chunk(
    policy: &DiffusionPolicy,
    sampler: Sampler,
    z: &[f32],
    rng: &mut ChaCha8Rng,
    hook: Option<&mut dyn GuidanceHook>,
) -> Result<Vec<f32>> {
    match sampler {
        Sampler::Ddpm => policy.sample_ddpm_latent(z, rng, hook),
        Sampler::Ddim(n) => policy.sample_ddim_latent(z, n, rng, hook),
    }
}

/// The unguided diffusion policy.
pub struct PolicyActor<'a> {
    pub policy: &'a DiffusionPolicy,
    pub sampler: Sampler,
}

impl Actor for PolicyActor<'_> {
    fn obs_frames(&self) -> usize {
        self.policy.horizons().obs
    }

    fn exec_horizon(&self) -> usize {
        self.policy.horizons().exec
    }

    fn act(&mut self, ctx: &ActContext<'_>, rng: &mut ChaCha8Rng) -> Result<Vec<[f32; 2]>> {
        let z = self.policy.encode(&ctx.window)?;
        Ok(chunk_pairs(&sample_chunk(self.policy, self.sampler, &z, rng, None)?))
    }
}

/// The scripted expert, replanning every step.
pub struct ExpertActor;

impl Actor for ExpertActor {
    fn obs_frames(&self) -> usize {
        1
    }

    fn exec_horizon(&self) -> usize {
        1
    }

    fn act(&mut self, ctx: &ActContext<'_>, _rng: &mut ChaCha8Rng) -> Result<Vec<[f32; 2]>> {
        Ok(alloc::vec![ctx.env.scripted_expert(ctx.state)])
    }
}

/// Per-episode action noise: a `PerturbSpec` and its dedicated stream.
pub struct EpisodeNoise<'a> {
    pub spec: &'a PerturbSpec,
    pub rng: ChaCha8Rng,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpisodeOutcome {
    pub trajectory: Trajectory,
    pub sampler_calls: usize,
}

/// Observe, request a chunk, execute its first `T_a` actions, repeat until
/// success or `cap` steps.
pub fn act_receding_horizon(
    env: &PointPush,
    actor: &mut dyn Actor,
    init: EnvState,
    cap: usize,
    mut noise: Option<EpisodeNoise<'_>>,
    rng: &mut ChaCha8Rng,
) -> Result<EpisodeOutcome> {
    if cap == 0 {
        return Ok(EpisodeOutcome {
            trajectory: Trajectory::empty(env.obs_mode),
            sampler_calls: 0,
        });
    }
    let obs = env.render(&init, env.obs_mode).values;
    let mut traj = Trajectory::start(env.obs_mode, init, obs);
    traj.success = env.is_success(&init);
    let frames = actor.obs_frames();
    let exec = actor.exec_horizon();
    let mut state = init;
    let mut calls = 0;
    while !traj.success && traj.len() < cap {
        let t = traj.len();
        let chunk = {
            let ctx = ActContext {
                window: traj.obs_window(t, frames),
                state: &state,
                env,
            };
            actor.act(&ctx, rng)?
        };
        calls += 1;
        if chunk.len() < exec {
            return Err(contract("actor returned fewer actions than its execution horizon"));
        }
        for &a in &chunk[..exec] {
            let (executed, hit) = match noise.as_mut() {
                Some(n) => perturb(a, n.spec, &mut n.rng),
                None => (a, false),
            };
            let (next, ob, ok) = env.step(&state, executed)?;
            traj.push(executed, hit, next, ob.values);
            state = next;
            if ok {
                traj.success = true;
            }
            if ok || traj.len() >= cap {
                break;
            }
        }
    }
    Ok(EpisodeOutcome {
        trajectory: traj,
        sampler_calls: calls,
    })
}

/// Scripted-expert episodes from reset seeds `seed_base..seed_base + n`;
/// failures are dropped.
pub fn expert_demos(env: &PointPush, n: usize, seed_base: u64, mode: crate::env::InitMode) -> Result<Vec<Trajectory>> {
    let mut out = Vec::with_capacity(n);
    let mut rng = crate::trajectory::stream_rng(seed_base, 0);
    for i in 0..n as u64 {
        let s = env.sample_initial(seed_base + i, mode);
        let ep = act_receding_horizon(env, &mut ExpertActor, s, env.config.episode_cap as usize, None, &mut rng)?;
        if ep.trajectory.success {
            out.push(ep.trajectory);
        }
    }
    Ok(out)
}
