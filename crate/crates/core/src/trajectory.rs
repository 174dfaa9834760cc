//! Time-ordered episode records shared by demonstrations and rollouts.

use alloc::vec::Vec;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::env::{EnvState, ObsMode};

/// One episode: `n` actions, `n + 1` observations and states (the last being
/// the state after the final action).
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub obs_mode: ObsMode,
    pub observations: Vec<Vec<f32>>,
    pub states: Vec<EnvState>,
    pub actions: Vec<[f32; 2]>,
    /// Whether noise was injected into the executed action at each step.
    pub perturbed: Vec<bool>,
    pub success: bool,
}

impl Trajectory {
    pub fn start(obs_mode: ObsMode, state: EnvState, obs: Vec<f32>) -> Self {
        Self {
            obs_mode,
            observations: alloc::vec![obs],
            states: alloc::vec![state],
            actions: Vec::new(),
            perturbed: Vec::new(),
            success: false,
        }
    }

    pub fn empty(obs_mode: ObsMode) -> Self {
        Self {
            obs_mode,
            observations: Vec::new(),
            states: Vec::new(),
            actions: Vec::new(),
            perturbed: Vec::new(),
            success: false,
        }
    }

    pub fn push(&mut self, action: [f32; 2], perturbed: bool, state: EnvState, obs: Vec<f32>) {
        self.actions.push(action);
        self.perturbed.push(perturbed);
        self.states.push(state);
        self.observations.push(obs);
    }

    pub fn len(&self) -> usize {
        self.actions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.actions.is_empty()
    }

    /// The `frames` observations ending at `t`, replicating the first frame
    /// before the episode start.
    pub fn obs_window(&self, t: usize, frames: usize) -> Vec<&[f32]> {
        (0..frames)
            .map(|i| {
                let idx = (t + i + 1).saturating_sub(frames);
                self.observations[idx].as_slice()
            })
            .collect()
    }

    /// `len` actions starting at `t`, replicating the last action past the end.
    pub fn action_chunk(&self, t: usize, len: usize) -> Vec<f32> {
        let n = self.actions.len();
        let mut out = Vec::with_capacity(len * 2);
        for i in 0..len {
            let a = self.actions[(t + i).min(n - 1)];
            out.extend_from_slice(&a);
        }
        out
    }
}

/// ChaCha8 stream `stream` of `seed`; distinct streams never overlap.
pub fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    r.set_stream(stream);
    r
}
