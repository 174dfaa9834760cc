//! PointPush: a disk-shaped agent pushes a square block to a goal pose in the
//! unit workspace.
//!
//! Contact is quasi-static. When the agent disk overlaps the block, the block
//! is displaced along the contact normal by the penetration depth and rotated
//! by the torque of that displacement about its center (gain
//! [`ROT_GAIN`], normalized by the squared side length). After the update the
//! agent is projected back out of the block so the two never overlap.

use alloc::vec;
use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{contract, Result};

pub const STEP_SIZE: f32 = 0.03;
pub const AGENT_RADIUS: f32 = 0.025;
pub const BLOCK_HALF: f32 = 0.06;
pub const SUCCESS_POS_TOL: f32 = 0.04;
pub const SUCCESS_ROT_TOL: f32 = 0.15;
pub const ROT_GAIN: f32 = 0.5;
/// Torque is divided by the squared block side before applying [`ROT_GAIN`].
const ROT_NORM: f32 = 4.0 * BLOCK_HALF * BLOCK_HALF;
pub const EPISODE_CAP: u32 = 400;
pub const VECTOR_DIM: usize = 7;
pub const DEFAULT_PERTURB_SIGMA: f32 = 0.3;

const PI: f32 = core::f32::consts::PI;

/// Wraps an angle to `[-π, π)`.
pub fn wrap_angle(a: f32) -> f32 {
    let two_pi = 2.0 * PI;
    let w = a - two_pi * libm::floorf((a + PI) / two_pi);
    if w >= PI {
        w - two_pi
    } else {
        w
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum InitMode {
    InDist,
    Ood,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ObsMode {
    #[default]
    Vector,
    Grid,
}

/// Full simulator state; a plain value.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EnvState {
    pub agent: [f32; 2],
    pub block: [f32; 2],
    pub angle: f32,
    pub goal: [f32; 2],
    pub goal_angle: f32,
    pub step: u32,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Observation {
    pub mode: ObsMode,
    pub values: Vec<f32>,
}

/// Distribution and rendering parameters. Contact geometry is fixed by the
/// module constants.
#[derive(Debug, Clone, PartialEq)]
pub struct EnvConfig {
    pub goal: [f32; 2],
    pub goal_angle: f32,
    /// Center of the in-distribution block-position disk.
    pub block_center: [f32; 2],
    pub block_radius: f32,
    /// In-distribution block angles are uniform in `[-a, a]` around the goal angle.
    pub block_angle_range: f32,
    pub agent_center: [f32; 2],
    pub agent_spread: [f32; 2],
    /// Out-of-distribution block positions lie on this annulus around `block_center`.
    pub ood_inner: f32,
    pub ood_outer: f32,
    pub grid_size: usize,
    pub episode_cap: u32,
}

impl Default for EnvConfig {
    fn default() -> Self {
        Self {
            goal: [0.5, 0.8],
            goal_angle: 0.0,
            block_center: [0.5, 0.47],
            block_radius: 0.05,
            block_angle_range: 0.25,
            agent_center: [0.5, 0.22],
            agent_spread: [0.06, 0.03],
            ood_inner: 0.25,
            ood_outer: 0.35,
            grid_size: 24,
            episode_cap: EPISODE_CAP,
        }
    }
}

/// Per-step action noise used for robustness tests and noisy data sources.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PerturbSpec {
    pub prob: f32,
    pub sigma: f32,
    pub seed: u64,
}

impl PerturbSpec {
    pub fn new(prob: f32, sigma: f32, seed: u64) -> Result<Self> {
        let s = Self { prob, sigma, seed };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.prob) {
            return Err(contract("perturbation probability must be in [0, 1]"));
        }
        if !(self.sigma > 0.0) {
            return Err(contract("perturbation sigma must be positive"));
        }
        Ok(())
    }

    /// Deterministic per-episode noise stream.
    pub fn rng_for_episode(&self, episode_seed: u64) -> ChaCha8Rng {
        let mut r = ChaCha8Rng::seed_from_u64(self.seed ^ episode_seed.wrapping_mul(0x9e37_79b9_7f4a_7c15));
        r.set_stream(7);
        r
    }
}

pub fn clamp_action(a: [f32; 2]) -> [f32; 2] {
    [a[0].clamp(-1.0, 1.0), a[1].clamp(-1.0, 1.0)]
}

/// With probability `p`, adds `N(0, σ²)` per component, then clamps.
/// Returns the action and whether noise was applied.
pub fn perturb<R: Rng + ?Sized>(action: [f32; 2], spec: &PerturbSpec, rng: &mut R) -> ([f32; 2], bool) {
    let u: f32 = rng.random();
    if u < spec.prob {
        let n0: f32 = StandardNormal.sample(rng);
        let n1: f32 = StandardNormal.sample(rng);
        (
            clamp_action([action[0] + spec.sigma * n0, action[1] + spec.sigma * n1]),
            true,
        )
    } else {
        (action, false)
    }
}

fn rot(v: [f32; 2], c: f32, s: f32) -> [f32; 2] {
    [c * v[0] - s * v[1], s * v[0] + c * v[1]]
}

fn dot(a: [f32; 2], b: [f32; 2]) -> f32 {
    a[0] * b[0] + a[1] * b[1]
}

fn norm(a: [f32; 2]) -> f32 {
    libm::sqrtf(dot(a, a))
}

fn sub(a: [f32; 2], b: [f32; 2]) -> [f32; 2] {
    [a[0] - b[0], a[1] - b[1]]
}

/// Contact between the agent disk and the block in the block frame.
struct Contact {
    /// Outward unit normal (block → agent), block frame.
    normal: [f32; 2],
    /// Contact point on the block boundary, block frame.
    point: [f32; 2],
    depth: f32,
}

fn contact_local(local: [f32; 2]) -> Option<Contact> {
    let h = BLOCK_HALF;
    let inside = local[0].abs() < h && local[1].abs() < h;
    if inside {
        // center inside the square: exit through the nearest face
        let gx = h - local[0].abs();
        let gy = h - local[1].abs();
        let (normal, point, gap) = if gx <= gy {
            let sx = if local[0] >= 0.0 { 1.0 } else { -1.0 };
            ([sx, 0.0], [sx * h, local[1]], gx)
        } else {
            let sy = if local[1] >= 0.0 { 1.0 } else { -1.0 };
            ([0.0, sy], [local[0], sy * h], gy)
        };
        return Some(Contact {
            normal,
            point,
            depth: gap + AGENT_RADIUS,
        });
    }
    let closest = [local[0].clamp(-h, h), local[1].clamp(-h, h)];
    let diff = sub(local, closest);
    let d = norm(diff);
    if d >= AGENT_RADIUS || d == 0.0 {
        return None;
    }
    Some(Contact {
        normal: [diff[0] / d, diff[1] / d],
        point: closest,
        depth: AGENT_RADIUS - d,
    })
}

/// The PointPush simulator.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct PointPush {
    pub config: EnvConfig,
    pub obs_mode: ObsMode,
}

impl PointPush {
    pub fn new(config: EnvConfig, obs_mode: ObsMode) -> Self {
        Self { config, obs_mode }
    }

    pub fn obs_dim(&self) -> usize {
        match self.obs_mode {
            ObsMode::Vector => VECTOR_DIM,
            ObsMode::Grid => self.config.grid_size * self.config.grid_size,
        }
    }

    /// Whether a block position lies in the in-distribution support disk.
    pub fn in_dist_block(&self, block: [f32; 2]) -> bool {
        norm(sub(block, self.config.block_center)) <= self.config.block_radius
    }

    pub fn reset(&self, seed: u64, mode: InitMode) -> (EnvState, Observation) {
        let st = self.sample_initial(seed, mode);
        let obs = self.render(&st, self.obs_mode);
        (st, obs)
    }

    pub fn sample_initial(&self, seed: u64, mode: InitMode) -> EnvState {
        let c = &self.config;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        loop {
            let block = match mode {
                InitMode::InDist => {
                    let r = c.block_radius * libm::sqrtf(rng.random::<f32>());
                    let phi = rng.random_range(-PI..PI);
                    [
                        c.block_center[0] + r * libm::cosf(phi),
                        c.block_center[1] + r * libm::sinf(phi),
                    ]
                }
                InitMode::Ood => {
                    let (a, b) = (c.ood_inner * c.ood_inner, c.ood_outer * c.ood_outer);
                    let r = libm::sqrtf(rng.random_range(a..b));
                    let phi = rng.random_range(-PI..PI);
                    [
                        c.block_center[0] + r * libm::cosf(phi),
                        c.block_center[1] + r * libm::sinf(phi),
                    ]
                }
            };
            let angle = wrap_angle(c.goal_angle + rng.random_range(-c.block_angle_range..=c.block_angle_range));
            let agent = [
                c.agent_center[0] + rng.random_range(-c.agent_spread[0]..=c.agent_spread[0]),
                c.agent_center[1] + rng.random_range(-c.agent_spread[1]..=c.agent_spread[1]),
            ];
            let h = BLOCK_HALF;
            let inside_ws = block.iter().all(|v| (h..=1.0 - h).contains(v));
            let clear = norm(sub(agent, block)) > h * core::f32::consts::SQRT_2 + AGENT_RADIUS + 0.02;
            if inside_ws && clear {
                return EnvState {
                    agent,
                    block,
                    angle,
                    goal: c.goal,
                    goal_angle: c.goal_angle,
                    step: 0,
                };
            }
        }
    }

    pub fn is_success(&self, s: &EnvState) -> bool {
        norm(sub(s.block, s.goal)) <= SUCCESS_POS_TOL
            && wrap_angle(s.angle - s.goal_angle).abs() <= SUCCESS_ROT_TOL
    }

    /// Advances one control step. Returns the next state, its observation and
    /// the success flag.
    pub fn step(&self, state: &EnvState, action: [f32; 2]) -> Result<(EnvState, Observation, bool)> {
        let next = self.advance(state, action)?;
        let obs = self.render(&next, self.obs_mode);
        let ok = self.is_success(&next);
        Ok((next, obs, ok))
    }

    /// Physics only, without rendering.
    pub fn advance(&self, state: &EnvState, action: [f32; 2]) -> Result<EnvState> {
        if !action.iter().all(|v| v.is_finite()) {
            return Err(contract("action must be finite"));
        }
        let a = clamp_action(action);
        let mut s = *state;
        s.step += 1;
        let r = AGENT_RADIUS;
        let h = BLOCK_HALF;
        s.agent = [
            (s.agent[0] + a[0] * STEP_SIZE).clamp(r, 1.0 - r),
            (s.agent[1] + a[1] * STEP_SIZE).clamp(r, 1.0 - r),
        ];

        let (cs, sn) = (libm::cosf(s.angle), libm::sinf(s.angle));
        let local = rot(sub(s.agent, s.block), cs, -sn);
        if let Some(ct) = contact_local(local) {
            let n = rot(ct.normal, cs, sn);
            let arm = rot(ct.point, cs, sn);
            let push = [-n[0] * ct.depth, -n[1] * ct.depth];
            let torque = arm[0] * push[1] - arm[1] * push[0];
            s.block = [
                (s.block[0] + push[0]).clamp(h, 1.0 - h),
                (s.block[1] + push[1]).clamp(h, 1.0 - h),
            ];
            s.angle = wrap_angle(s.angle + ROT_GAIN * torque / ROT_NORM);
        }
        // project the agent out of any residual overlap (walls, rotation sweep)
        for _ in 0..3 {
            let (cs, sn) = (libm::cosf(s.angle), libm::sinf(s.angle));
            let local = rot(sub(s.agent, s.block), cs, -sn);
            match contact_local(local) {
                Some(ct) => {
                    let n = rot(ct.normal, cs, sn);
                    let d = ct.depth + 1e-5;
                    s.agent = [
                        (s.agent[0] + n[0] * d).clamp(r, 1.0 - r),
                        (s.agent[1] + n[1] * d).clamp(r, 1.0 - r),
                    ];
                }
                None => break,
            }
        }
        Ok(s)
    }

    pub fn render(&self, s: &EnvState, mode: ObsMode) -> Observation {
        match mode {
            ObsMode::Vector => Observation {
                mode,
                values: self.vector_obs(s),
            },
            ObsMode::Grid => Observation {
                mode,
                values: self.grid_obs(s),
            },
        }
    }

    fn vector_obs(&self, s: &EnvState) -> Vec<f32> {
        let t = (2.0 * s.step as f32 / self.config.episode_cap as f32 - 1.0).clamp(-1.0, 1.0);
        vec![
            2.0 * s.agent[0] - 1.0,
            2.0 * s.agent[1] - 1.0,
            2.0 * s.block[0] - 1.0,
            2.0 * s.block[1] - 1.0,
            libm::sinf(s.angle),
            libm::cosf(s.angle),
            t,
        ]
    }

    /// Anti-aliased raster: 4×4 samples per cell; agent 1.0, block 0.6, goal 0.3.
    fn grid_obs(&self, s: &EnvState) -> Vec<f32> {
        const SUB: usize = 4;
        let g = self.config.grid_size;
        let mut out = vec![0.0f32; g * g];
        let (cs, sn) = (libm::cosf(s.angle), libm::sinf(s.angle));
        let (gc, gs) = (libm::cosf(s.goal_angle), libm::sinf(s.goal_angle));
        let h = BLOCK_HALF;
        let r2 = AGENT_RADIUS * AGENT_RADIUS;
        let inv = 1.0 / (g * SUB) as f32;
        for row in 0..g {
            for col in 0..g {
                let mut acc = 0.0f32;
                for sy in 0..SUB {
                    for sx in 0..SUB {
                        // row 0 is the top of the workspace (y = 1)
                        let x = ((col * SUB + sx) as f32 + 0.5) * inv;
                        let y = 1.0 - ((row * SUB + sy) as f32 + 0.5) * inv;
                        let p = [x, y];
                        let mut v = 0.0f32;
                        let d = sub(p, s.agent);
                        if dot(d, d) <= r2 {
                            v = 1.0;
                        } else {
                            let l = rot(sub(p, s.block), cs, -sn);
                            if l[0].abs() <= h && l[1].abs() <= h {
                                v = 0.6;
                            } else {
                                let lg = rot(sub(p, s.goal), gc, -gs);
                                let (ax, ay) = (lg[0].abs(), lg[1].abs());
                                // goal outline, 0.012 thick
                                if ax <= h && ay <= h && (ax >= h - 0.012 || ay >= h - 0.012) {
                                    v = 0.3;
                                }
                            }
                        }
                        acc += v;
                    }
                }
                out[row * g + col] = acc / (SUB * SUB) as f32;
            }
        }
        out
    }

    /// Waypoint controller: pick the block face whose push direction best
    /// reduces the position error, offset the contact along that face to
    /// rotate toward the goal angle, walk around the block to the push point,
    /// then push.
    pub fn scripted_expert(&self, s: &EnvState) -> [f32; 2] {
        let h = BLOCK_HALF;
        let r = AGENT_RADIUS;
        let e = sub(s.goal, s.block);
        let dist = norm(e);
        let phi = wrap_angle(s.goal_angle - s.angle);
        if dist < 0.012 && phi.abs() < 0.05 {
            return [0.0, 0.0];
        }
        let (cs, sn) = (libm::cosf(s.angle), libm::sinf(s.angle));
        let e_l = rot(e, cs, -sn);
        let a_l = rot(sub(s.agent, s.block), cs, -sn);

        // face choice, with a bonus for the face the agent already sits behind
        const DIRS: [[f32; 2]; 4] = [[0.0, 1.0], [1.0, 0.0], [0.0, -1.0], [-1.0, 0.0]];
        let mut best = DIRS[0];
        let mut best_score = f32::NEG_INFINITY;
        for d in DIRS {
            let p = [-d[1], d[0]];
            let mut score = dot(d, e_l) / dist.max(1e-6);
            if dot(a_l, d) < -(h + 0.5 * r) && dot(a_l, p).abs() < h {
                score += 0.35;
            }
            if score > best_score {
                best_score = score;
                best = d;
            }
        }
        let d = best;
        let p = [-d[1], d[0]];
        let along = dot(e_l, d).max(0.0);

        // lateral contact offset s gives dθ/dx = -ROT_GAIN·s/ROT_NORM
        let rate = phi.abs() / (along - 0.01).max(0.04);
        let mag = (rate * ROT_NORM / ROT_GAIN).min(0.8 * h);
        let off = if phi > 0.0 { -mag } else { mag };

        let a_d = dot(a_l, d);
        let a_p = dot(a_l, p);
        let behind = a_d <= -(h + 0.5 * r) && (a_p - off).abs() < 0.02;
        let v_l = if behind {
            let speed = (along / STEP_SIZE).clamp(0.2, 1.0);
            let lat = ((off - a_p) / STEP_SIZE).clamp(-0.5, 0.5);
            [d[0] * speed + p[0] * lat, d[1] * speed + p[1] * lat]
        } else {
            let clear = h + r + 0.03;
            let side = if a_p >= 0.0 { 1.0 } else { -1.0 };
            let target = if a_d <= -(h + r) {
                let t = -(h + r + 0.004);
                [d[0] * t + p[0] * off, d[1] * t + p[1] * off]
            } else if a_p.abs() < clear - 0.005 {
                [d[0] * a_d + p[0] * side * clear, d[1] * a_d + p[1] * side * clear]
            } else {
                [-d[0] * clear + p[0] * side * clear, -d[1] * clear + p[1] * side * clear]
            };
            let dv = sub(target, a_l);
            [dv[0] / STEP_SIZE, dv[1] / STEP_SIZE]
        };
        let v = rot(v_l, cs, sn);
        let m = v[0].abs().max(v[1].abs());
        let v = if m > 1.0 { [v[0] / m, v[1] / m] } else { v };
        clamp_action(v)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn env() -> PointPush {
        PointPush::default()
    }

    #[test]
    fn wrap_angle_range() {
        for a in [-10.0f32, -PI, -1.0, 0.0, 3.0, PI, 7.5] {
            let w = wrap_angle(a);
            assert!((-PI..PI).contains(&w), "{a} -> {w}");
            assert!(libm::fabsf(libm::sinf(w) - libm::sinf(a)) < 1e-5);
        }
    }

    #[test]
    fn reset_is_deterministic() {
        let e = env();
        assert_eq!(e.reset(7, InitMode::InDist), e.reset(7, InitMode::InDist));
    }

    #[test]
    fn ood_reset_outside_in_dist_support() {
        let e = env();
        for seed in 0..200 {
            let (s, _) = e.reset(seed, InitMode::Ood);
            assert!(!e.in_dist_block(s.block));
            let (s, _) = e.reset(seed, InitMode::InDist);
            assert!(e.in_dist_block(s.block));
        }
    }

    #[test]
    fn zero_action_only_advances_counter() {
        let e = env();
        let (s, _) = e.reset(3, InitMode::InDist);
        let (n, _, _) = e.step(&s, [0.0, 0.0]).unwrap();
        assert_eq!(n.agent, s.agent);
        assert_eq!(n.block, s.block);
        assert_eq!(n.angle, s.angle);
        assert_eq!(n.step, s.step + 1);
    }

    #[test]
    fn free_motion_moves_agent_by_step_size() {
        let e = env();
        let s = EnvState {
            agent: [0.2, 0.2],
            block: [0.7, 0.7],
            angle: 0.0,
            goal: [0.5, 0.85],
            goal_angle: 0.0,
            step: 0,
        };
        let (n, _, _) = e.step(&s, [1.0, 0.0]).unwrap();
        assert!((n.agent[0] - 0.23).abs() < 1e-6);
        assert_eq!(n.agent[1], 0.2);
        assert_eq!(n.block, s.block);
    }

    #[test]
    fn non_finite_action_rejected() {
        let e = env();
        let (s, _) = e.reset(0, InitMode::InDist);
        assert!(e.step(&s, [f32::NAN, 0.0]).is_err());
    }

    #[test]
    fn central_push_translates_without_rotation() {
        let e = env();
        let s = EnvState {
            agent: [0.5, 0.5 - BLOCK_HALF - AGENT_RADIUS],
            block: [0.5, 0.5],
            angle: 0.0,
            goal: [0.5, 0.85],
            goal_angle: 0.0,
            step: 0,
        };
        let (n, _, _) = e.step(&s, [0.0, 1.0]).unwrap();
        assert!((n.block[1] - 0.53).abs() < 1e-5);
        assert!(n.angle.abs() < 1e-6);
    }

    #[test]
    fn block_at_goal_is_success_for_any_agent() {
        let e = env();
        for agent in [[0.1, 0.1], [0.9, 0.3], [0.5, 0.6]] {
            let s = EnvState {
                agent,
                block: [0.5, 0.85],
                angle: 0.0,
                goal: [0.5, 0.85],
                goal_angle: 0.0,
                step: 5,
            };
            assert!(e.is_success(&s));
        }
    }

    #[test]
    fn expert_holds_at_goal() {
        let e = env();
        let s = EnvState {
            agent: [0.3, 0.5],
            block: [0.5, 0.85],
            angle: 0.0,
            goal: [0.5, 0.85],
            goal_angle: 0.0,
            step: 0,
        };
        let a = e.scripted_expert(&s);
        assert!(norm(a) < 0.05);
    }

    #[test]
    fn expert_pushes_toward_goal_from_push_point() {
        let e = env();
        // block left of the goal, agent directly behind its left face
        let s = EnvState {
            agent: [0.3 - BLOCK_HALF - AGENT_RADIUS - 0.004, 0.85],
            block: [0.3, 0.85],
            angle: 0.0,
            goal: [0.5, 0.85],
            goal_angle: 0.0,
            step: 0,
        };
        assert!(e.scripted_expert(&s)[0] > 0.0);
    }

    #[test]
    fn perturb_zero_probability_is_identity() {
        let spec = PerturbSpec::new(0.0, 0.3, 1).unwrap();
        let mut rng = spec.rng_for_episode(0);
        for i in 0..100 {
            let a = [i as f32 / 100.0 - 0.5, 0.25];
            assert_eq!(perturb(a, &spec, &mut rng), (a, false));
        }
    }

    #[test]
    fn perturb_spec_validation() {
        assert!(PerturbSpec::new(1.5, 0.3, 0).is_err());
        assert!(PerturbSpec::new(0.5, 0.0, 0).is_err());
    }

    #[test]
    fn grid_corner_empty_and_agent_visible() {
        let e = PointPush::new(EnvConfig::default(), ObsMode::Grid);
        let s = EnvState {
            agent: [0.5, 0.5],
            block: [0.2, 0.2],
            angle: 0.3,
            goal: [0.5, 0.85],
            goal_angle: 0.0,
            step: 0,
        };
        let o = e.render(&s, ObsMode::Grid);
        let g = e.config.grid_size;
        assert_eq!(o.values[0], 0.0);
        assert_eq!(o.values[g * g - 1], 0.0);
        let c = g / 2;
        assert!(o.values[c * g + c] > 0.0 || o.values[(c - 1) * g + c - 1] > 0.0);
        assert!(o.values.iter().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn vector_obs_is_normalized() {
        let e = env();
        for seed in 0..50 {
            let (_, o) = e.reset(seed, InitMode::Ood);
            assert_eq!(o.values.len(), VECTOR_DIM);
            assert!(o.values.iter().all(|v| (-1.0..=1.0).contains(v)));
        }
    }
}
