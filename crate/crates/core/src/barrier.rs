//! Steering toward expert data in latent space: nearest-expert index, OOD
//! score, threshold calibration, gradient-guided noise prediction and the
//! chunk-level actors built on them.

use alloc::vec::Vec;

use rand_chacha::ChaCha8Rng;

use crate::agent::{chunk_pairs, sample_chunk, ActContext, Actor, Sampler};
use crate::diffusion::{DiffusionPolicy, GuidanceHook, LatentEncoder, SampleStep};
use crate::dynamics::DynamicsModel;
use crate::error::{contract, numeric, shape_err, Result};
use crate::real::Real;
use crate::tape::Tape;
use crate::tensor::Tensor;
use crate::trajectory::Trajectory;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum IndexBackend {
    Brute,
    #[default]
    KdTree,
}

impl IndexBackend {
    pub fn name(self) -> &'static str {
        match self {
            IndexBackend::Brute => "brute",
            IndexBackend::KdTree => "kdtree",
        }
    }

    pub fn from_name(s: &str) -> Result<Self> {
        match s {
            "brute" => Ok(IndexBackend::Brute),
            "kdtree" => Ok(IndexBackend::KdTree),
            _ => Err(contract("unknown index backend")),
        }
    }
}

/// Squared Euclidean distance, accumulated left to right in `f32`.
#[inline]
pub fn dist2(a: &[f32], b: &[f32]) -> f32 {
    let mut s = 0.0f32;
    for (x, y) in a.iter().zip(b) {
        let d = x - y;
        s += d * d;
    }
    s
}

const LEAF_SIZE: usize = 8;

#[derive(Debug, Clone, PartialEq)]
enum Node {
    Leaf { start: usize, end: usize },
    Split { axis: usize, value: f32, left: usize, right: usize },
}

#[derive(Debug, Clone, PartialEq)]
struct KdTree {
    nodes: Vec<Node>,
    /// Point indices, permuted so every leaf owns a contiguous range.
    order: Vec<usize>,
}

impl KdTree {
    fn build(points: &[f32], dim: usize) -> Self {
        let n = points.len() / dim;
        let mut t = KdTree {
            nodes: Vec::new(),
            order: (0..n).collect(),
        };
        t.build_node(points, dim, 0, n);
        t
    }

    fn build_node(&mut self, points: &[f32], dim: usize, start: usize, end: usize) -> usize {
        let id = self.nodes.len();
        self.nodes.push(Node::Leaf { start, end });
        if end - start <= LEAF_SIZE {
            return id;
        }
        let mut best_axis = 0;
        let mut best_spread = 0.0f32;
        for axis in 0..dim {
            let mut lo = f32::INFINITY;
            let mut hi = f32::NEG_INFINITY;
            for &i in &self.order[start..end] {
                let v = points[i * dim + axis];
                lo = lo.min(v);
                hi = hi.max(v);
            }
            if hi - lo > best_spread {
                best_spread = hi - lo;
                best_axis = axis;
            }
        }
        if !(best_spread > 0.0) {
            return id;
        }
        let coord = |i: usize| points[i * dim + best_axis];
        self.order[start..end].sort_by(|&a, &b| coord(a).total_cmp(&coord(b)).then(a.cmp(&b)));
        let mut mid = start + (end - start) / 2;
        // keep equal coordinates on one side so the split value separates them
        let v = coord(self.order[mid]);
        while mid > start && coord(self.order[mid - 1]) == v {
            mid -= 1;
        }
        if mid == start {
            mid = start + (end - start) / 2;
            while mid < end && coord(self.order[mid]) == v {
                mid += 1;
            }
            if mid == end {
                return id;
            }
        }
        let value = coord(self.order[mid]);
        let left = self.build_node(points, dim, start, mid);
        let right = self.build_node(points, dim, mid, end);
        self.nodes[id] = Node::Split {
            axis: best_axis,
            value,
            left,
            right,
        };
        id
    }

    fn nearest(&self, points: &[f32], dim: usize, q: &[f32]) -> (usize, f32) {
        let mut best = (usize::MAX, f32::INFINITY);
        self.search(0, points, dim, q, &mut best);
        best
    }

    fn search(&self, node: usize, points: &[f32], dim: usize, q: &[f32], best: &mut (usize, f32)) {
        match self.nodes[node] {
            Node::Leaf { start, end } => {
                for &i in &self.order[start..end] {
                    let d = dist2(q, &points[i * dim..(i + 1) * dim]);
                    if d < best.1 || (d == best.1 && i < best.0) {
                        *best = (i, d);
                    }
                }
            }
            Node::Split {
                axis,
                value,
                left,
                right,
            } => {
                // left points have coordinate < value, right ones >= value
                let diff = q[axis] - value;
                let (near, far) = if diff < 0.0 { (left, right) } else { (right, left) };
                self.search(near, points, dim, q, best);
                if diff * diff <= best.1 {
                    self.search(far, points, dim, q, best);
                }
            }
        }
    }
}

/// Encoded expert observations with exact 1-nearest-neighbor lookup.
/// Ties are broken toward the lowest point index.
#[derive(Debug, Clone, PartialEq)]
pub struct ExpertLatentIndex {
    dim: usize,
    points: Vec<f32>,
    backend: IndexBackend,
    tree: Option<KdTree>,
    /// Checksum of the encoder that produced the points (0 if unknown).
    pub encoder_checksum: u64,
}

impl ExpertLatentIndex {
    pub fn build(points: Vec<f32>, dim: usize, backend: IndexBackend) -> Result<Self> {
        if dim == 0 || points.is_empty() {
            return Err(contract("expert latent index needs at least one point"));
        }
        if points.len() % dim != 0 {
            return Err(shape_err(&[points.len() / dim, dim], &[points.len()]));
        }
        if points.iter().any(|v| !v.is_finite()) {
            return Err(numeric("non-finite expert latent"));
        }
        let tree = match backend {
            IndexBackend::Brute => None,
            IndexBackend::KdTree => Some(KdTree::build(&points, dim)),
        };
        Ok(Self {
            dim,
            points,
            backend,
            tree,
            encoder_checksum: 0,
        })
    }

    /// Single-frame latents of every observation in `demos`.
    pub fn from_demos(encoder: &LatentEncoder, demos: &[Trajectory], backend: IndexBackend) -> Result<Self> {
        let obs: Vec<&[f32]> = demos
            .iter()
            .flat_map(|d| d.observations.iter().map(|o| o.as_slice()))
            .collect();
        let pts = encoder.encode_frames(&obs)?;
        let mut idx = Self::build(pts, encoder.latent_dim(), backend)?;
        idx.encoder_checksum = encoder.checksum();
        Ok(idx)
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.points.len() / self.dim
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn backend(&self) -> IndexBackend {
        self.backend
    }

    pub fn points(&self) -> &[f32] {
        &self.points
    }

    pub fn point(&self, i: usize) -> &[f32] {
        &self.points[i * self.dim..(i + 1) * self.dim]
    }

    /// Same points under another backend.
    pub fn with_backend(&self, backend: IndexBackend) -> Self {
        let mut out = Self::build(self.points.clone(), self.dim, backend).expect("points already validated");
        out.encoder_checksum = self.encoder_checksum;
        out
    }

    /// `(index, squared distance)` of the nearest point.
    pub fn nearest(&self, q: &[f32]) -> Result<(usize, f32)> {
        if q.len() != self.dim {
            return Err(shape_err(&[self.dim], &[q.len()]));
        }
        if q.iter().any(|v| !v.is_finite()) {
            return Err(numeric("non-finite query latent"));
        }
        Ok(match &self.tree {
            Some(t) => t.nearest(&self.points, self.dim, q),
            None => {
                let mut best = (0, f32::INFINITY);
                for (i, p) in self.points.chunks_exact(self.dim).enumerate() {
                    let d = dist2(q, p);
                    if d < best.1 {
                        best = (i, d);
                    }
                }
                best
            }
        })
    }
}

/// δ(z): squared distance to the nearest expert latent.
pub fn ood_score(index: &ExpertLatentIndex, z: &[f32]) -> Result<f32> {
    Ok(index.nearest(z)?.1)
}

/// Linear-interpolation percentile, `q` in (0, 100].
pub fn percentile(values: &[f64], q: f64) -> Result<f64> {
    if values.is_empty() {
        return Err(contract("percentile of an empty set"));
    }
    if !(q > 0.0 && q <= 100.0) {
        return Err(contract("percentile must be in (0, 100]"));
    }
    let mut v = values.to_vec();
    v.sort_by(|a, b| a.total_cmp(b));
    let pos = q / 100.0 * (v.len() - 1) as f64;
    let lo = libm::floor(pos) as usize;
    let hi = (lo + 1).min(v.len() - 1);
    let frac = pos - lo as f64;
    Ok(v[lo] + (v[hi] - v[lo]) * frac)
}

/// τ as the `q`-th percentile of nonzero δ over `latents` (`[n, D]` rows).
pub fn calibrate_tau(index: &ExpertLatentIndex, latents: &[f32], q: f64) -> Result<f32> {
    if latents.is_empty() {
        return Err(contract("calibration set is empty"));
    }
    let mut scores = Vec::with_capacity(latents.len() / index.dim());
    for z in latents.chunks(index.dim()) {
        let d = ood_score(index, z)?;
        if d != 0.0 {
            scores.push(d as f64);
        }
    }
    if scores.is_empty() {
        return Err(contract("calibration set has no nonzero scores"));
    }
    Ok(percentile(&scores, q)? as f32)
}

/// δ(f(z, A)) with the neighbor of the prediction held fixed, and its
/// gradient with respect to `A`.
pub fn predicted_delta_grad(
    model: &DynamicsModel,
    index: &ExpertLatentIndex,
    z: &[f32],
    chunk: &[f32],
) -> Result<(f32, Vec<f32>)> {
    predicted_delta_grad_in::<f32>(model, index, z, chunk)
}

/// [`predicted_delta_grad`] with the tape run at scalar type `T`. The
/// neighbor is looked up from the prediction rounded to `f32`.
pub fn predicted_delta_grad_in<T: Real>(
    model: &DynamicsModel,
    index: &ExpertLatentIndex,
    z: &[f32],
    chunk: &[f32],
) -> Result<(T, Vec<T>)> {
    if z.len() != model.latent_dim || index.dim() != model.latent_dim {
        return Err(shape_err(&[model.latent_dim], &[z.len(), index.dim()]));
    }
    if chunk.len() != model.chunk_dim() {
        return Err(shape_err(&[model.chunk_dim()], &[chunk.len()]));
    }
    let mut tape: Tape<T> = Tape::new();
    let vars = model.predictor.bind(&mut tape, false);
    let zv = tape.constant(Tensor::row(z).cast());
    let av = tape.var(Tensor::row(chunk).cast());
    let zh = model.predict_on_tape(&mut tape, &vars, zv, av)?;
    let zh32: Vec<f32> = tape.value(zh).data().iter().map(|v| v.to_f64() as f32).collect();
    let (nn, _) = index.nearest(&zh32)?;
    let nv = tape.constant(Tensor::row(index.point(nn)).cast());
    let diff = tape.sub(zh, nv)?;
    let delta = tape.sum_squares(diff);
    let dv = tape.value(delta).data()[0];
    let g = tape.backward(delta)?;
    let grad = g.get_or_zeros(av, &[1, chunk.len()]).into_data();
    if !dv.is_finite() || grad.iter().any(|v| !v.is_finite()) {
        return Err(numeric("non-finite guidance gradient"));
    }
    Ok((dv, grad))
}

/// δ(f(z, A)) without gradient.
pub fn predicted_delta(model: &DynamicsModel, index: &ExpertLatentIndex, z: &[f32], chunk: &[f32]) -> Result<f32> {
    let zh = model.predict(z, chunk)?;
    ood_score(index, &zh)
}

/// The correction added to the noise prediction: `η·√(1−ᾱ_k)·∇_A δ`.
///
/// Adding it to ε_θ lowers the posterior mean along `∇δ`, i.e. it is the
/// noise-space form of ascending `log p ∝ −δ`.
pub fn guidance_correction(grad: &[f32], alpha_bar: f64, eta: f32) -> Vec<f32> {
    let s = eta * libm::sqrt(1.0 - alpha_bar) as f32;
    grad.iter().map(|g| s * g).collect()
}

/// Guided noise prediction for iterate `a_k`.
pub fn guided_noise(
    a_k: &[f32],
    alpha_bar: f64,
    z: &[f32],
    eps: &[f32],
    model: &DynamicsModel,
    index: &ExpertLatentIndex,
    eta: f32,
) -> Result<Vec<f32>> {
    if eps.len() != a_k.len() {
        return Err(shape_err(&[a_k.len()], &[eps.len()]));
    }
    if eta == 0.0 {
        return Ok(eps.to_vec());
    }
    let (_, grad) = predicted_delta_grad(model, index, z, a_k)?;
    let c = guidance_correction(&grad, alpha_bar, eta);
    Ok(eps.iter().zip(&c).map(|(e, c)| e + c).collect())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GuidanceConfig {
    pub eta: f32,
    pub tau: f32,
    pub k_guide: usize,
    pub sampler: Sampler,
}

impl Default for GuidanceConfig {
    fn default() -> Self {
        Self {
            eta: 0.05,
            tau: f32::INFINITY,
            k_guide: 10,
            sampler: Sampler::Ddpm,
        }
    }
}

impl GuidanceConfig {
    pub fn validate(&self, diffusion_steps: usize) -> Result<()> {
        if !(self.eta >= 0.0) || !self.eta.is_finite() {
            return Err(contract("guidance scale must be finite and non-negative"));
        }
        if !(self.tau >= 0.0) {
            return Err(contract("OOD threshold must be non-negative"));
        }
        let limit = match self.sampler {
            Sampler::Ddpm => diffusion_steps,
            Sampler::Ddim(n) => n,
        };
        if self.k_guide > limit {
            return Err(contract("guided step count exceeds the sampler's step count"));
        }
        Ok(())
    }
}

/// Hook applying [`guided_noise`] on the final `k_guide` sampler updates.
pub struct LatentGuide<'a> {
    pub model: &'a DynamicsModel,
    pub index: &'a ExpertLatentIndex,
    pub z: &'a [f32],
    pub eta: f32,
    pub k_guide: usize,
    pub applied: usize,
    pub fallbacks: usize,
}

impl GuidanceHook for LatentGuide<'_> {
    fn guide(&mut self, step: SampleStep, a_k: &[f32], eps: Vec<f32>) -> Result<Vec<f32>> {
        if step.remaining > self.k_guide {
            return Ok(eps);
        }
        match guided_noise(a_k, step.alpha_bar, self.z, &eps, self.model, self.index, self.eta) {
            Ok(g) => {
                self.applied += 1;
                Ok(g)
            }
            Err(crate::Error::Numeric(_)) => {
                self.fallbacks += 1;
                Ok(eps)
            }
            Err(e) => Err(e),
        }
    }
}

/// How an out-of-distribution chunk is chosen.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Steering {
    /// Gradient guidance inside the sampler.
    Guided,
    /// Best of `candidates` unguided samples by predicted δ.
    Mpc { candidates: usize },
    /// Gradient descent on predicted δ from one unguided sample.
    Gd { steps: usize, step_size: f32 },
}

/// One control step of a steered episode.
#[derive(Debug, Clone, PartialEq)]
pub struct TraceRecord {
    pub t: usize,
    pub delta: f32,
    /// Index of the expert latent nearest to `z_t`.
    pub nearest: usize,
    pub active: bool,
    /// Predicted δ of the chunk the base sampler would have produced.
    pub pred_delta_pre: Option<f32>,
    /// Predicted δ of the returned chunk.
    pub pred_delta_post: f32,
    pub fallbacks: usize,
    pub actions: Vec<[f32; 2]>,
}

pub type SteeringTrace = Vec<TraceRecord>;

/// Best of `n` unguided chunks by predicted δ; ties go to the earliest.
pub fn mpc_act(
    policy: &DiffusionPolicy,
    sampler: Sampler,
    cond: &[f32],
    model: &DynamicsModel,
    index: &ExpertLatentIndex,
    z: &[f32],
    candidates: usize,
    rng: &mut ChaCha8Rng,
) -> Result<(Vec<f32>, f32)> {
    if candidates == 0 {
        return Err(contract("MPC needs at least one candidate"));
    }
    let mut best: Option<(Vec<f32>, f32)> = None;
    for _ in 0..candidates {
        let a = sample_chunk(policy, sampler, cond, rng, None)?;
        let d = predicted_delta(model, index, z, &a)?;
        if best.as_ref().is_none_or(|b| d < b.1) {
            best = Some((a, d));
        }
    }
    Ok(best.expect("at least one candidate"))
}

/// Projected gradient descent on predicted δ. Returns the best iterate and
/// its predicted δ; stops early on a non-finite gradient.
pub fn gd_refine(
    model: &DynamicsModel,
    index: &ExpertLatentIndex,
    z: &[f32],
    start: Vec<f32>,
    steps: usize,
    step_size: f32,
) -> Result<(Vec<f32>, f32, bool)> {
    let mut cur = start;
    let (mut d, mut g) = match predicted_delta_grad(model, index, z, &cur) {
        Ok(v) => v,
        Err(crate::Error::Numeric(_)) => {
            let d = predicted_delta(model, index, z, &cur).unwrap_or(f32::INFINITY);
            return Ok((cur, d, true));
        }
        Err(e) => return Err(e),
    };
    let mut best = (cur.clone(), d);
    for _ in 0..steps {
        for (a, gi) in cur.iter_mut().zip(&g) {
            *a = (*a - step_size * gi).clamp(-1.0, 1.0);
        }
        match predicted_delta_grad(model, index, z, &cur) {
            Ok((nd, ng)) => {
                d = nd;
                g = ng;
            }
            Err(crate::Error::Numeric(_)) => return Ok((best.0, best.1, true)),
            Err(e) => return Err(e),
        }
        if d < best.1 {
            best = (cur.clone(), d);
        }
    }
    Ok((best.0, best.1, false))
}

/// Chunk policy that consults the barrier at every replan.
pub struct LpbActor<'a> {
    pub policy: &'a DiffusionPolicy,
    pub model: &'a DynamicsModel,
    pub index: &'a ExpertLatentIndex,
    /// Encoder defining the latent space of the index and the model.
    pub latent: &'a LatentEncoder,
    pub cfg: GuidanceConfig,
    pub steering: Steering,
    /// Also sample the unguided chunk (from a copy of the stream) to record
    /// its predicted δ.
    pub counterfactual: bool,
    pub trace: SteeringTrace,
    t: usize,
}

impl<'a> LpbActor<'a> {
    pub fn new(
        policy: &'a DiffusionPolicy,
        model: &'a DynamicsModel,
        index: &'a ExpertLatentIndex,
        latent: &'a LatentEncoder,
        cfg: GuidanceConfig,
        steering: Steering,
    ) -> Result<Self> {
        cfg.validate(policy.schedule.steps())?;
        model.check_encoder(latent)?;
        if index.dim() != model.latent_dim {
            return Err(shape_err(&[model.latent_dim], &[index.dim()]));
        }
        if model.pred_horizon != policy.horizons().pred {
            return Err(shape_err(&[policy.horizons().pred], &[model.pred_horizon]));
        }
        Ok(Self {
            policy,
            model,
            index,
            latent,
            cfg,
            steering,
            counterfactual: false,
            trace: Vec::new(),
            t: 0,
        })
    }

    fn chunk(&mut self, ctx: &ActContext<'_>, rng: &mut ChaCha8Rng) -> Result<(Vec<f32>, TraceRecord)> {
        let current = *ctx.window.last().ok_or_else(|| contract("empty observation window"))?;
        let z = self.latent.encode_frame(current)?;
        let (nearest, delta) = self.index.nearest(&z)?;
        let cond = self.policy.encode(&ctx.window)?;
        let active = delta > self.cfg.tau;
        let mut rec = TraceRecord {
            t: self.t,
            delta,
            nearest,
            active,
            pred_delta_pre: None,
            pred_delta_post: 0.0,
            fallbacks: 0,
            actions: Vec::new(),
        };
        if !active {
            let a = sample_chunk(self.policy, self.cfg.sampler, &cond, rng, None)?;
            rec.pred_delta_post = predicted_delta(self.model, self.index, &z, &a)?;
            rec.pred_delta_pre = Some(rec.pred_delta_post);
            return Ok((a, rec));
        }
        if self.counterfactual {
            let mut shadow = rng.clone();
            let a0 = sample_chunk(self.policy, self.cfg.sampler, &cond, &mut shadow, None)?;
            rec.pred_delta_pre = Some(predicted_delta(self.model, self.index, &z, &a0)?);
        }
        let a = match self.steering {
            Steering::Guided => {
                let mut hook = LatentGuide {
                    model: self.model,
                    index: self.index,
                    z: &z,
                    eta: self.cfg.eta,
                    k_guide: self.cfg.k_guide,
                    applied: 0,
                    fallbacks: 0,
                };
                let a = sample_chunk(self.policy, self.cfg.sampler, &cond, rng, Some(&mut hook))?;
                rec.fallbacks = hook.fallbacks;
                a
            }
            Steering::Mpc { candidates } => {
                mpc_act(self.policy, self.cfg.sampler, &cond, self.model, self.index, &z, candidates, rng)?.0
            }
            Steering::Gd { steps, step_size } => {
                let a0 = sample_chunk(self.policy, self.cfg.sampler, &cond, rng, None)?;
                let (a, _, stopped) = gd_refine(self.model, self.index, &z, a0, steps, step_size)?;
                rec.fallbacks = stopped as usize;
                a
            }
        };
        rec.pred_delta_post = predicted_delta(self.model, self.index, &z, &a)?;
        Ok((a, rec))
    }
}

impl Actor for LpbActor<'_> {
    fn obs_frames(&self) -> usize {
        self.policy.horizons().obs
    }

    fn exec_horizon(&self) -> usize {
        self.policy.horizons().exec
    }

    fn act(&mut self, ctx: &ActContext<'_>, rng: &mut ChaCha8Rng) -> Result<Vec<[f32; 2]>> {
        let (a, mut rec) = self.chunk(ctx, rng)?;
        let pairs = chunk_pairs(&a);
        rec.actions = pairs[..self.exec_horizon()].to_vec();
        self.t += self.exec_horizon();
        self.trace.push(rec);
        Ok(pairs)
    }
}
