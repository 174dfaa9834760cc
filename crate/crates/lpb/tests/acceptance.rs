//! Acceptance run for the PointPush stack: one PASS/FAIL line per criterion.
//!
//! The process exits 0 after reporting, whatever the verdicts, so that the
//! workspace test run completes; set `LPB_ACCEPTANCE_STRICT=1` to turn any
//! FAIL into a non-zero exit.

mod common;

use std::path::Path;
use std::time::Instant;

use lpb::config::RunConfig;
use lpb::pipeline::{self, Loaded};
use lpb_core::agent::{act_receding_horizon, sample_chunk, EpisodeNoise, PolicyActor};
use lpb_core::barrier::{
    predicted_delta, predicted_delta_grad_in, ExpertLatentIndex, IndexBackend, LatentGuide, LpbActor, Steering,
};
use lpb_core::diffusion::{bc_train, BcTrainConfig, DiffusionPolicy, Horizons, PolicyConfig};
use lpb_core::dynamics::DynamicsModel;
use lpb_core::env::{EnvState, InitMode, ObsMode};
use lpb_core::harness::{run_eval, EvalSpec, Method, SuccessReport, SweepRow};
use lpb_core::nn::{gradcheck_at, GradLoss, Mlp};
use lpb_core::rollout::task_schedule;
use lpb_core::stats::{paired, spearman};
use lpb_core::tensor::Tensor;
use lpb_core::trajectory::{stream_rng, Trajectory};
use rand::Rng;

const TRAIN_SEED: u64 = 11;
const EVAL_SEED: u64 = 300_000;

type Verdict = Result<(bool, String), String>;

fn err(e: impl std::fmt::Display) -> String {
    e.to_string()
}

fn uniform(r: &mut impl Rng, n: usize) -> Vec<f32> {
    (0..n).map(|_| r.random_range(-1.0f32..1.0)).collect()
}

/// Rows of a coordinate sample: up to `per` random elements of every tensor.
fn sample_coords(net: &Mlp, per: usize, seed: u64) -> Vec<(usize, usize)> {
    let mut r = stream_rng(seed, 0);
    let mut out = Vec::new();
    for (pi, p) in net.params().iter().enumerate() {
        if p.len() <= per {
            out.extend((0..p.len()).map(|i| (pi, i)));
        } else {
            out.extend((0..per).map(|_| (pi, r.random_range(0..p.len()))));
        }
    }
    out
}

fn net_gradcheck(net: &Mlp, seed: u64) -> Result<f64, String> {
    let mut r = stream_rng(seed, 1);
    let rows = 4;
    let x = Tensor::new(&[rows, net.input_dim()], uniform(&mut r, rows * net.input_dim())).map_err(err)?;
    let t = Tensor::new(&[rows, net.output_dim()], uniform(&mut r, rows * net.output_dim())).map_err(err)?;
    gradcheck_at(net, &GradLoss::Mse(t), &x, 1e-6, &sample_coords(net, 60, seed)).map_err(err)
}

fn c1_gradients() -> Verdict {
    let cfg = RunConfig::pointpush();
    let policy = DiffusionPolicy::new(cfg.policy_config().map_err(err)?, &mut stream_rng(1, 0)).map_err(err)?;
    let dynamics =
        DynamicsModel::new(&policy.encoder, cfg.pred_horizon, &cfg.dyn_hidden, &mut stream_rng(2, 0)).map_err(err)?;
    let enc = net_gradcheck(&policy.encoder.net, 3)?;
    let noise = net_gradcheck(&policy.noise_net, 4)?;
    let dynm = net_gradcheck(&dynamics.predictor, 5)?;

    // Composite: δ(f(z, A)) against A, neighbor fixed at the prediction's.
    let d = dynamics.latent_dim;
    let mut r = stream_rng(6, 0);
    let index = ExpertLatentIndex::build(uniform(&mut r, 500 * d), d, IndexBackend::KdTree).map_err(err)?;
    let mut composite = 0.0f64;
    for _ in 0..5 {
        let z = uniform(&mut r, d);
        let a = uniform(&mut r, dynamics.chunk_dim());
        let zh = dynamics.predict(&z, &a).map_err(err)?;
        let n: Vec<f64> = index.point(index.nearest(&zh).map_err(err)?.0).iter().map(|v| *v as f64).collect();
        let delta = |a: &[f64]| -> f64 {
            let mut x: Vec<f64> = z.iter().map(|v| *v as f64).collect();
            x.extend_from_slice(a);
            dynamics.predictor.forward_f64(&x).iter().zip(&n).map(|(p, q)| (p - q).powi(2)).sum()
        };
        let (_, g) = predicted_delta_grad_in::<f64>(&dynamics, &index, &z, &a).map_err(err)?;
        let a64: Vec<f64> = a.iter().map(|v| *v as f64).collect();
        for i in 0..a.len() {
            let central = |h: f64| {
                let (mut up, mut dn) = (a64.clone(), a64.clone());
                up[i] += h;
                dn[i] -= h;
                (delta(&up) - delta(&dn)) / (2.0 * h)
            };
            let fd = (4.0 * central(5e-6) - central(1e-5)) / 3.0;
            composite = composite.max((g[i] - fd).abs() / (g[i].abs() + fd.abs() + 1e-8));
        }
    }
    let worst = enc.max(noise).max(dynm).max(composite);
    Ok((
        worst < 1e-4,
        format!("max rel err encoder {enc:.1e}, noise net {noise:.1e}, dynamics {dynm:.1e}, composite {composite:.1e}"),
    ))
}

/// One trained PointPush stack shared by the behavioral criteria.
struct Stack {
    _tmp: tempfile::TempDir,
    dir: std::path::PathBuf,
    cfg: RunConfig,
    secs: f64,
}

fn train_stack() -> Result<Stack, String> {
    let tmp = tempfile::tempdir().map_err(err)?;
    let dir = tmp.path().to_path_buf();
    let mut cfg = RunConfig::pointpush();
    cfg.seed = TRAIN_SEED;
    cfg.eval_seed = EVAL_SEED;
    cfg.episodes = 200;
    cfg.out_dir = dir.display().to_string();
    let t = Instant::now();
    pipeline::write_resolved(&cfg, &dir).map_err(err)?;
    pipeline::gen_demos(&cfg, &dir).map_err(err)?;
    pipeline::train_policy(&cfg, &dir, &pipeline::demos_path(&dir), "policy").map_err(err)?;
    pipeline::collect_rollouts(&cfg, &dir).map_err(err)?;
    pipeline::train_dynamics_stage(&cfg, &dir).map_err(err)?;
    pipeline::calibrate_stage(&cfg, &dir).map_err(err)?;
    Ok(Stack {
        _tmp: tmp,
        dir,
        cfg,
        secs: t.elapsed().as_secs_f64(),
    })
}

fn final_epoch(cfg: &RunConfig) -> usize {
    *cfg.eval_epochs().unwrap().last().unwrap()
}

fn c2_guidance_off(s: &Stack) -> Verdict {
    let env = s.cfg.env().map_err(err)?;
    let loaded: Loaded = pipeline::load_for_eval(&s.cfg, &s.dir, Method::Lpb).map_err(err)?;
    let (policy, (model, index)) = (&loaded.policies[0].1, loaded.barriers[0].as_ref().unwrap());
    let base_g = s.cfg.guidance(f32::INFINITY).map_err(err)?;
    let variants = [("tau=inf", base_g), ("eta=0", { let mut g = base_g; g.eta = 0.0; g.tau = 0.0; g })];
    let noise = lpb_core::env::PerturbSpec::new(0.3, s.cfg.perturb_sigma, EVAL_SEED).map_err(err)?;
    let cap = env.config.episode_cap as usize;
    let mut mismatches = Vec::new();
    let mut base_success = 0;
    for i in 0..50u64 {
        let seed = EVAL_SEED + i;
        let init = env.sample_initial(seed, InitMode::InDist);
        let noise_for = || Some(EpisodeNoise { spec: &noise, rng: noise.rng_for_episode(seed) });
        let mut base = PolicyActor { policy, sampler: base_g.sampler };
        let b = act_receding_horizon(&env, &mut base, init, cap, noise_for(), &mut stream_rng(seed, 1)).map_err(err)?;
        base_success += b.trajectory.success as usize;
        for (name, g) in variants {
            let mut actor =
                LpbActor::new(policy, model, index, &policy.encoder, g, Steering::Guided).map_err(err)?;
            let l = act_receding_horizon(&env, &mut actor, init, cap, noise_for(), &mut stream_rng(seed, 1))
                .map_err(err)?;
            if !same_bits(&l.trajectory, &b.trajectory) {
                mismatches.push(format!("{name}@{seed}"));
            }
        }
    }
    Ok((
        mismatches.is_empty(),
        format!("50 episodes x 2 settings, base success {base_success}/50, mismatches {mismatches:?}"),
    ))
}

fn same_bits(a: &Trajectory, b: &Trajectory) -> bool {
    let state_bits = |s: &EnvState| {
        [s.agent[0], s.agent[1], s.block[0], s.block[1], s.angle].map(f32::to_bits)
    };
    a.success == b.success
        && a.perturbed == b.perturbed
        && a.actions.len() == b.actions.len()
        && a.actions.iter().zip(&b.actions).all(|(x, y)| x.map(f32::to_bits) == y.map(f32::to_bits))
        && a.states.iter().map(state_bits).eq(b.states.iter().map(state_bits))
        && a.observations.iter().zip(&b.observations).all(|(x, y)| x.iter().map(|v| v.to_bits()).eq(y.iter().map(|v| v.to_bits())))
}

fn c3_index() -> Verdict {
    let dim = 32;
    let mut r = stream_rng(7, 0);
    let mut pts = uniform(&mut r, 10_000 * dim);
    // Exact duplicates at later indices exercise the lowest-index rule.
    for k in 0..500 {
        let (src, dst) = (k * 7, 9_000 + k);
        let row: Vec<f32> = pts[src * dim..(src + 1) * dim].to_vec();
        pts[dst * dim..(dst + 1) * dim].copy_from_slice(&row);
    }
    let kd = ExpertLatentIndex::build(pts.clone(), dim, IndexBackend::KdTree).map_err(err)?;
    let brute = kd.with_backend(IndexBackend::Brute);
    let mut queries = uniform(&mut r, 900 * dim);
    for k in 0..100 {
        queries.extend_from_slice(&pts[(k * 7) * dim..(k * 7 + 1) * dim]);
    }
    let mut bad = 0;
    let mut tie_bad = 0;
    for (qi, q) in queries.chunks(dim).enumerate() {
        let a = kd.nearest(q).map_err(err)?;
        if a != brute.nearest(q).map_err(err)? {
            bad += 1;
        }
        if qi >= 900 && a != ((qi - 900) * 7, 0.0) {
            tie_bad += 1;
        }
    }
    Ok((
        bad == 0 && tie_bad == 0,
        format!("10000 points x 1000 queries: {bad} disagreements, {tie_bad} tie-rule violations over 100 duplicated queries"),
    ))
}

fn c4_delta_reduction(s: &Stack) -> Verdict {
    let env = s.cfg.env().map_err(err)?;
    let loaded = pipeline::load_for_eval(&s.cfg, &s.dir, Method::Lpb).map_err(err)?;
    let (policy, (model, index)) = (&loaded.policies[0].1, loaded.barriers[0].as_ref().unwrap());
    let sampler = s.cfg.sampler().map_err(err)?;
    let n = 100;
    let (mut reduced, mut total) = (0, 0.0f64);
    for i in 0..n as u64 {
        let seed = EVAL_SEED + 10_000 + i;
        let st = env.sample_initial(seed, InitMode::Ood);
        let obs = env.render(&st, env.obs_mode).values;
        let window: Vec<&[f32]> = vec![&obs; policy.horizons().obs];
        let cond = policy.encode(&window).map_err(err)?;
        let z = policy.encoder.encode_frame(&obs).map_err(err)?;
        let a0 = sample_chunk(policy, sampler, &cond, &mut stream_rng(seed, 1), None).map_err(err)?;
        let mut hook = LatentGuide {
            model,
            index,
            z: &z,
            eta: s.cfg.eta,
            k_guide: s.cfg.k_guide,
            applied: 0,
            fallbacks: 0,
        };
        let a1 = sample_chunk(policy, sampler, &cond, &mut stream_rng(seed, 1), Some(&mut hook)).map_err(err)?;
        let d0 = predicted_delta(model, index, &z, &a0).map_err(err)? as f64;
        let d1 = predicted_delta(model, index, &z, &a1).map_err(err)? as f64;
        reduced += (d1 < d0) as usize;
        total += d0 - d1;
    }
    let frac = reduced as f64 / n as f64;
    let mean = total / n as f64;
    Ok((
        frac >= 0.8 && mean > 0.0,
        format!("eta {}: reduced in {reduced}/{n} OOD states, mean reduction {mean:.4}", s.cfg.eta),
    ))
}

fn mixture_demos(n: usize, w: f64, m1: [f32; 2], m2: [f32; 2], len: usize) -> Vec<Trajectory> {
    let n1 = (n as f64 * w).round() as usize;
    let dummy = EnvState {
        agent: [0.5, 0.5],
        block: [0.5, 0.5],
        angle: 0.0,
        goal: [0.5, 0.8],
        goal_angle: 0.0,
        step: 0,
    };
    (0..n)
        .map(|i| {
            let m = if i < n1 { m1 } else { m2 };
            let mut t = Trajectory::start(ObsMode::Vector, dummy, vec![0.0, 0.0]);
            for _ in 0..len {
                t.push(m, false, dummy, vec![0.0, 0.0]);
            }
            t
        })
        .collect()
}

fn c5_mixture() -> Verdict {
    let (w, m1, m2) = (0.3, [0.5f32, 0.5], [-0.5f32, -0.25]);
    let demos = mixture_demos(100, w, m1, m2, 4);
    let mut cfg = PolicyConfig::for_obs_dim(2, 8);
    cfg.horizons = Horizons { obs: 1, pred: 4, exec: 1 };
    cfg.encoder_hidden = vec![16];
    cfg.noise_hidden = vec![128, 128];
    let mut p = DiffusionPolicy::new(cfg, &mut stream_rng(5, 0)).map_err(err)?;
    let tc = BcTrainConfig {
        epochs: 150,
        batch_size: 64,
        lr: 1e-3,
        ..Default::default()
    };
    bc_train(&mut p, &demos, &tc).map_err(err)?;
    let z = p.encode(&[&[0.0, 0.0]]).map_err(err)?;
    let mut r = stream_rng(6, 0);
    let n = 10_000;
    let (mut n1, mut s1, mut s2) = (0usize, [0.0f64; 2], [0.0f64; 2]);
    for _ in 0..n {
        let a = p.sample_ddpm_latent(&z, &mut r, None).map_err(err)?;
        let mut mean = [0.0f64; 2];
        for pair in a.chunks(2) {
            mean[0] += pair[0] as f64 / 4.0;
            mean[1] += pair[1] as f64 / 4.0;
        }
        let d = |m: [f32; 2]| (mean[0] - m[0] as f64).powi(2) + (mean[1] - m[1] as f64).powi(2);
        if d(m1) < d(m2) {
            n1 += 1;
            s1 = [s1[0] + mean[0], s1[1] + mean[1]];
        } else {
            s2 = [s2[0] + mean[0], s2[1] + mean[1]];
        }
    }
    let n2 = n - n1;
    let w_hat = n1 as f64 / n as f64;
    let mu1 = [s1[0] / n1.max(1) as f64, s1[1] / n1.max(1) as f64];
    let mu2 = [s2[0] / n2.max(1) as f64, s2[1] / n2.max(1) as f64];
    let mean_err = (0..2)
        .map(|k| (mu1[k] - m1[k] as f64).abs().max((mu2[k] - m2[k] as f64).abs()))
        .fold(0.0, f64::max);
    Ok((
        (w_hat - w).abs() <= 0.05 && mean_err <= 0.05,
        format!("weight {w_hat:.3} (true {w}), means {mu1:.3?} / {mu2:.3?}, max mean error {mean_err:.3}"),
    ))
}

fn c6_schedules() -> Verdict {
    let want = [("push-t", 270), ("square", 270), ("tool-hang", 150), ("transport", 150), ("libero10", 200)];
    let mut got = Vec::new();
    for (name, _) in want {
        let s = task_schedule(name).ok_or_else(|| format!("no schedule {name}"))?;
        got.push(s.total_trajectories().map_err(err)?);
    }
    let ok = want.iter().zip(&got).all(|((_, w), g)| w == g);
    Ok((ok, format!("totals {got:?}")))
}

fn outcomes(rows: &[SweepRow], value: f64, method: Method, epoch: usize) -> Result<Vec<bool>, String> {
    let row = rows
        .iter()
        .find(|r| r.value == value && r.method == method)
        .ok_or_else(|| format!("missing cell {value} {}", method.name()))?;
    let rep: &SuccessReport = row.outcome.as_ref().map_err(err)?;
    rep.outcomes(epoch).ok_or_else(|| format!("no epoch {epoch}"))
}

fn rate(v: &[bool]) -> f64 {
    v.iter().filter(|b| **b).count() as f64 / v.len() as f64
}

fn c7_perturbation(s: &Stack) -> Verdict {
    let mut cfg = s.cfg.clone();
    cfg.sweep_axis = "perturb-p".into();
    cfg.sweep_values = vec![0.0, 0.1, 0.2, 0.3, 0.4];
    cfg.method = "lpb".into();
    cfg.init_mode = "in-dist".into();
    cfg.episodes = 200;
    let rows = pipeline::sweep_stage(&cfg, &s.dir).map_err(err)?;
    let e = final_epoch(&cfg);
    let (mut bc, mut lpb) = (Vec::new(), Vec::new());
    let mut never_below = true;
    let mut p03 = None;
    for &p in &cfg.sweep_values {
        let b = outcomes(&rows, p, Method::ExpertBc, e)?;
        let l = outcomes(&rows, p, Method::Lpb, e)?;
        never_below &= rate(&l) >= rate(&b);
        if p == 0.3 {
            p03 = Some(paired(&l, &b));
        }
        bc.push(rate(&b));
        lpb.push(rate(&l));
    }
    let cmp = p03.unwrap();
    let (rho_bc, rho_lpb) = (spearman(&cfg.sweep_values, &bc), spearman(&cfg.sweep_values, &lpb));
    let ok = never_below && cmp.p_value < 0.05 && cmp.rate_a > cmp.rate_b && rho_bc < 0.0 && rho_lpb < 0.0;
    Ok((
        ok,
        format!(
            "BC {bc:.3?} LPB {lpb:.3?}; p=0.3 wins/losses {}/{} sign-test p {:.4}; rho BC {rho_bc:.2} LPB {rho_lpb:.2}",
            cmp.wins, cmp.losses, cmp.p_value
        ),
    ))
}

fn c8_rollout_count(s: &Stack) -> Verdict {
    let mut cfg = s.cfg.clone();
    cfg.sweep_axis = "rollout-count".into();
    cfg.sweep_values = vec![0.0, 30.0, 90.0, 180.0];
    cfg.method = "lpb".into();
    cfg.init_mode = "in-dist".into();
    cfg.perturb_p = 0.3;
    cfg.episodes = 200;
    let rows = pipeline::sweep_stage(&cfg, &s.dir).map_err(err)?;
    let e = final_epoch(&cfg);
    let mut lpb = Vec::new();
    let mut bc = Vec::new();
    for &v in &cfg.sweep_values {
        lpb.push(rate(&outcomes(&rows, v, Method::Lpb, e)?));
        bc.push(rate(&outcomes(&rows, v, Method::ExpertBc, e)?));
    }
    let rho = spearman(&cfg.sweep_values, &lpb);
    Ok((rho > 0.0, format!("p=0.3 in-dist: LPB {lpb:.3?} (BC {:.3}), rho {rho:.2}", bc[0])))
}

fn c9_recovery(s: &Stack) -> Verdict {
    let mut cfg = s.cfg.clone();
    cfg.init_mode = "ood".into();
    cfg.perturb_p = 0.0;
    cfg.episodes = 200;
    let env = cfg.env().map_err(err)?;
    let loaded = pipeline::load_for_eval(&cfg, &s.dir, Method::Lpb).map_err(err)?;
    let arts = loaded.artifacts(&cfg, &env).map_err(err)?;
    let spec = cfg.eval_spec().map_err(err)?;
    let base = run_eval(&EvalSpec { method: Method::ExpertBc, ..spec.clone() }, &arts).map_err(err)?;
    let lpb = run_eval(&EvalSpec { method: Method::Lpb, ..spec }, &arts).map_err(err)?;
    let e = final_epoch(&cfg);
    let cmp = paired(&lpb.outcomes(e).unwrap(), &base.outcomes(e).unwrap());
    let ck = lpb.per_checkpoint.iter().find(|c| c.epoch == e).unwrap();
    let succ: Vec<_> = ck.episodes.iter().filter(|x| x.success).collect();
    let crossed = succ.iter().filter(|x| x.recovered).count();
    let frac = if succ.is_empty() { 0.0 } else { crossed as f64 / succ.len() as f64 };
    let ok = cmp.rate_a > cmp.rate_b && cmp.p_value < 0.05 && frac >= 0.5;
    Ok((
        ok,
        format!(
            "OOD: LPB {:.3} vs base {:.3}, wins/losses {}/{} sign-test p {:.4}; crossing in {crossed}/{} successful LPB episodes",
            cmp.rate_a,
            cmp.rate_b,
            cmp.wins,
            cmp.losses,
            cmp.p_value,
            succ.len()
        ),
    ))
}

fn c10_serialization() -> Verdict {
    let dir = tempfile::tempdir().map_err(err)?;
    common::round_trip_all(dir.path(), 100, 300)?;
    let bad = common::check_faults(dir.path(), 301);
    let n = common::faults(301).len();
    Ok((
        bad.is_empty() && n >= 20,
        format!("100 artifacts x 5 kinds round-trip bit-exactly; {n} damaged files, mismatched kinds {bad:?}"),
    ))
}

fn smoke_report(dir: &Path) -> Result<Vec<u8>, String> {
    let mut cfg = RunConfig::preset("smoke").map_err(err)?;
    cfg.seed = 5;
    cfg.out_dir = dir.display().to_string();
    let path = pipeline::run_pipeline(&cfg, dir).map_err(err)?;
    std::fs::read(path).map_err(err)
}

fn c11_determinism() -> Verdict {
    let (a, b) = (tempfile::tempdir().map_err(err)?, tempfile::tempdir().map_err(err)?);
    let ra = smoke_report(a.path())?;
    let rb = smoke_report(b.path())?;
    Ok((
        ra == rb,
        format!("two smoke runs, report files {} and {} bytes, identical: {}", ra.len(), rb.len(), ra == rb),
    ))
}

struct Runner {
    failed: usize,
}

impl Runner {
    fn check(&mut self, id: u32, name: &str, limit_secs: f64, f: impl FnOnce() -> Verdict) {
        let t = Instant::now();
        let v = f();
        let secs = t.elapsed().as_secs_f64();
        let (pass, detail) = match v {
            Ok((ok, d)) => (ok && secs < limit_secs, d),
            Err(e) => (false, format!("error: {e}")),
        };
        if !pass {
            self.failed += 1;
        }
        let verdict = if pass { "PASS" } else { "FAIL" };
        println!("{verdict} criterion {id:>2} {name}: {detail} [{secs:.1}s, limit {limit_secs}s]");
    }
}

fn main() {
    let mut run = Runner { failed: 0 };
    run.check(1, "gradient correctness", 60.0, c1_gradients);
    run.check(3, "nearest-neighbor oracle", 60.0, c3_index);
    run.check(6, "checkpoint schedules", 1.0, c6_schedules);
    run.check(10, "serialization", 60.0, c10_serialization);
    run.check(5, "sampler fidelity", 600.0, c5_mixture);
    run.check(11, "pipeline determinism", 600.0, c11_determinism);

    let stack = train_stack();
    match &stack {
        Ok(s) => println!("shared PointPush stack (seed {TRAIN_SEED}) trained in {:.1}s", s.secs),
        Err(e) => println!("shared PointPush stack failed: {e}"),
    }
    let stack = &stack;
    let with = |f: fn(&Stack) -> Verdict| move || stack.as_ref().map_err(|e| e.clone()).and_then(f);
    run.check(2, "guidance-off equivalence", 120.0, with(c2_guidance_off));
    run.check(4, "delta reduction", 300.0, with(c4_delta_reduction));
    run.check(7, "perturbation sweep", 1800.0, with(c7_perturbation));
    run.check(8, "rollout-count sweep", 2700.0, with(c8_rollout_count));
    run.check(9, "recovery from OOD resets", 900.0, with(c9_recovery));

    println!("acceptance: {} of 11 criteria failed", run.failed);
    if run.failed > 0 && std::env::var_os("LPB_ACCEPTANCE_STRICT").is_some() {
        std::process::exit(1);
    }
}
