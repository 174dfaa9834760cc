//! Random artifacts and damaged files shared by the round-trip tests and the
//! acceptance run.
#![allow(dead_code)]

use std::path::Path;

use lpb::codec::{
    load_artifact, load_dataset, load_dynamics, load_index, load_policy, load_report, Artifact, DatasetFile, PolicyFile,
};
use lpb::Result;
use lpb_core::barrier::{ExpertLatentIndex, IndexBackend};
use lpb_core::diffusion::{DiffusionPolicy, Horizons, PolicyConfig};
use lpb_core::dynamics::DynamicsModel;
use lpb_core::env::{EnvState, InitMode, ObsMode};
use lpb_core::harness::{CheckpointReport, EpisodeRecord, Method, SuccessReport};
use lpb_core::nn::{Activation, Mlp};
use lpb_core::rollout::{CuratedDataset, Origin, Provenance, Source};
use lpb_core::trajectory::Trajectory;
use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn widths(r: &mut ChaCha8Rng) -> Vec<usize> {
    (0..r.random_range(0..3)).map(|_| r.random_range(1..12)).collect()
}

fn activation(r: &mut ChaCha8Rng) -> Activation {
    *[Activation::Tanh, Activation::Relu, Activation::Identity].choose(r).unwrap()
}

pub fn random_policy(r: &mut ChaCha8Rng) -> Artifact {
    let cfg = PolicyConfig {
        obs_dim: r.random_range(1..8),
        horizons: {
            let pred = r.random_range(1..6);
            Horizons {
                obs: r.random_range(1..4),
                pred,
                exec: r.random_range(1..=pred),
            }
        },
        latent_dim: r.random_range(1..6),
        encoder_hidden: widths(r),
        noise_hidden: widths(r),
        diffusion_steps: r.random_range(1..30),
        activation: activation(r),
        clip_sample: r.random(),
    };
    Artifact::Policy(PolicyFile {
        policy: DiffusionPolicy::new(cfg, r).unwrap(),
        epoch: r.random_range(0..1000),
        seed: r.random(),
    })
}

pub fn random_dynamics(r: &mut ChaCha8Rng) -> Artifact {
    let (d, tp) = (r.random_range(1..6), r.random_range(1..6));
    let mut w = vec![d + 2 * tp];
    w.extend(widths(r));
    w.push(d);
    let net = Mlp::new(&w, activation(r), r).unwrap();
    Artifact::Dynamics(DynamicsModel::from_predictor(net, d, tp, r.random()).unwrap())
}

pub fn random_index(r: &mut ChaCha8Rng) -> Artifact {
    let dim = r.random_range(1..8);
    let n = r.random_range(1..60);
    let pts = (0..n * dim).map(|_| r.random_range(-5.0f32..5.0)).collect();
    let backend = if r.random() { IndexBackend::KdTree } else { IndexBackend::Brute };
    let mut idx = ExpertLatentIndex::build(pts, dim, backend).unwrap();
    idx.encoder_checksum = r.random();
    Artifact::Index(idx)
}

fn random_state(r: &mut ChaCha8Rng) -> EnvState {
    EnvState {
        agent: [r.random(), r.random()],
        block: [r.random(), r.random()],
        angle: r.random_range(-3.0..3.0),
        goal: [r.random(), r.random()],
        goal_angle: r.random_range(-3.0..3.0),
        step: r.random_range(0..300),
    }
}

pub fn random_dataset(r: &mut ChaCha8Rng) -> Artifact {
    let obs_dim = r.random_range(0..10);
    let obs_mode = if r.random() { ObsMode::Vector } else { ObsMode::Grid };
    let n = r.random_range(0..5);
    let mut data = CuratedDataset {
        source: *Source::ALL.choose(r).unwrap(),
        trajectories: Vec::new(),
        provenance: Vec::new(),
    };
    for _ in 0..n {
        let steps = r.random_range(0..12);
        let t = Trajectory {
            obs_mode,
            observations: (0..=steps).map(|_| (0..obs_dim).map(|_| r.random_range(-1.0..1.0)).collect()).collect(),
            states: (0..=steps).map(|_| random_state(r)).collect(),
            actions: (0..steps).map(|_| [r.random_range(-1.0..1.0), r.random_range(-1.0..1.0)]).collect(),
            perturbed: (0..steps).map(|_| r.random()).collect(),
            success: r.random(),
        };
        data.provenance.push(Provenance {
            origin: if r.random() {
                Origin::Demo(r.random_range(0..100))
            } else {
                Origin::Checkpoint(r.random_range(0..500))
            },
            seed: r.random(),
            success: t.success,
        });
        data.trajectories.push(t);
    }
    Artifact::Dataset(DatasetFile { obs_dim, obs_mode, data })
}

pub fn random_report(r: &mut ChaCha8Rng) -> Artifact {
    let episodes = r.random_range(1..8);
    let seed_base = r.random_range(0..1_000_000);
    let per_checkpoint = (0..r.random_range(1..4))
        .map(|_| {
            let eps: Vec<EpisodeRecord> = (0..episodes)
                .map(|i| EpisodeRecord {
                    seed: seed_base + i as u64,
                    success: r.random(),
                    steps: r.random_range(0..300),
                    guided_steps: r.random_range(0..40),
                    recovered: r.random(),
                })
                .collect();
            CheckpointReport {
                epoch: r.random_range(0..500),
                rate: eps.iter().filter(|e| e.success).count() as f64 / episodes as f64,
                episodes: eps,
            }
        })
        .collect();
    Artifact::Report(SuccessReport {
        method: *Method::ALL.choose(r).unwrap(),
        init_mode: if r.random() { InitMode::InDist } else { InitMode::Ood },
        perturb_prob: r.random(),
        seed_base,
        episodes,
        per_checkpoint,
        mean: r.random(),
        std: r.random::<f64>() * 0.5,
        wall_clock_secs: 0.0,
    })
}

pub const GENERATORS: [(&str, fn(&mut ChaCha8Rng) -> Artifact); 5] = [
    ("dataset", random_dataset),
    ("policy", random_policy),
    ("dynamics", random_dynamics),
    ("index", random_index),
    ("report", random_report),
];

/// Round-trips `n` random artifacts of each kind through files in `dir`.
/// Returns a description of the first mismatch.
pub fn round_trip_all(dir: &Path, n: usize, seed: u64) -> std::result::Result<(), String> {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    for (name, make) in GENERATORS {
        for i in 0..n {
            let a = make(&mut r);
            let bytes = a.to_bytes();
            let path = dir.join(format!("{name}-{i}.lpbf"));
            lpb::codec::save_artifact(&a, &path).map_err(|e| format!("{name} {i}: save failed: {e}"))?;
            let back = load_artifact(&path).map_err(|e| format!("{name} {i}: load failed: {e}"))?;
            if back != a {
                return Err(format!("{name} {i}: decoded value differs"));
            }
            if back.to_bytes() != bytes || std::fs::read(&path).unwrap() != bytes {
                return Err(format!("{name} {i}: bytes differ after round trip"));
            }
        }
    }
    Ok(())
}

fn put_u32(b: &mut [u8], at: usize, v: u32) {
    b[at..at + 4].copy_from_slice(&v.to_le_bytes());
}

fn meta_len(b: &[u8]) -> usize {
    u32::from_le_bytes(b[7..11].try_into().unwrap()) as usize
}

/// Replaces the metadata JSON text, fixing up its length prefix.
fn with_meta(b: &[u8], meta: &str) -> Vec<u8> {
    let m = meta_len(b);
    let mut out = b[..7].to_vec();
    out.extend_from_slice(&(meta.len() as u32).to_le_bytes());
    out.extend_from_slice(meta.as_bytes());
    out.extend_from_slice(&b[11 + m..]);
    out
}

fn meta_text(b: &[u8]) -> String {
    String::from_utf8(b[11..11 + meta_len(b)].to_vec()).unwrap()
}

type Loader = fn(&Path) -> Result<()>;

fn any(p: &Path) -> Result<()> {
    load_artifact(p).map(|_| ())
}
fn policy(p: &Path) -> Result<()> {
    load_policy(p).map(|_| ())
}
fn dataset(p: &Path) -> Result<()> {
    load_dataset(p).map(|_| ())
}
fn dynamics(p: &Path) -> Result<()> {
    load_dynamics(p).map(|_| ())
}
fn index(p: &Path) -> Result<()> {
    load_index(p).map(|_| ())
}
fn report(p: &Path) -> Result<()> {
    load_report(p).map(|_| ())
}

/// A damaged file: its name, bytes (`None` for a file that is never
/// written), the loader to try and the error kind it must produce.
pub struct Fault {
    pub name: &'static str,
    pub bytes: Option<Vec<u8>>,
    pub load: Loader,
    pub kind: &'static str,
}

pub fn faults(seed: u64) -> Vec<Fault> {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    let idx = random_index(&mut r).to_bytes();
    let pol = random_policy(&mut r).to_bytes();
    let rep = random_report(&mut r).to_bytes();
    let dyn_ = random_dynamics(&mut r).to_bytes();
    let ds = loop {
        if let Artifact::Dataset(d) = random_dataset(&mut r) {
            if !d.data.is_empty() {
                break Artifact::Dataset(d).to_bytes();
            }
        }
    };
    let mut v: Vec<Fault> = Vec::new();
    let mut add = |name, bytes: Option<Vec<u8>>, load: Loader, kind| v.push(Fault { name, bytes, load, kind });

    let mut b = idx.clone();
    b[0] = b'X';
    add("bad-magic", Some(b), any, "bad-magic");
    add("empty-file", Some(Vec::new()), any, "truncated");
    let mut b = pol.clone();
    b[4..6].copy_from_slice(&2u16.to_le_bytes());
    add("future-version", Some(b), policy, "version");
    let mut b = idx.clone();
    b[6] = 42;
    add("unknown-kind", Some(b), any, "unknown-kind");
    add("policy-as-index", Some(pol.clone()), index, "wrong-kind");
    add("report-as-dataset", Some(rep.clone()), dataset, "wrong-kind");
    add("dataset-as-dynamics", Some(ds.clone()), dynamics, "wrong-kind");
    add("header-cut", Some(idx[..9].to_vec()), any, "truncated");
    add("meta-cut", Some(idx[..12].to_vec()), any, "truncated");
    add("payload-cut", Some(idx[..idx.len() - 3].to_vec()), index, "truncated");
    add("policy-payload-cut", Some(pol[..pol.len() - 4].to_vec()), policy, "truncated");
    let mut b = dyn_.clone();
    b.extend_from_slice(&[0, 1, 2]);
    add("trailing-bytes", Some(b), dynamics, "trailing");
    let m = meta_text(&rep);
    add("meta-not-json", Some(with_meta(&rep, &m[..m.len() - 1])), report, "metadata");
    add("meta-missing-key", Some(with_meta(&rep, &m.replacen("\"method\"", "\"methods\"", 1))), report, "metadata");
    add("meta-unknown-method", Some(with_meta(&rep, &m.replacen("\"method\":\"", "\"method\":\"x", 1))), report, "contract");
    let m = meta_text(&idx);
    let fixed = m.replacen("\"points\":", "\"points\":1", 1);
    add("index-count-mismatch", Some(with_meta(&idx, &fixed)), index, "shape");
    // One extra block: the block count grows but no block follows.
    let mut b = idx.clone();
    let at = 11 + meta_len(&b);
    let n = u32::from_le_bytes(b[at..at + 4].try_into().unwrap());
    put_u32(&mut b, at, n + 1);
    add("block-count-too-high", Some(b), index, "truncated");
    let m = meta_text(&pol);
    add("policy-width-mismatch", Some(with_meta(&pol, &m.replacen("\"obs_dim\":", "\"obs_dim\":9", 1))), policy, "shape");
    let m = meta_text(&ds);
    add("dataset-steps-mismatch", Some(with_meta(&ds, &m.replacen("\"steps\":", "\"steps\":7", 1))), dataset, "shape");
    add("missing-file", None, any, "io");
    v
}

/// Writes each fault under `dir`, loads it and compares error kinds.
/// Returns `(name, expected, got)` for every file that misbehaved.
pub fn check_faults(dir: &Path, seed: u64) -> Vec<(String, String, String)> {
    let mut bad = Vec::new();
    for f in faults(seed) {
        let path = dir.join(format!("{}.lpbf", f.name));
        if let Some(b) = &f.bytes {
            std::fs::write(&path, b).unwrap();
        }
        let got = match (f.load)(&path) {
            Ok(()) => "ok".to_string(),
            Err(e) => e.kind().to_string(),
        };
        if got != f.kind {
            bad.push((f.name.to_string(), f.kind.to_string(), got));
        }
    }
    bad
}
