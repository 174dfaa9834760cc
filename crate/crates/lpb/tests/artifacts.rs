mod common;

use std::process::Command;

use lpb::artifact::{checksum, Container, Kind};
use lpb::codec::{load_policy, save_artifact, Artifact};
use lpb::config::RunConfig;
use lpb_core::agent::{sample_chunk, Sampler};
use lpb_core::trajectory::stream_rng;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[test]
fn random_artifacts_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    common::round_trip_all(dir.path(), 20, 7).unwrap();
}

#[test]
fn damaged_files_report_their_error_kind() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(common::faults(3).len(), 20);
    let bad = common::check_faults(dir.path(), 3);
    assert!(bad.is_empty(), "{bad:?}");
}

#[test]
fn reloaded_policy_samples_identically() {
    let mut r = ChaCha8Rng::seed_from_u64(5);
    let Artifact::Policy(p) = common::random_policy(&mut r) else { unreachable!() };
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("p.lpbf");
    let sum = save_artifact(&Artifact::Policy(p.clone()), &path).unwrap();
    assert_eq!(sum, checksum(&std::fs::read(&path).unwrap()));
    let q = load_policy(&path).unwrap();
    let z = vec![0.25; p.policy.config.latent_dim];
    for s in 0..5 {
        let a = sample_chunk(&p.policy, Sampler::Ddpm, &z, &mut stream_rng(s, 0), None).unwrap();
        let b = sample_chunk(&q.policy, Sampler::Ddpm, &z, &mut stream_rng(s, 0), None).unwrap();
        assert_eq!(a, b);
    }
}

proptest! {
    #[test]
    fn container_bytes_round_trip(
        tag in 0usize..5,
        blocks in prop::collection::vec(prop::collection::vec(any::<u32>(), 0..20), 0..6),
        key in "[a-z]{1,8}",
        val in any::<i64>(),
    ) {
        // Arbitrary bit patterns, NaN payloads included, must survive.
        let blocks: Vec<Vec<f32>> = blocks.into_iter().map(|b| b.into_iter().map(f32::from_bits).collect()).collect();
        let c = Container::new(Kind::ALL[tag], serde_json::json!({ key: val }), blocks.clone());
        let bytes = c.to_bytes();
        let d = Container::from_bytes(&bytes).unwrap();
        prop_assert_eq!(d.kind, c.kind);
        prop_assert_eq!(&d.meta, &c.meta);
        let bits = |bs: &[Vec<f32>]| bs.iter().map(|b| b.iter().map(|v| v.to_bits()).collect::<Vec<_>>()).collect::<Vec<_>>();
        prop_assert_eq!(bits(&d.blocks), bits(&blocks));
        prop_assert_eq!(d.to_bytes(), bytes);
    }

    #[test]
    fn every_proper_prefix_is_rejected(cut in 0usize..1000) {
        let mut r = ChaCha8Rng::seed_from_u64(9);
        let bytes = common::random_index(&mut r).to_bytes();
        let cut = cut % bytes.len();
        prop_assert_eq!(Container::from_bytes(&bytes[..cut]).unwrap_err().kind(), "truncated");
    }
}

#[test]
fn config_layers_preset_file_and_overrides() {
    let dir = tempfile::tempdir().unwrap();
    let f = dir.path().join("run.toml");
    std::fs::write(&f, "episodes = 7\neta = 2.5\n").unwrap();
    let c = RunConfig::resolve("smoke", Some(&f), &["eta=4".into()]).unwrap();
    assert_eq!((c.episodes, c.eta, c.n_demos), (7, 4.0, 10));
    std::fs::write(&f, "epochs = 3\n").unwrap();
    assert_eq!(RunConfig::resolve("smoke", Some(&f), &[]).unwrap_err().kind(), "config");
    assert_eq!(RunConfig::resolve("nope", None, &[]).unwrap_err().kind(), "config");
}

fn lpb() -> Command {
    Command::new(env!("CARGO_BIN_EXE_lpb"))
}

#[test]
fn cli_inspect_and_error_lines() {
    let dir = tempfile::tempdir().unwrap();
    let mut r = ChaCha8Rng::seed_from_u64(11);
    let path = dir.path().join("idx.lpbf");
    save_artifact(&common::random_index(&mut r), &path).unwrap();
    let out = lpb().arg("inspect").arg(&path).output().unwrap();
    assert!(out.status.success());
    assert!(String::from_utf8_lossy(&out.stdout).contains("index"));

    std::fs::write(&path, b"junk").unwrap();
    let out = lpb().arg("inspect").arg(&path).output().unwrap();
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).starts_with("error kind=bad-magic"));

    let out = lpb().args(["--set", "bogus=1", "evaluate"]).output().unwrap();
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).starts_with("error kind=config"));

    let out = lpb().arg("no-such-command").output().unwrap();
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn cli_evaluate_without_artifacts_names_missing_input() {
    let dir = tempfile::tempdir().unwrap();
    let out = lpb()
        .args(["--preset", "smoke", "--out"])
        .arg(dir.path())
        .arg("evaluate")
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(1));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.starts_with("error kind="), "{err}");
    assert!(err.contains("policy"), "{err}");
}
