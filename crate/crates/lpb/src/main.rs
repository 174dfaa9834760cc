use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use lpb::codec::load_artifact;
use lpb::config::RunConfig;
use lpb::pipeline;
use lpb::{Error, Result};

#[derive(Parser)]
#[command(name = "lpb", version, about = "Train, steer and evaluate diffusion policies on PointPush")]
struct Cli {
    /// TOML file overlaid on the preset.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true, default_value = "pointpush")]
    preset: String,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Run directory (default: $LPB_OUT_DIR, else ./runs).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// `key=value` override, repeatable.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Roll out the scripted expert.
    GenDemos,
    /// Behavior-clone a diffusion policy, writing scheduled checkpoints.
    TrainPolicy {
        /// Training dataset (default: the run's demos).
        #[arg(long)]
        dataset: Option<PathBuf>,
        /// File prefix for the checkpoints.
        #[arg(long, default_value = "policy")]
        prefix: String,
    },
    /// Roll out every scheduled checkpoint.
    CollectRollouts,
    /// Build a curated dataset from demos and rollouts.
    Curate {
        /// Overrides `curate_source`.
        #[arg(long)]
        source: Option<String>,
    },
    /// Fit the latent dynamics model and expert index.
    TrainDynamics,
    /// Calibrate τ from final-checkpoint rollouts.
    CalibrateTau,
    Evaluate,
    Sweep,
    /// Record one steered episode.
    Trace {
        #[arg(long = "episode-seed")]
        episode_seed: u64,
    },
    /// Print a summary of an artifact file.
    Inspect { path: PathBuf },
    /// Every stage from demos to evaluation.
    Run,
}

fn run(cli: Cli) -> Result<()> {
    let mut overrides = Vec::new();
    if let Some(s) = cli.seed {
        overrides.push(format!("seed={s}"));
    }
    if let Some(o) = &cli.out {
        let s = o.to_str().ok_or_else(|| Error::Config("output path is not UTF-8".into()))?;
        overrides.push(format!("out_dir={}", toml::Value::String(s.into())));
    }
    overrides.extend(cli.overrides);
    let cfg = RunConfig::resolve(&cli.preset, cli.config.as_deref(), &overrides)?;
    let dir = cfg.out_root();
    if let Cmd::Inspect { path } = &cli.cmd {
        for line in pipeline::describe(&load_artifact(path)?) {
            println!("{line}");
        }
        return Ok(());
    }
    std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    pipeline::write_resolved(&cfg, &dir)?;
    match cli.cmd {
        Cmd::GenDemos => {
            let d = pipeline::gen_demos(&cfg, &dir)?;
            println!("demos: {} (success rate {:.3})", d.data.len(), d.data.success_rate());
        }
        Cmd::TrainPolicy { dataset, prefix } => {
            let data = dataset.unwrap_or_else(|| pipeline::demos_path(&dir));
            let epochs = pipeline::train_policy(&cfg, &dir, &data, &prefix)?;
            println!("checkpoints: {epochs:?}");
        }
        Cmd::CollectRollouts => {
            let d = pipeline::collect_rollouts(&cfg, &dir)?;
            println!("rollouts: {} (success rate {:.3})", d.data.len(), d.data.success_rate());
        }
        Cmd::Curate { source } => {
            let mut cfg = cfg;
            if let Some(s) = source {
                cfg.curate_source = s;
            }
            let src = cfg.source()?;
            let d = pipeline::curate_stage(&cfg, &dir, src)?;
            println!("{}: {} trajectories", src.name(), d.data.len());
        }
        Cmd::TrainDynamics => pipeline::train_dynamics_stage(&cfg, &dir)?,
        Cmd::CalibrateTau => {
            for (epoch, tau) in pipeline::calibrate_stage(&cfg, &dir)? {
                println!("epoch {epoch}: tau {tau}");
            }
        }
        Cmd::Evaluate => {
            let (r, path) = pipeline::evaluate_stage(&cfg, &dir)?;
            println!("{}: mean {:.4} std {:.4} -> {}", r.method.name(), r.mean, r.std, path.display());
        }
        Cmd::Sweep => {
            for row in pipeline::sweep_stage(&cfg, &dir)? {
                match row.outcome {
                    Ok(r) => println!("{} {}: {:.4}", row.value, row.method.name(), r.mean),
                    Err(e) => println!("{} {}: failed: {e}", row.value, row.method.name()),
                }
            }
        }
        Cmd::Trace { episode_seed } => {
            let t = pipeline::trace_stage(&cfg, &dir, episode_seed)?;
            println!("seed {}: success {} over {} steps", t.seed, t.success, t.records.len());
        }
        Cmd::Run => {
            let path = pipeline::run_pipeline(&cfg, &dir)?;
            println!("report: {}", path.display());
        }
        Cmd::Inspect { .. } => unreachable!(),
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error kind={} msg={}", e.kind(), e.to_string().replace('\n', " "));
            ExitCode::from(1)
        }
    }
}
