use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand};
use contour_spt::gradsuite::{Scope, SuiteOptions};
use contour_spt::trainer::Ablation;
use contour_spt_cli::commands::apply_ablation;
use contour_spt_cli::{cmd_eval, cmd_gradcheck, cmd_synth, cmd_train, cmd_transform, Overrides, RunConfig, UsageError};

/// Contour-sketch re-identification with learnable polar sampling.
///
/// Settings come from built-in defaults, overridden by the `--config` file,
/// overridden in turn by flags. The thread count is read from SPT_THREADS.
#[derive(Parser)]
#[command(name = "contour-spt", version)]
struct Cli {
    /// TOML run configuration.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory (overrides `out`).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Replaces every seed in the configuration.
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic dataset under `<out>/data`.
    Synth,
    /// Train on the manifest and write checkpoints and logs.
    Train {
        #[arg(long)]
        manifest: Option<PathBuf>,
        #[arg(long)]
        fixed_theta: bool,
        #[arg(long)]
        no_spt: bool,
        #[arg(long)]
        no_ase: bool,
        #[arg(long)]
        no_triplet: bool,
    },
    /// Evaluate a checkpoint on the test identities under both protocols.
    Eval {
        /// Defaults to `<out>/model.sptn`.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        manifest: Option<PathBuf>,
    },
    /// Resample one image with one stream and dump the angles.
    Transform {
        #[arg(long)]
        image: PathBuf,
        /// 1-based stream index.
        #[arg(long, default_value_t = 1)]
        stream: usize,
        /// Use this model's angles instead of uniform ones.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Finite-difference checks of every differentiable operation.
    Gradcheck {
        /// ops, ase, losses, spt, model or all.
        #[arg(long, default_value = "all")]
        scope: String,
        #[arg(long, default_value_t = 20)]
        seeds: usize,
        #[arg(long, hide = true)]
        inject_sign_flip: bool,
    },
}

fn set_threads() -> Result<()> {
    if let Ok(v) = std::env::var("SPT_THREADS") {
        let n: usize = v.parse().with_context(|| format!("SPT_THREADS must be a positive integer, got {v:?}"))?;
        rayon::ThreadPoolBuilder::new().num_threads(n).build_global()?;
    }
    Ok(())
}

fn run(cli: Cli) -> Result<bool> {
    set_threads()?;
    let overrides = Overrides {
        out: cli.out,
        seed: cli.seed,
    };
    let mut cfg = RunConfig::resolve(cli.config.as_deref(), &overrides)?;
    match cli.command {
        Command::Synth => {
            cmd_synth(&cfg)?;
        }
        Command::Train {
            manifest,
            fixed_theta,
            no_spt,
            no_ase,
            no_triplet,
        } => {
            if manifest.is_some() {
                cfg.data.manifest = manifest;
            }
            apply_ablation(
                &mut cfg,
                Ablation {
                    fixed_theta,
                    no_spt,
                    no_ase,
                    no_triplet,
                },
            );
            cmd_train(&cfg)?;
        }
        Command::Eval { checkpoint, manifest } => {
            if manifest.is_some() {
                cfg.data.manifest = manifest;
            }
            cmd_eval(&cfg, checkpoint.as_deref())?;
        }
        Command::Transform {
            image,
            stream,
            checkpoint,
        } => {
            cmd_transform(&cfg, &image, stream, checkpoint.as_deref())?;
        }
        Command::Gradcheck {
            scope,
            seeds,
            inject_sign_flip,
        } => {
            let scope = match scope.as_str() {
                "all" => None,
                s => Some(s.parse::<Scope>().map_err(|e| UsageError(e.to_string()))?),
            };
            let options = SuiteOptions {
                seeds,
                master_seed: cli.seed.unwrap_or(0),
                flip_sign: inject_sign_flip,
            };
            let out = cmd_gradcheck(scope, &options)?;
            return Ok(out.iter().all(|c| c.passed));
        }
    }
    Ok(true)
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e:#}");
            if e.downcast_ref::<UsageError>().is_some() {
                ExitCode::from(2)
            } else {
                ExitCode::FAILURE
            }
        }
    }
}
