//! Command-line front end: training, sampling, inversion and evaluation of
//! bidirectional consistency models on synthetic densities.
//!
//! Every run writes its artifacts plus a `manifest.json` into a fresh output
//! directory; `bcm-lab rerun --manifest <file> --out <dir>` re-executes the
//! recorded run and reproduces the artifacts bit for bit.
//!
//! Exit codes: 0 success, 1 usage or I/O error, 2 numeric abort during
//! training. `BCM_LAB_THREADS` caps the worker count.

mod commands;
mod io_util;
mod manifest;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use commands::*;
use io_util::{parse_number_list, prepare_out_dir};
use manifest::{arg_str, arg_u64, read_manifest};
use std::path::PathBuf;

#[derive(Parser)]
#[command(name = "bcm-lab", version, about = "Bidirectional consistency models on toy densities")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model from a key=value config file
    Train(TrainArgs),
    /// Export samples of a named synthetic density
    Dataset(DatasetArgs),
    /// Generate samples from a trained checkpoint
    Sample(SampleArgs),
    /// Map data vectors to noise along an increasing ladder
    Invert(InvertArgs),
    /// Invert then reconstruct, reporting unit-range per-dimension MSE
    Roundtrip(RoundtripArgs),
    /// Spherical interpolation between two inputs through noise space
    Interpolate(InterpolateArgs),
    /// Complete masked coordinates of input vectors
    Inpaint(InpaintArgs),
    /// Sliced-Wasserstein and reconstruction metrics plus schedule exports
    Eval(EvalArgs),
    /// Re-execute a recorded run from its manifest
    Rerun(RerunArgs),
}

#[derive(Args)]
struct TrainArgs {
    /// Path to the key=value training config
    #[arg(long)]
    config: PathBuf,
    /// Output directory (default: runs/<timestamp>-seed<seed>)
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct DatasetArgs {
    /// single_gaussian | ring | two_moons
    #[arg(long, default_value = "single_gaussian")]
    density: String,
    #[arg(long, default_value_t = 2)]
    dim: usize,
    #[arg(long, default_value_t = 0.5)]
    sigma_data: f64,
    /// Number of samples
    #[arg(long, default_value_t = 1000)]
    n: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct SampleArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// one_step | ancestral | zigzag | combined
    #[arg(long, default_value = "one_step")]
    plan: String,
    /// Descending ancestral times (ancestral: ends at 0; combined: ends at
    /// the zigzag handoff)
    #[arg(long)]
    ladder: Option<String>,
    /// Ascending zigzag times
    #[arg(long)]
    zigzag_times: Option<String>,
    /// Fresh-noise scales, one per zigzag step
    #[arg(long)]
    zigzag_eps: Option<String>,
    #[arg(long, default_value_t = 80.0)]
    t_max: f64,
    #[arg(long, default_value_t = 1000)]
    n: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Also dump per-sample trajectories (first 64 samples)
    #[arg(long)]
    trajectories: bool,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct InvertArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Increasing inversion times, first entry doubles as the initial noise
    #[arg(long, default_value = "0.07,6.0,80.0")]
    ladder: String,
    /// CSV of input vectors; defaults to fresh density samples
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long, default_value = "single_gaussian")]
    density: String,
    #[arg(long, default_value_t = 2)]
    dim: usize,
    #[arg(long, default_value_t = 256)]
    n: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct RoundtripArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long, default_value = "0.07,6.0,80.0")]
    ladder: String,
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long, default_value = "single_gaussian")]
    density: String,
    #[arg(long, default_value_t = 2)]
    dim: usize,
    #[arg(long, default_value_t = 256)]
    n: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct InterpolateArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long, default_value = "0.07,1.5,6.0,80.0")]
    ladder: String,
    /// Interpolation weights in [0, 1]
    #[arg(long, default_value = "0,0.25,0.5,0.75,1")]
    alphas: String,
    /// CSV whose first two rows are the endpoints
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct InpaintArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long, default_value = "0.07,0.4,1.0,2.0")]
    ladder: String,
    /// Comma-separated 0/1 flags, 1 marks a missing coordinate
    #[arg(long)]
    mask: String,
    /// Initial noise scale for missing coordinates
    #[arg(long, default_value_t = 0.5)]
    scale: f64,
    /// CSV of input vectors
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long, default_value = "single_gaussian")]
    density: String,
    #[arg(long, default_value_t = 2)]
    dim: usize,
    #[arg(long, default_value_t = 4000)]
    n: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 80.0)]
    t_max: f64,
    /// Boundary count of the exported coverage grid
    #[arg(long, default_value_t = 65)]
    coverage_steps: usize,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct RerunArgs {
    /// manifest.json of a previous run
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long)]
    out: Option<PathBuf>,
}

fn main() {
    std::process::exit(real_main());
}

fn real_main() -> i32 {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return 1;
        }
    };
    if let Ok(raw) = std::env::var("BCM_LAB_THREADS") {
        match raw.parse::<usize>() {
            Ok(n) if n > 0 => {
                let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
            }
            _ => {
                eprintln!("error: BCM_LAB_THREADS must be a positive integer, got '{raw}'");
                return 1;
            }
        }
    }
    match dispatch(cli.command) {
        Ok(()) => 0,
        Err(err) => {
            eprintln!("error: {err:#}");
            match err.downcast_ref::<bcm_lab::BcmError>() {
                Some(bcm_lab::BcmError::TrainAbort { .. })
                | Some(bcm_lab::BcmError::NonFinite { .. }) => 2,
                _ => 1,
            }
        }
    }
}

fn parse_mask(raw: &str) -> Result<Vec<bool>> {
    raw.split(',')
        .map(|f| match f.trim() {
            "0" => Ok(false),
            "1" => Ok(true),
            other => bail!("mask entries must be 0 or 1, got '{other}'"),
        })
        .collect()
}

fn dispatch(command: Command) -> Result<()> {
    match command {
        Command::Train(a) => {
            let text = std::fs::read_to_string(&a.config)
                .with_context(|| format!("reading {}", a.config.display()))?;
            let seed = bcm_lab::config::parse_train_spec(&text)?.config.seed;
            let out = prepare_out_dir(a.out.as_deref(), seed)?;
            cmd_train(&text, &out)
        }
        Command::Dataset(a) => {
            let out = prepare_out_dir(a.out.as_deref(), a.seed)?;
            cmd_dataset(
                &DatasetCmd {
                    density: a.density,
                    dim: a.dim,
                    sigma_data: a.sigma_data,
                    n: a.n,
                    seed: a.seed,
                },
                &out,
            )
        }
        Command::Sample(a) => {
            let out = prepare_out_dir(a.out.as_deref(), a.seed)?;
            cmd_sample(
                &SampleCmd {
                    checkpoint: a.checkpoint,
                    plan: a.plan,
                    ladder: a.ladder.as_deref().map(parse_number_list).transpose()?,
                    zigzag_times: a.zigzag_times.as_deref().map(parse_number_list).transpose()?,
                    zigzag_eps: a.zigzag_eps.as_deref().map(parse_number_list).transpose()?,
                    t_max: a.t_max,
                    n: a.n,
                    seed: a.seed,
                    trajectories: a.trajectories,
                },
                &out,
            )
        }
        Command::Invert(a) => {
            let out = prepare_out_dir(a.out.as_deref(), a.seed)?;
            cmd_invert(
                &InvertCmd {
                    checkpoint: a.checkpoint,
                    ladder: parse_number_list(&a.ladder)?,
                    data: a.data,
                    density: a.density,
                    dim: a.dim,
                    n: a.n,
                    seed: a.seed,
                },
                &out,
            )
        }
        Command::Roundtrip(a) => {
            let out = prepare_out_dir(a.out.as_deref(), a.seed)?;
            cmd_roundtrip(
                &RoundtripCmd {
                    checkpoint: a.checkpoint,
                    ladder: parse_number_list(&a.ladder)?,
                    data: a.data,
                    density: a.density,
                    dim: a.dim,
                    n: a.n,
                    seed: a.seed,
                },
                &out,
            )
        }
        Command::Interpolate(a) => {
            let out = prepare_out_dir(a.out.as_deref(), a.seed)?;
            cmd_interpolate(
                &InterpolateCmd {
                    checkpoint: a.checkpoint,
                    ladder: parse_number_list(&a.ladder)?,
                    alphas: parse_number_list(&a.alphas)?,
                    data: a.data,
                    seed: a.seed,
                },
                &out,
            )
        }
        Command::Inpaint(a) => {
            let out = prepare_out_dir(a.out.as_deref(), a.seed)?;
            cmd_inpaint(
                &InpaintCmd {
                    checkpoint: a.checkpoint,
                    ladder: parse_number_list(&a.ladder)?,
                    mask: parse_mask(&a.mask)?,
                    scale: a.scale,
                    data: a.data,
                    seed: a.seed,
                },
                &out,
            )
        }
        Command::Eval(a) => {
            let out = prepare_out_dir(a.out.as_deref(), a.seed)?;
            cmd_eval(
                &EvalCmd {
                    checkpoint: a.checkpoint,
                    density: a.density,
                    dim: a.dim,
                    n: a.n,
                    seed: a.seed,
                    t_max: a.t_max,
                    coverage_steps: a.coverage_steps,
                },
                &out,
            )
        }
        Command::Rerun(a) => rerun(&a),
    }
}

/// Re-execute a recorded run with the same resolved arguments into a fresh
/// directory.
fn rerun(a: &RerunArgs) -> Result<()> {
    let m = read_manifest(&a.manifest)?;
    let command = m["command"].as_str().unwrap_or_default().to_string();
    let seed = m["seed"].as_u64().unwrap_or(0);
    let out = prepare_out_dir(a.out.as_deref(), seed)?;

    let opt_list = |key: &str| -> Result<Option<Vec<f64>>> {
        match m["args"].get(key).and_then(|v| v.as_str()) {
            Some(s) => Ok(Some(parse_number_list(s)?)),
            None => Ok(None),
        }
    };

    match command.as_str() {
        "train" => cmd_train(arg_str(&m, "config_text")?, &out),
        "dataset" => cmd_dataset(
            &DatasetCmd {
                density: arg_str(&m, "density")?.to_string(),
                dim: arg_u64(&m, "dim")? as usize,
                sigma_data: arg_str(&m, "sigma_data")?.parse()?,
                n: arg_u64(&m, "n")? as usize,
                seed,
            },
            &out,
        ),
        "sample" => cmd_sample(
            &SampleCmd {
                checkpoint: PathBuf::from(arg_str(&m, "checkpoint")?),
                plan: arg_str(&m, "plan")?.to_string(),
                ladder: opt_list("ladder")?,
                zigzag_times: opt_list("zigzag_times")?,
                zigzag_eps: opt_list("zigzag_eps")?,
                t_max: arg_str(&m, "t_max")?.parse()?,
                n: arg_u64(&m, "n")? as usize,
                seed,
                trajectories: m["args"]["trajectories"].as_bool().unwrap_or(false),
            },
            &out,
        ),
        "invert" => cmd_invert(
            &InvertCmd {
                checkpoint: PathBuf::from(arg_str(&m, "checkpoint")?),
                ladder: parse_number_list(arg_str(&m, "ladder")?)?,
                data: m["args"]["data"].as_str().map(PathBuf::from),
                density: arg_str(&m, "density")?.to_string(),
                dim: arg_u64(&m, "dim")? as usize,
                n: arg_u64(&m, "n")? as usize,
                seed,
            },
            &out,
        ),
        "roundtrip" => cmd_roundtrip(
            &RoundtripCmd {
                checkpoint: PathBuf::from(arg_str(&m, "checkpoint")?),
                ladder: parse_number_list(arg_str(&m, "ladder")?)?,
                data: m["args"]["data"].as_str().map(PathBuf::from),
                density: arg_str(&m, "density")?.to_string(),
                dim: arg_u64(&m, "dim")? as usize,
                n: arg_u64(&m, "n")? as usize,
                seed,
            },
            &out,
        ),
        "interpolate" => cmd_interpolate(
            &InterpolateCmd {
                checkpoint: PathBuf::from(arg_str(&m, "checkpoint")?),
                ladder: parse_number_list(arg_str(&m, "ladder")?)?,
                alphas: parse_number_list(arg_str(&m, "alphas")?)?,
                data: PathBuf::from(arg_str(&m, "data")?),
                seed,
            },
            &out,
        ),
        "inpaint" => cmd_inpaint(
            &InpaintCmd {
                checkpoint: PathBuf::from(arg_str(&m, "checkpoint")?),
                ladder: parse_number_list(arg_str(&m, "ladder")?)?,
                mask: parse_mask(arg_str(&m, "mask")?)?,
                scale: arg_str(&m, "scale")?.parse()?,
                data: PathBuf::from(arg_str(&m, "data")?),
                seed,
            },
            &out,
        ),
        "eval" => cmd_eval(
            &EvalCmd {
                checkpoint: PathBuf::from(arg_str(&m, "checkpoint")?),
                density: arg_str(&m, "density")?.to_string(),
                dim: arg_u64(&m, "dim")? as usize,
                n: arg_u64(&m, "n")? as usize,
                seed,
                t_max: arg_str(&m, "t_max")?.parse()?,
                coverage_steps: arg_u64(&m, "coverage_steps")? as usize,
            },
            &out,
        ),
        other => bail!("manifest records unknown command '{other}'"),
    }
}
