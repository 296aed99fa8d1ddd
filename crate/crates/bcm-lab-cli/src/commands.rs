//! One function per subcommand. Each resolves its arguments up front,
//! records them in the run manifest, and writes every artifact into a fresh
//! output directory, so a manifest is always enough to reproduce the run.

use crate::io_util::{read_points_csv, write_points_csv};
use crate::manifest::RunManifest;
use anyhow::{anyhow, bail, Context, Result};
use bcm_lab::checkpoint;
use bcm_lab::config::{parse_train_spec, format_train_spec, DatasetKind, DatasetSpec};
use bcm_lab::inversion::{inpaint, invert, roundtrip_mse, slerp_interpolate, InversionPlan, Mask};
use bcm_lab::model::ConsistencyModel;
use bcm_lab::network::ModelParams;
use bcm_lab::oracle::{sliced_wasserstein, MixtureDensity};
use bcm_lab::rng::{derive_seed, stream_rng, tag};
use bcm_lab::samplers::{sample_batch, sample_trajectory, SamplerPlan};
use bcm_lab::schedules::{noise_pmf, pair_coverage_pmf, write_coverage_csv, TimeGrid};
use bcm_lab::training::run_training;
use bcm_lab::BcmError;
use serde_json::{json, Map, Value};
use std::path::{Path, PathBuf};
use std::time::Instant;

fn args_map(pairs: &[(&str, Value)]) -> Map<String, Value> {
    pairs.iter().map(|(k, v)| (k.to_string(), v.clone())).collect()
}

fn load_model(path: &Path) -> Result<(ModelParams, String)> {
    let (params, checksum) =
        checkpoint::load(path).with_context(|| format!("loading {}", path.display()))?;
    Ok((params, checksum))
}

fn density_from_flags(kind: &str, dim: usize, sigma_data: f64) -> Result<MixtureDensity> {
    let spec = DatasetSpec { kind: DatasetKind::parse(kind)?, dim };
    Ok(spec.build(sigma_data)?)
}

fn draw_dataset(density: &MixtureDensity, n: usize, seed: u64) -> Vec<Vec<f64>> {
    (0..n)
        .map(|i| {
            let mut rng = stream_rng(seed, tag::DATASET, i as u64, 0);
            density.sample(&mut rng)
        })
        .collect()
}

fn list_to_string(v: &[f64]) -> String {
    v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",")
}

// --- train ----------------------------------------------------------------

pub fn cmd_train(config_text: &str, out: &Path) -> Result<()> {
    let start = Instant::now();
    let spec = parse_train_spec(config_text)?;
    let density = spec.dataset.build(spec.config.sigma_data)?;
    let resolved = format_train_spec(&spec);
    std::fs::write(out.join("config.txt"), &resolved)?;

    let result = match run_training(&spec.config, &density) {
        Ok(r) => r,
        Err(BcmError::TrainAbort { iter, what, batch_csv }) => {
            std::fs::write(out.join("abort_batch.csv"), batch_csv)?;
            return Err(anyhow!(BcmError::TrainAbort {
                iter,
                what,
                batch_csv: format!("written to {}", out.join("abort_batch.csv").display()),
            }));
        }
        Err(e) => return Err(e.into()),
    };

    let mut loss_csv = String::from("k,n_k,ct,st,total\n");
    for r in &result.log {
        loss_csv.push_str(&format!("{},{},{},{},{}\n", r.k, r.n_k, r.ct, r.st, r.total));
    }
    std::fs::write(out.join("loss.csv"), loss_csv)?;

    let ckpt_path = out.join("model.ckpt");
    let checksum = checkpoint::save(&ckpt_path, &result.ema)?;
    println!("checkpoint {} crc32 {checksum}", ckpt_path.display());

    RunManifest {
        command: "train".into(),
        args: args_map(&[("config_text", json!(resolved))]),
        seed: spec.config.seed,
        checkpoint_checksum: checksum,
        duration_seconds: start.elapsed().as_secs_f64(),
        outputs: vec![
            "config.txt".into(),
            "loss.csv".into(),
            "model.ckpt".into(),
            "model.ckpt.txt".into(),
        ],
    }
    .write(out)?;
    Ok(())
}

// --- dataset ----------------------------------------------------------------

pub struct DatasetCmd {
    pub density: String,
    pub dim: usize,
    pub sigma_data: f64,
    pub n: usize,
    pub seed: u64,
}

pub fn cmd_dataset(c: &DatasetCmd, out: &Path) -> Result<()> {
    let start = Instant::now();
    let density = density_from_flags(&c.density, c.dim, c.sigma_data)?;
    let samples = draw_dataset(&density, c.n, c.seed);
    write_points_csv(&out.join("samples.csv"), &samples)?;
    RunManifest {
        command: "dataset".into(),
        args: args_map(&[
            ("density", json!(c.density)),
            ("dim", json!(c.dim)),
            ("sigma_data", json!(c.sigma_data.to_string())),
            ("n", json!(c.n)),
        ]),
        seed: c.seed,
        checkpoint_checksum: String::new(),
        duration_seconds: start.elapsed().as_secs_f64(),
        outputs: vec!["samples.csv".into()],
    }
    .write(out)?;
    Ok(())
}

// --- sample -----------------------------------------------------------------

pub struct SampleCmd {
    pub checkpoint: PathBuf,
    pub plan: String,
    pub ladder: Option<Vec<f64>>,
    pub zigzag_times: Option<Vec<f64>>,
    pub zigzag_eps: Option<Vec<f64>>,
    pub t_max: f64,
    pub n: usize,
    pub seed: u64,
    pub trajectories: bool,
}

pub fn build_sampler_plan(c: &SampleCmd) -> Result<SamplerPlan> {
    let plan = match c.plan.as_str() {
        "one_step" => SamplerPlan::one_step(c.t_max)?,
        "ancestral" => match &c.ladder {
            Some(times) => SamplerPlan::ancestral(times.clone())?,
            None => SamplerPlan::default_nfe2(c.t_max)?,
        },
        "zigzag" => match (&c.zigzag_times, &c.zigzag_eps) {
            (Some(times), Some(eps)) => SamplerPlan::zigzag(times.clone(), eps.clone(), c.seed)?,
            (None, None) => SamplerPlan::default_nfe3(c.t_max, c.seed)?,
            _ => bail!("zigzag needs both --zigzag-times and --zigzag-eps, or neither"),
        },
        "combined" => match (&c.ladder, &c.zigzag_times, &c.zigzag_eps) {
            (Some(anc), Some(times), Some(eps)) => {
                SamplerPlan::combined(anc.clone(), times.clone(), eps.clone(), c.seed)?
            }
            (None, None, None) => SamplerPlan::default_nfe4(c.t_max, c.seed)?,
            _ => bail!("combined needs --ladder, --zigzag-times and --zigzag-eps, or none"),
        },
        other => bail!("unknown plan '{other}' (one_step|ancestral|zigzag|combined)"),
    };
    Ok(plan.with_seed(c.seed))
}

pub fn cmd_sample(c: &SampleCmd, out: &Path) -> Result<()> {
    let start = Instant::now();
    let (model, checksum) = load_model(&c.checkpoint)?;
    let plan = build_sampler_plan(c)?;
    println!("plan {} nfe {}", plan.kind.as_str(), plan.nfe());

    let samples = sample_batch(&model, &plan, c.n, c.seed)?;
    write_points_csv(&out.join("samples.csv"), &samples)?;
    let mut outputs = vec!["samples.csv".into()];

    if c.trajectories {
        let dim = model.dim();
        let mut rows = Vec::new();
        for i in 0..c.n.min(64) {
            let traj = sample_trajectory(&model, &plan, i, c.seed)?;
            for (t, state) in &traj.points {
                let mut row = Vec::with_capacity(dim + 2);
                row.push(i as f64);
                row.push(*t);
                row.extend_from_slice(state);
                rows.push(row);
            }
        }
        write_points_csv(&out.join("trajectories.csv"), &rows)?;
        outputs.push("trajectories.csv".into());
    }

    RunManifest {
        command: "sample".into(),
        args: args_map(&[
            ("checkpoint", json!(c.checkpoint.display().to_string())),
            ("plan", json!(c.plan)),
            ("ladder", json!(c.ladder.as_ref().map(|v| list_to_string(v)))),
            ("zigzag_times", json!(c.zigzag_times.as_ref().map(|v| list_to_string(v)))),
            ("zigzag_eps", json!(c.zigzag_eps.as_ref().map(|v| list_to_string(v)))),
            ("t_max", json!(c.t_max.to_string())),
            ("n", json!(c.n)),
            ("trajectories", json!(c.trajectories)),
        ]),
        seed: c.seed,
        checkpoint_checksum: checksum,
        duration_seconds: start.elapsed().as_secs_f64(),
        outputs,
    }
    .write(out)?;
    Ok(())
}

// --- invert -----------------------------------------------------------------

pub struct InvertCmd {
    pub checkpoint: PathBuf,
    pub ladder: Vec<f64>,
    pub data: Option<PathBuf>,
    pub density: String,
    pub dim: usize,
    pub n: usize,
    pub seed: u64,
}

fn input_points(
    data: Option<&PathBuf>,
    density: &str,
    dim: usize,
    sigma_data: f64,
    n: usize,
    seed: u64,
) -> Result<Vec<Vec<f64>>> {
    match data {
        Some(path) => read_points_csv(path),
        None => {
            let d = density_from_flags(density, dim, sigma_data)?;
            Ok(draw_dataset(&d, n, seed))
        }
    }
}

pub fn cmd_invert(c: &InvertCmd, out: &Path) -> Result<()> {
    let start = Instant::now();
    let (model, checksum) = load_model(&c.checkpoint)?;
    let plan = InversionPlan::new(c.ladder.clone(), c.seed)?;
    println!("inversion nfe {}", plan.nfe());
    let points = input_points(c.data.as_ref(), &c.density, c.dim, model.sigma_data, c.n, c.seed)?;
    let noises: Result<Vec<Vec<f64>>> = points
        .iter()
        .enumerate()
        .map(|(i, x)| {
            let p = plan.clone().with_seed(derive_seed(c.seed, tag::INVERT, i as u64));
            Ok(invert(&model, &p, x)?.final_state().to_vec())
        })
        .collect();
    write_points_csv(&out.join("noise.csv"), &noises?)?;

    RunManifest {
        command: "invert".into(),
        args: args_map(&[
            ("checkpoint", json!(c.checkpoint.display().to_string())),
            ("ladder", json!(list_to_string(&c.ladder))),
            ("data", json!(c.data.as_ref().map(|p| p.display().to_string()))),
            ("density", json!(c.density)),
            ("dim", json!(c.dim)),
            ("n", json!(c.n)),
        ]),
        seed: c.seed,
        checkpoint_checksum: checksum,
        duration_seconds: start.elapsed().as_secs_f64(),
        outputs: vec!["noise.csv".into()],
    }
    .write(out)?;
    Ok(())
}

// --- roundtrip ----------------------------------------------------------------

pub struct RoundtripCmd {
    pub checkpoint: PathBuf,
    pub ladder: Vec<f64>,
    pub data: Option<PathBuf>,
    pub density: String,
    pub dim: usize,
    pub n: usize,
    pub seed: u64,
}

pub fn cmd_roundtrip(c: &RoundtripCmd, out: &Path) -> Result<()> {
    let start = Instant::now();
    let (model, checksum) = load_model(&c.checkpoint)?;
    let inv_plan = InversionPlan::new(c.ladder.clone(), c.seed)?;
    let gen_plan = SamplerPlan::one_step(inv_plan.t_end())?;
    let points = input_points(c.data.as_ref(), &c.density, c.dim, model.sigma_data, c.n, c.seed)?;
    let report = roundtrip_mse(&model, &inv_plan, &gen_plan, &points)?;
    println!("roundtrip nfe {} mse {}", inv_plan.nfe() + 1, report.mse);

    let mut csv = String::from("metric,value\n");
    csv.push_str(&format!("roundtrip_mse,{}\n", report.mse));
    csv.push_str(&format!("n_samples,{}\n", report.n_samples));
    csv.push_str(&format!("inversion_nfe,{}\n", inv_plan.nfe()));
    for (j, (lo, hi)) in report.per_dim_min.iter().zip(&report.per_dim_max).enumerate() {
        csv.push_str(&format!("dim{j}_min,{lo}\n"));
        csv.push_str(&format!("dim{j}_max,{hi}\n"));
    }
    std::fs::write(out.join("roundtrip.csv"), csv)?;

    RunManifest {
        command: "roundtrip".into(),
        args: args_map(&[
            ("checkpoint", json!(c.checkpoint.display().to_string())),
            ("ladder", json!(list_to_string(&c.ladder))),
            ("data", json!(c.data.as_ref().map(|p| p.display().to_string()))),
            ("density", json!(c.density)),
            ("dim", json!(c.dim)),
            ("n", json!(c.n)),
        ]),
        seed: c.seed,
        checkpoint_checksum: checksum,
        duration_seconds: start.elapsed().as_secs_f64(),
        outputs: vec!["roundtrip.csv".into()],
    }
    .write(out)?;
    Ok(())
}

// --- interpolate ---------------------------------------------------------------

pub struct InterpolateCmd {
    pub checkpoint: PathBuf,
    pub ladder: Vec<f64>,
    pub alphas: Vec<f64>,
    pub data: PathBuf,
    pub seed: u64,
}

pub fn cmd_interpolate(c: &InterpolateCmd, out: &Path) -> Result<()> {
    let start = Instant::now();
    let (model, checksum) = load_model(&c.checkpoint)?;
    let points = read_points_csv(&c.data)?;
    if points.len() < 2 {
        bail!("interpolation needs two input vectors, got {}", points.len());
    }
    let plan = InversionPlan::new(c.ladder.clone(), c.seed)?;
    let outs = slerp_interpolate(&model, &points[0], &points[1], &c.alphas, &plan)?;
    let rows: Vec<Vec<f64>> = c
        .alphas
        .iter()
        .zip(&outs)
        .map(|(&a, v)| {
            let mut row = vec![a];
            row.extend_from_slice(v);
            row
        })
        .collect();
    write_points_csv(&out.join("interpolations.csv"), &rows)?;
    println!("interpolation nfe {}", 2 * plan.nfe() + c.alphas.len());

    RunManifest {
        command: "interpolate".into(),
        args: args_map(&[
            ("checkpoint", json!(c.checkpoint.display().to_string())),
            ("ladder", json!(list_to_string(&c.ladder))),
            ("alphas", json!(list_to_string(&c.alphas))),
            ("data", json!(c.data.display().to_string())),
        ]),
        seed: c.seed,
        checkpoint_checksum: checksum,
        duration_seconds: start.elapsed().as_secs_f64(),
        outputs: vec!["interpolations.csv".into()],
    }
    .write(out)?;
    Ok(())
}

// --- inpaint ---------------------------------------------------------------

pub struct InpaintCmd {
    pub checkpoint: PathBuf,
    pub ladder: Vec<f64>,
    pub mask: Vec<bool>,
    pub scale: f64,
    pub data: PathBuf,
    pub seed: u64,
}

pub fn cmd_inpaint(c: &InpaintCmd, out: &Path) -> Result<()> {
    let start = Instant::now();
    let (model, checksum) = load_model(&c.checkpoint)?;
    let plan = InversionPlan::new(c.ladder.clone(), c.seed)?;
    let mask = Mask::new(c.mask.clone(), c.scale)?;
    let points = read_points_csv(&c.data)?;
    let rows: Result<Vec<Vec<f64>>> = points
        .iter()
        .enumerate()
        .map(|(i, x)| {
            let p = plan.clone().with_seed(derive_seed(c.seed, tag::INPAINT, i as u64));
            Ok(inpaint(&model, x, &mask, &p)?)
        })
        .collect();
    write_points_csv(&out.join("inpainted.csv"), &rows?)?;
    println!("inpaint nfe {}", plan.nfe() + 1);

    RunManifest {
        command: "inpaint".into(),
        args: args_map(&[
            ("checkpoint", json!(c.checkpoint.display().to_string())),
            ("ladder", json!(list_to_string(&c.ladder))),
            (
                "mask",
                json!(c
                    .mask
                    .iter()
                    .map(|&m| if m { "1" } else { "0" })
                    .collect::<Vec<_>>()
                    .join(",")),
            ),
            ("scale", json!(c.scale.to_string())),
            ("data", json!(c.data.display().to_string())),
        ]),
        seed: c.seed,
        checkpoint_checksum: checksum,
        duration_seconds: start.elapsed().as_secs_f64(),
        outputs: vec!["inpainted.csv".into()],
    }
    .write(out)?;
    Ok(())
}

// --- eval ---------------------------------------------------------------

pub struct EvalCmd {
    pub checkpoint: PathBuf,
    pub density: String,
    pub dim: usize,
    pub n: usize,
    pub seed: u64,
    pub t_max: f64,
    pub coverage_steps: usize,
}

pub fn cmd_eval(c: &EvalCmd, out: &Path) -> Result<()> {
    let start = Instant::now();
    let (model, checksum) = load_model(&c.checkpoint)?;
    let density = density_from_flags(&c.density, c.dim, model.sigma_data)?;
    let data = draw_dataset(&density, c.n, c.seed);

    let mut csv = String::from("plan,metric,value\n");
    let plans = [
        SamplerPlan::one_step(c.t_max)?,
        SamplerPlan::default_nfe2(c.t_max)?,
        SamplerPlan::default_nfe3(c.t_max, c.seed)?,
        SamplerPlan::default_nfe4(c.t_max, c.seed)?,
    ];
    for plan in &plans {
        let samples = sample_batch(&model, plan, c.n, c.seed)?;
        let mut prng = stream_rng(c.seed, tag::PROJECTION, 0, 0);
        let sw = sliced_wasserstein(&samples, &data, 128, &mut prng)?;
        csv.push_str(&format!("{},sliced_wasserstein,{sw}\n", plan.kind.as_str()));
        csv.push_str(&format!("{},nfe,{}\n", plan.kind.as_str(), plan.nfe()));
    }

    let subset = &data[..c.n.min(256)];
    for (name, ladder) in [
        ("invert_nfe1", InversionPlan::default_nfe1(c.t_max, c.seed)?),
        ("invert_nfe2", InversionPlan::default_nfe2(c.t_max, c.seed)?),
    ] {
        let gen = SamplerPlan::one_step(ladder.t_end())?;
        let report = roundtrip_mse(&model, &ladder, &gen, subset)?;
        csv.push_str(&format!("{name},roundtrip_mse,{}\n", report.mse));
    }
    std::fs::write(out.join("metrics.csv"), csv)?;

    let grid = TimeGrid::build(0.002, c.t_max, c.coverage_steps, 7.0)?;
    let pmf = noise_pmf(&grid, -1.1, 2.0)?;
    let coverage = pair_coverage_pmf(&pmf);
    let mut cov_bytes = Vec::new();
    write_coverage_csv(&mut cov_bytes, &grid, &coverage)?;
    std::fs::write(out.join("coverage.csv"), cov_bytes)?;

    RunManifest {
        command: "eval".into(),
        args: args_map(&[
            ("checkpoint", json!(c.checkpoint.display().to_string())),
            ("density", json!(c.density)),
            ("dim", json!(c.dim)),
            ("n", json!(c.n)),
            ("t_max", json!(c.t_max.to_string())),
            ("coverage_steps", json!(c.coverage_steps)),
        ]),
        seed: c.seed,
        checkpoint_checksum: checksum,
        duration_seconds: start.elapsed().as_secs_f64(),
        outputs: vec!["metrics.csv".into(), "coverage.csv".into()],
    }
    .write(out)?;
    Ok(())
}
