//! Bidirectional consistency training.
//!
//! Each iteration draws, per example, a clean point `x`, a noise direction
//! `z`, and an interval pair `(n, n')` from the current noise pmf, then
//! minimizes
//!
//! ```text
//! L = lambda(t_n)      * d( f(x + t_{n+1} z, t_{n+1}, 0), f~(x + t_n z, t_n, 0) )
//!   + lambda(t_n, t_n') * d( f~( f(x + t_n z, t_n, t_n'), t_n', 0 ), f~(x + t_n z, t_n, 0) )
//! ```
//!
//! where `f~` marks evaluations through which no parameter gradient flows
//! and `d` is the pseudo-Huber distance. The first term ties adjacent scales
//! to a common origin prediction; the second is the soft trajectory
//! constraint that teaches arbitrary scale-to-scale hops, including the
//! noising direction. The shared reference `f~(x + t_n z, t_n, 0)` is
//! computed once.
//!
//! Two ablation variants are kept around because their failure modes are
//! informative: `Eq14Ablation` replaces the soft-constraint reference with a
//! second stochastic trajectory, and `NoCtAblation` drops the first term.
//!
//! Batches are processed in fixed 32-example blocks; blocks may run on any
//! number of worker threads, but gradients are merged in block order, so the
//! result is bitwise independent of the worker count.

use crate::config::TrainConfig;
use crate::error::{BcmError, Result};
use crate::model::ConsistencyModel;
use crate::network::{Arch, GradientTape, ModelParams};
use crate::oracle::MixtureDensity;
use crate::rng::{stream_rng, tag};
use crate::schedules::{
    loss_weight, noise_pmf, sample_index_pair, NoisePmf, StepSchedule, TimeGrid,
};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;

/// Which objective the loop optimizes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LossVariant {
    /// Consistency term plus soft trajectory constraint.
    FullBct,
    /// Soft constraint against an independently-noised second trajectory.
    Eq14Ablation,
    /// Soft trajectory constraint only.
    NoCtAblation,
}

impl LossVariant {
    pub fn as_str(&self) -> &'static str {
        match self {
            LossVariant::FullBct => "full_bct",
            LossVariant::Eq14Ablation => "eq14_ablation",
            LossVariant::NoCtAblation => "no_ct_ablation",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "full_bct" => Ok(LossVariant::FullBct),
            "eq14_ablation" => Ok(LossVariant::Eq14Ablation),
            "no_ct_ablation" => Ok(LossVariant::NoCtAblation),
            other => Err(BcmError::Parse(format!("unknown loss variant '{other}'"))),
        }
    }
}

/// Consistency and soft-trajectory terms of one step's loss.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossBreakdown {
    pub ct_term: f64,
    pub st_term: f64,
    pub total: f64,
}

/// Pseudo-Huber distance `sqrt(|a - b|^2 + c^2) - c` with
/// `c = c_factor * sqrt(dim)`.
pub fn pseudo_huber(a: &[f64], b: &[f64], c_factor: f64) -> Result<f64> {
    if a.len() != b.len() {
        return Err(BcmError::DimensionMismatch { expected: a.len(), got: b.len() });
    }
    let c = c_factor * (a.len() as f64).sqrt();
    let dist_sq: f64 = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum();
    Ok((dist_sq + c * c).sqrt() - c)
}

/// Consistency term for one example, value only.
///
/// `target` is the stop-gradient view; passing a distinct parameter set
/// makes the frozen branch explicit for testing.
pub fn ct_loss(
    online: &dyn ConsistencyModel,
    target: &dyn ConsistencyModel,
    x: &[f64],
    z: &[f64],
    t_n: f64,
    t_n1: f64,
    weight: f64,
    c_factor: f64,
) -> Result<f64> {
    let hi: Vec<f64> = x.iter().zip(z).map(|(&a, &b)| a + t_n1 * b).collect();
    let lo: Vec<f64> = x.iter().zip(z).map(|(&a, &b)| a + t_n * b).collect();
    let online_out = online.consistency_map(&hi, t_n1, 0.0);
    let target_out = target.consistency_map(&lo, t_n, 0.0);
    Ok(weight * pseudo_huber(&online_out, &target_out, c_factor)?)
}

/// Soft trajectory term for one example, value only.
pub fn st_loss(
    online: &dyn ConsistencyModel,
    target: &dyn ConsistencyModel,
    x: &[f64],
    z: &[f64],
    t_n: f64,
    t_nprime: f64,
    weight: f64,
    c_factor: f64,
) -> Result<f64> {
    let x_t: Vec<f64> = x.iter().zip(z).map(|(&a, &b)| a + t_n * b).collect();
    let hopped = online.consistency_map(&x_t, t_n, t_nprime);
    let mapped_back = target.consistency_map(&hopped, t_nprime, 0.0);
    let reference = target.consistency_map(&x_t, t_n, 0.0);
    Ok(weight * pseudo_huber(&mapped_back, &reference, c_factor)?)
}

/// One training example with its drawn times, for gradient checks.
#[derive(Debug, Clone)]
pub struct BctExample {
    pub x: Vec<f64>,
    pub z: Vec<f64>,
    pub t_n: f64,
    pub t_n1: f64,
    pub t_nprime: f64,
}

/// Full objective value for one example; weights derived from the times.
pub fn bct_example_loss(
    online: &ModelParams,
    target: &ModelParams,
    ex: &BctExample,
    c_factor: f64,
) -> Result<LossBreakdown> {
    let lam = loss_weight(ex.t_n, ex.t_n1)?;
    let lam_p = loss_weight(ex.t_n, ex.t_nprime)?;
    let ct = ct_loss(online, target, &ex.x, &ex.z, ex.t_n, ex.t_n1, lam, c_factor)?;
    let st = st_loss(online, target, &ex.x, &ex.z, ex.t_n, ex.t_nprime, lam_p, c_factor)?;
    Ok(LossBreakdown { ct_term: ct, st_term: st, total: ct + st })
}

/// Full objective gradient for one example, accumulated into `tape`.
///
/// Only `online` receives gradients; every branch evaluated through `target`
/// is frozen. Passing physically distinct parameter sets lets a test assert
/// that the frozen copy's accumulators stay exactly zero.
pub fn bct_example_grad(
    online: &ModelParams,
    target: &ModelParams,
    ex: &BctExample,
    c_factor: f64,
    tape: &mut GradientTape,
) -> Result<LossBreakdown> {
    let d = online.arch.data_dim;
    if ex.x.len() != d || ex.z.len() != d {
        return Err(BcmError::DimensionMismatch { expected: d, got: ex.x.len() });
    }
    let lam = loss_weight(ex.t_n, ex.t_n1)?;
    let lam_p = loss_weight(ex.t_n, ex.t_nprime)?;
    let c = c_factor * (d as f64).sqrt();

    let hi: Vec<f64> = ex.x.iter().zip(&ex.z).map(|(&a, &b)| a + ex.t_n1 * b).collect();
    let lo: Vec<f64> = ex.x.iter().zip(&ex.z).map(|(&a, &b)| a + ex.t_n * b).collect();

    let (reference, _) = target.consistency_batch(&lo, &[ex.t_n], &[0.0], false);

    let (ct_out, ct_trace) = online.consistency_batch(&hi, &[ex.t_n1], &[0.0], true);
    let (ct_val, ct_up) = huber_value_and_upstream(&ct_out, &reference, c, lam);
    online.consistency_backward_params(&ct_trace.unwrap(), &ct_up, tape);

    let (hopped, st_trace) =
        online.consistency_batch(&lo, &[ex.t_n], &[ex.t_nprime], true);
    let (outer, outer_trace) =
        target.consistency_batch(&hopped, &[ex.t_nprime], &[0.0], true);
    let (st_val, st_up) = huber_value_and_upstream(&outer, &reference, c, lam_p);
    let d_hopped = target.consistency_backward_input(&outer_trace.unwrap(), &st_up);
    online.consistency_backward_params(&st_trace.unwrap(), &d_hopped, tape);

    Ok(LossBreakdown { ct_term: ct_val, st_term: st_val, total: ct_val + st_val })
}

/// Weighted pseudo-Huber value and its gradient w.r.t. the first argument.
fn huber_value_and_upstream(a: &[f64], b: &[f64], c: f64, weight: f64) -> (f64, Vec<f64>) {
    let dist_sq: f64 = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum();
    let root = (dist_sq + c * c).sqrt();
    let value = weight * (root - c);
    let scale = weight / root;
    let upstream = a.iter().zip(b).map(|(x, y)| scale * (x - y)).collect();
    (value, upstream)
}

/// Adam with bias correction.
#[derive(Debug, Clone)]
struct AdamState {
    m: GradientTape,
    v: GradientTape,
    t: u64,
    beta1: f64,
    beta2: f64,
    eps: f64,
}

impl AdamState {
    fn new(params: &ModelParams) -> Self {
        AdamState {
            m: GradientTape::zeros_like(params),
            v: GradientTape::zeros_like(params),
            t: 0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }

    fn step(&mut self, params: &mut ModelParams, grad: &GradientTape, lr: f64) {
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        let (b1, b2, eps) = (self.beta1, self.beta2, self.eps);
        for (((p, g), m), v) in params
            .tensors_mut()
            .into_iter()
            .zip(grad.tensors())
            .zip(self.m.tensors_mut())
            .zip(self.v.tensors_mut())
        {
            for (((pv, &gv), mv), vv) in
                p.iter_mut().zip(g.iter()).zip(m.iter_mut()).zip(v.iter_mut())
            {
                *mv = b1 * *mv + (1.0 - b1) * gv;
                *vv = b2 * *vv + (1.0 - b2) * gv * gv;
                let m_hat = *mv / bc1;
                let v_hat = *vv / bc2;
                *pv -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
    }
}

/// Shadow-copy update `ema += (1 - mu) * (theta - ema)`.
///
/// Written in delta form so a no-op step leaves the shadow bitwise
/// unchanged; `mu == 0` copies exactly.
pub fn ema_update(ema: &mut ModelParams, params: &ModelParams, mu: f64) {
    if mu == 0.0 {
        ema.clone_from(params);
        return;
    }
    let one_minus = 1.0 - mu;
    for (e, p) in ema.tensors_mut().into_iter().zip(params.tensors()) {
        for (ev, &pv) in e.iter_mut().zip(p.iter()) {
            *ev += one_minus * (pv - *ev);
        }
    }
}

/// Mutable state of a training run.
pub struct TrainState {
    pub cfg: TrainConfig,
    pub params: ModelParams,
    pub ema: ModelParams,
    sched: StepSchedule,
    grid: TimeGrid,
    pmf: NoisePmf,
    cur_n: usize,
    adam: AdamState,
}

impl TrainState {
    pub fn new(cfg: TrainConfig, data_dim: usize) -> Result<Self> {
        cfg.validate()?;
        let mut arch = Arch::for_dim(data_dim);
        arch.hidden_width = cfg.hidden_width;
        arch.hidden_layers = cfg.hidden_layers;
        let params = ModelParams::init(arch, cfg.sigma_data, cfg.seed)?;
        let ema = params.clone();
        let sched = StepSchedule::new(cfg.s0, cfg.s1, cfg.total_iters.max(1))?;
        let n0 = sched.step_count(0).unwrap_or(cfg.s1 + 1);
        let grid = TimeGrid::build(cfg.t_min, cfg.t_max, n0, cfg.rho)?;
        let pmf = noise_pmf(&grid, cfg.p_mean, cfg.p_std)?;
        let adam = AdamState::new(&params);
        Ok(TrainState { cfg, params, ema, sched, grid, pmf, cur_n: n0, adam })
    }

    /// Grid currently in force (depends on the iteration through `N(k)`).
    pub fn grid(&self) -> &TimeGrid {
        &self.grid
    }

    fn refresh_schedule(&mut self, k: u64) -> Result<()> {
        let n = self.sched.step_count(k)?;
        if n != self.cur_n {
            self.grid = TimeGrid::build(self.cfg.t_min, self.cfg.t_max, n, self.cfg.rho)?;
            self.pmf = noise_pmf(&self.grid, self.cfg.p_mean, self.cfg.p_std)?;
            self.cur_n = n;
        }
        Ok(())
    }
}

/// Per-block draw buffers.
struct BlockDraws {
    xs: Vec<f64>,
    zs: Vec<f64>,
    t_n: Vec<f64>,
    t_n1: Vec<f64>,
    t_np: Vec<f64>,
    lam: Vec<f64>,
    lam_p: Vec<f64>,
    /// Second trajectory states at `t_np`, only for the Eq14 variant.
    x_u: Vec<f64>,
}

fn normal(rng: &mut ChaCha8Rng) -> f64 {
    <StandardNormal as Distribution<f64>>::sample(&StandardNormal, rng)
}

/// Draw times and noise for examples `[start, start + len)` of iteration `k`.
fn draw_block(
    cfg: &TrainConfig,
    grid: &TimeGrid,
    pmf: &NoisePmf,
    batch: &[f64],
    dim: usize,
    k: u64,
    start: usize,
    len: usize,
    variant: LossVariant,
) -> Result<BlockDraws> {
    let ts = grid.values();
    let mut d = BlockDraws {
        xs: vec![0.0; len * dim],
        zs: vec![0.0; len * dim],
        t_n: vec![0.0; len],
        t_n1: vec![0.0; len],
        t_np: vec![0.0; len],
        lam: vec![0.0; len],
        lam_p: vec![0.0; len],
        x_u: if variant == LossVariant::Eq14Ablation { vec![0.0; len * dim] } else { Vec::new() },
    };
    for r in 0..len {
        let i = start + r;
        let mut rng = stream_rng(cfg.seed, tag::STEP, k, i as u64);
        let (n, np) = sample_index_pair(pmf, &mut rng)?;
        let (t_n, t_n1, t_np) = (ts[n], ts[n + 1], ts[np]);
        d.t_n[r] = t_n;
        d.t_n1[r] = t_n1;
        d.t_np[r] = t_np;
        d.lam[r] = 1.0 / (t_n1 - t_n);
        d.lam_p[r] = 1.0 / (t_n - t_np).abs();
        let x = &batch[i * dim..(i + 1) * dim];
        d.xs[r * dim..(r + 1) * dim].copy_from_slice(x);
        for j in 0..dim {
            d.zs[r * dim + j] = normal(&mut rng);
        }
        if variant == LossVariant::Eq14Ablation {
            // Couple the second trajectory to the first through the same
            // Brownian path: the VE process is a Brownian motion in the
            // clock s^2, so conditionally on x_t the state at a smaller u
            // has mean x + (u/t)^2 * t z and variance u^2 (1 - u^2/t^2).
            let (t, u) = (t_n, t_np);
            for j in 0..dim {
                let zeta = normal(&mut rng);
                let xj = x[j];
                let zj = d.zs[r * dim + j];
                d.x_u[r * dim + j] = if u >= t {
                    xj + t * zj + (u * u - t * t).sqrt() * zeta
                } else {
                    xj + (u * u / t) * zj + u * (1.0 - u * u / (t * t)).sqrt() * zeta
                };
            }
        }
    }
    Ok(d)
}

/// Loss and gradients of one block; returns unnormalized term sums.
fn block_loss_grad(
    params: &ModelParams,
    draws: &BlockDraws,
    c_factor: f64,
    variant: LossVariant,
    inv_batch: f64,
    tape: &mut GradientTape,
) -> (f64, f64) {
    let dim = params.arch.data_dim;
    let len = draws.t_n.len();
    let c = c_factor * (dim as f64).sqrt();
    let zeros = vec![0.0; len];

    let mut lo = vec![0.0; len * dim];
    for r in 0..len {
        for j in 0..dim {
            lo[r * dim + j] = draws.xs[r * dim + j] + draws.t_n[r] * draws.zs[r * dim + j];
        }
    }
    let (reference, _) = params.consistency_batch(&lo, &draws.t_n, &zeros, false);

    let mut ct_sum = 0.0;
    if variant != LossVariant::NoCtAblation {
        let mut hi = vec![0.0; len * dim];
        for r in 0..len {
            for j in 0..dim {
                hi[r * dim + j] = draws.xs[r * dim + j] + draws.t_n1[r] * draws.zs[r * dim + j];
            }
        }
        let (ct_out, ct_trace) = params.consistency_batch(&hi, &draws.t_n1, &zeros, true);
        let mut up = vec![0.0; len * dim];
        for r in 0..len {
            let (val, upstream) = huber_value_and_upstream(
                &ct_out[r * dim..(r + 1) * dim],
                &reference[r * dim..(r + 1) * dim],
                c,
                draws.lam[r],
            );
            ct_sum += val;
            for j in 0..dim {
                up[r * dim + j] = upstream[j] * inv_batch;
            }
        }
        params.consistency_backward_params(&ct_trace.unwrap(), &up, tape);
    }

    let (hopped, st_trace) = params.consistency_batch(&lo, &draws.t_n, &draws.t_np, true);
    let (outer, outer_trace) = params.consistency_batch(&hopped, &draws.t_np, &zeros, true);
    let st_reference = if variant == LossVariant::Eq14Ablation {
        params.consistency_batch(&draws.x_u, &draws.t_np, &zeros, false).0
    } else {
        reference
    };
    let mut st_sum = 0.0;
    let mut up = vec![0.0; len * dim];
    for r in 0..len {
        let (val, upstream) = huber_value_and_upstream(
            &outer[r * dim..(r + 1) * dim],
            &st_reference[r * dim..(r + 1) * dim],
            c,
            draws.lam_p[r],
        );
        st_sum += val;
        for j in 0..dim {
            up[r * dim + j] = upstream[j] * inv_batch;
        }
    }
    let d_hopped = params.consistency_backward_input(&outer_trace.unwrap(), &up);
    params.consistency_backward_params(&st_trace.unwrap(), &d_hopped, tape);

    (ct_sum, st_sum)
}

/// Fixed block length; determinism requires it to be independent of the
/// worker count.
const BLOCK: usize = 32;

/// One optimizer step on a batch (row-major `batch_size x dim`).
pub fn train_step(state: &mut TrainState, batch: &[f64], k: u64) -> Result<LossBreakdown> {
    let dim = state.params.arch.data_dim;
    let bsz = state.cfg.batch_size;
    if batch.len() != bsz * dim {
        return Err(BcmError::DimensionMismatch { expected: bsz * dim, got: batch.len() });
    }
    state.refresh_schedule(k)?;

    let inv_batch = 1.0 / bsz as f64;
    let cfg = &state.cfg;
    let params = &state.params;
    let grid = &state.grid;
    let pmf = &state.pmf;
    let variant = cfg.loss_variant;

    let n_blocks = bsz.div_ceil(BLOCK);
    let results: Result<Vec<(GradientTape, f64, f64)>> = (0..n_blocks)
        .into_par_iter()
        .map(|bi| {
            let start = bi * BLOCK;
            let len = BLOCK.min(bsz - start);
            let draws = draw_block(cfg, grid, pmf, batch, dim, k, start, len, variant)?;
            let mut tape = GradientTape::zeros_like(params);
            let (ct, st) =
                block_loss_grad(params, &draws, cfg.huber_c_factor, variant, inv_batch, &mut tape);
            Ok((tape, ct, st))
        })
        .collect();
    let results = results?;

    let mut grad = GradientTape::zeros_like(params);
    let mut ct_sum = 0.0;
    let mut st_sum = 0.0;
    for (tape, ct, st) in &results {
        grad.add_assign(tape);
        ct_sum += ct;
        st_sum += st;
    }
    let breakdown = LossBreakdown {
        ct_term: ct_sum * inv_batch,
        st_term: st_sum * inv_batch,
        total: (ct_sum + st_sum) * inv_batch,
    };
    if !breakdown.total.is_finite() {
        return Err(BcmError::NonFinite { iter: k, what: format!("loss {:?}", breakdown) });
    }

    let lr = state.cfg.lr
        * if state.cfg.warmup_iters > 0 {
            ((k + 1) as f64 / state.cfg.warmup_iters as f64).min(1.0)
        } else {
            1.0
        };
    state.adam.step(&mut state.params, &grad, lr);
    if !state.params.all_finite() {
        return Err(BcmError::NonFinite { iter: k, what: "parameters".into() });
    }
    ema_update(&mut state.ema, &state.params, state.cfg.mu_ema);
    Ok(breakdown)
}

/// One row of the training log.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainRecord {
    pub k: u64,
    pub n_k: usize,
    pub ct: f64,
    pub st: f64,
    pub total: f64,
}

/// Final state of a training run: the shadow parameters used for inference,
/// the online parameters, and the per-iteration log.
pub struct TrainResult {
    pub ema: ModelParams,
    pub online: ModelParams,
    pub log: Vec<TrainRecord>,
}

/// Draw the batch for iteration `k` from counter-derived streams.
pub fn draw_batch(cfg: &TrainConfig, density: &MixtureDensity, k: u64) -> Vec<f64> {
    let dim = density.dim();
    let mut batch = vec![0.0; cfg.batch_size * dim];
    for i in 0..cfg.batch_size {
        let mut rng = stream_rng(cfg.seed, tag::DATA, k, i as u64);
        let x = density.sample(&mut rng);
        batch[i * dim..(i + 1) * dim].copy_from_slice(&x);
    }
    batch
}

/// Run the full loop. On a non-finite abort the failing batch is attached to
/// the error as CSV for offline inspection.
pub fn run_training(cfg: &TrainConfig, density: &MixtureDensity) -> Result<TrainResult> {
    let stds = density.per_dim_std();
    if stds.iter().any(|s| (s - cfg.sigma_data).abs() > 1e-6) {
        return Err(BcmError::invalid(format!(
            "density per-dimension std {stds:?} does not match sigma_data {}",
            cfg.sigma_data
        )));
    }
    let mut state = TrainState::new(cfg.clone(), density.dim())?;
    let mut log = Vec::with_capacity(cfg.total_iters as usize);
    for k in 0..cfg.total_iters {
        let batch = draw_batch(cfg, density, k);
        match train_step(&mut state, &batch, k) {
            Ok(loss) => log.push(TrainRecord {
                k,
                n_k: state.grid.len(),
                ct: loss.ct_term,
                st: loss.st_term,
                total: loss.total,
            }),
            Err(BcmError::NonFinite { iter, what }) => {
                let mut csv = String::from("example,dim,value\n");
                let dim = density.dim();
                for i in 0..cfg.batch_size {
                    for j in 0..dim {
                        csv.push_str(&format!("{i},{j},{}\n", batch[i * dim + j]));
                    }
                }
                return Err(BcmError::TrainAbort { iter, what, batch_csv: csv });
            }
            Err(e) => return Err(e),
        }
    }
    Ok(TrainResult { ema: state.ema, online: state.params, log })
}
