//! Generation strategies driven by a trained consistency function.
//!
//! - one-step: a single jump from the initial noise to time zero.
//! - ancestral: sequential denoising down a descending time ladder, each hop
//!   a direct map `x_{t-1} = f(x_t, t, t-1)`.
//! - zigzag: repeated full denoise, small fresh-noise injection, and a
//!   network hop back up to the next ladder time, so the network amplifies a
//!   small perturbation instead of receiving a large fresh one.
//! - combined: an ancestral phase down to a handoff scale, then zigzag
//!   refinement below it.
//!
//! Ancestral and one-step sampling are deterministic in the initial noise;
//! zigzag draws its fresh noise from a stream derived from the plan seed.

use crate::error::{BcmError, Result};
use crate::model::ConsistencyModel;
use crate::rng::{stream_rng, tag};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;

/// Which strategy a plan encodes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SamplerKind {
    OneStep,
    Ancestral,
    Zigzag,
    Combined,
}

impl SamplerKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            SamplerKind::OneStep => "one_step",
            SamplerKind::Ancestral => "ancestral",
            SamplerKind::Zigzag => "zigzag",
            SamplerKind::Combined => "combined",
        }
    }
}

/// A validated sampling schedule.
///
/// `ancestral_times` is the descending ladder; for a pure ancestral plan it
/// ends at zero, for a combined plan it ends at the zigzag handoff.
/// `zigzag_times` is the ascending ladder `tau_1 < .. < tau_M`, and
/// `fresh_noise_scales[m]` is the noise injected before hopping back up to
/// `zigzag_times[m]`; each must stay below its target.
#[derive(Debug, Clone, PartialEq)]
pub struct SamplerPlan {
    pub kind: SamplerKind,
    pub ancestral_times: Vec<f64>,
    pub zigzag_times: Vec<f64>,
    pub fresh_noise_scales: Vec<f64>,
    pub seed: u64,
}

fn check_descending(times: &[f64]) -> Result<()> {
    if times.is_empty() {
        return Err(BcmError::invalid("time ladder must be nonempty"));
    }
    if times.iter().any(|t| !t.is_finite() || *t < 0.0) {
        return Err(BcmError::invalid("times must be finite and nonnegative"));
    }
    if times.windows(2).any(|w| w[1] >= w[0]) {
        return Err(BcmError::invalid(format!(
            "times must be strictly decreasing, got {times:?}"
        )));
    }
    Ok(())
}

fn check_zigzag(times: &[f64], eps: &[f64]) -> Result<()> {
    if times.is_empty() {
        return Err(BcmError::invalid("zigzag ladder must be nonempty"));
    }
    if times.windows(2).any(|w| w[1] <= w[0]) || times[0] <= 0.0 {
        return Err(BcmError::invalid(format!(
            "zigzag times must be positive and strictly increasing, got {times:?}"
        )));
    }
    if eps.len() + 1 != times.len() {
        return Err(BcmError::invalid(format!(
            "need one fresh-noise scale per zigzag step, got {} for {} times",
            eps.len(),
            times.len()
        )));
    }
    for (e, t) in eps.iter().zip(times.iter()) {
        if !(*e >= 0.0) || e >= t {
            return Err(BcmError::invalid(format!(
                "fresh-noise scale {e} must lie in [0, {t})"
            )));
        }
    }
    Ok(())
}

impl SamplerPlan {
    /// Single jump from `t_max` to zero.
    pub fn one_step(t_max: f64) -> Result<Self> {
        if !(t_max > 0.0) {
            return Err(BcmError::invalid("t_max must be positive"));
        }
        Ok(SamplerPlan {
            kind: SamplerKind::OneStep,
            ancestral_times: vec![t_max],
            zigzag_times: Vec::new(),
            fresh_noise_scales: Vec::new(),
            seed: 0,
        })
    }

    /// Descending ladder ending at zero.
    pub fn ancestral(times: Vec<f64>) -> Result<Self> {
        check_descending(&times)?;
        if *times.last().unwrap() != 0.0 {
            return Err(BcmError::invalid("ancestral ladder must end at zero"));
        }
        if times.len() < 2 {
            return Err(BcmError::invalid("ancestral ladder needs a start above zero"));
        }
        Ok(SamplerPlan {
            kind: SamplerKind::Ancestral,
            ancestral_times: times,
            zigzag_times: Vec::new(),
            fresh_noise_scales: Vec::new(),
            seed: 0,
        })
    }

    /// Pure zigzag over the ascending ladder.
    pub fn zigzag(times: Vec<f64>, fresh_noise_scales: Vec<f64>, seed: u64) -> Result<Self> {
        check_zigzag(&times, &fresh_noise_scales)?;
        Ok(SamplerPlan {
            kind: SamplerKind::Zigzag,
            ancestral_times: Vec::new(),
            zigzag_times: times,
            fresh_noise_scales,
            seed,
        })
    }

    /// Ancestral phase down to a handoff, zigzag phase below it.
    pub fn combined(
        ancestral_times: Vec<f64>,
        zigzag_times: Vec<f64>,
        fresh_noise_scales: Vec<f64>,
        seed: u64,
    ) -> Result<Self> {
        check_descending(&ancestral_times)?;
        check_zigzag(&zigzag_times, &fresh_noise_scales)?;
        let handoff = *ancestral_times.last().unwrap();
        if handoff <= 0.0 {
            return Err(BcmError::invalid("combined ancestral phase must end above zero"));
        }
        if *zigzag_times.last().unwrap() != handoff {
            return Err(BcmError::invalid(format!(
                "zigzag ladder must end at the ancestral handoff {handoff}"
            )));
        }
        Ok(SamplerPlan {
            kind: SamplerKind::Combined,
            ancestral_times,
            zigzag_times,
            fresh_noise_scales,
            seed,
        })
    }

    /// Default two-evaluation plan: one ancestral hop through 1.2.
    pub fn default_nfe2(t_max: f64) -> Result<Self> {
        SamplerPlan::ancestral(vec![t_max, 1.2, 0.0])
    }

    /// Default three-evaluation plan: zigzag through 0.8 with 0.2 fresh noise.
    pub fn default_nfe3(t_max: f64, seed: u64) -> Result<Self> {
        SamplerPlan::zigzag(vec![0.8, t_max], vec![0.2], seed)
    }

    /// Default four-evaluation plan: ancestral to 1.2, zigzag through 0.3
    /// with 0.1 fresh noise.
    pub fn default_nfe4(t_max: f64, seed: u64) -> Result<Self> {
        SamplerPlan::combined(vec![t_max, 1.2], vec![0.3, 1.2], vec![0.1], seed)
    }

    /// Noise scale at which the plan consumes its initial state.
    pub fn start_time(&self) -> f64 {
        match self.kind {
            SamplerKind::Zigzag => *self.zigzag_times.last().unwrap(),
            _ => self.ancestral_times[0],
        }
    }

    /// Number of model evaluations the plan will perform.
    pub fn nfe(&self) -> usize {
        match self.kind {
            SamplerKind::OneStep => 1,
            SamplerKind::Ancestral => self.ancestral_times.len() - 1,
            SamplerKind::Zigzag => 2 * (self.zigzag_times.len() - 1) + 1,
            SamplerKind::Combined => {
                self.ancestral_times.len() - 1 + 2 * (self.zigzag_times.len() - 1) + 1
            }
        }
    }

    /// Same schedule, different fresh-noise seed.
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }
}

/// An ordered `(time, state)` record of one run, with exact accounting of
/// model evaluations.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub points: Vec<(f64, Vec<f64>)>,
    pub nfe: usize,
}

impl Trajectory {
    pub fn final_state(&self) -> &[f64] {
        &self.points.last().expect("trajectory is never empty").1
    }

    pub fn final_time(&self) -> f64 {
        self.points.last().expect("trajectory is never empty").0
    }
}

fn check_start(model: &dyn ConsistencyModel, x: &[f64]) -> Result<()> {
    if x.len() != model.dim() {
        return Err(BcmError::DimensionMismatch { expected: model.dim(), got: x.len() });
    }
    Ok(())
}

/// Single jump `f(x_T, t_max, 0)`.
pub fn one_step(model: &dyn ConsistencyModel, x_start: &[f64], t_max: f64) -> Result<Trajectory> {
    check_start(model, x_start)?;
    let out = model.consistency_map(x_start, t_max, 0.0);
    Ok(Trajectory {
        points: vec![(t_max, x_start.to_vec()), (0.0, out)],
        nfe: 1,
    })
}

/// Sequential denoising down the plan's descending ladder.
pub fn ancestral(
    model: &dyn ConsistencyModel,
    plan: &SamplerPlan,
    x_start: &[f64],
) -> Result<Trajectory> {
    if plan.kind != SamplerKind::Ancestral {
        return Err(BcmError::invalid("plan kind must be ancestral"));
    }
    check_start(model, x_start)?;
    let times = &plan.ancestral_times;
    let mut points = Vec::with_capacity(times.len());
    let mut x = x_start.to_vec();
    points.push((times[0], x.clone()));
    let mut nfe = 0;
    for w in times.windows(2) {
        x = model.consistency_map(&x, w[0], w[1]);
        nfe += 1;
        points.push((w[1], x.clone()));
    }
    Ok(Trajectory { points, nfe })
}

fn zigzag_phase(
    model: &dyn ConsistencyModel,
    times: &[f64],
    eps: &[f64],
    x_at_top: Vec<f64>,
    rng: &mut ChaCha8Rng,
    points: &mut Vec<(f64, Vec<f64>)>,
    nfe: &mut usize,
) -> Vec<f64> {
    let m = times.len();
    let mut x = x_at_top;
    for i in (1..m).rev() {
        let denoised = model.consistency_map(&x, times[i], 0.0);
        *nfe += 1;
        points.push((0.0, denoised.clone()));
        let scale = eps[i - 1];
        let noisy: Vec<f64> = denoised
            .iter()
            .map(|&v| {
                v + scale * <StandardNormal as Distribution<f64>>::sample(&StandardNormal, rng)
            })
            .collect();
        points.push((scale, noisy.clone()));
        x = model.consistency_map(&noisy, scale, times[i - 1]);
        *nfe += 1;
        points.push((times[i - 1], x.clone()));
    }
    let out = model.consistency_map(&x, times[0], 0.0);
    *nfe += 1;
    points.push((0.0, out.clone()));
    out
}

/// Denoise, inject small fresh noise, amplify, repeat.
pub fn zigzag(
    model: &dyn ConsistencyModel,
    plan: &SamplerPlan,
    x_start: &[f64],
) -> Result<Trajectory> {
    if plan.kind != SamplerKind::Zigzag {
        return Err(BcmError::invalid("plan kind must be zigzag"));
    }
    check_start(model, x_start)?;
    let mut rng = stream_rng(plan.seed, tag::ZIGZAG, 0, 0);
    let mut points = vec![(plan.start_time(), x_start.to_vec())];
    let mut nfe = 0;
    zigzag_phase(
        model,
        &plan.zigzag_times,
        &plan.fresh_noise_scales,
        x_start.to_vec(),
        &mut rng,
        &mut points,
        &mut nfe,
    );
    Ok(Trajectory { points, nfe })
}

/// Ancestral phase to the handoff scale, then zigzag refinement.
pub fn combined(
    model: &dyn ConsistencyModel,
    plan: &SamplerPlan,
    x_start: &[f64],
) -> Result<Trajectory> {
    if plan.kind != SamplerKind::Combined {
        return Err(BcmError::invalid("plan kind must be combined"));
    }
    check_start(model, x_start)?;
    let times = &plan.ancestral_times;
    let mut points = vec![(times[0], x_start.to_vec())];
    let mut nfe = 0;
    let mut x = x_start.to_vec();
    for w in times.windows(2) {
        x = model.consistency_map(&x, w[0], w[1]);
        nfe += 1;
        points.push((w[1], x.clone()));
    }
    let mut rng = stream_rng(plan.seed, tag::ZIGZAG, 0, 0);
    zigzag_phase(
        model,
        &plan.zigzag_times,
        &plan.fresh_noise_scales,
        x,
        &mut rng,
        &mut points,
        &mut nfe,
    );
    Ok(Trajectory { points, nfe })
}

/// Dispatch on the plan kind.
pub fn run_plan(
    model: &dyn ConsistencyModel,
    plan: &SamplerPlan,
    x_start: &[f64],
) -> Result<Trajectory> {
    match plan.kind {
        SamplerKind::OneStep => one_step(model, x_start, plan.ancestral_times[0]),
        SamplerKind::Ancestral => ancestral(model, plan, x_start),
        SamplerKind::Zigzag => zigzag(model, plan, x_start),
        SamplerKind::Combined => combined(model, plan, x_start),
    }
}

/// Run the plan on fresh initial noise for sample `i` of a batch.
///
/// Initial noise and the per-sample zigzag stream are both derived from
/// `(master_seed, i)`, so results do not depend on worker count or
/// evaluation order.
pub fn sample_trajectory(
    model: &dyn ConsistencyModel,
    plan: &SamplerPlan,
    i: usize,
    master_seed: u64,
) -> Result<Trajectory> {
    let t_start = plan.start_time();
    let mut rng = stream_rng(master_seed, tag::SAMPLE, i as u64, 0);
    let x: Vec<f64> = (0..model.dim())
        .map(|_| t_start * <StandardNormal as Distribution<f64>>::sample(&StandardNormal, &mut rng))
        .collect();
    let sub_seed: u64 = rng.random();
    run_plan(model, &plan.clone().with_seed(sub_seed), &x)
}

/// Draw `n` samples by running the plan on fresh initial noise.
pub fn sample_batch(
    model: &dyn ConsistencyModel,
    plan: &SamplerPlan,
    n: usize,
    master_seed: u64,
) -> Result<Vec<Vec<f64>>> {
    (0..n)
        .into_par_iter()
        .map(|i| Ok(sample_trajectory(model, plan, i, master_seed)?.final_state().to_vec()))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::oracle::GaussianFlowModel;
    use crate::rng::{stream_rng, tag};
    use rand_distr::{Distribution, StandardNormal};

    fn oracle() -> GaussianFlowModel {
        GaussianFlowModel::new(vec![0.3, -0.6], 0.5)
    }

    fn noise(seed: u64, t: f64) -> Vec<f64> {
        let mut rng = stream_rng(seed, tag::SAMPLE, 0, 9);
        (0..2)
            .map(|_| t * <StandardNormal as Distribution<f64>>::sample(&StandardNormal, &mut rng))
            .collect()
    }

    #[test]
    fn one_step_matches_single_hop_ancestral() {
        let model = oracle();
        let x = noise(1, 80.0);
        let a = one_step(&model, &x, 80.0).unwrap();
        let plan = SamplerPlan::ancestral(vec![80.0, 0.0]).unwrap();
        let b = ancestral(&model, &plan, &x).unwrap();
        assert_eq!(a.final_state(), b.final_state());
        assert_eq!(a.nfe, 1);
        assert_eq!(b.nfe, 1);
    }

    #[test]
    fn one_step_distribution_matches_the_target_gaussian() {
        let model = oracle();
        let n = 100_000;
        let mut rng = stream_rng(2, tag::SAMPLE, 0, 0);
        let mut sum = [0.0f64; 2];
        let mut sum_sq = [0.0f64; 2];
        let mut cross = 0.0;
        for _ in 0..n {
            let x: Vec<f64> = (0..2)
                .map(|_| {
                    80.0 * <StandardNormal as Distribution<f64>>::sample(&StandardNormal, &mut rng)
                })
                .collect();
            let out = one_step(&model, &x, 80.0).unwrap().final_state().to_vec();
            for j in 0..2 {
                sum[j] += out[j];
                sum_sq[j] += out[j] * out[j];
            }
            cross += out[0] * out[1];
        }
        let mean = [sum[0] / n as f64, sum[1] / n as f64];
        for j in 0..2 {
            let var = sum_sq[j] / n as f64 - mean[j] * mean[j];
            assert!((mean[j] - model.mu[j]).abs() < 0.05 * 0.5, "mean {:?}", mean);
            assert!((var - 0.25).abs() / 0.25 < 0.05, "var {var}");
        }
        let cov = cross / n as f64 - mean[0] * mean[1];
        assert!(cov.abs() < 0.05 * 0.25, "cov {cov}");
    }

    #[test]
    fn ancestral_is_deterministic_and_exact_on_the_oracle() {
        let model = oracle();
        let x = noise(3, 80.0);
        let plan = SamplerPlan::ancestral(vec![80.0, 5.0, 1.2, 0.3, 0.0]).unwrap();
        let a = ancestral(&model, &plan, &x).unwrap();
        let b = ancestral(&model, &plan, &x).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.nfe, 4);
        let direct = one_step(&model, &x, 80.0).unwrap();
        for (g, w) in a.final_state().iter().zip(direct.final_state()) {
            assert!((g - w).abs() < 1e-9, "semigroup violated: {g} vs {w}");
        }
    }

    #[test]
    fn ancestral_rejects_unsorted_times() {
        assert!(SamplerPlan::ancestral(vec![1.0, 2.0, 0.0]).is_err());
        assert!(SamplerPlan::ancestral(vec![2.0, 1.0]).is_err());
        assert!(SamplerPlan::ancestral(vec![0.0]).is_err());
    }

    #[test]
    fn zigzag_with_zero_noise_reduces_to_one_step_on_the_oracle() {
        let model = oracle();
        let x = noise(4, 80.0);
        let plan = SamplerPlan::zigzag(vec![0.8, 80.0], vec![0.0], 7).unwrap();
        let z = zigzag(&model, &plan, &x).unwrap();
        let direct = one_step(&model, &x, 80.0).unwrap();
        for (g, w) in z.final_state().iter().zip(direct.final_state()) {
            assert!((g - w).abs() < 1e-9);
        }
        assert_eq!(z.nfe, 3);
    }

    #[test]
    fn zigzag_nfe_counts_two_per_interval_plus_one() {
        let model = oracle();
        let x = noise(5, 80.0);
        let plan =
            SamplerPlan::zigzag(vec![0.3, 0.8, 2.0, 80.0], vec![0.1, 0.2, 0.4], 7).unwrap();
        let z = zigzag(&model, &plan, &x).unwrap();
        assert_eq!(z.nfe, 2 * 3 + 1);
        assert_eq!(z.nfe, plan.nfe());
    }

    #[test]
    fn zigzag_rejects_overshooting_noise() {
        assert!(SamplerPlan::zigzag(vec![0.3, 80.0], vec![0.3], 7).is_err());
        assert!(SamplerPlan::zigzag(vec![0.3, 80.0], vec![0.1, 0.1], 7).is_err());
    }

    #[test]
    fn combined_with_trivial_zigzag_equals_ancestral() {
        let model = oracle();
        let x = noise(6, 80.0);
        let plan = SamplerPlan::combined(vec![80.0, 1.2], vec![1.2], vec![], 7).unwrap();
        let c = combined(&model, &plan, &x).unwrap();
        let a_plan = SamplerPlan::ancestral(vec![80.0, 1.2, 0.0]).unwrap();
        let a = ancestral(&model, &a_plan, &x).unwrap();
        assert_eq!(c.final_state(), a.final_state());
        assert_eq!(c.nfe, 2);
    }

    #[test]
    fn combined_default_plan_uses_four_evaluations() {
        let model = oracle();
        let x = noise(7, 80.0);
        let plan = SamplerPlan::default_nfe4(80.0, 3).unwrap();
        assert_eq!(plan.ancestral_times, vec![80.0, 1.2]);
        assert_eq!(plan.zigzag_times, vec![0.3, 1.2]);
        assert_eq!(plan.fresh_noise_scales, vec![0.1]);
        let c = combined(&model, &plan, &x).unwrap();
        assert_eq!(c.nfe, 4);
    }

    #[test]
    fn combined_rejects_mismatched_handoff() {
        assert!(SamplerPlan::combined(vec![80.0, 1.2], vec![0.3, 1.1], vec![0.1], 7).is_err());
    }

    #[test]
    fn all_samplers_agree_on_the_oracle_with_zero_noise() {
        let model = oracle();
        let x = noise(8, 80.0);
        let direct = one_step(&model, &x, 80.0).unwrap();
        let plans = [
            SamplerPlan::ancestral(vec![80.0, 2.0, 0.5, 0.0]).unwrap(),
            SamplerPlan::zigzag(vec![0.5, 2.0, 80.0], vec![0.0, 0.0], 1).unwrap(),
            SamplerPlan::combined(vec![80.0, 1.2], vec![0.3, 1.2], vec![0.0], 1).unwrap(),
        ];
        for plan in &plans {
            let run = run_plan(&model, plan, &x).unwrap();
            for (g, w) in run.final_state().iter().zip(direct.final_state()) {
                assert!((g - w).abs() < 1e-9, "{:?}", plan.kind);
            }
            assert_eq!(run.nfe, plan.nfe());
        }
    }

    #[test]
    fn sample_batch_is_reproducible() {
        let model = oracle();
        let plan = SamplerPlan::default_nfe3(80.0, 5).unwrap();
        let a = sample_batch(&model, &plan, 64, 11).unwrap();
        let b = sample_batch(&model, &plan, 64, 11).unwrap();
        assert_eq!(a, b);
    }
}
