//! Inversion and the applications built on it.
//!
//! Inversion runs the consistency function up an increasing ladder
//! `eps = t_1 < t_2 < ... < t_N`, after first injecting a small noise
//! `eps * sigma` into the input; the endpoints of the horizon are covered
//! poorly during training, and the small kick moves the input onto scales
//! the model has actually seen. Roundtrip reconstruction, spherical
//! interpolation between two inverted inputs, and mask inpainting all reuse
//! this ladder.

use crate::error::{BcmError, Result};
use crate::model::ConsistencyModel;
use crate::rng::{derive_seed, stream_rng, tag};
use crate::samplers::{run_plan, SamplerPlan, Trajectory};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;

fn normal(rng: &mut ChaCha8Rng) -> f64 {
    <StandardNormal as Distribution<f64>>::sample(&StandardNormal, rng)
}

/// Increasing noise-scale ladder for inversion. `times[0]` doubles as the
/// initial injected noise scale and may be zero (no injection).
#[derive(Debug, Clone, PartialEq)]
pub struct InversionPlan {
    pub times: Vec<f64>,
    pub seed: u64,
}

impl InversionPlan {
    pub fn new(times: Vec<f64>, seed: u64) -> Result<Self> {
        if times.len() < 2 {
            return Err(BcmError::invalid("inversion ladder needs at least two times"));
        }
        if times[0] < 0.0 || times.iter().any(|t| !t.is_finite()) {
            return Err(BcmError::invalid("inversion times must be finite and nonnegative"));
        }
        if times.windows(2).any(|w| w[1] <= w[0]) {
            return Err(BcmError::invalid(format!(
                "inversion times must be strictly increasing, got {times:?}"
            )));
        }
        Ok(InversionPlan { times, seed })
    }

    /// Single network hop to the top scale.
    pub fn default_nfe1(t_max: f64, seed: u64) -> Result<Self> {
        InversionPlan::new(vec![0.07, t_max], seed)
    }

    /// Two hops through 6.0.
    pub fn default_nfe2(t_max: f64, seed: u64) -> Result<Self> {
        InversionPlan::new(vec![0.07, 6.0, t_max], seed)
    }

    /// Four hops through 1.5, 4.0, 10.0.
    pub fn default_nfe4(t_max: f64, seed: u64) -> Result<Self> {
        InversionPlan::new(vec![0.07, 1.5, 4.0, 10.0, t_max], seed)
    }

    /// Ladder used when inverting for interpolation.
    pub fn default_interpolation(t_max: f64, seed: u64) -> Result<Self> {
        InversionPlan::new(vec![0.07, 1.5, 6.0, t_max], seed)
    }

    /// Short ladder for inpainting; stopping well below the max scale
    /// already suffices to blend the masked region in.
    pub fn default_inpaint(seed: u64) -> Result<Self> {
        InversionPlan::new(vec![0.07, 0.4, 1.0, 2.0], seed)
    }

    pub fn eps(&self) -> f64 {
        self.times[0]
    }

    pub fn t_end(&self) -> f64 {
        *self.times.last().unwrap()
    }

    pub fn nfe(&self) -> usize {
        self.times.len() - 1
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }
}

/// Map a data point to noise at the top of the ladder.
pub fn invert(
    model: &dyn ConsistencyModel,
    plan: &InversionPlan,
    x0: &[f64],
) -> Result<Trajectory> {
    if x0.len() != model.dim() {
        return Err(BcmError::DimensionMismatch { expected: model.dim(), got: x0.len() });
    }
    let mut rng = stream_rng(plan.seed, tag::INVERT, 0, 0);
    let eps = plan.eps();
    let mut x: Vec<f64> = x0.iter().map(|&v| v + eps * normal(&mut rng)).collect();
    let mut points = vec![(0.0, x0.to_vec()), (plan.times[0], x.clone())];
    let mut nfe = 0;
    for w in plan.times.windows(2) {
        x = model.consistency_map(&x, w[0], w[1]);
        nfe += 1;
        points.push((w[1], x.clone()));
    }
    Ok(Trajectory { points, nfe })
}

/// Reconstruction error of invert-then-generate over a sample set.
#[derive(Debug, Clone, PartialEq)]
pub struct RoundtripReport {
    /// Mean squared error per dimension after affinely mapping each
    /// dimension to [0, 1] using the sample set's min/max.
    pub mse: f64,
    pub n_samples: usize,
    pub per_dim_min: Vec<f64>,
    pub per_dim_max: Vec<f64>,
}

/// Invert every sample, generate back, and report the per-dimension MSE on
/// the unit-range scale.
///
/// The generation plan must start where the inversion ladder ends. Noise
/// streams are derived per sample, so the report does not depend on
/// evaluation order.
pub fn roundtrip_mse(
    model: &dyn ConsistencyModel,
    inv_plan: &InversionPlan,
    gen_plan: &SamplerPlan,
    samples: &[Vec<f64>],
) -> Result<RoundtripReport> {
    if samples.is_empty() {
        return Err(BcmError::invalid("roundtrip needs at least one sample"));
    }
    if gen_plan.start_time() != inv_plan.t_end() {
        return Err(BcmError::invalid(format!(
            "generation starts at {} but inversion ends at {}",
            gen_plan.start_time(),
            inv_plan.t_end()
        )));
    }
    let dim = model.dim();
    let mut lo = vec![f64::INFINITY; dim];
    let mut hi = vec![f64::NEG_INFINITY; dim];
    for s in samples {
        if s.len() != dim {
            return Err(BcmError::DimensionMismatch { expected: dim, got: s.len() });
        }
        for j in 0..dim {
            lo[j] = lo[j].min(s[j]);
            hi[j] = hi[j].max(s[j]);
        }
    }
    let scale: Vec<f64> = lo
        .iter()
        .zip(&hi)
        .map(|(&a, &b)| if b > a { 1.0 / (b - a) } else { 1.0 })
        .collect();

    let total: Result<f64> = samples
        .par_iter()
        .enumerate()
        .map(|(i, x0)| {
            let inv = inv_plan.clone().with_seed(derive_seed(inv_plan.seed, tag::INVERT, i as u64));
            let noise = invert(model, &inv, x0)?;
            let gen = gen_plan
                .clone()
                .with_seed(derive_seed(gen_plan.seed, tag::ZIGZAG, i as u64));
            let rec = run_plan(model, &gen, noise.final_state())?;
            let err: f64 = rec
                .final_state()
                .iter()
                .zip(x0)
                .zip(&scale)
                .map(|((&r, &x), &s)| ((r - x) * s).powi(2))
                .sum();
            Ok(err / dim as f64)
        })
        .sum();
    Ok(RoundtripReport {
        mse: total? / samples.len() as f64,
        n_samples: samples.len(),
        per_dim_min: lo,
        per_dim_max: hi,
    })
}

/// Spherical linear interpolation between two vectors.
pub fn slerp(z1: &[f64], z2: &[f64], alpha: f64) -> Result<Vec<f64>> {
    if z1.len() != z2.len() {
        return Err(BcmError::DimensionMismatch { expected: z1.len(), got: z2.len() });
    }
    let n1 = z1.iter().map(|v| v * v).sum::<f64>().sqrt();
    let n2 = z2.iter().map(|v| v * v).sum::<f64>().sqrt();
    if n1 == 0.0 || n2 == 0.0 {
        return Err(BcmError::invalid("slerp endpoints must be nonzero"));
    }
    let dot: f64 = z1.iter().zip(z2).map(|(a, b)| a * b).sum();
    let cos_psi = (dot / (n1 * n2)).clamp(-1.0, 1.0);
    let psi = cos_psi.acos();
    let sin_psi = psi.sin();
    // acos near +-1 resolves the angle no finer than ~sqrt(eps), so exact
    // (anti)parallel inputs surface as sin psi of order 1e-8.
    if sin_psi < 1e-7 {
        return Err(BcmError::invalid(
            "slerp undefined for parallel or antiparallel endpoints",
        ));
    }
    let w1 = ((1.0 - alpha) * psi).sin() / sin_psi;
    let w2 = (alpha * psi).sin() / sin_psi;
    Ok(z1.iter().zip(z2).map(|(&a, &b)| w1 * a + w2 * b).collect())
}

/// Invert two inputs with independent initial noises, interpolate their
/// noise vectors spherically, and map each interpolant back in one step.
pub fn slerp_interpolate(
    model: &dyn ConsistencyModel,
    x_a: &[f64],
    x_b: &[f64],
    alphas: &[f64],
    inv_plan: &InversionPlan,
) -> Result<Vec<Vec<f64>>> {
    if x_a == x_b {
        return Err(BcmError::invalid("interpolation endpoints must differ"));
    }
    // Different initial noises per endpoint; identical kicks would pin both
    // embeddings to the same submanifold and spoil the spherical geometry.
    let plan_a = inv_plan.clone().with_seed(derive_seed(inv_plan.seed, tag::INVERT, 0));
    let plan_b = inv_plan.clone().with_seed(derive_seed(inv_plan.seed, tag::INVERT, 1));
    let z1 = invert(model, &plan_a, x_a)?;
    let z2 = invert(model, &plan_b, x_b)?;
    let t_end = inv_plan.t_end();
    alphas
        .iter()
        .map(|&alpha| {
            let z = slerp(z1.final_state(), z2.final_state(), alpha)?;
            Ok(model.consistency_map(&z, t_end, 0.0))
        })
        .collect()
}

/// Binary coordinate mask; `true` marks a missing coordinate.
#[derive(Debug, Clone, PartialEq)]
pub struct Mask {
    pub missing: Vec<bool>,
    pub init_scale: f64,
}

impl Mask {
    pub fn new(missing: Vec<bool>, init_scale: f64) -> Result<Self> {
        if missing.is_empty() {
            return Err(BcmError::invalid("mask must be nonempty"));
        }
        if !(init_scale >= 0.0) {
            return Err(BcmError::invalid("mask init scale must be nonnegative"));
        }
        Ok(Mask { missing, init_scale })
    }

    /// Default initial noise scale for freshly-masked coordinates.
    pub fn with_default_scale(missing: Vec<bool>) -> Result<Self> {
        Mask::new(missing, 0.5)
    }
}

/// Complete the missing coordinates of `x` by inverting while repeatedly
/// replacing the masked region with in-distribution noise, then mapping the
/// whole state back to zero. Observed coordinates pass through unchanged.
pub fn inpaint(
    model: &dyn ConsistencyModel,
    x: &[f64],
    mask: &Mask,
    inv_plan: &InversionPlan,
) -> Result<Vec<f64>> {
    let dim = model.dim();
    if x.len() != dim {
        return Err(BcmError::DimensionMismatch { expected: dim, got: x.len() });
    }
    if mask.missing.len() != dim {
        return Err(BcmError::DimensionMismatch { expected: dim, got: mask.missing.len() });
    }
    if mask.missing.iter().all(|&m| m) {
        return Err(BcmError::invalid("inpainting needs at least one observed coordinate"));
    }
    let mut rng = stream_rng(inv_plan.seed, tag::INPAINT, 0, 0);

    // Observed coordinates of the prepared input; masked ones get the small
    // initial noise.
    let mut prepared: Vec<f64> = x.to_vec();
    for (v, &m) in prepared.iter_mut().zip(&mask.missing) {
        if m {
            *v = mask.init_scale * normal(&mut rng);
        }
    }

    let eps = inv_plan.eps();
    let mut state: Vec<f64> = prepared.iter().map(|&v| v + eps * normal(&mut rng)).collect();
    for w in inv_plan.times.windows(2) {
        state = model.consistency_map(&state, w[0], w[1]);
        let t_next = w[1];
        for (v, &m) in state.iter_mut().zip(&mask.missing) {
            if m {
                *v = t_next * normal(&mut rng);
            }
        }
    }
    let generated = model.consistency_map(&state, inv_plan.t_end(), 0.0);
    Ok(x
        .iter()
        .zip(&generated)
        .zip(&mask.missing)
        .map(|((&orig, &gen), &m)| if m { gen } else { orig })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::oracle::GaussianFlowModel;
    use crate::samplers::one_step;

    fn oracle() -> GaussianFlowModel {
        GaussianFlowModel::new(vec![0.8, -0.6], 0.5)
    }

    fn data_samples(n: usize, seed: u64) -> Vec<Vec<f64>> {
        let model = oracle();
        let mut rng = stream_rng(seed, tag::DATASET, 0, 0);
        (0..n)
            .map(|_| {
                model
                    .mu
                    .iter()
                    .map(|&m| m + model.sigma_data * normal(&mut rng))
                    .collect()
            })
            .collect()
    }

    #[test]
    fn zero_eps_roundtrip_is_exact_on_the_oracle() {
        let model = oracle();
        let plan = InversionPlan::new(vec![0.0, 6.0, 80.0], 1).unwrap();
        let x0 = [0.3, 0.9];
        let noise = invert(&model, &plan, &x0).unwrap();
        assert_eq!(noise.nfe, 2);
        let back = one_step(&model, noise.final_state(), 80.0).unwrap();
        for (g, w) in back.final_state().iter().zip(&x0) {
            assert!((g - w).abs() < 1e-9, "{g} vs {w}");
        }
    }

    #[test]
    fn reversed_ladder_generation_undoes_inversion_exactly() {
        // Zero injected noise, oracle map: climbing the ladder and then
        // descending the same rungs ancestrally is the identity.
        use crate::samplers::ancestral;
        let model = oracle();
        let up = InversionPlan::new(vec![0.0, 1.5, 6.0, 80.0], 1).unwrap();
        let x0 = [1.1, -0.3];
        let noise = invert(&model, &up, &x0).unwrap();
        let mut down_times: Vec<f64> = up.times.clone();
        down_times.reverse();
        let down = SamplerPlan::ancestral(down_times).unwrap();
        let back = ancestral(&model, &down, noise.final_state()).unwrap();
        for (g, w) in back.final_state().iter().zip(&x0) {
            assert!((g - w).abs() < 1e-9, "{g} vs {w}");
        }
    }

    #[test]
    fn two_point_ladder_is_one_evaluation() {
        let model = oracle();
        let plan = InversionPlan::new(vec![0.07, 80.0], 1).unwrap();
        let traj = invert(&model, &plan, &[0.2, 0.1]).unwrap();
        assert_eq!(traj.nfe, 1);
        assert_eq!(plan.nfe(), 1);
        assert_eq!(traj.final_time(), 80.0);
    }

    #[test]
    fn inverted_data_reaches_the_top_noise_scale() {
        let model = oracle();
        let plan = InversionPlan::default_nfe2(80.0, 3).unwrap();
        let samples = data_samples(2000, 5);
        let mut sum_sq = 0.0;
        for (i, x) in samples.iter().enumerate() {
            let p = plan.clone().with_seed(derive_seed(3, tag::INVERT, i as u64));
            let z = invert(&model, &p, x).unwrap();
            sum_sq += z.final_state().iter().map(|v| v * v).sum::<f64>();
        }
        let std = (sum_sq / (2.0 * samples.len() as f64)).sqrt();
        assert!((std - 80.0).abs() / 80.0 < 0.10, "std {std}");
    }

    #[test]
    fn ladder_validation() {
        assert!(InversionPlan::new(vec![0.07], 0).is_err());
        assert!(InversionPlan::new(vec![0.07, 0.07], 0).is_err());
        assert!(InversionPlan::new(vec![0.5, 0.2], 0).is_err());
        assert!(InversionPlan::new(vec![-0.1, 0.2], 0).is_err());
        assert!(InversionPlan::new(vec![0.0, 0.2], 0).is_ok());
    }

    #[test]
    fn oracle_roundtrip_mse_is_zero_with_zero_noise() {
        let model = oracle();
        let inv = InversionPlan::new(vec![0.0, 80.0], 7).unwrap();
        let gen = SamplerPlan::one_step(80.0).unwrap();
        let samples = data_samples(64, 9);
        let report = roundtrip_mse(&model, &inv, &gen, &samples).unwrap();
        assert!(report.mse < 1e-24, "mse {}", report.mse);
        assert_eq!(report.n_samples, 64);
    }

    #[test]
    fn roundtrip_mse_is_order_invariant_and_validates() {
        let model = oracle();
        let inv = InversionPlan::default_nfe1(80.0, 7).unwrap();
        let gen = SamplerPlan::one_step(80.0).unwrap();
        let samples = data_samples(32, 11);
        let a = roundtrip_mse(&model, &inv, &gen, &samples).unwrap();
        // Reversing the set permutes per-sample seeds, so re-derive them to
        // keep draws attached to their sample.
        let mut reversed = samples.clone();
        reversed.reverse();
        let per_sample: Vec<f64> = samples
            .iter()
            .enumerate()
            .map(|(i, x)| {
                let p = inv.clone().with_seed(derive_seed(inv.seed, tag::INVERT, i as u64));
                let z = invert(&model, &p, x).unwrap();
                let rec = one_step(&model, z.final_state(), 80.0).unwrap();
                rec.final_state()
                    .iter()
                    .zip(x)
                    .map(|(r, v)| (r - v) * (r - v))
                    .sum::<f64>()
            })
            .collect();
        let mut fwd = 0.0;
        let mut rev = 0.0;
        for &v in &per_sample {
            fwd += v;
        }
        for &v in per_sample.iter().rev() {
            rev += v;
        }
        assert!((fwd - rev).abs() <= 1e-12 * fwd.abs().max(1.0));
        assert!(a.mse >= 0.0);

        assert!(roundtrip_mse(&model, &inv, &gen, &[]).is_err());
        let bad_gen = SamplerPlan::one_step(40.0).unwrap();
        assert!(roundtrip_mse(&model, &inv, &bad_gen, &samples).is_err());
    }

    #[test]
    fn slerp_endpoints_are_bitwise() {
        let z1 = vec![1.0, 2.0, -0.5];
        let z2 = vec![-0.3, 0.4, 2.0];
        assert_eq!(slerp(&z1, &z2, 0.0).unwrap(), z1);
        assert_eq!(slerp(&z1, &z2, 1.0).unwrap(), z2);
    }

    #[test]
    fn slerp_preserves_norm_on_equal_norm_inputs() {
        let z1 = vec![3.0, 0.0];
        let z2 = vec![0.0, 3.0];
        for alpha in [0.25, 0.5, 0.75] {
            let z = slerp(&z1, &z2, alpha).unwrap();
            let n = z.iter().map(|v| v * v).sum::<f64>().sqrt();
            assert!((n - 3.0).abs() < 1e-12);
        }
    }

    #[test]
    fn slerp_orthogonal_midpoint_is_the_scaled_sum() {
        // psi = pi/2 between z1 and its Householder image.
        let z1 = vec![2.0, 0.0];
        let z2 = vec![0.0, 2.0];
        let mid = slerp(&z1, &z2, 0.5).unwrap();
        let inv_sqrt2 = 1.0 / 2f64.sqrt();
        assert!((mid[0] - 2.0 * inv_sqrt2).abs() < 1e-12);
        assert!((mid[1] - 2.0 * inv_sqrt2).abs() < 1e-12);
    }

    #[test]
    fn slerp_is_symmetric_under_reversal() {
        let z1 = vec![1.0, 2.0, -0.5, 0.3];
        let z2 = vec![-0.3, 0.4, 2.0, 1.1];
        for alpha in [0.0, 0.2, 0.5, 0.9, 1.0] {
            let a = slerp(&z1, &z2, alpha).unwrap();
            let b = slerp(&z2, &z1, 1.0 - alpha).unwrap();
            for (x, y) in a.iter().zip(&b) {
                assert!((x - y).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn slerp_rejects_degenerate_geometry() {
        let z1 = vec![1.0, 1.0];
        let anti: Vec<f64> = z1.iter().map(|v| -v).collect();
        assert!(slerp(&z1, &anti, 0.5).is_err());
        assert!(slerp(&z1, &z1.clone(), 0.5).is_err());
        assert!(slerp(&z1, &[0.0, 0.0], 0.5).is_err());
    }

    #[test]
    fn interpolation_endpoints_match_roundtrips() {
        let model = oracle();
        let plan = InversionPlan::default_interpolation(80.0, 13).unwrap();
        let x_a = [0.4, -0.2];
        let x_b = [1.3, -0.9];
        let outs = slerp_interpolate(&model, &x_a, &x_b, &[0.0, 0.5, 1.0], &plan).unwrap();

        let plan_a = plan.clone().with_seed(derive_seed(13, tag::INVERT, 0));
        let plan_b = plan.clone().with_seed(derive_seed(13, tag::INVERT, 1));
        let za = invert(&model, &plan_a, &x_a).unwrap();
        let zb = invert(&model, &plan_b, &x_b).unwrap();
        let ra = one_step(&model, za.final_state(), 80.0).unwrap();
        let rb = one_step(&model, zb.final_state(), 80.0).unwrap();
        for (g, w) in outs[0].iter().zip(ra.final_state()) {
            assert!((g - w).abs() < 1e-10);
        }
        for (g, w) in outs[2].iter().zip(rb.final_state()) {
            assert!((g - w).abs() < 1e-10);
        }
        assert!(slerp_interpolate(&model, &x_a, &x_a.clone(), &[0.5], &plan).is_err());
    }

    #[test]
    fn inpaint_preserves_observed_coordinates_bitwise() {
        let model = oracle();
        let plan = InversionPlan::default_inpaint(17).unwrap();
        let x = [0.73, -0.41];
        let mask = Mask::with_default_scale(vec![false, true]).unwrap();
        let out = inpaint(&model, &x, &mask, &plan).unwrap();
        assert_eq!(out[0], x[0]);
        assert_ne!(out[1], x[1]);
    }

    #[test]
    fn inpaint_is_deterministic_and_rejects_all_missing() {
        let model = oracle();
        let plan = InversionPlan::default_inpaint(19).unwrap();
        let x = [0.73, -0.41];
        let mask = Mask::with_default_scale(vec![true, false]).unwrap();
        let a = inpaint(&model, &x, &mask, &plan).unwrap();
        let b = inpaint(&model, &x, &mask, &plan).unwrap();
        assert_eq!(a, b);

        let all = Mask::with_default_scale(vec![true, true]).unwrap();
        assert!(inpaint(&model, &x, &all, &plan).is_err());
    }

    #[test]
    fn inpaint_with_nothing_missing_returns_the_input() {
        let model = oracle();
        let plan = InversionPlan::default_inpaint(23).unwrap();
        let x = [0.73, -0.41];
        let mask = Mask::with_default_scale(vec![false, false]).unwrap();
        let out = inpaint(&model, &x, &mask, &plan).unwrap();
        assert_eq!(out, x.to_vec());
    }
}
