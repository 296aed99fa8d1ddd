//! Noise-scale schedules for consistency training.
//!
//! The time horizon `[t_min, t_max]` is discretized into `N-1` intervals with
//! boundaries spaced by a power-law interpolation controlled by `rho`:
//!
//! ```text
//! t_n = (t_min^(1/rho) + (n-1)/(N-1) * (t_max^(1/rho) - t_min^(1/rho)))^rho
//! ```
//!
//! `N` grows during training following a doubling schedule `N(k)`, and the
//! training-time index `n` is drawn from a pmf `p(n)` proportional to the
//! difference of `erf((ln t - p_mean) / (sqrt(2) p_std))` at the interval
//! endpoints, which concentrates mass at small noise scales.
//!
//! Indices here are 0-based over intervals: index `i` refers to the interval
//! `[t_(i+1), t_(i+2)]` in the 1-based convention of the formulas above. CSV
//! exports use the 1-based convention.

use crate::error::{BcmError, Result};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

/// Discretized noise-scale ladder `t_1 .. t_N`.
#[derive(Debug, Clone, PartialEq)]
pub struct TimeGrid {
    t_min: f64,
    t_max: f64,
    rho: f64,
    values: Vec<f64>,
}

impl TimeGrid {
    /// Build the ladder. Endpoints are pinned exactly to `t_min` and `t_max`.
    pub fn build(t_min: f64, t_max: f64, n_steps: usize, rho: f64) -> Result<Self> {
        if !(t_min > 0.0) {
            return Err(BcmError::invalid(format!("t_min must be > 0, got {t_min}")));
        }
        if !(t_max > t_min) {
            return Err(BcmError::invalid(format!(
                "t_max must exceed t_min, got t_min={t_min}, t_max={t_max}"
            )));
        }
        if n_steps < 2 {
            return Err(BcmError::invalid(format!(
                "n_steps must be at least 2, got {n_steps}"
            )));
        }
        if !(rho > 0.0) {
            return Err(BcmError::invalid(format!("rho must be > 0, got {rho}")));
        }
        let lo = t_min.powf(1.0 / rho);
        let hi = t_max.powf(1.0 / rho);
        let last = n_steps - 1;
        let values = (0..n_steps)
            .map(|i| {
                if i == 0 {
                    t_min
                } else if i == last {
                    t_max
                } else {
                    let frac = i as f64 / last as f64;
                    (lo + frac * (hi - lo)).powf(rho)
                }
            })
            .collect();
        Ok(TimeGrid { t_min, t_max, rho, values })
    }

    pub fn t_min(&self) -> f64 {
        self.t_min
    }

    pub fn t_max(&self) -> f64 {
        self.t_max
    }

    pub fn rho(&self) -> f64 {
        self.rho
    }

    /// Number of boundaries `N` (one more than the number of intervals).
    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    /// All boundaries in increasing order.
    pub fn values(&self) -> &[f64] {
        &self.values
    }

    /// Number of intervals `N - 1`.
    pub fn intervals(&self) -> usize {
        self.values.len() - 1
    }
}

/// Doubling schedule for the interval count during training.
///
/// `N(k) = min(s0 * 2^floor(k / k_prime), s1) + 1` with the doubling period
/// `k_prime = floor(K / (log2(s1/s0) + 1))`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StepSchedule {
    s0: usize,
    s1: usize,
    total_iters: u64,
    k_prime: u64,
}

impl StepSchedule {
    pub fn new(s0: usize, s1: usize, total_iters: u64) -> Result<Self> {
        if s0 == 0 {
            return Err(BcmError::invalid("s0 must be positive"));
        }
        if s1 < s0 {
            return Err(BcmError::invalid(format!(
                "s1 must be at least s0, got s0={s0}, s1={s1}"
            )));
        }
        let doublings = (s1 as f64 / s0 as f64).log2() + 1.0;
        let k_prime = (total_iters as f64 / doublings).floor() as u64;
        Ok(StepSchedule { s0, s1, total_iters, k_prime })
    }

    pub fn s0(&self) -> usize {
        self.s0
    }

    pub fn s1(&self) -> usize {
        self.s1
    }

    pub fn total_iters(&self) -> u64 {
        self.total_iters
    }

    /// Doubling period `K'`. Zero means the schedule is saturated from the
    /// start (the run is too short for even one doubling stage).
    pub fn k_prime(&self) -> u64 {
        self.k_prime
    }

    /// Boundary count `N(k)` at iteration `k`.
    pub fn step_count(&self, k: u64) -> Result<usize> {
        if k >= self.total_iters {
            return Err(BcmError::invalid(format!(
                "iteration {k} out of range for a {}-iteration schedule",
                self.total_iters
            )));
        }
        if self.k_prime == 0 {
            return Ok(self.s1 + 1);
        }
        let e = (k / self.k_prime).min(63) as u32;
        let n = self.s0.saturating_mul(1usize << e).min(self.s1);
        Ok(n + 1)
    }
}

/// Pmf over interval indices used to draw training noise scales.
#[derive(Debug, Clone, PartialEq)]
pub struct NoisePmf {
    probs: Vec<f64>,
    p_mean: f64,
    p_std: f64,
}

impl NoisePmf {
    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    pub fn p_mean(&self) -> f64 {
        self.p_mean
    }

    pub fn p_std(&self) -> f64 {
        self.p_std
    }

    pub fn len(&self) -> usize {
        self.probs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.probs.is_empty()
    }
}

/// Build `p(n)` over the grid's intervals from the erf-difference rule.
pub fn noise_pmf(grid: &TimeGrid, p_mean: f64, p_std: f64) -> Result<NoisePmf> {
    if !(p_std > 0.0) {
        return Err(BcmError::invalid(format!("p_std must be > 0, got {p_std}")));
    }
    let ts = grid.values();
    let gauss_cdf_arg = |t: f64| (t.ln() - p_mean) / (std::f64::consts::SQRT_2 * p_std);
    let mut probs: Vec<f64> = (0..grid.intervals())
        .map(|i| libm::erf(gauss_cdf_arg(ts[i + 1])) - libm::erf(gauss_cdf_arg(ts[i])))
        .collect();
    let sum: f64 = probs.iter().sum();
    if !(sum > 0.0) {
        return Err(BcmError::invalid("noise pmf has zero total mass"));
    }
    for p in &mut probs {
        *p /= sum;
    }
    Ok(NoisePmf { probs, p_mean, p_std })
}

/// Draw an interval index from the pmf by inverse CDF.
fn sample_index(pmf: &NoisePmf, rng: &mut ChaCha8Rng) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (i, p) in pmf.probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return i;
        }
    }
    pmf.probs.len() - 1
}

/// Draw `(n, n')` with `n ~ p` and `n'` from `p` renormalized to exclude `n`.
///
/// Indices are 0-based over intervals. Fails when no second index carries
/// mass (single-interval grids or pmfs with one nonzero entry).
pub fn sample_index_pair(pmf: &NoisePmf, rng: &mut ChaCha8Rng) -> Result<(usize, usize)> {
    let nonzero = pmf.probs.iter().filter(|&&p| p > 0.0).count();
    if nonzero < 2 {
        return Err(BcmError::DegeneratePmf(format!(
            "need at least two indices with positive mass, found {nonzero}"
        )));
    }
    let n = sample_index(pmf, rng);
    let rest = 1.0 - pmf.probs[n];
    debug_assert!(rest > 0.0);
    let u: f64 = rng.random::<f64>() * rest;
    let mut acc = 0.0;
    let mut n_prime = usize::MAX;
    for (i, p) in pmf.probs.iter().enumerate() {
        if i == n {
            continue;
        }
        acc += p;
        if u < acc {
            n_prime = i;
            break;
        }
    }
    if n_prime == usize::MAX {
        // Accumulated rounding pushed u past the last bucket.
        n_prime = (0..pmf.probs.len())
            .rev()
            .find(|&i| i != n && pmf.probs[i] > 0.0)
            .expect("at least two nonzero entries");
    }
    Ok((n, n_prime))
}

/// Loss reweighting `1 / |t_a - t_b|`.
pub fn loss_weight(t_a: f64, t_b: f64) -> Result<f64> {
    if t_a == t_b {
        return Err(BcmError::invalid(format!(
            "loss weight undefined for equal noise scales ({t_a})"
        )));
    }
    Ok(1.0 / (t_a - t_b).abs())
}

/// Joint probability of picking the pair `(n, n')` during training.
///
/// Row `n` holds `p(n) * p(n') / (1 - p(n))` for `n' != n` and zero on the
/// diagonal, so rows sum to `p(n)` and the matrix sums to one.
#[derive(Debug, Clone)]
pub struct PairCoverage {
    n: usize,
    probs: Vec<f64>,
}

impl PairCoverage {
    /// Interval count per axis.
    pub fn side(&self) -> usize {
        self.n
    }

    pub fn prob(&self, n: usize, n_prime: usize) -> f64 {
        self.probs[n * self.n + n_prime]
    }

    pub fn row(&self, n: usize) -> &[f64] {
        &self.probs[n * self.n..(n + 1) * self.n]
    }
}

/// Compute the joint `(n, n')` coverage pmf.
pub fn pair_coverage_pmf(pmf: &NoisePmf) -> PairCoverage {
    let n = pmf.probs.len();
    let mut probs = vec![0.0; n * n];
    for i in 0..n {
        let rest = 1.0 - pmf.probs[i];
        if rest <= 0.0 {
            continue;
        }
        for j in 0..n {
            if j != i {
                probs[i * n + j] = pmf.probs[i] * pmf.probs[j] / rest;
            }
        }
    }
    PairCoverage { n, probs }
}

/// Write the coverage pmf as CSV with 1-based indices.
pub fn write_coverage_csv<W: std::io::Write>(
    out: &mut W,
    grid: &TimeGrid,
    coverage: &PairCoverage,
) -> std::io::Result<()> {
    writeln!(out, "n,n_prime,t_n,t_n_prime,prob")?;
    let ts = grid.values();
    for i in 0..coverage.side() {
        for j in 0..coverage.side() {
            writeln!(
                out,
                "{},{},{},{},{}",
                i + 1,
                j + 1,
                ts[i],
                ts[j],
                coverage.prob(i, j)
            )?;
        }
    }
    Ok(())
}
