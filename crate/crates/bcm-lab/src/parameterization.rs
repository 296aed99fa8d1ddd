//! Skip/output/input coefficients for the two-time consistency function.
//!
//! The network `F` is never asked to represent the map directly. Instead
//!
//! ```text
//! f(x_t, t, u) = c_skip(t, u) * x_t + c_out(t, u) * F(c_in(t) * x_t, t, u)
//! ```
//!
//! with
//!
//! ```text
//! c_in   = 1 / sqrt(sigma_data^2 + t^2)
//! c_out  = sigma_data * (t - u) / sqrt(sigma_data^2 + t^2)
//! c_skip = (sigma_data^2 + t * u) / (sigma_data^2 + t^2)
//! ```
//!
//! `c_out` carries the literal factor `(t - u)`, so at `u == t` the wrapper
//! is the exact identity in floating point: `c_skip == 1.0`, `c_out == 0.0`,
//! no tolerance involved. `c_in` normalizes the network input to unit
//! variance when the data variance is `sigma_data^2`, and `c_skip` is the
//! minimizer of `c_out^2`, so network errors are amplified as little as
//! possible.

use crate::error::{BcmError, Result};

/// The three coefficients at a given `(t, u, sigma_data)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CoeffTriple {
    pub c_in: f64,
    pub c_out: f64,
    pub c_skip: f64,
}

/// Evaluate the coefficient triple.
pub fn coeffs(t: f64, u: f64, sigma_data: f64) -> Result<CoeffTriple> {
    if !(sigma_data > 0.0) {
        return Err(BcmError::invalid(format!(
            "sigma_data must be positive, got {sigma_data}"
        )));
    }
    if t < 0.0 || u < 0.0 {
        return Err(BcmError::invalid(format!(
            "noise scales must be nonnegative, got t={t}, u={u}"
        )));
    }
    let var = sigma_data * sigma_data;
    let denom = var + t * t;
    let root = denom.sqrt();
    Ok(CoeffTriple {
        c_in: 1.0 / root,
        c_out: sigma_data * (t - u) / root,
        c_skip: (var + t * u) / denom,
    })
}

/// Apply the skip parameterization around a raw network evaluation.
///
/// `raw` receives the rescaled input `c_in * x_t` together with `(t, u)` and
/// must return a vector of the same length.
pub fn wrap_model<F>(raw: F, x_t: &[f64], t: f64, u: f64, sigma_data: f64) -> Result<Vec<f64>>
where
    F: FnOnce(&[f64], f64, f64) -> Vec<f64>,
{
    let c = coeffs(t, u, sigma_data)?;
    let scaled: Vec<f64> = x_t.iter().map(|&v| c.c_in * v).collect();
    let net = raw(&scaled, t, u);
    if net.len() != x_t.len() {
        return Err(BcmError::DimensionMismatch { expected: x_t.len(), got: net.len() });
    }
    Ok(x_t
        .iter()
        .zip(net.iter())
        .map(|(&x, &f)| c.c_skip * x + c.c_out * f)
        .collect())
}

/// Absolute gap between this parameterization's `c_skip(t, eps)` and the
/// one-time consistency-model choice `sigma_data^2 / (sigma_data^2 + (t - eps)^2)`.
///
/// The gap is bounded by `eps / (2 sigma_data)` for every `t > eps`, which is
/// what makes the two-time parameterization a drop-in extension of the
/// one-time one at the smallest noise scale.
pub fn cm_compat_gap(t: f64, eps: f64, sigma_data: f64) -> Result<f64> {
    if !(sigma_data > 0.0) {
        return Err(BcmError::invalid(format!(
            "sigma_data must be positive, got {sigma_data}"
        )));
    }
    if !(eps > 0.0 && eps < t) {
        return Err(BcmError::invalid(format!(
            "need 0 < eps < t, got eps={eps}, t={t}"
        )));
    }
    let var = sigma_data * sigma_data;
    let bcm = (var + t * eps) / (var + t * t);
    let cm = var / (var + (t - eps) * (t - eps));
    Ok((bcm - cm).abs())
}
