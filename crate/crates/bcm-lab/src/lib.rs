//! Bidirectional consistency models on synthetic low-dimensional densities.
//!
//! One network `f(x_t, t, u)` moves states along the probability-flow ODE in
//! both directions: generation when `u < t`, inversion when `u > t`. The
//! crate trains such a network from scratch on analytic Gaussian-mixture
//! densities, samples from it with one-step/ancestral/zigzag/combined
//! strategies, inverts data to noise, and checks everything against
//! closed-form oracles.
//!
//! Modules:
//!
//! - [`schedules`]: time grids, the interval-count curriculum, the noise
//!   pmf, index-pair sampling, and loss reweighting.
//! - [`parameterization`]: the skip/output/input coefficients that enforce
//!   `f(x, t, t) = x` by construction.
//! - [`network`]: the raw MLP `F(x, t, u)` with hand-rolled reverse-mode
//!   differentiation.
//! - [`training`]: the bidirectional consistency training loop.
//! - [`samplers`]: generation strategies.
//! - [`inversion`]: inversion ladders, roundtrip reconstruction, spherical
//!   interpolation, and inpainting.
//! - [`oracle`]: mixture densities with analytic scores, a Heun
//!   probability-flow solver, the closed-form single-Gaussian flow map, and
//!   sliced Wasserstein distances.
//! - [`checkpoint`]: binary weight persistence with a text sidecar.
//! - [`config`]: flat key=value training configs.

pub mod checkpoint;
pub mod config;
pub mod error;
pub mod inversion;
pub mod model;
pub mod network;
pub mod oracle;
pub mod parameterization;
pub mod rng;
pub mod samplers;
pub mod schedules;
pub mod training;

mod guide;

pub use error::{BcmError, Result};
