//! The consistency-function interface shared by trained networks and
//! analytic oracles.

/// A map `f(x_t, t, u)` taking a state at noise scale `t` to the state at
/// scale `u` on the same probability-flow trajectory. Generation moves to
/// smaller `u`, inversion to larger `u`.
pub trait ConsistencyModel: Sync {
    /// Dimensionality of the state vectors.
    fn dim(&self) -> usize;

    /// Evaluate `f(x, t, u)`.
    fn consistency_map(&self, x: &[f64], t: f64, u: f64) -> Vec<f64>;
}
