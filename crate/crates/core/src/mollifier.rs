//! The regularized logarithm and the charge–plasma forces derived from it.
//!
//! Inside a core of radius `c` the logarithm is replaced by the quadratic
//! blend `ln c + ((r/c)^2 - 1)/2`, which matches `ln r` in value and slope at
//! `r = c`. Its gradient is the linear force `z / c^2`. The same blend is
//! used with `c = epsilon` for the charge and with `c = blob_width` for the
//! plasma self-interaction.

use crate::{Error, Result, Vec2};

/// Largest admissible epsilon: the blend stays above `2 ln epsilon` on the
/// core only for `epsilon <= e^{-1/2}`.
pub const EPSILON_MAX: f64 = 0.606_530_659_712_633_4;

/// Regularization parameters of one run.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MollifierParams {
    epsilon: f64,
    beta: f64,
}

impl MollifierParams {
    /// `epsilon` is the charge core radius and `beta > epsilon` the hollow
    /// radius cut out of the initial data around each charge.
    pub fn new(epsilon: f64, beta: f64) -> Result<Self> {
        if !(epsilon > 0.0 && epsilon <= EPSILON_MAX) {
            return Err(Error::Config(format!(
                "epsilon must lie in (0, e^-1/2], got {epsilon}"
            )));
        }
        if !(beta > epsilon) || !beta.is_finite() {
            return Err(Error::Config(format!(
                "beta > epsilon required, got beta = {beta}, epsilon = {epsilon}"
            )));
        }
        Ok(Self { epsilon, beta })
    }

    #[inline]
    pub fn epsilon(&self) -> f64 {
        self.epsilon
    }

    #[inline]
    pub fn beta(&self) -> f64 {
        self.beta
    }
}

/// Logarithm with a quadratic core of radius `core`; exact `ln r` for
/// `core == 0`.
#[inline]
pub(crate) fn ln_core(r: f64, core: f64) -> f64 {
    if r >= core {
        r.ln()
    } else {
        let s = r / core;
        core.ln() + 0.5 * (s * s - 1.0)
    }
}

/// Gradient of `ln_core(|z|, core)` with respect to `z`.
///
/// For `core == 0` and `z == 0` the result is not finite; callers decide
/// whether that is an error.
#[inline(always)]
pub(crate) fn kernel_core(z: Vec2, core: f64) -> Vec2 {
    let r2 = z.norm_squared();
    z / r2.max(core * core)
}

/// The mollified logarithm `ln_eps`.
pub fn ln_eps(r: f64, params: &MollifierParams) -> f64 {
    debug_assert!(r >= 0.0);
    ln_core(r, params.epsilon)
}

/// Mollified charge field `grad_x ln_eps |x - xi|` felt at `x`.
pub fn charge_force_eps(x: Vec2, xi: Vec2, params: &MollifierParams) -> Vec2 {
    kernel_core(x - xi, params.epsilon)
}

/// Exact charge field `(x - xi) / |x - xi|^2`.
pub fn charge_force_exact(x: Vec2, xi: Vec2) -> Result<Vec2> {
    let z = x - xi;
    if z == Vec2::ZERO {
        return Err(Error::Singularity(format!(
            "exact charge field evaluated at the charge position {xi:?}"
        )));
    }
    Ok(z / z.norm_squared())
}
