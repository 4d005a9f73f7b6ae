//! Merit function `φ_τ(x) = τ f(x) + |c(x)|₁`, its local model and the
//! trial quantities that the fixed merit/ratio parameters must respect.

use std::fmt;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

/// A real number or `+∞`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum Extended {
    Finite(f64),
    Infinity,
}

impl Extended {
    pub fn is_infinite(self) -> bool {
        matches!(self, Extended::Infinity)
    }

    /// `value <= self`.
    pub fn bounds_above(self, value: f64) -> bool {
        match self {
            Extended::Infinity => true,
            Extended::Finite(v) => value <= v,
        }
    }

    pub fn to_f64(self) -> f64 {
        match self {
            Extended::Infinity => f64::INFINITY,
            Extended::Finite(v) => v,
        }
    }
}

impl fmt::Display for Extended {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Extended::Infinity => f.write_str("inf"),
            Extended::Finite(v) => write!(f, "{v:.16e}"),
        }
    }
}

/// Fixed merit parameter `tau`, ratio parameter `xi` and reduction
/// fraction `nu`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeritParams {
    pub tau: f64,
    pub xi: f64,
    pub nu: f64,
}

impl Default for MeritParams {
    fn default() -> Self {
        Self {
            tau: 0.1,
            xi: 1.0,
            nu: 0.5,
        }
    }
}

impl MeritParams {
    pub fn validate(&self) -> Result<(), String> {
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            return Err(format!("tau must be positive, got {}", self.tau));
        }
        if !(self.xi > 0.0 && self.xi.is_finite()) {
            return Err(format!("xi must be positive, got {}", self.xi));
        }
        if !(self.nu > 0.0 && self.nu < 1.0) {
            return Err(format!("nu must lie in (0, 1), got {}", self.nu));
        }
        Ok(())
    }
}

pub fn phi(tau: f64, f: f64, c: &DVector<f64>) -> f64 {
    tau * f + c.lp_norm(1)
}

fn curvature(h: &DMatrix<f64>, d: &DVector<f64>) -> f64 {
    d.dot(&(h * d)).max(0.0)
}

/// `q_τ(x, g, H, d) = τ(f + gᵀd + ½max{dᵀHd, 0}) + |c + Jd|₁`.
pub fn model_q(
    tau: f64,
    f: f64,
    c: &DVector<f64>,
    jac: &DMatrix<f64>,
    g: &DVector<f64>,
    h: &DMatrix<f64>,
    d: &DVector<f64>,
) -> f64 {
    tau * (f + g.dot(d) + 0.5 * curvature(h, d)) + (c + jac * d).lp_norm(1)
}

/// `Δq_τ = -τ(gᵀd + ½max{dᵀHd, 0}) + |c|₁`, the model reduction of a
/// step satisfying the linearized constraints.
pub fn reduction_delta_q(tau: f64, c: &DVector<f64>, g: &DVector<f64>, h: &DMatrix<f64>, d: &DVector<f64>) -> f64 {
    -tau * (g.dot(d) + 0.5 * curvature(h, d)) + c.lp_norm(1)
}

/// `Δq / (τ|d|²)`, or `+∞` for the zero step.
pub fn xi_trial(tau: f64, delta_q: f64, d: &DVector<f64>) -> Extended {
    let dd = d.norm_squared();
    if dd == 0.0 {
        Extended::Infinity
    } else {
        Extended::Finite(delta_q / (tau * dd))
    }
}

/// `(1-ν)|c|₁ / ρ` with `ρ = ∇fᵀd + max{dᵀHd, 0}` evaluated at the
/// true-gradient step, or `+∞` when `ρ <= 0`.
pub fn tau_trial_true(
    nu: f64,
    c: &DVector<f64>,
    grad: &DVector<f64>,
    h: &DMatrix<f64>,
    d_true: &DVector<f64>,
) -> Extended {
    let rho = grad.dot(d_true) + curvature(h, d_true);
    if rho <= 0.0 {
        Extended::Infinity
    } else {
        Extended::Finite((1.0 - nu) * c.lp_norm(1) / rho)
    }
}

/// Outcome of the guaranteed model-reduction check.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ReductionCheck {
    pub holds: bool,
    /// `Δq_τ(∇f, d_true) - (½τ max{dᵀHd, 0} + ν|c|₁)`.
    pub slack: f64,
}

/// Check `Δq_τ(x, ∇f, H, d_true) >= ½τ max{d_trueᵀHd_true, 0} + ν|c|₁`.
///
/// Guaranteed whenever `τ <= τ_trial,true`; otherwise it may fail and the
/// negative slack is reported.
pub fn check_reduction_lbnd(
    tau: f64,
    nu: f64,
    c: &DVector<f64>,
    grad: &DVector<f64>,
    h: &DMatrix<f64>,
    d_true: &DVector<f64>,
) -> ReductionCheck {
    let lhs = reduction_delta_q(tau, c, grad, h, d_true);
    let rhs = 0.5 * tau * curvature(h, d_true) + nu * c.lp_norm(1);
    let slack = lhs - rhs;
    ReductionCheck {
        holds: slack >= -1e-10 * (1.0 + lhs.abs()),
        slack,
    }
}
