//! The stochastic SQP iteration.
//!
//! Each iteration draws a mini-batch gradient `g_k`, forms `H_k`, solves the
//! KKT system for `(d_k, y_k)`, sets
//!
//! ```text
//! α_k = β_k τ ξ / (τ L_∇f + Γ)
//! ```
//!
//! and moves to `x_{k+1} = x_k + α_k d_k`. In validation mode the same
//! subproblem is also solved with the true gradient, which yields the
//! shadow quantities `(d_k^true, y_k^true)` and the per-iterate checks on
//! the fixed merit and ratio parameters.

use std::fmt;
use std::ops::ControlFlow;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use serde::{Deserialize, Serialize};

use crate::error::{KktError, ProblemError, SolverError};
use crate::kkt::{self, JacobianFactor, KktInputs, KktSolution};
use crate::merit::{self, Extended, MeritParams, ReductionCheck};
use crate::problem::{sample_gradient, GradientOracle, Problem, ProblemConstants, SqpRng};

/// Step-size scaling sequence `{β_k}`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum BetaSchedule {
    /// `β_k = β_1 (1 + (k-1)/warmup)^(-p)` with `½ < p <= 1`.
    ///
    /// `warmup = 1` gives `β_1 k^(-p)`. Larger values keep the sequence
    /// near `β_1` for longer without changing its summability.
    Power { beta1: f64, exponent: f64, warmup: f64 },
    /// Constant `β`. Not square-summable, so only accepted with an exact
    /// gradient oracle.
    Constant(f64),
}

impl Default for BetaSchedule {
    fn default() -> Self {
        BetaSchedule::Power {
            beta1: 1.0,
            exponent: 1.0,
            warmup: 1.0,
        }
    }
}

impl BetaSchedule {
    pub fn validate(&self, exact_gradients: bool) -> Result<(), SolverError> {
        match *self {
            BetaSchedule::Power { beta1, exponent, warmup } => {
                if !(beta1 > 0.0 && beta1 <= 1.0) {
                    return Err(SolverError::Config(format!("beta1 must lie in (0, 1], got {beta1}")));
                }
                if !(exponent > 0.5 && exponent <= 1.0) {
                    return Err(SolverError::Config(format!(
                        "beta exponent {exponent} outside (1/2, 1]: the sequence must be unsummable and square-summable"
                    )));
                }
                if !(warmup >= 1.0 && warmup.is_finite()) {
                    return Err(SolverError::Config(format!("beta warmup must be >= 1, got {warmup}")));
                }
            }
            BetaSchedule::Constant(b) => {
                if !(b > 0.0 && b <= 1.0) {
                    return Err(SolverError::Config(format!("beta must lie in (0, 1], got {b}")));
                }
                if !exact_gradients {
                    return Err(SolverError::Config(
                        "a constant beta schedule is only valid with exact gradients".into(),
                    ));
                }
            }
        }
        Ok(())
    }

    /// `β_k` for `k >= 1`.
    pub fn beta(&self, k: usize) -> Result<f64, SolverError> {
        if k == 0 {
            return Err(SolverError::Config("iterations are numbered from 1".into()));
        }
        Ok(match *self {
            BetaSchedule::Power { beta1, exponent, warmup } => {
                beta1 * (1.0 + (k - 1) as f64 / warmup).powf(-exponent)
            }
            BetaSchedule::Constant(b) => b,
        })
    }
}

/// `α = β τ ξ / (τ L_∇f + Γ)`. Not clamped to `(0, 1]`.
pub fn step_size(tau: f64, xi: f64, lip_grad: f64, gamma: f64, beta: f64) -> Result<f64, SolverError> {
    for (name, v) in [("tau", tau), ("xi", xi), ("lipschitz_grad", lip_grad), ("gamma", gamma), ("beta", beta)] {
        if !(v > 0.0 && v.is_finite()) {
            return Err(SolverError::Config(format!("{name} must be positive, got {v}")));
        }
    }
    if beta > 1.0 {
        return Err(SolverError::Config(format!("beta must not exceed 1, got {beta}")));
    }
    Ok(beta * tau * xi / (tau * lip_grad + gamma))
}

/// How `H_k` is chosen. Every variant is a function of the iterate alone.
#[derive(Clone, Default)]
pub enum HessianStrategy {
    #[default]
    Identity,
    Fixed(DMatrix<f64>),
    Map(Arc<dyn Fn(&DVector<f64>) -> DMatrix<f64> + Send + Sync>),
}

impl fmt::Debug for HessianStrategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.kind().as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum HessianKind {
    Identity,
    Fixed,
    Map,
}

impl HessianKind {
    pub fn as_str(self) -> &'static str {
        match self {
            HessianKind::Identity => "identity",
            HessianKind::Fixed => "fixed",
            HessianKind::Map => "map",
        }
    }
}

impl HessianStrategy {
    pub fn kind(&self) -> HessianKind {
        match self {
            HessianStrategy::Identity => HessianKind::Identity,
            HessianStrategy::Fixed(_) => HessianKind::Fixed,
            HessianStrategy::Map(_) => HessianKind::Map,
        }
    }

    pub fn matrix(&self, x: &DVector<f64>) -> DMatrix<f64> {
        match self {
            HessianStrategy::Identity => DMatrix::identity(x.len(), x.len()),
            HessianStrategy::Fixed(h) => h.clone(),
            HessianStrategy::Map(f) => f(x),
        }
    }
}

/// Fixed parameters of a run.
#[derive(Debug, Clone)]
pub struct SolverConfig {
    pub merit: MeritParams,
    /// `L_∇f`.
    pub lipschitz_grad: f64,
    /// `Γ`, the Jacobian Lipschitz constant.
    pub lipschitz_jac: f64,
    pub beta: BetaSchedule,
    pub hessian: HessianStrategy,
    pub batch: usize,
    pub iterations: usize,
    pub seed: u64,
    /// Solve the true-gradient shadow problem and run per-iterate checks.
    pub validate: bool,
    pub constants: Option<ProblemConstants>,
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self {
            merit: MeritParams::default(),
            lipschitz_grad: 1.0,
            lipschitz_jac: 1.0,
            beta: BetaSchedule::default(),
            hessian: HessianStrategy::Identity,
            batch: 16,
            iterations: 100_000,
            seed: 0,
            validate: false,
            constants: None,
        }
    }
}

impl SolverConfig {
    pub fn validate_config(&self, exact_gradients: bool) -> Result<(), SolverError> {
        self.merit.validate().map_err(SolverError::Config)?;
        self.beta.validate(exact_gradients)?;
        if self.batch == 0 {
            return Err(SolverError::Config("batch size must be at least 1".into()));
        }
        step_size(self.merit.tau, self.merit.xi, self.lipschitz_grad, self.lipschitz_jac, 1.0)?;
        if let Some(k) = &self.constants {
            k.validate().map_err(SolverError::Config)?;
        }
        Ok(())
    }

    /// `(ζ, κ_H)` for the curvature check: from the supplied constants, or
    /// derived for identity and fixed positive definite `H`.
    pub fn curvature_bounds(&self) -> Option<(f64, f64)> {
        if let Some(k) = &self.constants {
            return Some((k.zeta, k.kappa_h));
        }
        match &self.hessian {
            HessianStrategy::Identity => Some((1.0, 1.0)),
            HessianStrategy::Fixed(h) => {
                let eig = h.symmetric_eigenvalues();
                let (lo, hi) = (eig.min(), eig.iter().map(|v| v.abs()).fold(0.0, f64::max));
                (lo > 0.0).then_some((lo, hi))
            }
            HessianStrategy::Map(_) => None,
        }
    }
}

/// `|∇f + Jᵀy|₂ + |c|₂`, plus the variant with the first term squared.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StationarityResidual {
    pub value: f64,
    pub squared_variant: f64,
}

fn residual_from(grad: &DVector<f64>, jac: &DMatrix<f64>, c: &DVector<f64>, y: &DVector<f64>) -> StationarityResidual {
    let dual = (grad + jac.transpose() * y).norm();
    let primal = c.norm();
    StationarityResidual {
        value: dual + primal,
        squared_variant: dual * dual + primal,
    }
}

pub fn stationarity_residual<P: Problem + ?Sized>(p: &P, x: &DVector<f64>, y: &DVector<f64>) -> StationarityResidual {
    residual_from(&p.gradient(x), &p.jacobian(x), &p.constraints(x), y)
}

/// KKT solve at `x` with the true gradient in place of the estimate.
pub fn true_shadow<P: Problem + ?Sized>(p: &P, x: &DVector<f64>, h: &DMatrix<f64>) -> Result<KktSolution, KktError> {
    kkt::solve_kkt(&KktInputs {
        h: h.clone(),
        jac: p.jacobian(x),
        g: p.gradient(x),
        c: p.constraints(x),
    })
}

/// Smallest `κ` with `2κ_H/√κ + κ_H/κ <= ζ/2`, by bisection.
///
/// Above this ratio `|u|² >= κ|v|²` implies `dᵀHd >= ½ζ|u|²` for every
/// step `d = u + v` with `u` tangential and `v` normal.
pub fn derive_kuv(zeta: f64, kappa_h: f64) -> f64 {
    assert!(zeta > 0.0 && zeta <= kappa_h, "need 0 < zeta <= kappa_h");
    let excess = |k: f64| 2.0 * kappa_h / k.sqrt() + kappa_h / k - 0.5 * zeta;
    let mut lo = 0.0;
    let mut hi = 1.0;
    while excess(hi) > 0.0 {
        lo = hi;
        hi *= 2.0;
    }
    while hi - lo > 1e-12 * hi {
        let mid = 0.5 * (lo + hi);
        if excess(mid) > 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    hi
}

/// `dᵀHd >= ½ζ|u|²` whenever `|u|² >= κ_uv|v|²`; `None` when the premise
/// does not apply.
pub fn curvature_condition(
    h: &DMatrix<f64>,
    d: &DVector<f64>,
    u: &DVector<f64>,
    v: &DVector<f64>,
    zeta: f64,
    kappa_uv: f64,
) -> Option<bool> {
    let uu = u.norm_squared();
    if uu < kappa_uv * v.norm_squared() || uu == 0.0 {
        return None;
    }
    let dhd = d.dot(&(h * d));
    Some(dhd >= 0.5 * zeta * uu - 1e-12 * (1.0 + dhd.abs()))
}

/// Per-iterate results that need the true gradient.
#[derive(Debug, Clone, PartialEq)]
pub struct Shadow {
    pub d_true: DVector<f64>,
    pub y_true: DVector<f64>,
    pub u_true: DVector<f64>,
    pub delta_q_true: f64,
    pub tau_trial_true: Extended,
    pub reduction: ReductionCheck,
    pub residual: StationarityResidual,
    /// Curvature condition on the true step and on the stochastic step.
    pub curvature: [Option<bool>; 2],
    /// `|Δq - (q(0) - q(d))| / max(1, |q(0)|)` for the stochastic step.
    pub delta_q_identity_error: f64,
}

/// Violation flags of one iterate.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Violations {
    pub xi: bool,
    pub tau: bool,
    /// Reduction bound failed at an iterate where `τ <= τ_trial,true`.
    pub reduction: bool,
    pub curvature: bool,
    pub alpha_above_one: bool,
    pub bounds: bool,
}

impl Violations {
    pub fn any(&self) -> bool {
        self.xi || self.tau || self.reduction || self.curvature || self.alpha_above_one || self.bounds
    }
}

/// Everything produced at iteration `k`. `x_{k+1} = x + alpha * d`.
#[derive(Debug, Clone, PartialEq)]
pub struct IterationRecord {
    pub k: usize,
    pub x: DVector<f64>,
    pub g: DVector<f64>,
    pub hessian: HessianKind,
    pub d: DVector<f64>,
    pub y: DVector<f64>,
    pub u: DVector<f64>,
    pub v: DVector<f64>,
    pub alpha: f64,
    pub beta: f64,
    pub phi: f64,
    pub delta_q: f64,
    pub xi_trial: Extended,
    pub norm_c: f64,
    pub kkt_residual: f64,
    pub shadow: Option<Shadow>,
    pub violations: Violations,
}

/// Violation counts and extremes over a run.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct ValidationSummary {
    pub iterations: usize,
    pub validated: bool,
    pub xi_violations: usize,
    pub tau_violations: usize,
    pub reduction_violations: usize,
    /// Reduction-bound failures at iterates where `τ > τ_trial,true`
    /// (not guaranteed there, so reported separately).
    pub reduction_unguaranteed_failures: usize,
    pub curvature_checks: usize,
    pub curvature_violations: usize,
    pub alpha_above_one: usize,
    pub bound_violations: usize,
    pub min_xi_trial: f64,
    pub min_tau_trial_true: f64,
    pub min_reduction_slack: f64,
    pub max_kkt_residual: f64,
    pub max_delta_q_identity_error: f64,
    pub kappa_uv: Option<f64>,
}

impl ValidationSummary {
    pub fn total_violations(&self) -> usize {
        self.xi_violations
            + self.tau_violations
            + self.reduction_violations
            + self.curvature_violations
            + self.alpha_above_one
            + self.bound_violations
    }

    fn absorb(&mut self, rec: &IterationRecord) {
        self.iterations += 1;
        let v = &rec.violations;
        self.xi_violations += v.xi as usize;
        self.tau_violations += v.tau as usize;
        self.reduction_violations += v.reduction as usize;
        self.curvature_violations += v.curvature as usize;
        self.alpha_above_one += v.alpha_above_one as usize;
        self.bound_violations += v.bounds as usize;
        self.min_xi_trial = self.min_xi_trial.min(rec.xi_trial.to_f64());
        self.max_kkt_residual = self.max_kkt_residual.max(rec.kkt_residual);
        if let Some(s) = &rec.shadow {
            self.min_tau_trial_true = self.min_tau_trial_true.min(s.tau_trial_true.to_f64());
            self.min_reduction_slack = self.min_reduction_slack.min(s.reduction.slack);
            self.max_delta_q_identity_error = self.max_delta_q_identity_error.max(s.delta_q_identity_error);
            self.curvature_checks += s.curvature.iter().filter(|c| c.is_some()).count();
            if !s.reduction.holds && !v.tau {
                // counted above as a reduction violation
            } else if !s.reduction.holds {
                self.reduction_unguaranteed_failures += 1;
            }
        }
    }
}

/// Final state of a run.
#[derive(Debug, Clone, PartialEq)]
pub struct RunOutcome {
    pub final_x: DVector<f64>,
    pub summary: ValidationSummary,
}

/// Records of a fully materialized run.
#[derive(Debug, Clone, PartialEq)]
pub struct RunOutput {
    pub records: Vec<IterationRecord>,
    pub final_x: DVector<f64>,
    pub summary: ValidationSummary,
}

fn finite(component: &'static str, v: &DVector<f64>) -> Result<(), ProblemError> {
    if v.iter().all(|x| x.is_finite()) {
        Ok(())
    } else {
        Err(ProblemError::NonFinite { component })
    }
}

fn check_bounds(k: &ProblemConstants, x: &DVector<f64>, f: f64, c: &DVector<f64>, grad: Option<&DVector<f64>>) -> bool {
    let mut bad = x.norm() > k.kappa_x || f < k.f_inf || c.norm() > k.kappa_c;
    if let Some(g) = grad {
        bad |= g.norm() > k.kappa_grad_f;
    }
    bad
}

/// Run `cfg.iterations` iterations from the problem's initial point,
/// handing each record to `observer`.
pub fn run_with<P, O, F>(p: &P, oracle: &O, cfg: &SolverConfig, mut observer: F) -> Result<RunOutcome, SolverError>
where
    P: Problem + ?Sized,
    O: GradientOracle + ?Sized,
    F: FnMut(&IterationRecord),
{
    run_until(p, oracle, cfg, |r| {
        observer(r);
        ControlFlow::Continue(())
    })
}

/// Like [`run_with`], but the observer may stop the run early. On a break
/// at iteration `k` the outcome's `final_x` is `x_k`, not `x_{k+1}`.
pub fn run_until<P, O, F>(p: &P, oracle: &O, cfg: &SolverConfig, mut observer: F) -> Result<RunOutcome, SolverError>
where
    P: Problem + ?Sized,
    O: GradientOracle + ?Sized,
    F: FnMut(&IterationRecord) -> ControlFlow<()>,
{
    cfg.validate_config(oracle.is_exact())?;
    let MeritParams { tau, xi, nu } = cfg.merit;
    let curvature = cfg.curvature_bounds();
    let kappa_uv = curvature.map(|(zeta, kh)| derive_kuv(zeta, kh));
    let mut rng = SqpRng::seed_from_u64(cfg.seed);
    let mut x = p.initial_point();
    let mut summary = ValidationSummary {
        validated: cfg.validate,
        min_xi_trial: f64::INFINITY,
        min_tau_trial_true: f64::INFINITY,
        min_reduction_slack: f64::INFINITY,
        kappa_uv,
        ..Default::default()
    };

    for k in 1..=cfg.iterations {
        let perr = |source| SolverError::Problem { iteration: k, source };
        let kerr = |source| SolverError::Kkt { iteration: k, source };
        finite("point", &x).map_err(|_| SolverError::NonFiniteIterate { iteration: k })?;
        let f = p.objective(&x);
        if !f.is_finite() {
            return Err(perr(ProblemError::NonFinite { component: "objective" }));
        }
        let c = p.constraints(&x);
        finite("constraints", &c).map_err(perr)?;
        let jac = p.jacobian(&x);
        if jac.iter().any(|v| !v.is_finite()) {
            return Err(perr(ProblemError::NonFinite { component: "jacobian" }));
        }
        let g = sample_gradient(oracle, &x, cfg.batch, &mut rng).map_err(perr)?;
        let h = cfg.hessian.matrix(&x);

        let fac = JacobianFactor::new(&jac).map_err(kerr)?;
        let inputs = KktInputs {
            h,
            jac,
            g,
            c,
        };
        let sol = kkt::solve_kkt_factored(&inputs, &fac).map_err(kerr)?;
        let KktInputs { h, jac, g, c } = inputs;

        let delta_q = merit::reduction_delta_q(tau, &c, &g, &h, &sol.d);
        let xi_trial = merit::xi_trial(tau, delta_q, &sol.d);
        let beta = cfg.beta.beta(k)?;
        let alpha = step_size(tau, xi, cfg.lipschitz_grad, cfg.lipschitz_jac, beta)?;

        let mut violations = Violations {
            xi: !xi_trial.bounds_above(xi),
            alpha_above_one: alpha > 1.0,
            ..Default::default()
        };

        let shadow = if cfg.validate {
            let grad = p.gradient(&x);
            finite("gradient", &grad).map_err(perr)?;
            let shadow_inputs = KktInputs {
                h,
                jac,
                g: grad,
                c,
            };
            let t = kkt::solve_kkt_factored(&shadow_inputs, &fac).map_err(kerr)?;
            let KktInputs { h, jac, g: grad, c } = shadow_inputs;
            let tau_trial_true = merit::tau_trial_true(nu, &c, &grad, &h, &t.d);
            let reduction = merit::check_reduction_lbnd(tau, nu, &c, &grad, &h, &t.d);
            let q0 = merit::model_q(tau, f, &c, &jac, &g, &h, &DVector::zeros(x.len()));
            let qd = merit::model_q(tau, f, &c, &jac, &g, &h, &sol.d);
            let curv = match (curvature, kappa_uv) {
                (Some((zeta, _)), Some(kuv)) => [
                    curvature_condition(&h, &t.d, &t.u, &t.v, zeta, kuv),
                    curvature_condition(&h, &sol.d, &sol.u, &sol.v, zeta, kuv),
                ],
                _ => [None, None],
            };
            violations.tau = !tau_trial_true.bounds_above(tau);
            violations.reduction = !reduction.holds && !violations.tau;
            violations.curvature = curv.iter().any(|c| *c == Some(false));
            if let Some(kc) = &cfg.constants {
                violations.bounds = check_bounds(kc, &x, f, &c, Some(&grad));
            }
            let shadow = Shadow {
                delta_q_true: merit::reduction_delta_q(tau, &c, &grad, &h, &t.d),
                residual: residual_from(&grad, &jac, &c, &t.y),
                d_true: t.d,
                y_true: t.y,
                u_true: t.u,
                tau_trial_true,
                reduction,
                curvature: curv,
                delta_q_identity_error: (delta_q - (q0 - qd)).abs() / q0.abs().max(1.0),
            };
            (Some(shadow), c)
        } else {
            if let Some(kc) = &cfg.constants {
                violations.bounds = check_bounds(kc, &x, f, &c, None);
            }
            (None, c)
        };
        let (shadow, c) = shadow;

        let x_next = &x + alpha * &sol.d;
        let record = IterationRecord {
            k,
            phi: merit::phi(tau, f, &c),
            norm_c: c.norm(),
            x,
            g,
            hessian: cfg.hessian.kind(),
            kkt_residual: sol.residual,
            d: sol.d,
            y: sol.y,
            u: sol.u,
            v: sol.v,
            alpha,
            beta,
            delta_q,
            xi_trial,
            shadow,
            violations,
        };
        summary.absorb(&record);
        if observer(&record).is_break() {
            x = record.x;
            break;
        }
        if x_next.iter().any(|v| !v.is_finite()) {
            return Err(SolverError::NonFiniteIterate { iteration: k + 1 });
        }
        x = x_next;
    }
    if summary.total_violations() > 0 {
        log::warn!(
            "run finished with violations: xi {}, tau {}, reduction {}, curvature {}, alpha>1 {}, bounds {}",
            summary.xi_violations,
            summary.tau_violations,
            summary.reduction_violations,
            summary.curvature_violations,
            summary.alpha_above_one,
            summary.bound_violations
        );
    }
    Ok(RunOutcome { final_x: x, summary })
}

/// Run and keep every record.
pub fn run<P, O>(p: &P, oracle: &O, cfg: &SolverConfig) -> Result<RunOutput, SolverError>
where
    P: Problem + ?Sized,
    O: GradientOracle + ?Sized,
{
    let mut records = Vec::with_capacity(cfg.iterations);
    let out = run_with(p, oracle, cfg, |r| records.push(r.clone()))?;
    Ok(RunOutput {
        records,
        final_x: out.final_x,
        summary: out.summary,
    })
}
