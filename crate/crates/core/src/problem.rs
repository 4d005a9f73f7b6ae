//! Equality-constrained stochastic programs and their gradient oracles.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::ProblemError;
use crate::exec::{self, Execution};

/// Random stream type threaded explicitly through every stochastic call.
pub type SqpRng = ChaCha8Rng;

/// `min f(x) s.t. c(x) = 0` with `m <= n` constraints.
///
/// The Jacobian is returned as the `m x n` matrix whose row `i` is the
/// gradient of `c_i`. Implementations must be safe for concurrent
/// evaluation at distinct points.
pub trait Problem: Sync {
    fn num_vars(&self) -> usize;
    fn num_constraints(&self) -> usize;
    fn objective(&self, x: &DVector<f64>) -> f64;
    fn gradient(&self, x: &DVector<f64>) -> DVector<f64>;
    fn constraints(&self, x: &DVector<f64>) -> DVector<f64>;
    fn jacobian(&self, x: &DVector<f64>) -> DMatrix<f64>;
    fn initial_point(&self) -> DVector<f64>;
}

/// Objective, gradient, constraints and Jacobian at one point.
#[derive(Debug, Clone, PartialEq)]
pub struct Evaluation {
    pub f: f64,
    pub grad: DVector<f64>,
    pub c: DVector<f64>,
    pub jac: DMatrix<f64>,
}

fn check_vec(component: &'static str, v: &DVector<f64>, expected: usize) -> Result<(), ProblemError> {
    if v.len() != expected {
        return Err(ProblemError::Dimension {
            component,
            got: v.len(),
            expected,
        });
    }
    if v.iter().any(|x| !x.is_finite()) {
        return Err(ProblemError::NonFinite { component });
    }
    Ok(())
}

/// Evaluate everything the solver loop needs at `x`.
pub fn eval_all<P: Problem + ?Sized>(p: &P, x: &DVector<f64>) -> Result<Evaluation, ProblemError> {
    let (n, m) = (p.num_vars(), p.num_constraints());
    check_vec("point", x, n)?;
    let f = p.objective(x);
    if !f.is_finite() {
        return Err(ProblemError::NonFinite { component: "objective" });
    }
    let grad = p.gradient(x);
    check_vec("gradient", &grad, n)?;
    let c = p.constraints(x);
    check_vec("constraints", &c, m)?;
    let jac = p.jacobian(x);
    if jac.nrows() != m || jac.ncols() != n {
        return Err(ProblemError::Dimension {
            component: "jacobian",
            got: jac.len(),
            expected: m * n,
        });
    }
    if jac.iter().any(|v| !v.is_finite()) {
        return Err(ProblemError::NonFinite { component: "jacobian" });
    }
    Ok(Evaluation { f, grad, c, jac })
}

/// Stochastic estimator of the objective gradient.
///
/// `draw` returns the average of `batch` i.i.d. per-sample gradients and
/// must be a deterministic function of `(x, batch, rng state)`.
pub trait GradientOracle: Sync {
    fn dim(&self) -> usize;
    fn draw(&self, x: &DVector<f64>, batch: usize, rng: &mut SqpRng) -> DVector<f64>;
    /// The expectation of `draw`, i.e. the true gradient.
    fn mean_gradient(&self, x: &DVector<f64>) -> DVector<f64>;
    /// Declared bound on `E|g - ∇f(x)|²` for a single sample, if known.
    fn variance_proxy(&self) -> Option<f64> {
        None
    }
    fn is_exact(&self) -> bool {
        self.variance_proxy() == Some(0.0)
    }
}

/// Zero-variance oracle returning the problem's true gradient.
#[derive(Debug, Clone, Copy)]
pub struct ExactOracle<'a, P: ?Sized> {
    problem: &'a P,
}

impl<'a, P: Problem + ?Sized> ExactOracle<'a, P> {
    pub fn new(problem: &'a P) -> Self {
        Self { problem }
    }
}

impl<P: Problem + ?Sized> GradientOracle for ExactOracle<'_, P> {
    fn dim(&self) -> usize {
        self.problem.num_vars()
    }
    fn draw(&self, x: &DVector<f64>, _batch: usize, _rng: &mut SqpRng) -> DVector<f64> {
        self.problem.gradient(x)
    }
    fn mean_gradient(&self, x: &DVector<f64>) -> DVector<f64> {
        self.problem.gradient(x)
    }
    fn variance_proxy(&self) -> Option<f64> {
        Some(0.0)
    }
}

/// Draw a mini-batch gradient estimate.
pub fn sample_gradient<O: GradientOracle + ?Sized>(
    oracle: &O,
    x: &DVector<f64>,
    batch: usize,
    rng: &mut SqpRng,
) -> Result<DVector<f64>, ProblemError> {
    if batch == 0 {
        return Err(ProblemError::InvalidArgument("batch size must be at least 1".into()));
    }
    let g = oracle.draw(x, batch, rng);
    check_vec("stochastic gradient", &g, oracle.dim())?;
    Ok(g)
}

/// Sample mean of `|g - ∇f(x)|²` over `trials` independent draws.
///
/// Trials run on independent streams forked from `rng`.
pub fn estimate_variance<O: GradientOracle + ?Sized>(
    oracle: &O,
    x: &DVector<f64>,
    batch: usize,
    trials: usize,
    rng: &mut SqpRng,
    exec: Execution,
) -> Result<f64, ProblemError> {
    if trials < 2 {
        return Err(ProblemError::InvalidArgument("need at least 2 trials".into()));
    }
    if batch == 0 {
        return Err(ProblemError::InvalidArgument("batch size must be at least 1".into()));
    }
    let truth = oracle.mean_gradient(x);
    let streams = exec::fork_streams(rng, trials);
    let sq = exec::map_indexed(exec, trials, |i| {
        let mut r = streams[i].clone();
        (oracle.draw(x, batch, &mut r) - &truth).norm_squared()
    });
    Ok(sq.iter().sum::<f64>() / trials as f64)
}

/// Constants bounding the problem over the region containing the iterates.
///
/// Used only for step-size computation and diagnostics; none of them is
/// certified by the library.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct ProblemConstants {
    /// Bound on `|x|` over the region.
    pub kappa_x: f64,
    pub f_inf: f64,
    pub kappa_grad_f: f64,
    pub kappa_c: f64,
    pub kappa_grad_c: f64,
    /// Lower bound on the smallest singular value of the Jacobian.
    pub r: f64,
    pub lip_grad_f: f64,
    pub lip_c: f64,
    /// Lipschitz constant of the Jacobian.
    pub gamma: f64,
    pub sigma: f64,
    /// Reduced-Hessian curvature lower bound.
    pub zeta: f64,
    /// Bound on `|H_k|`.
    pub kappa_h: f64,
}

impl ProblemConstants {
    pub fn validate(&self) -> Result<(), String> {
        let positive = [
            ("kappa_x", self.kappa_x),
            ("kappa_grad_f", self.kappa_grad_f),
            ("kappa_c", self.kappa_c),
            ("kappa_grad_c", self.kappa_grad_c),
            ("r", self.r),
            ("lip_grad_f", self.lip_grad_f),
            ("lip_c", self.lip_c),
            ("gamma", self.gamma),
            ("sigma", self.sigma),
            ("zeta", self.zeta),
            ("kappa_h", self.kappa_h),
        ];
        for (name, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return Err(format!("{name} must be positive and finite, got {v}"));
            }
        }
        if !self.f_inf.is_finite() {
            return Err("f_inf must be finite".into());
        }
        if self.r > self.kappa_grad_c {
            return Err("r must not exceed kappa_grad_c".into());
        }
        if self.zeta > self.kappa_h {
            return Err("zeta must not exceed kappa_h".into());
        }
        Ok(())
    }
}

/// Empirical Lipschitz constants from random segment probes.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LipschitzEstimate {
    pub grad: f64,
    pub jacobian: f64,
}

/// Largest difference quotient of `∇f` and of the Jacobian (spectral norm)
/// over `probes` random segments inside the ball `|x - center| <= radius`,
/// inflated by a factor of two.
///
/// This is a sampled lower estimate of the true constants, not a bound.
pub fn estimate_lipschitz<P: Problem + ?Sized>(
    p: &P,
    center: &DVector<f64>,
    radius: f64,
    probes: usize,
    rng: &mut SqpRng,
) -> LipschitzEstimate {
    let n = p.num_vars();
    let mut grad: f64 = 0.0;
    let mut jacobian: f64 = 0.0;
    for _ in 0..probes {
        let a = center + random_in_ball(n, radius, rng);
        let b = center + random_in_ball(n, radius, rng);
        let dist = (&a - &b).norm();
        if dist < 1e-12 {
            continue;
        }
        grad = grad.max((p.gradient(&a) - p.gradient(&b)).norm() / dist);
        let dj = p.jacobian(&a) - p.jacobian(&b);
        let spec = dj.singular_values().iter().cloned().fold(0.0, f64::max);
        jacobian = jacobian.max(spec / dist);
    }
    LipschitzEstimate {
        grad: 2.0 * grad,
        jacobian: 2.0 * jacobian,
    }
}

/// Uniform sample from the centered ball of the given radius.
pub fn random_in_ball<R: Rng + ?Sized>(n: usize, radius: f64, rng: &mut R) -> DVector<f64> {
    let dir = DVector::from_fn(n, |_, _| -> f64 { StandardNormal.sample(rng) });
    let norm = dir.norm();
    let u: f64 = rng.random();
    dir * (radius * u.powf(1.0 / n as f64) / norm)
}

/// Worst central-difference errors of the gradient and Jacobian at `x`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DerivativeCheck {
    pub grad_err: f64,
    pub jac_err: f64,
}

pub fn check_derivatives<P: Problem + ?Sized>(p: &P, x: &DVector<f64>, h: f64) -> DerivativeCheck {
    let n = p.num_vars();
    let g = p.gradient(x);
    let jac = p.jacobian(x);
    let mut grad_err: f64 = 0.0;
    let mut jac_err: f64 = 0.0;
    for i in 0..n {
        let mut xp = x.clone();
        let mut xm = x.clone();
        xp[i] += h;
        xm[i] -= h;
        let df = (p.objective(&xp) - p.objective(&xm)) / (2.0 * h);
        grad_err = grad_err.max((df - g[i]).abs());
        let dc = (p.constraints(&xp) - p.constraints(&xm)) / (2.0 * h);
        jac_err = jac_err.max((dc - jac.column(i)).norm());
    }
    DerivativeCheck { grad_err, jac_err }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::toys::SphereLinear;
    use rand::SeedableRng;

    #[test]
    fn eval_all_sphere_toy() {
        let p = SphereLinear::new(2);
        let e = eval_all(&p, &DVector::from_vec(vec![1.0, 0.0])).unwrap();
        assert_eq!(e.f, 1.0);
        assert_eq!(e.grad.as_slice(), &[1.0, 0.0]);
        assert_eq!(e.c.as_slice(), &[0.0]);
        assert_eq!(e.jac.as_slice(), &[2.0, 0.0]);
    }

    #[test]
    fn eval_all_at_rank_deficient_point_succeeds() {
        let p = SphereLinear::new(2);
        let e = eval_all(&p, &DVector::zeros(2)).unwrap();
        assert_eq!(e.c[0], -1.0);
        assert_eq!(e.jac.as_slice(), &[0.0, 0.0]);
    }

    #[test]
    fn eval_all_reports_non_finite_component() {
        let p = SphereLinear::new(2);
        let err = eval_all(&p, &DVector::from_vec(vec![f64::NAN, 0.0])).unwrap_err();
        assert_eq!(err, ProblemError::NonFinite { component: "point" });
        let err = eval_all(&p, &DVector::from_vec(vec![1e200, 1e200])).unwrap_err();
        assert_eq!(err, ProblemError::NonFinite { component: "constraints" });
    }

    #[test]
    fn zero_batch_rejected() {
        let p = SphereLinear::new(2);
        let o = ExactOracle::new(&p);
        let mut rng = SqpRng::seed_from_u64(1);
        let err = sample_gradient(&o, &DVector::zeros(2), 0, &mut rng).unwrap_err();
        assert!(matches!(err, ProblemError::InvalidArgument(_)));
    }

    #[test]
    fn exact_oracle_has_zero_variance() {
        let p = SphereLinear::new(3);
        let o = ExactOracle::new(&p);
        let mut rng = SqpRng::seed_from_u64(1);
        let x = DVector::from_vec(vec![0.3, -0.2, 0.9]);
        assert_eq!(sample_gradient(&o, &x, 4, &mut rng).unwrap(), p.gradient(&x));
        let v = estimate_variance(&o, &x, 4, 10, &mut rng, Execution::Parallel).unwrap();
        assert_eq!(v, 0.0);
        assert!(estimate_variance(&o, &x, 4, 1, &mut rng, Execution::Parallel).is_err());
    }

    #[test]
    fn lipschitz_estimate_on_sphere() {
        // ∇f is constant and the Jacobian 2x^T has Lipschitz constant 2.
        let p = SphereLinear::new(3);
        let mut rng = SqpRng::seed_from_u64(3);
        let est = estimate_lipschitz(&p, &DVector::zeros(3), 1.0, 50, &mut rng);
        assert_eq!(est.grad, 0.0);
        assert!((est.jacobian - 4.0).abs() < 1e-9);
    }

    #[test]
    fn constants_validation() {
        let mut k = ProblemConstants {
            kappa_x: 1.0,
            f_inf: -3.0,
            kappa_grad_f: 1.0,
            kappa_c: 1.0,
            kappa_grad_c: 2.0,
            r: 1.0,
            lip_grad_f: 1.0,
            lip_c: 1.0,
            gamma: 1.0,
            sigma: 1.0,
            zeta: 0.5,
            kappa_h: 1.0,
        };
        assert!(k.validate().is_ok());
        k.r = 3.0;
        assert!(k.validate().is_err());
        k.r = 1.0;
        k.zeta = 2.0;
        assert!(k.validate().is_err());
    }
}
