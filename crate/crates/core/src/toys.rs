//! Small closed-form problems used by tests, reference checks and the
//! condition diagnostics.

use nalgebra::{DMatrix, DVector};
use rand_distr::{Distribution, StandardNormal};

use crate::problem::{GradientOracle, Problem, SqpRng};

/// `min x_1 s.t. |x|² = 1`. Minimizer `(-1, 0, ..)` with multiplier `1/2`.
#[derive(Debug, Clone)]
pub struct SphereLinear {
    n: usize,
}

impl SphereLinear {
    pub fn new(n: usize) -> Self {
        assert!(n >= 2);
        Self { n }
    }

    pub fn solution(&self) -> (DVector<f64>, DVector<f64>) {
        let mut x = DVector::zeros(self.n);
        x[0] = -1.0;
        (x, DVector::from_element(1, 0.5))
    }
}

impl Problem for SphereLinear {
    fn num_vars(&self) -> usize {
        self.n
    }
    fn num_constraints(&self) -> usize {
        1
    }
    fn objective(&self, x: &DVector<f64>) -> f64 {
        x[0]
    }
    fn gradient(&self, _x: &DVector<f64>) -> DVector<f64> {
        let mut g = DVector::zeros(self.n);
        g[0] = 1.0;
        g
    }
    fn constraints(&self, x: &DVector<f64>) -> DVector<f64> {
        DVector::from_element(1, x.norm_squared() - 1.0)
    }
    fn jacobian(&self, x: &DVector<f64>) -> DMatrix<f64> {
        DMatrix::from_fn(1, self.n, |_, j| 2.0 * x[j])
    }
    fn initial_point(&self) -> DVector<f64> {
        let mut x = DVector::zeros(self.n);
        x[0] = 0.5;
        x[1] = 1.0;
        x
    }
}

/// `min ½ xᵀQx + qᵀx s.t. Ax = b` with `Q` positive definite.
#[derive(Debug, Clone)]
pub struct AffineQp {
    pub q_mat: DMatrix<f64>,
    pub q_vec: DVector<f64>,
    pub a: DMatrix<f64>,
    pub b: DVector<f64>,
    pub x0: DVector<f64>,
}

impl AffineQp {
    /// Random well-conditioned instance: `Q = I + BᵀB/n`.
    pub fn random(n: usize, m: usize, rng: &mut SqpRng) -> Self {
        let mut normal = |r: usize, c: usize| DMatrix::from_fn(r, c, |_, _| StandardNormal.sample(&mut *rng));
        let bm = normal(n, n);
        let q_mat = DMatrix::identity(n, n) + bm.transpose() * &bm / n as f64;
        let q_vec = normal(n, 1).column(0).into_owned();
        let a = normal(m, n);
        let b = normal(m, 1).column(0).into_owned();
        let x0 = normal(n, 1).column(0).into_owned();
        Self { q_mat, q_vec, a, b, x0 }
    }

    /// Closed-form stationary pair from the full KKT system.
    pub fn solution(&self) -> (DVector<f64>, DVector<f64>) {
        let (n, m) = (self.q_mat.nrows(), self.a.nrows());
        let mut k = DMatrix::zeros(n + m, n + m);
        k.view_mut((0, 0), (n, n)).copy_from(&self.q_mat);
        k.view_mut((0, n), (n, m)).copy_from(&self.a.transpose());
        k.view_mut((n, 0), (m, n)).copy_from(&self.a);
        let mut rhs = DVector::zeros(n + m);
        rhs.rows_mut(0, n).copy_from(&(-&self.q_vec));
        rhs.rows_mut(n, m).copy_from(&self.b);
        let sol = k.lu().solve(&rhs).expect("nonsingular KKT matrix");
        (sol.rows(0, n).into_owned(), sol.rows(n, m).into_owned())
    }

    pub fn max_eigenvalue(&self) -> f64 {
        self.q_mat.symmetric_eigenvalues().max()
    }
}

impl Problem for AffineQp {
    fn num_vars(&self) -> usize {
        self.q_mat.nrows()
    }
    fn num_constraints(&self) -> usize {
        self.a.nrows()
    }
    fn objective(&self, x: &DVector<f64>) -> f64 {
        0.5 * x.dot(&(&self.q_mat * x)) + self.q_vec.dot(x)
    }
    fn gradient(&self, x: &DVector<f64>) -> DVector<f64> {
        &self.q_mat * x + &self.q_vec
    }
    fn constraints(&self, x: &DVector<f64>) -> DVector<f64> {
        &self.a * x - &self.b
    }
    fn jacobian(&self, _x: &DVector<f64>) -> DMatrix<f64> {
        self.a.clone()
    }
    fn initial_point(&self) -> DVector<f64> {
        self.x0.clone()
    }
}

/// Two-variable instance whose objective is flat away from the origin:
/// `f(x) = s(x_1)` with `s` a C¹ plateau (`s = 1` for `|x_1| >= 1/2`) and
/// `c(x) = x_2`. Feasible points on the plateau are stationary for the
/// reduced problem yet strictly worse than the origin.
#[derive(Debug, Clone, Copy, Default)]
pub struct FlatPlateau;

impl FlatPlateau {
    fn profile(t: f64) -> (f64, f64) {
        let u = (t.abs() / 0.5).min(1.0);
        let val = 3.0 * u * u - 2.0 * u * u * u;
        let du = if t.abs() >= 0.5 { 0.0 } else { (6.0 * u - 6.0 * u * u) / 0.5 };
        (val, du * t.signum())
    }
}

impl Problem for FlatPlateau {
    fn num_vars(&self) -> usize {
        2
    }
    fn num_constraints(&self) -> usize {
        1
    }
    fn objective(&self, x: &DVector<f64>) -> f64 {
        Self::profile(x[0]).0
    }
    fn gradient(&self, x: &DVector<f64>) -> DVector<f64> {
        DVector::from_vec(vec![Self::profile(x[0]).1, 0.0])
    }
    fn constraints(&self, x: &DVector<f64>) -> DVector<f64> {
        DVector::from_element(1, x[1])
    }
    fn jacobian(&self, _x: &DVector<f64>) -> DMatrix<f64> {
        DMatrix::from_row_slice(1, 2, &[0.0, 1.0])
    }
    fn initial_point(&self) -> DVector<f64> {
        DVector::from_vec(vec![0.3, 0.1])
    }
}

/// True gradient plus isotropic Gaussian noise of per-sample variance
/// `noise²` per coordinate, averaged over the batch.
pub struct GaussianNoiseOracle<'a, P: ?Sized> {
    problem: &'a P,
    noise: f64,
}

impl<'a, P: Problem + ?Sized> GaussianNoiseOracle<'a, P> {
    pub fn new(problem: &'a P, noise: f64) -> Self {
        Self { problem, noise }
    }
}

impl<P: Problem + ?Sized> GradientOracle for GaussianNoiseOracle<'_, P> {
    fn dim(&self) -> usize {
        self.problem.num_vars()
    }
    fn draw(&self, x: &DVector<f64>, batch: usize, rng: &mut SqpRng) -> DVector<f64> {
        let scale = self.noise / (batch as f64).sqrt();
        let mut g = self.problem.gradient(x);
        for gi in g.iter_mut() {
            let z: f64 = StandardNormal.sample(rng);
            *gi += scale * z;
        }
        g
    }
    fn mean_gradient(&self, x: &DVector<f64>) -> DVector<f64> {
        self.problem.gradient(x)
    }
    fn variance_proxy(&self) -> Option<f64> {
        Some(self.noise * self.noise * self.problem.num_vars() as f64)
    }
}
