//! Constrained logistic regression instances:
//!
//! ```text
//! min (1/N) Σ log(1 + exp(-γ_i d_iᵀx))   s.t.   Ax = b,  |x|² = 1
//! ```
//!
//! `A`, `b` and the starting point are standard-normal draws from a seed.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_distr::{Distribution, StandardNormal};

use crate::error::{DataError, ProblemError};
use crate::exec::{self, Execution};
use crate::libsvm::Dataset;
use crate::problem::{GradientOracle, Problem, SqpRng};

/// Retries allowed for the full-row-rank check.
pub const RANK_RETRIES: usize = 10;
/// Relative singular-value threshold for declaring `A` full row rank.
pub const RANK_TOL: f64 = 1e-8;

/// `log(1 + exp(-t))` without overflow.
pub fn log1p_exp_neg(t: f64) -> f64 {
    (-t).max(0.0) + (-t.abs()).exp().ln_1p()
}

/// Logistic sigmoid, evaluated on the branch that cannot overflow.
pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

#[derive(Debug, Clone)]
pub struct LogRegInstance {
    data: Dataset,
    a: DMatrix<f64>,
    b: DVector<f64>,
    x1: DVector<f64>,
    exec: Execution,
}

fn singular_range(m: &DMatrix<f64>) -> (f64, f64) {
    let sv = m.singular_values();
    let max = sv.iter().cloned().fold(0.0, f64::max);
    let min = sv.iter().cloned().fold(f64::INFINITY, f64::min);
    (min, max)
}

fn full_row_rank(m: &DMatrix<f64>) -> bool {
    let (min, max) = singular_range(m);
    max > 0.0 && min >= RANK_TOL * max
}

/// Draw constraint data and a starting point, checking `A` and the
/// Jacobian `(A; 2x_1ᵀ)` for full row rank.
pub fn build_instance(data: Dataset, m_lin: usize, seed: u64) -> Result<LogRegInstance, DataError> {
    let n = data.num_features();
    if data.is_empty() {
        return Err(DataError::Invalid("dataset has no samples".into()));
    }
    if m_lin + 1 > n {
        return Err(DataError::Invalid(format!(
            "{} constraints exceed the {n} variables",
            m_lin + 1
        )));
    }
    let mut rng = SqpRng::seed_from_u64(seed);
    for _ in 0..RANK_RETRIES {
        let a = DMatrix::from_fn(m_lin, n, |_, _| StandardNormal.sample(&mut rng));
        let b = DVector::from_fn(m_lin, |_, _| StandardNormal.sample(&mut rng));
        let x1 = DVector::from_fn(n, |_, _| StandardNormal.sample(&mut rng));
        let inst = LogRegInstance {
            data: data.clone(),
            a,
            b,
            x1,
            exec: Execution::default(),
        };
        let a_ok = m_lin == 0 || full_row_rank(&inst.a);
        if a_ok && full_row_rank(&inst.jacobian(&inst.x1)) {
            return Ok(inst);
        }
    }
    Err(DataError::RankCheck(RANK_RETRIES))
}

impl LogRegInstance {
    pub fn data(&self) -> &Dataset {
        &self.data
    }

    pub fn a(&self) -> &DMatrix<f64> {
        &self.a
    }

    pub fn b(&self) -> &DVector<f64> {
        &self.b
    }

    pub fn num_linear(&self) -> usize {
        self.a.nrows()
    }

    /// Execution mode for full-data reductions.
    pub fn with_execution(mut self, exec: Execution) -> Self {
        self.exec = exec;
        self
    }

    fn sample_grad_into(&self, i: usize, x: &DVector<f64>, scale: f64, out: &mut DVector<f64>) {
        let gamma = self.data.label(i);
        let z = gamma * self.data.dot(i, x);
        self.data.axpy(i, -gamma * sigmoid(-z) * scale, out);
    }

    /// Average per-sample gradient over `indices` (0-based sample ids).
    pub fn minibatch_gradient(&self, x: &DVector<f64>, indices: &[usize]) -> Result<DVector<f64>, ProblemError> {
        if indices.is_empty() {
            return Err(ProblemError::InvalidArgument("empty index set".into()));
        }
        let n_samples = self.data.len();
        if let Some(&bad) = indices.iter().find(|&&i| i >= n_samples) {
            return Err(ProblemError::InvalidArgument(format!(
                "sample index {bad} out of range for {n_samples} samples"
            )));
        }
        Ok(self.minibatch_unchecked(x, indices))
    }

    fn minibatch_unchecked(&self, x: &DVector<f64>, indices: &[usize]) -> DVector<f64> {
        let mut g = DVector::zeros(self.data.num_features());
        let w = 1.0 / indices.len() as f64;
        for &i in indices {
            self.sample_grad_into(i, x, w, &mut g);
        }
        g
    }

    /// Norm of the minimum-norm solution of `Ax = b`. The feasible set is
    /// empty when this exceeds one.
    pub fn min_norm_affine_solution(&self) -> f64 {
        if self.a.nrows() == 0 {
            return 0.0;
        }
        let aat = &self.a * self.a.transpose();
        match aat.cholesky() {
            Some(ch) => (self.a.transpose() * ch.solve(&self.b)).norm(),
            None => f64::INFINITY,
        }
    }

    /// Gradient Lipschitz bound `|D|₂² / (4N)` and Jacobian Lipschitz
    /// constant (exactly 2, from the sphere row).
    pub fn lipschitz_bounds(&self) -> (f64, f64) {
        let n = self.data.num_features();
        let samples = self.data.len();
        // power iteration on DᵀD
        let mut v = DVector::from_element(n, 1.0 / (n as f64).sqrt());
        let mut lambda = 0.0;
        for _ in 0..1000 {
            let mut w = DVector::zeros(n);
            for i in 0..samples {
                let s = self.data.dot(i, &v);
                self.data.axpy(i, s, &mut w);
            }
            let next = w.norm();
            if next == 0.0 {
                break;
            }
            v = w / next;
            let done = (next - lambda).abs() <= 1e-12 * next;
            lambda = next;
            if done {
                break;
            }
        }
        (lambda / (4.0 * samples as f64) * (1.0 + 1e-9), 2.0)
    }
}

impl Problem for LogRegInstance {
    fn num_vars(&self) -> usize {
        self.data.num_features()
    }
    fn num_constraints(&self) -> usize {
        self.a.nrows() + 1
    }
    fn objective(&self, x: &DVector<f64>) -> f64 {
        let total = exec::chunked_sum(self.exec, self.data.len(), 1, |i, acc| {
            acc[0] += log1p_exp_neg(self.data.label(i) * self.data.dot(i, x));
        });
        total[0] / self.data.len() as f64
    }
    fn gradient(&self, x: &DVector<f64>) -> DVector<f64> {
        let n_samples = self.data.len();
        let w = 1.0 / n_samples as f64;
        exec::chunked_sum(self.exec, n_samples, self.data.num_features(), |i, acc| {
            self.sample_grad_into(i, x, w, acc)
        })
    }
    fn constraints(&self, x: &DVector<f64>) -> DVector<f64> {
        let m = self.a.nrows();
        let mut c = DVector::zeros(m + 1);
        c.rows_mut(0, m).copy_from(&(&self.a * x - &self.b));
        c[m] = x.norm_squared() - 1.0;
        c
    }
    fn jacobian(&self, x: &DVector<f64>) -> DMatrix<f64> {
        let (m, n) = self.a.shape();
        let mut j = DMatrix::zeros(m + 1, n);
        j.rows_mut(0, m).copy_from(&self.a);
        j.row_mut(m).copy_from(&(2.0 * x).transpose());
        j
    }
    fn initial_point(&self) -> DVector<f64> {
        self.x1.clone()
    }
}

/// How mini-batches are drawn.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum BatchMode {
    /// i.i.d. uniform indices.
    #[default]
    WithReplacement,
    /// Distinct indices; a batch of size `N` is the full gradient.
    WithoutReplacement,
}

/// Mini-batch gradient oracle over an instance's samples.
#[derive(Debug, Clone, Copy)]
pub struct MinibatchOracle<'a> {
    inst: &'a LogRegInstance,
    mode: BatchMode,
    variance: Option<f64>,
}

impl<'a> MinibatchOracle<'a> {
    pub fn new(inst: &'a LogRegInstance) -> Self {
        Self {
            inst,
            mode: BatchMode::WithReplacement,
            variance: None,
        }
    }

    pub fn with_mode(mut self, mode: BatchMode) -> Self {
        self.mode = mode;
        self
    }

    /// Declare the single-sample variance proxy σ².
    pub fn with_variance_proxy(mut self, sigma2: f64) -> Self {
        self.variance = Some(sigma2);
        self
    }

    pub fn draw_indices(&self, batch: usize, rng: &mut SqpRng) -> Vec<usize> {
        let n_samples = self.inst.data.len();
        match self.mode {
            BatchMode::WithReplacement => (0..batch).map(|_| rng.random_range(0..n_samples)).collect(),
            BatchMode::WithoutReplacement => {
                rand::seq::index::sample(rng, n_samples, batch.min(n_samples)).into_vec()
            }
        }
    }
}

impl GradientOracle for MinibatchOracle<'_> {
    fn dim(&self) -> usize {
        self.inst.num_vars()
    }
    fn draw(&self, x: &DVector<f64>, batch: usize, rng: &mut SqpRng) -> DVector<f64> {
        let idx = self.draw_indices(batch, rng);
        self.inst.minibatch_unchecked(x, &idx)
    }
    fn mean_gradient(&self, x: &DVector<f64>) -> DVector<f64> {
        self.inst.gradient(x)
    }
    fn variance_proxy(&self) -> Option<f64> {
        self.variance
    }
}

/// Synthetic binary classification data.
///
/// Features are `scale`·N(0,1) with roughly `density` of entries kept;
/// labels are drawn from a logistic model with a random weight vector of
/// norm `signal`.
pub fn synthetic_dataset(
    num_features: usize,
    num_samples: usize,
    scale: f64,
    density: f64,
    signal: f64,
    seed: u64,
) -> Dataset {
    let mut rng = SqpRng::seed_from_u64(seed);
    let w = DVector::from_fn(num_features, |_, _| StandardNormal.sample(&mut rng));
    let w = w.normalize() * signal;
    let mut rows = Vec::with_capacity(num_samples);
    for _ in 0..num_samples {
        let mut feats = Vec::new();
        let mut z = 0.0;
        for j in 0..num_features {
            let keep: f64 = rng.random();
            let v: f64 = StandardNormal.sample(&mut rng);
            if keep < density {
                // round to keep the committed text short
                let v = (scale * v * 1e4).round() / 1e4;
                z += w[j] * v;
                feats.push((j, v));
            }
        }
        let u: f64 = rng.random();
        let label = if u < sigmoid(z) { 1.0 } else { -1.0 };
        rows.push((label, feats));
    }
    Dataset::from_rows(num_features, &rows).expect("generated rows are valid")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::libsvm::parse_libsvm;
    use crate::problem::eval_all;

    fn toy() -> Dataset {
        parse_libsvm("+1 1:1 2:0.5\n-1 1:-0.3 3:2\n+1 2:1.5 3:-1\n-1 1:0.7 2:-0.2 3:0.4\n".as_bytes(), None).unwrap()
    }

    #[test]
    fn stable_primitives() {
        assert_eq!(sigmoid(-800.0), 0.0);
        assert_eq!(sigmoid(800.0), 1.0);
        assert!((log1p_exp_neg(0.0) - 2f64.ln()).abs() < 1e-15);
        assert!((log1p_exp_neg(-800.0) - 800.0).abs() < 1e-12);
        assert_eq!(log1p_exp_neg(800.0), 0.0);
    }

    #[test]
    fn value_at_zero() {
        let inst = build_instance(toy(), 1, 5).unwrap();
        let e = eval_all(&inst, &DVector::zeros(3)).unwrap();
        assert!((e.f - 2f64.ln()).abs() < 1e-15);
        assert_eq!(e.c[0], -inst.b()[0]);
        assert_eq!(e.c[1], -1.0);
    }

    #[test]
    fn single_sample_gradient_at_zero() {
        let ds = parse_libsvm("+1 1:1\n".as_bytes(), Some(3)).unwrap();
        let inst = build_instance(ds, 0, 1).unwrap();
        let g = inst.gradient(&DVector::zeros(3));
        assert_eq!(g.as_slice(), &[-0.5, 0.0, 0.0]);
    }

    #[test]
    fn determinism_and_dimensions() {
        let a = build_instance(toy(), 1, 42).unwrap();
        let b = build_instance(toy(), 1, 42).unwrap();
        assert_eq!(a.a(), b.a());
        assert_eq!(a.b(), b.b());
        assert_eq!(a.initial_point(), b.initial_point());
        assert_eq!(a.num_constraints(), 2);
        assert!(build_instance(toy(), 3, 1).is_err());
        assert!(build_instance(Dataset::default(), 0, 1).is_err());
    }

    #[test]
    fn minibatch_gradient_checks() {
        let inst = build_instance(toy(), 1, 3).unwrap();
        let x = DVector::from_vec(vec![0.2, -0.4, 0.1]);
        let all: Vec<usize> = (0..4).collect();
        let full = inst.minibatch_gradient(&x, &all).unwrap();
        assert!((full - inst.gradient(&x)).norm() < 1e-12);
        assert!(inst.minibatch_gradient(&x, &[]).is_err());
        assert!(inst.minibatch_gradient(&x, &[4]).is_err());
        // sample 0: γ=+1, d=(1,0.5,0), z = 0.2 - 0.2 = 0  -> -d·σ(0) = -d/2
        let g0 = inst.minibatch_gradient(&x, &[0]).unwrap();
        assert!((g0 - DVector::from_vec(vec![-0.5, -0.25, 0.0])).norm() < 1e-15);
    }

    #[test]
    fn saturated_sample_gradient_vanishes() {
        let ds = parse_libsvm("+1 1:1\n".as_bytes(), Some(2)).unwrap();
        let inst = build_instance(ds, 0, 1).unwrap();
        let g = inst.minibatch_gradient(&DVector::from_vec(vec![1e4, 0.0]), &[0]).unwrap();
        assert!(g.iter().all(|v| v.is_finite() && v.abs() == 0.0));
        let g = inst.minibatch_gradient(&DVector::from_vec(vec![-1e4, 0.0]), &[0]).unwrap();
        assert_eq!(g[0], -1.0);
    }

    #[test]
    fn objective_is_convex_on_random_chords() {
        let ds = synthetic_dataset(6, 50, 1.0, 0.8, 2.0, 9);
        let inst = build_instance(ds, 2, 1).unwrap();
        let mut rng = SqpRng::seed_from_u64(4);
        for _ in 0..200 {
            let x = DVector::from_fn(6, |_, _| 3.0 * <StandardNormal as Distribution<f64>>::sample(&StandardNormal, &mut rng));
            let y = DVector::from_fn(6, |_, _| 3.0 * <StandardNormal as Distribution<f64>>::sample(&StandardNormal, &mut rng));
            let t: f64 = rng.random();
            let mid = &x * t + &y * (1.0 - t);
            assert!(inst.objective(&mid) <= t * inst.objective(&x) + (1.0 - t) * inst.objective(&y) + 1e-10);
        }
    }

    #[test]
    fn lipschitz_bound_dominates_sampled_quotients() {
        let ds = synthetic_dataset(8, 80, 1.0, 1.0, 1.0, 2);
        let inst = build_instance(ds, 2, 1).unwrap();
        let (l, gamma) = inst.lipschitz_bounds();
        assert_eq!(gamma, 2.0);
        let dense = inst.data().to_dense();
        let exact = dense.singular_values().max().powi(2) / (4.0 * 80.0);
        assert!((l - exact).abs() < 1e-6 * exact);
        let mut rng = SqpRng::seed_from_u64(8);
        let est = crate::problem::estimate_lipschitz(&inst, &DVector::zeros(8), 2.0, 40, &mut rng);
        assert!(est.grad / 2.0 <= l);
        assert!((est.jacobian / 2.0 - 2.0).abs() < 1e-9);
    }
}
