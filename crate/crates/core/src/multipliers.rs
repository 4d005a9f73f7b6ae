//! Multiplier estimators built on the per-iteration `y_k`: the running
//! average from index `k̄`, the trailing ε-window average, and the error
//! bound diagnostics for the true multipliers.
//!
//! Indices are 1-based to match iteration numbers; slices are 0-based, so
//! iteration `k` lives at `xs[k - 1]`.

use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use crate::error::ProblemError;

/// Sum kept as an unevaluated pair `hi + lo` (Neumaier / two-sum).
#[derive(Debug, Clone, Copy, Default, PartialEq)]
struct Compensated {
    hi: f64,
    lo: f64,
}

impl Compensated {
    fn add(&mut self, v: f64) {
        let s = self.hi + v;
        let bp = s - self.hi;
        let err = (self.hi - (s - bp)) + (v - bp);
        self.hi = s;
        self.lo += err;
    }

    fn value(&self) -> f64 {
        self.hi + self.lo
    }

    /// `self - other`, rounded once.
    fn minus(&self, other: &Compensated) -> f64 {
        (self.hi - other.hi) + (self.lo - other.lo)
    }
}

/// `(1/(k - k̄ + 1)) Σ_{i=k̄}^{k} y_i`.
pub fn running_average(ys: &[DVector<f64>], k: usize, kbar: usize) -> Result<DVector<f64>, ProblemError> {
    if kbar == 0 || k < kbar {
        return Err(ProblemError::InvalidArgument(format!("need k >= kbar >= 1, got k = {k}, kbar = {kbar}")));
    }
    if k > ys.len() {
        return Err(ProblemError::InvalidArgument(format!("k = {k} beyond trace of length {}", ys.len())));
    }
    Ok(mean(&ys[kbar - 1..k]))
}

fn mean(ys: &[DVector<f64>]) -> DVector<f64> {
    let m = ys[0].len();
    let mut acc = vec![Compensated::default(); m];
    for y in ys {
        for (a, v) in acc.iter_mut().zip(y.iter()) {
            a.add(*v);
        }
    }
    DVector::from_iterator(m, acc.iter().map(|a| a.value() / ys.len() as f64))
}

/// Incrementally maintained `Y_k^avg`.
#[derive(Debug, Clone, PartialEq)]
pub struct RunningAverage {
    kbar: usize,
    seen: usize,
    sums: Vec<Compensated>,
}

impl RunningAverage {
    pub fn new(dim: usize, kbar: usize) -> Result<Self, ProblemError> {
        if kbar == 0 {
            return Err(ProblemError::InvalidArgument("kbar must be at least 1".into()));
        }
        Ok(Self {
            kbar,
            seen: 0,
            sums: vec![Compensated::default(); dim],
        })
    }

    /// Feed `y_k` for the next `k`.
    pub fn push(&mut self, y: &DVector<f64>) {
        self.seen += 1;
        if self.seen >= self.kbar {
            for (a, v) in self.sums.iter_mut().zip(y.iter()) {
                a.add(*v);
            }
        }
    }

    /// Current average, `None` until `k̄` values have been seen.
    pub fn average(&self) -> Option<DVector<f64>> {
        let count = (self.seen + 1).checked_sub(self.kbar).filter(|&c| c > 0)?;
        Some(DVector::from_iterator(
            self.sums.len(),
            self.sums.iter().map(|a| a.value() / count as f64),
        ))
    }
}

/// Smallest `k′` such that `|x_j - x_k| <= ε` for every `j` in `[k′, k]`,
/// found by scanning backwards from `k`.
pub fn window_start(xs: &[DVector<f64>], k: usize, eps: f64) -> usize {
    let xk = &xs[k - 1];
    let mut start = k;
    while start > 1 && (&xs[start - 2] - xk).norm() <= eps {
        start -= 1;
    }
    start
}

/// Reference ε-window average: `(mean of y_{k′..k}, k′)`.
pub fn windowed_average(xs: &[DVector<f64>], ys: &[DVector<f64>], k: usize, eps: f64) -> (DVector<f64>, usize) {
    assert!(eps > 0.0, "eps must be positive");
    assert_eq!(xs.len(), ys.len(), "histories must be aligned");
    assert!(k >= 1 && k <= xs.len(), "k out of range");
    let start = window_start(xs, k, eps);
    (mean(&ys[start - 1..k]), start)
}

const FANOUT: usize = 32;

/// A ball containing a block of consecutive iterates.
#[derive(Debug, Clone)]
struct Ball {
    center: usize,
    radius: f64,
}

/// Online ε-window averages for several ε over a growing history.
///
/// Blocks of `32^l` consecutive iterates are bounded by balls centered at
/// their first member. A query prunes whole blocks with the triangle
/// inequality, so `k′` is exact while the cost stays near the number of
/// blocks straddling the ε-sphere. Window sums come from compensated
/// prefix sums.
#[derive(Debug, Clone)]
pub struct WindowedAverager {
    eps: Vec<f64>,
    xs: Vec<DVector<f64>>,
    levels: Vec<Vec<Ball>>,
    prefix: Vec<Vec<Compensated>>,
    dim_y: usize,
}

impl WindowedAverager {
    pub fn new(eps: &[f64], dim_y: usize) -> Self {
        assert!(eps.iter().all(|&e| e > 0.0), "eps must be positive");
        Self {
            eps: eps.to_vec(),
            xs: Vec::new(),
            levels: Vec::new(),
            prefix: vec![vec![Compensated::default(); dim_y]],
            dim_y,
        }
    }

    pub fn len(&self) -> usize {
        self.xs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.xs.is_empty()
    }

    pub fn eps(&self) -> &[f64] {
        &self.eps
    }

    /// Append `(x_k, y_k)` and return `(average, k′)` for each ε.
    pub fn push(&mut self, x: DVector<f64>, y: &DVector<f64>) -> Vec<(DVector<f64>, usize)> {
        assert_eq!(y.len(), self.dim_y);
        let idx = self.xs.len();
        let mut next = self.prefix[idx].clone();
        for (a, v) in next.iter_mut().zip(y.iter()) {
            a.add(*v);
        }
        self.prefix.push(next);

        self.xs.push(x);
        let len = idx + 1;
        if self.levels.is_empty() {
            self.levels.push(Vec::new());
        }
        for level in 0..self.levels.len() {
            let size = Self::block_size(level);
            let balls = &mut self.levels[level];
            let b = idx / size;
            if b == balls.len() {
                balls.push(Ball { center: idx, radius: 0.0 });
            } else {
                let r = (&self.xs[idx] - &self.xs[balls[b].center]).norm();
                balls[b].radius = balls[b].radius.max(r);
            }
        }
        // keep the top level at no more than FANOUT blocks
        let top = self.levels.len() - 1;
        if len > Self::block_size(top + 1) - Self::block_size(top) && self.levels[top].len() > FANOUT {
            let size = Self::block_size(top + 1);
            let balls = (0..=idx / size)
                .map(|b| {
                    let lo = b * size;
                    let hi = ((b + 1) * size).min(len);
                    let radius = (lo..hi).map(|j| (&self.xs[j] - &self.xs[lo]).norm()).fold(0.0, f64::max);
                    Ball { center: lo, radius }
                })
                .collect();
            self.levels.push(balls);
        }
        let k = idx + 1;
        (0..self.eps.len())
            .map(|e| {
                let start = self.window_start(k, self.eps[e]);
                (self.range_mean(start, k), start)
            })
            .collect()
    }

    /// Exact `k′` for the current history.
    pub fn window_start(&self, k: usize, eps: f64) -> usize {
        let xk = &self.xs[k - 1];
        // largest 0-based j < k-1 with |x_j - x_k| > ε
        let far = self.find_far(self.levels.len(), 0, k - 1, xk, eps);
        far.map_or(1, |j| j + 2)
    }

    fn block_size(level: usize) -> usize {
        FANOUT.pow(level as u32 + 1)
    }

    /// Largest index in block `b` of `level` (or the whole history when
    /// `level == levels.len()`) that is below `limit` and farther than ε.
    fn find_far(&self, level: usize, b: usize, limit: usize, xk: &DVector<f64>, eps: f64) -> Option<usize> {
        if level == self.levels.len() {
            // virtual root: children are all top-level blocks
            let top = level.checked_sub(1)?;
            let size = Self::block_size(top);
            let last = limit.checked_sub(1)? / size;
            return (0..=last).rev().find_map(|c| self.find_far(top, c, limit, xk, eps));
        }
        let size = Self::block_size(level);
        let lo = b * size;
        if lo >= limit {
            return None;
        }
        let hi = ((b + 1) * size).min(limit);
        let ball = &self.levels[level][b];
        let dc = (&self.xs[ball.center] - xk).norm();
        if dc + ball.radius <= eps {
            return None;
        }
        if dc - ball.radius > eps {
            return Some(hi - 1);
        }
        if level == 0 {
            return (lo..hi).rev().find(|&j| (&self.xs[j] - xk).norm() > eps);
        }
        let child = Self::block_size(level - 1);
        (lo / child..=(hi - 1) / child)
            .rev()
            .find_map(|c| self.find_far(level - 1, c, limit, xk, eps))
    }

    /// Mean of `y_{start..=k}` (1-based).
    pub fn range_mean(&self, start: usize, k: usize) -> DVector<f64> {
        let count = (k + 1 - start) as f64;
        let (a, b) = (&self.prefix[k], &self.prefix[start - 1]);
        DVector::from_iterator(self.dim_y, (0..self.dim_y).map(|i| a[i].minus(&b[i]) / count))
    }
}

/// `κ_y = κ_H L_c r⁻² + L_∇f r⁻¹ + κ_∇f L_M`.
pub fn kappa_y(kappa_h: f64, lip_c: f64, r: f64, lip_grad_f: f64, kappa_grad_f: f64, lip_m: f64) -> f64 {
    kappa_h * lip_c / (r * r) + lip_grad_f / r + kappa_grad_f * lip_m
}

/// Per-iterate ratios `|y_k^true - y*| / max(|x_k - x*|, 1e-14)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MultiplierBoundReport {
    pub ratios: Vec<f64>,
    pub tail_start: usize,
    pub tail_max: f64,
    /// Iterations (1-based) whose ratio exceeds the supplied `κ_y`.
    pub exceeding: Vec<usize>,
}

pub const DISTANCE_FLOOR: f64 = 1e-14;

pub fn bound_ratio(dist_x: f64, dist_y_true: f64) -> f64 {
    if dist_x == 0.0 && dist_y_true == 0.0 {
        0.0
    } else {
        dist_y_true / dist_x.max(DISTANCE_FLOOR)
    }
}

/// Ratio report from precomputed distances. `tail_start` is 1-based.
pub fn bound_report_from_distances(dist_x: &[f64], dist_y_true: &[f64], kappa: f64, tail_start: usize) -> MultiplierBoundReport {
    assert_eq!(dist_x.len(), dist_y_true.len());
    let ratios: Vec<f64> = dist_x.iter().zip(dist_y_true).map(|(&dx, &dy)| bound_ratio(dx, dy)).collect();
    let tail_max = ratios.iter().skip(tail_start.saturating_sub(1)).copied().fold(0.0, f64::max);
    let exceeding = ratios
        .iter()
        .enumerate()
        .filter(|(_, &r)| r > kappa)
        .map(|(i, _)| i + 1)
        .collect();
    MultiplierBoundReport {
        ratios,
        tail_start,
        tail_max,
        exceeding,
    }
}

pub fn check_true_multiplier_bound(
    xs: &[DVector<f64>],
    ys_true: &[DVector<f64>],
    x_star: &DVector<f64>,
    y_star: &DVector<f64>,
    kappa: f64,
    tail_start: usize,
) -> MultiplierBoundReport {
    let dx: Vec<f64> = xs.iter().map(|x| (x - x_star).norm()).collect();
    let dy: Vec<f64> = ys_true.iter().map(|y| (y - y_star).norm()).collect();
    bound_report_from_distances(&dx, &dy, kappa, tail_start)
}

/// Least-squares slope of `ln e` against `ln k` over the given points.
pub fn log_log_slope(points: &[(f64, f64)]) -> f64 {
    let n = points.len() as f64;
    let (sx, sy) = points
        .iter()
        .fold((0.0, 0.0), |(a, b), &(k, e)| (a + k.ln(), b + e.ln()));
    let (mx, my) = (sx / n, sy / n);
    let (mut num, mut den) = (0.0, 0.0);
    for &(k, e) in points {
        let dx = k.ln() - mx;
        num += dx * (e.ln() - my);
        den += dx * dx;
    }
    num / den
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    fn normal(rng: &mut ChaCha8Rng) -> f64 {
        StandardNormal.sample(rng)
    }

    fn s(v: f64) -> DVector<f64> {
        DVector::from_element(1, v)
    }

    #[test]
    fn running_average_examples() {
        let ys: Vec<_> = (1..=3).map(|i| s(i as f64)).collect();
        assert_eq!(running_average(&ys, 3, 1).unwrap()[0], 2.0);
        assert_eq!(running_average(&ys, 2, 2).unwrap()[0], 2.0);
        assert!(running_average(&ys, 1, 2).is_err());
        assert!(running_average(&ys, 1, 0).is_err());
    }

    #[test]
    fn incremental_matches_recomputation_on_long_trace() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let ys: Vec<_> = (0..100_000)
            .map(|_| DVector::from_fn(3, |_, _| -> f64 { 5.0 + normal(&mut rng) }))
            .collect();
        let mut inc = RunningAverage::new(3, 7).unwrap();
        for (i, y) in ys.iter().enumerate() {
            inc.push(y);
            let k = i + 1;
            if k < 7 {
                assert!(inc.average().is_none());
            } else if k % 9973 == 0 || k == ys.len() {
                let fresh = running_average(&ys, k, 7).unwrap();
                let got = inc.average().unwrap();
                assert!((&got - &fresh).norm() <= 1e-12 * fresh.norm());
            }
        }
    }

    #[test]
    fn averaging_commutes_with_affine_maps() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let ys: Vec<_> = (0..500).map(|_| DVector::from_fn(2, |_, _| rng.random::<f64>())).collect();
        let a = nalgebra::DMatrix::from_row_slice(2, 2, &[2.0, -1.0, 0.5, 3.0]);
        let b = DVector::from_vec(vec![1.0, -4.0]);
        let mapped: Vec<_> = ys.iter().map(|y| &a * y + &b).collect();
        let lhs = running_average(&mapped, 500, 1).unwrap();
        let rhs = &a * running_average(&ys, 500, 1).unwrap() + &b;
        assert!((lhs - &rhs).norm() <= 1e-12 * rhs.norm());
    }

    #[test]
    fn windowed_average_examples() {
        let xs: Vec<_> = [0.0, 0.5, 0.6, 0.65].iter().map(|&v| s(v)).collect();
        let ys: Vec<_> = [10.0, 1.0, 2.0, 6.0].iter().map(|&v| s(v)).collect();
        let (avg, start) = windowed_average(&xs, &ys, 4, 0.2);
        assert_eq!(start, 2);
        assert_eq!(avg[0], 3.0);
        // all-inclusive window
        let (avg, start) = windowed_average(&xs, &ys, 4, 10.0);
        assert_eq!(start, 1);
        assert_eq!(avg, running_average(&ys, 4, 1).unwrap());
        // empty past
        let (avg, start) = windowed_average(&xs, &ys, 4, 0.01);
        assert_eq!((avg[0], start), (6.0, 4));
    }

    #[test]
    fn window_is_a_suffix_not_a_ball() {
        // x_2 leaves the ball and x_1 returns: x_1 must not be included
        let xs: Vec<_> = [0.0, 5.0, 0.0, 0.0].iter().map(|&v| s(v)).collect();
        let ys: Vec<_> = (1..=4).map(|i| s(i as f64)).collect();
        let (avg, start) = windowed_average(&xs, &ys, 4, 1.0);
        assert_eq!(start, 3);
        assert_eq!(avg[0], 3.5);
    }

    fn random_walk(rng: &mut ChaCha8Rng, len: usize, dim: usize, step: f64) -> Vec<DVector<f64>> {
        let mut x = DVector::zeros(dim);
        (0..len)
            .map(|i| {
                let scale = step / (1.0 + i as f64).sqrt();
                x += DVector::from_fn(dim, |_, _| -> f64 { scale * normal(rng) });
                x.clone()
            })
            .collect()
    }

    #[test]
    fn averager_matches_scan_on_long_walk() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let xs = random_walk(&mut rng, 5000, 3, 0.5);
        let ys: Vec<_> = (0..5000).map(|_| DVector::from_fn(2, |_, _| -> f64 { StandardNormal.sample(&mut rng) })).collect();
        let eps = [0.05, 0.3, 1.0, 100.0];
        let mut av = WindowedAverager::new(&eps, 2);
        for k in 1..=xs.len() {
            let out = av.push(xs[k - 1].clone(), &ys[k - 1]);
            if k % 37 == 0 || k < 100 {
                for (e, (avg, start)) in eps.iter().zip(&out) {
                    let (ref_avg, ref_start) = windowed_average(&xs, &ys, k, *e);
                    assert_eq!(*start, ref_start, "k = {k}, eps = {e}");
                    assert!((avg - &ref_avg).norm() <= 1e-12 * ref_avg.norm().max(1e-300));
                }
            }
        }
    }

    proptest! {
        #[test]
        fn averager_matches_scan(seed in any::<u64>(), len in 1usize..300, eps in 0.01f64..3.0) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let xs = random_walk(&mut rng, len, 2, 1.0);
            let ys: Vec<_> = (0..len).map(|_| s(rng.random::<f64>())).collect();
            let mut av = WindowedAverager::new(&[eps], 1);
            for k in 1..=len {
                let out = av.push(xs[k - 1].clone(), &ys[k - 1]);
                let (ref_avg, ref_start) = windowed_average(&xs, &ys, k, eps);
                prop_assert_eq!(out[0].1, ref_start);
                prop_assert!((out[0].0[0] - ref_avg[0]).abs() <= 1e-12 * ref_avg[0].abs().max(1e-300));
            }
        }
    }

    #[test]
    fn kappa_y_examples() {
        assert_eq!(kappa_y(1.0, 1.0, 1.0, 1.0, 1.0, 1.0), 3.0);
        let big = kappa_y(1.0, 1.0, 1e12, 1.0, 2.0, 3.0);
        assert!((big - 6.0).abs() < 1e-11);
        // sphere-plus-affine constraints on the box [-2, 2]^2, f = ½|x|²:
        // L_c = 2, L_∇f = 1, κ_∇f = 2√2, r = 1, κ_H = 1, L_M = 0.5
        let v = kappa_y(1.0, 2.0, 1.0, 1.0, 2.0 * 2f64.sqrt(), 0.5);
        assert!((v - (2.0 + 1.0 + 2f64.sqrt())).abs() < 1e-15);
    }

    #[test]
    fn bound_report_cases() {
        let xs = vec![s(1.0), s(0.0), s(0.5)];
        let ys = vec![s(2.0), s(3.0), s(3.5)];
        let r = check_true_multiplier_bound(&xs, &ys, &s(0.0), &s(3.0), 2.5, 2);
        assert_eq!(r.ratios, vec![1.0, 0.0, 1.0]);
        assert_eq!(r.tail_max, 1.0);
        assert!(r.exceeding.is_empty());
        let r = check_true_multiplier_bound(&xs, &ys, &s(0.0), &s(3.0), 0.5, 1);
        assert_eq!(r.exceeding, vec![1, 3]);
    }

    #[test]
    fn slope_of_power_law() {
        let pts: Vec<_> = (1..50).map(|k| (k as f64, 3.0 * (k as f64).powf(-0.5))).collect();
        assert!((log_log_slope(&pts) + 0.5).abs() < 1e-12);
    }
}
