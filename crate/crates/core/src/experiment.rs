//! Reproduction harness: reference solves, replicate runs, CSV traces and
//! the sampled PL-type diagnostic.
//!
//! Output layout of [`run_experiment`] inside the output directory:
//!
//! - `config.json`: the fully resolved configuration plus instance facts.
//! - `reference.json`: `x*`, `y*` and the reference solve report.
//! - `trace_seed<S>.csv`: one thinned trace per seed.
//! - `columns.txt`: column descriptions for plotting tools.
//! - `summary.json`: one [`RunSummary`] per seed.

use std::fs::{self, File};
use std::io::{self, BufWriter, Write};
use std::ops::ControlFlow;
use std::path::{Path, PathBuf};
use std::time::Instant;

use nalgebra::DVector;
use rand::SeedableRng;
use serde::{Deserialize, Serialize};

use crate::error::ExperimentError;
use crate::exec::{self, Execution};
use crate::kkt::JacobianFactor;
use crate::libsvm::{parse_libsvm, read_libsvm_file, Dataset};
use crate::logreg::{build_instance, LogRegInstance, MinibatchOracle};
use crate::merit::{self, MeritParams};
use crate::multipliers::{bound_ratio, RunningAverage, WindowedAverager};
use crate::problem::{random_in_ball, ExactOracle, GradientOracle, Problem, SqpRng};
use crate::solver::{self, BetaSchedule, SolverConfig, ValidationSummary};

/// Small synthetic LIBSVM dataset (40 features, 200 samples) shipped with
/// the crate so that experiments run without downloads.
pub const BUNDLED_DATASET: &str = include_str!("../data/bundled.svm");

pub fn bundled_dataset() -> Dataset {
    parse_libsvm(BUNDLED_DATASET.as_bytes(), None).expect("bundled dataset parses")
}

/// Everything needed to reproduce an experiment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    /// LIBSVM file; `None` selects the bundled dataset.
    pub dataset: Option<PathBuf>,
    pub num_features: Option<usize>,
    pub mlin: usize,
    /// Seed for the random affine constraints and the initial point.
    pub instance_seed: u64,
    pub batch: usize,
    pub iters: usize,
    pub tau: f64,
    pub xi: f64,
    pub nu: f64,
    pub beta1: f64,
    pub beta_p: f64,
    pub beta_warmup: f64,
    /// Overrides for `L_∇f` and `Γ`; analytic bounds are used otherwise.
    pub lipschitz_grad: Option<f64>,
    pub lipschitz_jac: Option<f64>,
    pub seeds: Vec<u64>,
    pub eps: Vec<f64>,
    pub kbar: usize,
    pub out: PathBuf,
    pub thin: usize,
    pub validate: bool,
    pub reference_only: bool,
    pub reference_tol: f64,
    pub reference_budget: usize,
    pub exact_gradients: bool,
    pub execution: Execution,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            dataset: None,
            num_features: None,
            mlin: 10,
            instance_seed: 0,
            batch: 16,
            iters: 100_000,
            tau: 0.1,
            xi: 1.0,
            nu: 0.5,
            beta1: 1.0,
            beta_p: 1.0,
            beta_warmup: 1.0,
            lipschitz_grad: None,
            lipschitz_jac: None,
            seeds: vec![0],
            eps: vec![0.01, 0.1, 1.0],
            kbar: 1,
            out: PathBuf::from("out"),
            thin: 1,
            validate: false,
            reference_only: false,
            reference_tol: 1e-8,
            reference_budget: 200_000,
            exact_gradients: false,
            execution: Execution::default(),
        }
    }
}

fn parse<T: std::str::FromStr>(key: &str, value: &str) -> Result<T, ExperimentError>
where
    T::Err: std::fmt::Display,
{
    value
        .trim()
        .parse()
        .map_err(|e| ExperimentError::Config(format!("{key} = {value:?}: {e}")))
}

fn parse_list<T: std::str::FromStr>(key: &str, value: &str) -> Result<Vec<T>, ExperimentError>
where
    T::Err: std::fmt::Display,
{
    value.split(',').filter(|s| !s.trim().is_empty()).map(|v| parse(key, v)).collect()
}

fn parse_bool(key: &str, value: &str) -> Result<bool, ExperimentError> {
    match value.trim() {
        "" | "1" | "true" | "yes" | "on" => Ok(true),
        "0" | "false" | "no" | "off" => Ok(false),
        other => Err(ExperimentError::Config(format!("{key}: expected a boolean, got {other:?}"))),
    }
}

impl ExperimentConfig {
    /// Set one option by its flag name (`beta-p` and `beta_p` both work).
    /// List options take comma-separated values.
    pub fn set(&mut self, key: &str, value: &str) -> Result<(), ExperimentError> {
        let norm = key.trim().replace('_', "-");
        let v = value.trim();
        match norm.as_str() {
            "dataset" => self.dataset = (!v.is_empty()).then(|| PathBuf::from(v)),
            "num-features" => self.num_features = Some(parse(key, v)?),
            "mlin" => self.mlin = parse(key, v)?,
            "instance-seed" => self.instance_seed = parse(key, v)?,
            "batch" => self.batch = parse(key, v)?,
            "iters" => self.iters = parse(key, v)?,
            "tau" => self.tau = parse(key, v)?,
            "xi" => self.xi = parse(key, v)?,
            "nu" => self.nu = parse(key, v)?,
            "beta1" => self.beta1 = parse(key, v)?,
            "beta-p" => self.beta_p = parse(key, v)?,
            "beta-warmup" => self.beta_warmup = parse(key, v)?,
            "lipschitz-grad" => self.lipschitz_grad = Some(parse(key, v)?),
            "lipschitz-jac" => self.lipschitz_jac = Some(parse(key, v)?),
            "seed" | "seeds" => self.seeds = parse_list(key, v)?,
            "eps" => self.eps = parse_list(key, v)?,
            "kbar" => self.kbar = parse(key, v)?,
            "out" => self.out = PathBuf::from(v),
            "thin" => self.thin = parse(key, v)?,
            "validate" => self.validate = parse_bool(key, v)?,
            "reference-only" => self.reference_only = parse_bool(key, v)?,
            "reference-tol" => self.reference_tol = parse(key, v)?,
            "reference-budget" => self.reference_budget = parse(key, v)?,
            "exact-gradients" => self.exact_gradients = parse_bool(key, v)?,
            "sequential" => {
                if parse_bool(key, v)? {
                    self.execution = Execution::Sequential;
                }
            }
            _ => return Err(ExperimentError::Config(format!("unknown option {key:?}"))),
        }
        Ok(())
    }

    /// Apply a `key=value` file: `#` starts a comment, blank lines are
    /// ignored, later lines win.
    pub fn apply_kv(&mut self, text: &str) -> Result<(), ExperimentError> {
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').unwrap_or((line, ""));
            self.set(k, v)
                .map_err(|e| ExperimentError::Config(format!("line {}: {e}", i + 1)))?;
        }
        Ok(())
    }

    pub fn from_kv_file(path: &Path) -> Result<Self, ExperimentError> {
        let mut cfg = Self::default();
        cfg.apply_kv(&fs::read_to_string(path)?)?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), ExperimentError> {
        let bad = |m: &str| Err(ExperimentError::Config(m.to_string()));
        if self.thin == 0 {
            return bad("thin must be at least 1");
        }
        if self.seeds.is_empty() {
            return bad("at least one seed is required");
        }
        if self.eps.iter().any(|&e| !(e > 0.0 && e.is_finite())) {
            return bad("eps values must be positive");
        }
        if self.kbar == 0 {
            return bad("kbar must be at least 1");
        }
        if !(self.reference_tol > 0.0) {
            return bad("reference tolerance must be positive");
        }
        let mut seen = self.seeds.clone();
        seen.sort_unstable();
        seen.dedup();
        if seen.len() != self.seeds.len() {
            return bad("seeds must be distinct");
        }
        self.beta_schedule().validate(self.exact_gradients)?;
        Ok(())
    }

    pub fn merit(&self) -> MeritParams {
        MeritParams {
            tau: self.tau,
            xi: self.xi,
            nu: self.nu,
        }
    }

    pub fn beta_schedule(&self) -> BetaSchedule {
        BetaSchedule::Power {
            beta1: self.beta1,
            exponent: self.beta_p,
            warmup: self.beta_warmup,
        }
    }

    pub fn load_dataset(&self) -> Result<Dataset, ExperimentError> {
        Ok(match &self.dataset {
            Some(path) => read_libsvm_file(path, self.num_features)?,
            None => bundled_dataset(),
        })
    }

    pub fn build_instance(&self) -> Result<LogRegInstance, ExperimentError> {
        let inst = build_instance(self.load_dataset()?, self.mlin, self.instance_seed)?;
        Ok(inst.with_execution(self.execution))
    }

    /// `(L_∇f, Γ)` after overrides.
    pub fn lipschitz(&self, inst: &LogRegInstance) -> (f64, f64) {
        let (l, g) = inst.lipschitz_bounds();
        (self.lipschitz_grad.unwrap_or(l), self.lipschitz_jac.unwrap_or(g))
    }

    /// Solver configuration for one replicate.
    pub fn solver_config(&self, lipschitz: (f64, f64), seed: u64) -> SolverConfig {
        SolverConfig {
            merit: self.merit(),
            lipschitz_grad: lipschitz.0,
            lipschitz_jac: lipschitz.1,
            beta: self.beta_schedule(),
            batch: self.batch,
            iterations: self.iters,
            seed,
            validate: self.validate,
            ..Default::default()
        }
    }
}

/// Options of the deterministic reference solve.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ReferenceOptions {
    pub tol: f64,
    pub budget: usize,
    pub merit: MeritParams,
    pub lipschitz_grad: f64,
    pub lipschitz_jac: f64,
    pub probes: usize,
    pub probe_seed: u64,
}

impl Default for ReferenceOptions {
    fn default() -> Self {
        Self {
            tol: 1e-8,
            budget: 200_000,
            merit: MeritParams::default(),
            lipschitz_grad: 1.0,
            lipschitz_jac: 1.0,
            probes: 64,
            probe_seed: 0,
        }
    }
}

/// Curvature of `f` along the feasible set, probed in random tangential
/// directions.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SecondOrderProbe {
    pub probes: usize,
    /// Smallest `2 (f(x_t) - f(x*)) / |x_t - x*|²` over feasible probes.
    pub min_curvature: f64,
    /// Probes where feasibility restoration failed.
    pub restoration_failures: usize,
    pub passed: bool,
}

/// High-accuracy primal-dual solution.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Reference {
    pub x: Vec<f64>,
    pub y: Vec<f64>,
    pub residual: f64,
    pub iterations: usize,
    pub second_order: SecondOrderProbe,
}

impl Reference {
    pub fn x(&self) -> DVector<f64> {
        DVector::from_column_slice(&self.x)
    }

    pub fn y(&self) -> DVector<f64> {
        DVector::from_column_slice(&self.y)
    }
}

/// Gauss-Newton projection onto `c = 0` with minimum-norm corrections.
pub fn restore_feasibility<P: Problem + ?Sized>(p: &P, x: &DVector<f64>, max_iter: usize) -> Option<DVector<f64>> {
    let mut x = x.clone();
    let scale = 1.0 + x.norm();
    for _ in 0..max_iter {
        let c = p.constraints(&x);
        if c.norm() <= 1e-14 * scale {
            return Some(x);
        }
        let fac = JacobianFactor::new(&p.jacobian(&x)).ok()?;
        x -= fac.pinv_t_apply(&c);
        if x.iter().any(|v| !v.is_finite()) {
            return None;
        }
    }
    (p.constraints(&x).norm() <= 1e-12 * scale).then_some(x)
}

fn second_order_probe<P: Problem + ?Sized>(p: &P, x: &DVector<f64>, residual: f64, probes: usize, seed: u64) -> SecondOrderProbe {
    let mut rng = SqpRng::seed_from_u64(seed);
    let fx = p.objective(x);
    let t = 1e-2 * x.norm().max(1.0);
    let mut min_curvature = f64::INFINITY;
    let mut failures = 0;
    let z = match JacobianFactor::new(&p.jacobian(x)) {
        Ok(f) => f.null_basis().clone(),
        Err(_) => {
            return SecondOrderProbe {
                probes,
                min_curvature: f64::NAN,
                restoration_failures: probes,
                passed: false,
            }
        }
    };
    if z.ncols() == 0 {
        return SecondOrderProbe {
            probes: 0,
            min_curvature: f64::INFINITY,
            restoration_failures: 0,
            passed: true,
        };
    }
    for _ in 0..probes {
        let w = random_in_ball(z.ncols(), 1.0, &mut rng).normalize();
        let Some(xt) = restore_feasibility(p, &(x + t * (&z * w)), 50) else {
            failures += 1;
            continue;
        };
        let dist2 = (&xt - x).norm_squared();
        min_curvature = min_curvature.min(2.0 * (p.objective(&xt) - fx) / dist2);
    }
    // first-order error of the reference contributes about 2·residual/t
    let allowance = 1e-6 + 4.0 * residual / t;
    SecondOrderProbe {
        probes,
        min_curvature,
        restoration_failures: failures,
        passed: failures < probes && min_curvature >= -allowance,
    }
}

/// Deterministic run (exact gradients, `β_k = 1`) until the stationarity
/// residual at `(x_k, y_k)` reaches `opts.tol`, then a second-order probe.
pub fn compute_reference<P: Problem + ?Sized>(p: &P, opts: &ReferenceOptions) -> Result<Reference, ExperimentError> {
    let cfg = SolverConfig {
        merit: opts.merit,
        lipschitz_grad: opts.lipschitz_grad,
        lipschitz_jac: opts.lipschitz_jac,
        beta: BetaSchedule::Constant(1.0),
        batch: 1,
        iterations: opts.budget,
        validate: true,
        ..Default::default()
    };
    let oracle = ExactOracle::new(p);
    let mut best: Option<(f64, usize, DVector<f64>, DVector<f64>)> = None;
    let mut done = false;
    solver::run_until(p, &oracle, &cfg, |r| {
        let res = r.shadow.as_ref().map_or(f64::INFINITY, |s| s.residual.value);
        if best.as_ref().is_none_or(|b| res < b.0) {
            best = Some((res, r.k, r.x.clone(), r.y.clone()));
        }
        if res <= opts.tol {
            done = true;
            ControlFlow::Break(())
        } else {
            ControlFlow::Continue(())
        }
    })?;
    let (residual, iterations, x, y) = best.ok_or(ExperimentError::Reference {
        residual: f64::INFINITY,
        iterations: 0,
        tol: opts.tol,
    })?;
    if !done {
        return Err(ExperimentError::Reference {
            residual,
            iterations: opts.budget,
            tol: opts.tol,
        });
    }
    let second_order = second_order_probe(p, &x, residual, opts.probes, opts.probe_seed);
    if !second_order.passed {
        log::warn!(
            "reference point failed the tangential curvature probe (min curvature {:e})",
            second_order.min_curvature
        );
    }
    Ok(Reference {
        x: x.as_slice().to_vec(),
        y: y.as_slice().to_vec(),
        residual,
        iterations,
        second_order,
    })
}

/// Final and tail statistics of one replicate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub seed: u64,
    pub iterations: usize,
    pub initial_dist_x: f64,
    pub final_dist_x: f64,
    pub final_dist_y: f64,
    pub final_dist_y_true: f64,
    pub final_dist_y_avg: f64,
    /// `(ε, |y_K^{avg_ε} - y*|)`.
    pub final_dist_y_avg_eps: Vec<(f64, f64)>,
    /// Medians over the last 10% of iterations.
    pub tail_median_dist_y: f64,
    pub tail_median_dist_y_avg: f64,
    /// Largest `|y_k^true - y*| / |x_k - x*|` over the last 10%.
    pub tail_max_bound_ratio: f64,
    pub violations: ValidationSummary,
    /// Recorded rows failing the triangle consistency check.
    pub triangle_failures: usize,
    /// Increases of `dist_x` between consecutive 1% checkpoints in the
    /// second half of the run.
    pub dist_x_tail_increases: usize,
    pub wall_time_secs: f64,
}

/// Per-iteration distances of one replicate, kept at full resolution.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct SeedTrace {
    pub dist_x: Vec<f64>,
    pub dist_y: Vec<f64>,
    pub dist_y_true: Vec<f64>,
    pub dist_y_avg: Vec<f64>,
    /// One series per ε.
    pub dist_y_avg_eps: Vec<Vec<f64>>,
    pub resid_true: Vec<f64>,
}

pub const TRACE_COLUMNS: [&str; 13] = [
    "k",
    "dist_x",
    "dist_y",
    "dist_y_true",
    "dist_y_avg",
    "dist_y_avg_eps_*",
    "resid_true",
    "norm_c",
    "alpha",
    "beta",
    "xi_trial",
    "tau_trial_true",
    "lbnd_slack",
];

pub fn trace_header(eps: &[f64]) -> String {
    let mut cols: Vec<String> = vec!["k", "dist_x", "dist_y", "dist_y_true", "dist_y_avg"]
        .into_iter()
        .map(String::from)
        .collect();
    cols.extend(eps.iter().map(|e| format!("dist_y_avg_eps_{e}")));
    cols.extend(
        ["resid_true", "norm_c", "alpha", "beta", "xi_trial", "tau_trial_true", "lbnd_slack"]
            .into_iter()
            .map(String::from),
    );
    cols.join(",")
}

fn fmt17(v: f64) -> String {
    if v.is_finite() {
        format!("{v:.16e}")
    } else if v.is_nan() {
        "nan".into()
    } else if v > 0.0 {
        "inf".into()
    } else {
        "-inf".into()
    }
}

pub fn column_descriptions(eps: &[f64]) -> String {
    let mut s = String::from(
        "# column  meaning (all distances are Euclidean; x*, y* from reference.json)\n\
         k                 iteration number (1-based)\n\
         dist_x            |x_k - x*|\n\
         dist_y            |y_k - y*|, multiplier from the stochastic KKT solve\n\
         dist_y_true       |y_k^true - y*|, multiplier with the true gradient (nan without --validate)\n\
         dist_y_avg        |mean(y_kbar..y_k) - y*|\n",
    );
    for e in eps {
        s.push_str(&format!(
            "dist_y_avg_eps_{e}  |mean(y_k'..y_k) - y*|, k' the start of the trailing window within {e} of x_k\n"
        ));
    }
    s.push_str(
        "resid_true        |grad f + J^T y^true| + |c| at x_k (nan without --validate)\n\
         norm_c            |c(x_k)|\n\
         alpha             step size\n\
         beta              step-size scaling\n\
         xi_trial          model reduction over tau |d|^2 (inf when d = 0)\n\
         tau_trial_true    merit parameter threshold from the true step (nan without --validate)\n\
         lbnd_slack        slack of the guaranteed model reduction (nan without --validate)\n",
    );
    s
}

fn median(v: &mut [f64]) -> f64 {
    if v.is_empty() {
        return f64::NAN;
    }
    v.sort_by(|a, b| a.total_cmp(b));
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

fn tail(v: &[f64]) -> &[f64] {
    &v[v.len() - v.len().div_ceil(10)..]
}

/// Run one replicate against a reference, streaming thinned rows into
/// `writer` when one is given.
pub fn run_seed<P, O>(
    p: &P,
    oracle: &O,
    cfg: &ExperimentConfig,
    lipschitz: (f64, f64),
    reference: &Reference,
    seed: u64,
    mut writer: Option<&mut dyn Write>,
) -> Result<(RunSummary, SeedTrace), ExperimentError>
where
    P: Problem + ?Sized,
    O: GradientOracle + ?Sized,
{
    let start = Instant::now();
    let scfg = cfg.solver_config(lipschitz, seed);
    let (xs, ys) = (reference.x(), reference.y());
    let m = ys.len();
    let mut running = RunningAverage::new(m, cfg.kbar).map_err(|e| ExperimentError::Config(e.to_string()))?;
    let mut windowed = WindowedAverager::new(&cfg.eps, m);
    let mut trace = SeedTrace {
        dist_y_avg_eps: vec![Vec::with_capacity(cfg.iters); cfg.eps.len()],
        ..Default::default()
    };
    let mut triangle_failures = 0;
    let mut io_err: Option<io::Error> = None;
    if let Some(w) = writer.as_deref_mut() {
        writeln!(w, "{}", trace_header(&cfg.eps))?;
    }

    let outcome = solver::run_until(p, oracle, &scfg, |r| {
        let dist_x = (&r.x - &xs).norm();
        let dist_y = (&r.y - &ys).norm();
        running.push(&r.y);
        let avg = running.average().map_or(f64::NAN, |a| (a - &ys).norm());
        let win = windowed.push(r.x.clone(), &r.y);
        let (dist_y_true, resid, tau_t, slack) = match &r.shadow {
            Some(s) => {
                let dyt = (&s.y_true - &ys).norm();
                if dyt > dist_y + (&s.y_true - &r.y).norm() + 1e-10 {
                    triangle_failures += 1;
                }
                (dyt, s.residual.value, s.tau_trial_true.to_f64(), s.reduction.slack)
            }
            None => (f64::NAN, f64::NAN, f64::NAN, f64::NAN),
        };
        trace.dist_x.push(dist_x);
        trace.dist_y.push(dist_y);
        trace.dist_y_true.push(dist_y_true);
        trace.dist_y_avg.push(avg);
        trace.resid_true.push(resid);
        let eps_d: Vec<f64> = win.iter().map(|(a, _)| (a - &ys).norm()).collect();
        for (col, d) in trace.dist_y_avg_eps.iter_mut().zip(&eps_d) {
            col.push(*d);
        }
        if (r.k - 1) % cfg.thin == 0 {
            if let Some(w) = writer.as_deref_mut() {
                let mut row = format!("{},{},{},{},{}", r.k, fmt17(dist_x), fmt17(dist_y), fmt17(dist_y_true), fmt17(avg));
                for d in &eps_d {
                    row.push(',');
                    row.push_str(&fmt17(*d));
                }
                for v in [resid, r.norm_c, r.alpha, r.beta, r.xi_trial.to_f64(), tau_t, slack] {
                    row.push(',');
                    row.push_str(&fmt17(v));
                }
                if let Err(e) = writeln!(w, "{row}") {
                    io_err = Some(e);
                    return ControlFlow::Break(());
                }
            }
        }
        ControlFlow::Continue(())
    })?;
    if let Some(e) = io_err {
        return Err(e.into());
    }
    if let Some(w) = writer {
        w.flush()?;
    }

    let last = |v: &[f64]| v.last().copied().unwrap_or(f64::NAN);
    let ratios: Vec<f64> = tail(&trace.dist_x)
        .iter()
        .zip(tail(&trace.dist_y_true))
        .map(|(&dx, &dy)| bound_ratio(dx, dy))
        .collect();
    let dist_x_tail_increases = {
        let k = trace.dist_x.len();
        let step = (k / 100).max(1);
        let pts: Vec<f64> = (k / 2..k).step_by(step).map(|i| trace.dist_x[i]).collect();
        pts.windows(2).filter(|w| w[1] > w[0]).count()
    };
    if dist_x_tail_increases > 0 {
        log::warn!("seed {seed}: dist_x increased at {dist_x_tail_increases} tail checkpoints");
    }
    let summary = RunSummary {
        seed,
        iterations: trace.dist_x.len(),
        initial_dist_x: trace.dist_x.first().copied().unwrap_or(f64::NAN),
        final_dist_x: last(&trace.dist_x),
        final_dist_y: last(&trace.dist_y),
        final_dist_y_true: last(&trace.dist_y_true),
        final_dist_y_avg: last(&trace.dist_y_avg),
        final_dist_y_avg_eps: cfg.eps.iter().zip(&trace.dist_y_avg_eps).map(|(&e, v)| (e, last(v))).collect(),
        tail_median_dist_y: median(&mut tail(&trace.dist_y).to_vec()),
        tail_median_dist_y_avg: median(&mut tail(&trace.dist_y_avg).to_vec()),
        tail_max_bound_ratio: ratios.iter().copied().fold(f64::NAN, f64::max),
        violations: outcome.summary,
        triangle_failures,
        dist_x_tail_increases,
        wall_time_secs: start.elapsed().as_secs_f64(),
    };
    Ok((summary, trace))
}

/// Facts about the built instance, echoed next to the configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InstanceInfo {
    pub num_features: usize,
    pub num_samples: usize,
    pub num_constraints: usize,
    pub lipschitz_grad: f64,
    pub lipschitz_jac: f64,
    pub min_norm_affine_solution: f64,
    pub initial_step_size: f64,
}

#[derive(Debug, Serialize)]
struct ConfigEcho<'a> {
    config: &'a ExperimentConfig,
    instance: &'a InstanceInfo,
}

/// What [`run_experiment`] produced.
#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentReport {
    pub instance: InstanceInfo,
    pub reference: Reference,
    pub summaries: Vec<RunSummary>,
    pub files: Vec<PathBuf>,
}

fn write_file(path: PathBuf, contents: &str, files: &mut Vec<PathBuf>) -> Result<(), ExperimentError> {
    fs::write(&path, contents)?;
    files.push(path);
    Ok(())
}

/// Build the instance, compute the reference, run every seed (in parallel
/// under [`Execution::Parallel`]) and write the output files.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<ExperimentReport, ExperimentError> {
    cfg.validate()?;
    let inst = cfg.build_instance()?;
    let lipschitz = cfg.lipschitz(&inst);
    let min_norm = inst.min_norm_affine_solution();
    if min_norm > 1.0 {
        log::warn!("affine constraints have no solution on the unit sphere (min-norm solution {min_norm:.4} > 1)");
    }
    let info = InstanceInfo {
        num_features: inst.num_vars(),
        num_samples: inst.data().len(),
        num_constraints: inst.num_constraints(),
        lipschitz_grad: lipschitz.0,
        lipschitz_jac: lipschitz.1,
        min_norm_affine_solution: min_norm,
        initial_step_size: solver::step_size(cfg.tau, cfg.xi, lipschitz.0, lipschitz.1, cfg.beta1)?,
    };
    if info.initial_step_size > 1.0 {
        log::warn!("initial step size {} exceeds one", info.initial_step_size);
    }

    let reference = compute_reference(
        &inst,
        &ReferenceOptions {
            tol: cfg.reference_tol,
            budget: cfg.reference_budget,
            merit: cfg.merit(),
            lipschitz_grad: lipschitz.0,
            lipschitz_jac: lipschitz.1,
            ..Default::default()
        },
    )?;
    log::info!(
        "reference: residual {:e} after {} iterations",
        reference.residual,
        reference.iterations
    );

    fs::create_dir_all(&cfg.out)?;
    let mut files = Vec::new();
    let echo = ConfigEcho {
        config: cfg,
        instance: &info,
    };
    write_file(cfg.out.join("config.json"), &serde_json::to_string_pretty(&echo)?, &mut files)?;
    write_file(cfg.out.join("reference.json"), &serde_json::to_string_pretty(&reference)?, &mut files)?;
    if cfg.reference_only {
        return Ok(ExperimentReport {
            instance: info,
            reference,
            summaries: Vec::new(),
            files,
        });
    }
    write_file(cfg.out.join("columns.txt"), &column_descriptions(&cfg.eps), &mut files)?;

    let exact = ExactOracle::new(&inst);
    let minibatch = MinibatchOracle::new(&inst);
    let oracle: &dyn GradientOracle = if cfg.exact_gradients { &exact } else { &minibatch };
    let results = exec::map_indexed(cfg.execution, cfg.seeds.len(), |i| {
        let seed = cfg.seeds[i];
        let path = cfg.out.join(format!("trace_seed{seed}.csv"));
        let mut w = BufWriter::new(File::create(&path)?);
        let (summary, _) = run_seed(&inst, oracle, cfg, lipschitz, &reference, seed, Some(&mut w))?;
        Ok::<_, ExperimentError>((summary, path))
    });
    let mut summaries = Vec::with_capacity(results.len());
    for r in results {
        let (s, path) = r?;
        files.push(path);
        summaries.push(s);
    }
    write_file(cfg.out.join("summary.json"), &serde_json::to_string_pretty(&summaries)?, &mut files)?;
    Ok(ExperimentReport {
        instance: info,
        reference,
        summaries,
        files,
    })
}

/// Result of the sampled PL-type check.
#[derive(Debug, Clone, PartialEq)]
pub struct PlReport {
    /// Largest `(φ(x) - φ(x*)) / (τ|Z(x)ᵀ∇f(x)|² + |c(x)|)` seen; an
    /// empirical lower bound on the constant.
    pub max_ratio: f64,
    pub evaluated: usize,
    /// Points where both sides vanish, plus points with a rank-deficient
    /// Jacobian.
    pub excluded: usize,
    /// Points with a positive merit gap but a vanishing denominator.
    pub witnesses: Vec<DVector<f64>>,
}

const PL_FLOOR: f64 = 1e-14;

enum PlPoint {
    Ratio(f64),
    Excluded,
    Witness(DVector<f64>),
}

fn pl_point<P: Problem + ?Sized>(p: &P, x: DVector<f64>, phi_star: f64, tau: f64) -> PlPoint {
    let Ok(fac) = JacobianFactor::new(&p.jacobian(&x)) else {
        return PlPoint::Excluded;
    };
    let c = p.constraints(&x);
    let num = merit::phi(tau, p.objective(&x), &c) - phi_star;
    let red = fac.null_basis().transpose() * p.gradient(&x);
    let den = tau * red.norm_squared() + c.norm();
    if den > PL_FLOOR {
        PlPoint::Ratio(num / den)
    } else if num > PL_FLOOR {
        PlPoint::Witness(x)
    } else {
        PlPoint::Excluded
    }
}

/// Sample the ball of the given radius around `x*`; every sample is used
/// as drawn and again after feasibility restoration, so that the
/// constraint-free part of the condition is exercised too.
pub fn pl_diagnostic<P: Problem + ?Sized>(
    p: &P,
    x_star: &DVector<f64>,
    tau: f64,
    samples: usize,
    radius: f64,
    rng: &mut SqpRng,
    execution: Execution,
) -> PlReport {
    let phi_star = merit::phi(tau, p.objective(x_star), &p.constraints(x_star));
    let mut streams = exec::fork_streams(rng, samples);
    let points: Vec<DVector<f64>> = streams
        .iter_mut()
        .map(|r| x_star + random_in_ball(x_star.len(), radius, r))
        .collect();
    let results = exec::map_indexed(execution, samples, |i| {
        let x = &points[i];
        let mut out = vec![pl_point(p, x.clone(), phi_star, tau)];
        if let Some(xr) = restore_feasibility(p, x, 50) {
            out.push(pl_point(p, xr, phi_star, tau));
        }
        out
    });
    let mut report = PlReport {
        max_ratio: f64::NEG_INFINITY,
        evaluated: 0,
        excluded: 0,
        witnesses: Vec::new(),
    };
    for pt in results.into_iter().flatten() {
        match pt {
            PlPoint::Ratio(r) => {
                report.evaluated += 1;
                report.max_ratio = report.max_ratio.max(r);
            }
            PlPoint::Excluded => report.excluded += 1,
            PlPoint::Witness(x) => report.witnesses.push(x),
        }
    }
    report
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::toys::{AffineQp, FlatPlateau, SphereLinear};

    #[test]
    fn kv_file_and_overrides() {
        let mut cfg = ExperimentConfig::default();
        cfg.apply_kv("# comment\nmlin = 5\nbeta_p=0.75\nseed=1,2,3\neps = 0.5\nvalidate\n\n")
            .unwrap();
        assert_eq!(cfg.mlin, 5);
        assert_eq!(cfg.beta_p, 0.75);
        assert_eq!(cfg.seeds, vec![1, 2, 3]);
        assert_eq!(cfg.eps, vec![0.5]);
        assert!(cfg.validate);
        assert!(cfg.apply_kv("bogus=1").is_err());
        assert!(cfg.apply_kv("mlin=x").is_err());
        cfg.thin = 0;
        assert!(cfg.validate().is_err());
        cfg.thin = 1;
        cfg.seeds = vec![1, 1];
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn number_format_has_seventeen_digits() {
        assert_eq!(fmt17(0.1), "1.0000000000000001e-1");
        assert_eq!(fmt17(f64::INFINITY), "inf");
        let back: f64 = fmt17(std::f64::consts::PI).parse().unwrap();
        assert_eq!(back, std::f64::consts::PI);
    }

    #[test]
    fn header_lists_eps_columns() {
        let h = trace_header(&[0.01, 1.0]);
        assert!(h.starts_with("k,dist_x,dist_y,dist_y_true,dist_y_avg,dist_y_avg_eps_0.01,dist_y_avg_eps_1,"));
        assert!(h.ends_with("tau_trial_true,lbnd_slack"));
    }

    #[test]
    fn reference_on_sphere() {
        let p = SphereLinear::new(2);
        let r = compute_reference(
            &p,
            &ReferenceOptions {
                lipschitz_jac: 2.0,
                ..Default::default()
            },
        )
        .unwrap();
        let (xs, ys) = p.solution();
        assert!((r.x() - xs).norm() < 1e-8);
        assert!((r.y() - ys).norm() < 1e-8);
        assert!(r.second_order.passed);
        let again = compute_reference(
            &p,
            &ReferenceOptions {
                lipschitz_jac: 2.0,
                ..Default::default()
            },
        )
        .unwrap();
        assert_eq!(r, again);
    }

    #[test]
    fn reference_on_qp_matches_closed_form() {
        let mut rng = SqpRng::seed_from_u64(21);
        let qp = AffineQp::random(8, 3, &mut rng);
        let (xs, ys) = qp.solution();
        let r = compute_reference(
            &qp,
            &ReferenceOptions {
                lipschitz_grad: qp.max_eigenvalue(),
                tol: 1e-10,
                ..Default::default()
            },
        )
        .unwrap();
        assert!((r.x() - xs).norm() < 1e-8);
        assert!((r.y() - ys).norm() < 1e-8);
        assert!(r.second_order.min_curvature >= 1.0 - 1e-6);
    }

    #[test]
    fn reference_budget_exhaustion_is_an_error() {
        let p = SphereLinear::new(2);
        let err = compute_reference(
            &p,
            &ReferenceOptions {
                budget: 3,
                ..Default::default()
            },
        )
        .unwrap_err();
        assert!(matches!(err, ExperimentError::Reference { iterations: 3, .. }));
    }

    #[test]
    fn plateau_yields_witnesses() {
        let x_star = DVector::zeros(2);
        let mut rng = SqpRng::seed_from_u64(3);
        let rep = pl_diagnostic(&FlatPlateau, &x_star, 0.1, 400, 1.0, &mut rng, Execution::Sequential);
        assert!(!rep.witnesses.is_empty());
        for w in &rep.witnesses {
            assert!(w[0].abs() >= 0.5 && w[1] == 0.0);
        }
    }

    #[test]
    fn pl_at_solution_is_excluded() {
        let p = SphereLinear::new(2);
        let (xs, _) = p.solution();
        let phi_star = merit::phi(0.1, p.objective(&xs), &p.constraints(&xs));
        assert!(matches!(pl_point(&p, xs, phi_star, 0.1), PlPoint::Excluded));
    }

    #[test]
    fn pl_ratio_is_stable_on_qp() {
        let mut rng = SqpRng::seed_from_u64(8);
        let qp = AffineQp::random(5, 2, &mut rng);
        let (xs, _) = qp.solution();
        let run = |n| {
            let mut r = SqpRng::seed_from_u64(99);
            pl_diagnostic(&qp, &xs, 0.1, n, 0.5, &mut r, Execution::Parallel)
        };
        let (a, b) = (run(2000), run(4000));
        assert!(a.witnesses.is_empty() && b.witnesses.is_empty());
        assert!(a.max_ratio.is_finite() && a.max_ratio > 0.0);
        assert!((b.max_ratio / a.max_ratio - 1.0).abs() <= 0.2, "{} vs {}", a.max_ratio, b.max_ratio);
    }

    #[test]
    fn restoration_lands_on_sphere() {
        let p = SphereLinear::new(3);
        let x = DVector::from_vec(vec![0.3, -2.0, 0.7]);
        let r = restore_feasibility(&p, &x, 50).unwrap();
        assert!((r.norm() - 1.0).abs() < 1e-14);
    }
}
