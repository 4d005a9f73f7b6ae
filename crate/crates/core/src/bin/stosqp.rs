//! Command-line front end for the constrained logistic regression
//! experiments.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::Parser;
use stosqp::experiment::{run_experiment, ExperimentConfig};
use stosqp::error::ExperimentError;
use stosqp::{Execution, SolverError};

/// Run stochastic SQP on a constrained logistic regression instance and
/// write multiplier-distance traces.
#[derive(Debug, Parser)]
#[command(name = "stosqp", version, about)]
struct Cli {
    /// key=value configuration file; flags given here override it.
    #[arg(long)]
    config: Option<PathBuf>,
    /// LIBSVM data file (default: the bundled 200-sample set).
    #[arg(long)]
    dataset: Option<PathBuf>,
    /// Number of features when the file does not reveal it.
    #[arg(long)]
    num_features: Option<usize>,
    /// Number of random affine constraints [default: 10].
    #[arg(long)]
    mlin: Option<usize>,
    /// Seed of the affine constraints and initial point [default: 0].
    #[arg(long)]
    instance_seed: Option<u64>,
    /// Mini-batch size [default: 16].
    #[arg(long)]
    batch: Option<usize>,
    /// Iteration budget [default: 100000].
    #[arg(long)]
    iters: Option<usize>,
    /// Merit parameter [default: 0.1].
    #[arg(long)]
    tau: Option<f64>,
    /// Ratio parameter [default: 1.0].
    #[arg(long)]
    xi: Option<f64>,
    /// Reduction fraction [default: 0.5].
    #[arg(long)]
    nu: Option<f64>,
    /// First step-size scaling [default: 1.0].
    #[arg(long)]
    beta1: Option<f64>,
    /// Decay exponent p in beta_k = beta1 (1 + (k-1)/w)^-p [default: 1.0].
    #[arg(long)]
    beta_p: Option<f64>,
    /// Warmup w in beta_k = beta1 (1 + (k-1)/w)^-p [default: 1].
    #[arg(long)]
    beta_warmup: Option<f64>,
    /// Override for the gradient Lipschitz constant.
    #[arg(long)]
    lipschitz_grad: Option<f64>,
    /// Override for the Jacobian Lipschitz constant.
    #[arg(long)]
    lipschitz_jac: Option<f64>,
    /// Replicate seed; repeat for several replicates [default: 0].
    #[arg(long = "seed")]
    seeds: Vec<u64>,
    /// Window radius for windowed averages; repeatable [default: 0.01 0.1 1.0].
    #[arg(long)]
    eps: Vec<f64>,
    /// First iteration of the running average [default: 1].
    #[arg(long)]
    kbar: Option<usize>,
    /// Output directory [default: out].
    #[arg(long)]
    out: Option<PathBuf>,
    /// Write every thin-th iteration to the trace [default: 1].
    #[arg(long)]
    thin: Option<usize>,
    /// Solve with the true gradient too and check the parameter conditions.
    #[arg(long)]
    validate: bool,
    /// Only compute and write the reference solution.
    #[arg(long)]
    reference_only: bool,
    /// Stationarity tolerance of the reference solve [default: 1e-8].
    #[arg(long)]
    reference_tol: Option<f64>,
    /// Iteration budget of the reference solve [default: 200000].
    #[arg(long)]
    reference_budget: Option<usize>,
    /// Use exact gradients in the replicates (allows a constant beta).
    #[arg(long)]
    exact_gradients: bool,
    /// Run replicates one after another.
    #[arg(long)]
    sequential: bool,
}

fn resolve(cli: Cli) -> Result<ExperimentConfig, stosqp::error::ExperimentError> {
    let mut cfg = match &cli.config {
        Some(path) => ExperimentConfig::from_kv_file(path)?,
        None => ExperimentConfig::default(),
    };
    macro_rules! take {
        ($($field:ident),*) => {
            $(if let Some(v) = cli.$field { cfg.$field = v; })*
        };
    }
    take!(mlin, instance_seed, batch, iters, tau, xi, nu, beta1, beta_p, beta_warmup, kbar, out, thin);
    take!(reference_tol, reference_budget);
    if cli.dataset.is_some() {
        cfg.dataset = cli.dataset;
    }
    if cli.num_features.is_some() {
        cfg.num_features = cli.num_features;
    }
    if cli.lipschitz_grad.is_some() {
        cfg.lipschitz_grad = cli.lipschitz_grad;
    }
    if cli.lipschitz_jac.is_some() {
        cfg.lipschitz_jac = cli.lipschitz_jac;
    }
    if !cli.seeds.is_empty() {
        cfg.seeds = cli.seeds;
    }
    if !cli.eps.is_empty() {
        cfg.eps = cli.eps;
    }
    cfg.validate |= cli.validate;
    cfg.reference_only |= cli.reference_only;
    cfg.exact_gradients |= cli.exact_gradients;
    if cli.sequential {
        cfg.execution = Execution::Sequential;
    }
    Ok(cfg)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cfg = match resolve(Cli::parse()) {
        Ok(c) => c,
        Err(e) => {
            eprintln!("error: {e}");
            return ExitCode::from(2);
        }
    };
    match run_experiment(&cfg) {
        Ok(report) => {
            println!(
                "reference: residual {:.3e} after {} iterations",
                report.reference.residual, report.reference.iterations
            );
            for s in &report.summaries {
                println!(
                    "seed {}: |x-x*| {:.4e} -> {:.4e}, |y-y*| {:.4e}, |y_avg-y*| {:.4e}, |y_true-y*| {:.4e}, violations {}",
                    s.seed,
                    s.initial_dist_x,
                    s.final_dist_x,
                    s.final_dist_y,
                    s.final_dist_y_avg,
                    s.final_dist_y_true,
                    s.violations.total_violations()
                );
            }
            println!("wrote {} files to {}", report.files.len(), cfg.out.display());
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            match e {
                ExperimentError::Config(_) | ExperimentError::Solver(SolverError::Config(_)) => ExitCode::from(2),
                _ => ExitCode::FAILURE,
            }
        }
    }
}
