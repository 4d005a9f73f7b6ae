//! Stochastic sequential quadratic programming for equality-constrained
//! stochastic optimization.
//!
//! The crate solves problems of the form
//!
//! ```text
//! min_x f(x) = E[F(x, ι)]   s.t.   c(x) = 0
//! ```
//!
//! with a stochastic SQP loop that takes a mini-batch gradient estimate,
//! solves the equality-constrained QP subproblem through its KKT system and
//! moves along the resulting direction with a fixed merit/ratio parameter
//! step-size rule. Around the loop sit the multiplier estimators
//! (instantaneous, true, running average, ε-windowed average) and the
//! diagnostics that check the working assumptions of the method at every
//! iterate.
//!
//! Module map:
//!
//! - [`problem`]: problem and stochastic-gradient oracle abstractions.
//! - [`libsvm`], [`logreg`]: LIBSVM parsing and constrained logistic regression instances.
//! - [`kkt`]: null-space KKT solver, step decomposition and multiplier formulas.
//! - [`merit`]: merit function, model reduction and trial quantities.
//! - [`solver`]: the iteration itself plus per-iterate validation.
//! - [`multipliers`]: averaged multiplier estimators and error-bound checks.
//! - [`experiment`]: reference solves, replicate runs and CSV traces.
//! - [`exec`]: data-parallel helpers with a sequential fallback.

pub mod error;
pub mod exec;
pub mod experiment;
pub mod kkt;
pub mod libsvm;
pub mod logreg;
pub mod merit;
pub mod multipliers;
pub mod problem;
pub mod solver;
pub mod toys;

pub use error::{DataError, KktError, ProblemError, SolverError};
pub use exec::Execution;
pub use kkt::{KktInputs, KktSolution};
pub use merit::{Extended, MeritParams};
pub use problem::{GradientOracle, Problem, ProblemConstants, SqpRng};
pub use solver::{BetaSchedule, HessianStrategy, IterationRecord, SolverConfig};

pub use nalgebra::{DMatrix, DVector};
