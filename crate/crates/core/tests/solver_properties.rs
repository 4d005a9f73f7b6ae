use nalgebra::DVector;
use rand::SeedableRng;

use stosqp::experiment::bundled_dataset;
use stosqp::kkt::{solve_kkt_factored, JacobianFactor, KktInputs};
use stosqp::logreg::{build_instance, MinibatchOracle};
use stosqp::problem::{check_derivatives, GradientOracle, Problem};
use stosqp::solver::{run, true_shadow, BetaSchedule, SolverConfig};
use stosqp::{DMatrix, SqpRng};

#[test]
fn stochastic_step_is_unbiased_for_the_true_step() {
    let inst = build_instance(bundled_dataset(), 10, 0).unwrap();
    let oracle = MinibatchOracle::new(&inst);
    let x = inst.initial_point();
    let n = x.len();
    let h = DMatrix::identity(n, n);
    let jac = inst.jacobian(&x);
    let fac = JacobianFactor::new(&jac).unwrap();
    let truth = true_shadow(&inst, &x, &h).unwrap();
    let mut rng = SqpRng::seed_from_u64(17);
    let draws = 10_000;
    let mut sum = DVector::zeros(n);
    let mut sq = DVector::zeros(n);
    let c = inst.constraints(&x);
    for _ in 0..draws {
        let g = oracle.draw(&x, 16, &mut rng);
        let inp = KktInputs {
            h: h.clone(),
            jac: jac.clone(),
            g,
            c: c.clone(),
        };
        let d = solve_kkt_factored(&inp, &fac).unwrap().d - &truth.d;
        sum += &d;
        sq += d.component_mul(&d);
    }
    for j in 0..n {
        let mean = sum[j] / draws as f64;
        let se = ((sq[j] / draws as f64 - mean * mean) / draws as f64).sqrt();
        assert!(mean.abs() <= 4.0 * se + 1e-15, "component {j}: mean {mean:e}, stderr {se:e}");
    }
}

#[test]
fn logistic_instance_passes_derivative_checks() {
    let inst = build_instance(bundled_dataset(), 10, 0).unwrap();
    let mut rng = SqpRng::seed_from_u64(5);
    let (l, gamma) = inst.lipschitz_bounds();
    for _ in 0..20 {
        let x = stosqp::problem::random_in_ball(40, 2.0, &mut rng);
        let chk = check_derivatives(&inst, &x, 1e-5);
        assert!(chk.grad_err <= 10.0 * 1e-5 * l.max(1.0), "{chk:?}");
        assert!(chk.jac_err <= 10.0 * 1e-5 * gamma, "{chk:?}");
    }
}

#[test]
fn stochastic_trace_is_bit_reproducible() {
    let inst = build_instance(bundled_dataset(), 10, 0).unwrap();
    let oracle = MinibatchOracle::new(&inst);
    let (l, g) = inst.lipschitz_bounds();
    let cfg = SolverConfig {
        lipschitz_grad: l,
        lipschitz_jac: g,
        iterations: 300,
        seed: 42,
        validate: true,
        beta: BetaSchedule::Power {
            beta1: 1.0,
            exponent: 0.75,
            warmup: 1.0,
        },
        ..Default::default()
    };
    let a = run(&inst, &oracle, &cfg).unwrap();
    let b = run(&inst, &oracle, &cfg).unwrap();
    assert_eq!(a.records, b.records);
    let c = run(&inst, &oracle, &SolverConfig { seed: 43, ..cfg.clone() }).unwrap();
    assert_ne!(a.records[1].g, c.records[1].g);
    let a1 = a.records[0].alpha;
    for r in &a.records {
        assert!(r.alpha <= a1);
        assert!((r.alpha - r.beta * a1).abs() <= 1e-15 * a1);
    }
}
