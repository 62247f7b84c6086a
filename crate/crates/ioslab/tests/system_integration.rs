//! Trajectory-engine tests against closed-form solutions.

use ioslab::comparison::{ClassCheck, FunctionClass, ScalarMonotone};
use ioslab::expr::Expr;
use ioslab::system::{
    builtin_registry, close_loop_robust, registry_get, simulate, InputSignal, SimStatus,
};

#[test]
fn linear_decay_closed_form() {
    let sys = registry_get("scalar_stable").unwrap();
    let u = InputSignal::zero(1, 1.0);
    let traj = simulate(&sys, &[1.0], &u, 1.0, 1e-8, 1e-12).unwrap();
    assert!(traj.is_complete());
    let end = traj.final_state()[0];
    assert!((end - (-1.0f64).exp()).abs() < 1e-6, "x(1) = {end}");
}

#[test]
fn counterexample_axis_decay_closed_form() {
    // With x₁ = 0 the second component satisfies ẋ₂ = −2x₂.
    let sys = registry_get("paper_counterexample").unwrap();
    let u = InputSignal::zero(1, 1.0);
    let traj = simulate(&sys, &[0.0, 1.0], &u, 1.0, 1e-8, 1e-12).unwrap();
    let end = traj.final_state();
    assert_eq!(end.len(), 2);
    assert!(end[0].abs() < 1e-12);
    assert!((end[1] - (-2.0f64).exp()).abs() < 1e-6, "x2(1) = {}", end[1]);
}

#[test]
fn counterexample_slow_decay_at_large_x1() {
    // x₂(t) = x₂(0)·exp(−2t/(1+x₁²)) for constant x₁.
    let sys = registry_get("paper_counterexample").unwrap();
    let u = InputSignal::zero(1, 5.0);
    let x1 = 10.0;
    let traj = simulate(&sys, &[x1, 1.0], &u, 5.0, 1e-8, 1e-12).unwrap();
    let expected = (-2.0 * 5.0 / (1.0 + x1 * x1)).exp();
    let got = traj.final_state()[1];
    assert!((got - expected).abs() < 1e-6, "got {got}, want {expected}");
}

#[test]
fn integrator_order_check() {
    // Halving rtol must reduce the endpoint error at least 4×.
    let sys = registry_get("scalar_stable").unwrap();
    let u = InputSignal::zero(1, 1.0);
    let exact = (-1.0f64).exp();
    let err_at = |rtol: f64| {
        let traj = simulate(&sys, &[1.0], &u, 1.0, rtol, 1e-14).unwrap();
        (traj.final_state()[0] - exact).abs()
    };
    let e1 = err_at(1e-8);
    let e2 = err_at(5e-9);
    assert!(e1 <= 1e-6);
    assert!(e2 > 0.0);
    assert!(e1 / e2 >= 4.0, "error ratio {} (e1={e1:.3e}, e2={e2:.3e})", e1 / e2);
}

#[test]
fn breakpoint_exactness() {
    // A signal with a jump at t* must match piecing together two separate
    // simulations across the jump.
    let sys = registry_get("scalar_stable").unwrap();
    let t_star = 0.7;
    let sig = InputSignal::new(vec![0.0, t_star, 2.0], vec![vec![1.0], vec![-0.5]]).unwrap();
    let whole = simulate(&sys, &[0.3], &sig, 2.0, 1e-9, 1e-12).unwrap();

    let first = simulate(
        &sys,
        &[0.3],
        &InputSignal::constant(vec![1.0], t_star),
        t_star,
        1e-9,
        1e-12,
    )
    .unwrap();
    let mid = first.final_state().to_vec();
    let second = simulate(
        &sys,
        &mid,
        &InputSignal::constant(vec![-0.5], 2.0 - t_star),
        2.0 - t_star,
        1e-9,
        1e-12,
    )
    .unwrap();

    let idx = whole
        .times
        .iter()
        .position(|&t| (t - t_star).abs() < 1e-12)
        .expect("breakpoint is a sample");
    assert!((whole.states[idx][0] - mid[0]).abs() < 1e-9);
    let end_whole = whole.final_state()[0];
    let end_pieced = second.final_state()[0];
    assert!(
        (end_whole - end_pieced).abs() < 1e-9,
        "whole {end_whole} vs pieced {end_pieced}"
    );
}

#[test]
fn outputs_match_output_map_on_every_sample() {
    let sys = registry_get("decoupled_2d").unwrap();
    let sig = InputSignal::new(vec![0.0, 1.0, 3.0], vec![vec![0.5], vec![-1.0]]).unwrap();
    let traj = simulate(&sys, &[1.0, -2.0], &sig, 3.0, 1e-8, 1e-10).unwrap();
    for (k, y) in traj.outputs.iter().enumerate() {
        assert!((y[0] - traj.states[k][0]).abs() <= 1e-12);
    }
    // breakpoints are sample times
    assert!(traj.times.iter().any(|&t| (t - 1.0).abs() < 1e-15));
}

#[test]
fn blow_up_detected_with_partial_trajectory() {
    let sys = ioslab::system::ControlSystem::from_formulas(
        "explosive",
        &["x1"],
        &["u1"],
        &["x1^2"],
        &["x1"],
        ioslab::system::InputDomain::Free,
    )
    .unwrap();
    let u = InputSignal::zero(1, 5.0);
    let traj = simulate(&sys, &[1.0], &u, 5.0, 1e-6, 1e-9).unwrap();
    match traj.status {
        SimStatus::BlewUp(t) => assert!(t <= 1.1, "blow-up reported at {t}"),
        other => panic!("expected blow-up, got {other:?}"),
    }
    assert!(!traj.states.is_empty());
    assert!(traj.times.len() == traj.states.len());
}

#[test]
fn robust_loop_substitution_value() {
    // Counterexample with λ(s) = s/2 at x = (0, 2), d = 1:
    // ẋ₂ = −(2·2 + 1·(2/2))/(1+0) = −5.
    let sys = registry_get("paper_counterexample").unwrap();
    let lambda = ScalarMonotone::from_expr(
        Expr::parse("s/2", &["s"]).unwrap(),
        FunctionClass::KInf,
        &ClassCheck::default(),
    )
    .unwrap();
    let closed = close_loop_robust(&sys, &lambda).unwrap();
    let mut out = vec![0.0; 2];
    closed.eval_f(&[0.0, 2.0], &[1.0], &mut out).unwrap();
    assert!(out[0].abs() < 1e-15);
    assert!((out[1] + 5.0).abs() < 1e-12, "got {}", out[1]);
}

#[test]
fn robust_loop_zero_gain_is_autonomous() {
    // λ ≡ 0 is not class K, so the zero loop is expressed with a trigger
    // radius so small the feedback is numerically zero.
    let sys = registry_get("scalar_stable").unwrap();
    let lambda = ScalarMonotone::from_expr(
        Expr::parse("s/1000000000000", &["s"]).unwrap(),
        FunctionClass::KInf,
        &ClassCheck::default(),
    )
    .unwrap();
    let closed = close_loop_robust(&sys, &lambda).unwrap();
    let mut out = vec![0.0; 1];
    closed.eval_f(&[3.0], &[1.0], &mut out).unwrap();
    assert!((out[0] + 3.0).abs() < 1e-9);
}

#[test]
fn robust_loop_contracts_under_any_disturbance() {
    // Closed loop of ẋ = −x + u with λ(s) = s/2: d|x|/dt ≤ −|x|/2 for any
    // |d| ≤ 1, so |x(t)| ≤ |ξ|e^{−t/2}.
    let sys = registry_get("scalar_stable").unwrap();
    let lambda = ScalarMonotone::from_expr(
        Expr::parse("s/2", &["s"]).unwrap(),
        FunctionClass::KInf,
        &ClassCheck::default(),
    )
    .unwrap();
    let closed = close_loop_robust(&sys, &lambda).unwrap();
    for d in [-1.0, -0.3, 0.5, 1.0] {
        let sig = InputSignal::constant(vec![d], 4.0);
        let traj = simulate(&closed, &[2.0], &sig, 4.0, 1e-8, 1e-10).unwrap();
        for (k, &t) in traj.times.iter().enumerate() {
            let bound = 2.0 * (-t / 2.0).exp() * (1.0 + 1e-6);
            assert!(
                traj.states[k][0].abs() <= bound,
                "d={d}: |x({t})| = {} > {bound}",
                traj.states[k][0].abs()
            );
        }
    }
}

#[test]
fn unit_ball_domain_is_enforced() {
    let sys = registry_get("scalar_stable").unwrap();
    let lambda = ScalarMonotone::identity();
    let closed = close_loop_robust(&sys, &lambda).unwrap();
    let sig = InputSignal::constant(vec![1.5], 1.0);
    assert!(simulate(&closed, &[1.0], &sig, 1.0, 1e-6, 1e-9).is_err());
}

#[test]
fn csv_export_shape() {
    let sys = registry_get("paper_counterexample").unwrap();
    let sig = InputSignal::constant(vec![0.25], 1.0);
    let traj = simulate(&sys, &[1.0, 2.0], &sig, 1.0, 1e-6, 1e-9).unwrap();
    let mut buf = Vec::new();
    traj.write_csv(&mut buf).unwrap();
    let text = String::from_utf8(buf).unwrap();
    let mut lines = text.lines();
    assert_eq!(lines.next().unwrap(), "t,x1,x2,u1,y1");
    let first = lines.next().unwrap();
    let fields: Vec<&str> = first.split(',').collect();
    assert_eq!(fields.len(), 5);
    // 17 significant digits means the mantissa has 16 fractional digits
    assert!(fields[1].contains('.') && fields[1].contains('e'));
    assert_eq!(text.lines().count(), traj.times.len() + 1);
}

#[test]
fn registry_systems_simulate_cleanly() {
    for sys in builtin_registry() {
        let u = InputSignal::zero(sys.input_dim(), 1.0);
        let xi = vec![0.5; sys.state_dim()];
        let traj = simulate(&sys, &xi, &u, 1.0, 1e-7, 1e-9).unwrap();
        assert!(traj.is_complete(), "{} failed: {:?}", sys.name(), traj.status);
    }
}
