//! The converse pipeline: feedback radius, zero-output set, value
//! functions, decay certificates, and candidate assembly.

use ioslab::comparison::{ClassCheck, FunctionClass, ScalarMonotone};
use ioslab::converse::{
    assemble_ios_candidate, empirical_decay_certificate, small_gain_lambda, zero_output_set_test,
    ConverseBudget, Membership, ValueFunctionEstimator, WeightFunction,
};
use ioslab::expr::Expr;
use ioslab::system::{close_loop_robust, registry_get, simulate, ControlSystem, InputSignal};

fn k(text: &str) -> ScalarMonotone {
    ScalarMonotone::from_expr(
        Expr::parse(text, &["s"]).unwrap(),
        FunctionClass::KInf,
        &ClassCheck::default(),
    )
    .unwrap()
}

fn closed(sys_name: &str, lambda: &str) -> ControlSystem {
    let sys = registry_get(sys_name).unwrap();
    close_loop_robust(&sys, &k(lambda)).unwrap()
}

#[test]
fn small_gain_identity_pair() {
    let lambda = small_gain_lambda(
        &ScalarMonotone::identity(),
        &ScalarMonotone::identity(),
        &ClassCheck::default(),
    )
    .unwrap();
    for i in 0..=40 {
        let s = 10.0 * i as f64 / 40.0;
        assert!((lambda.eval(s) - s / 4.0).abs() < 1e-9, "λ({s})");
    }
}

#[test]
fn small_gain_scaled_pair() {
    // σ₁ = 2s, σ₂ = id: σ₁⁻¹(s/2) = s/4, halved, identity inverse → s/8.
    let lambda =
        small_gain_lambda(&k("2*s"), &ScalarMonotone::identity(), &ClassCheck::default())
            .unwrap();
    for i in 0..=40 {
        let s = 10.0 * i as f64 / 40.0;
        assert!((lambda.eval(s) - s / 8.0).abs() < 1e-9, "λ({s})");
    }
}

#[test]
fn small_gain_power_pair() {
    // σ₁ = s², σ₂ = √s: λ(s) = (√(s/2)/2)² = s/8 wherever σ₁ dominates the
    // identity (s/2 ≥ 1, i.e. s ≥ 2; rectification is active below).
    let lambda = small_gain_lambda(&k("s^2"), &k("sqrt(s)"), &ClassCheck::default()).unwrap();
    for i in 0..=40 {
        let s = 2.0 + 8.0 * i as f64 / 40.0;
        assert!(
            (lambda.eval(s) - s / 8.0).abs() < 1e-9,
            "λ({s}) = {}",
            lambda.eval(s)
        );
    }
}

#[test]
fn small_gain_requires_kinf() {
    let ell = ScalarMonotone::from_expr(
        Expr::parse("exp(-s)", &["s"]).unwrap(),
        FunctionClass::L,
        &ClassCheck::default(),
    )
    .unwrap();
    assert!(small_gain_lambda(&ell, &ScalarMonotone::identity(), &ClassCheck::default()).is_err());
}

#[test]
fn origin_is_in_zero_output_set() {
    let loop_sys = closed("paper_counterexample", "s/2");
    let budget = ConverseBudget::default();
    let verdict = zero_output_set_test(&loop_sys, &[0.0, 0.0], &budget).unwrap();
    assert_eq!(verdict, Membership::InD);
}

#[test]
fn decoupled_second_axis_is_in_zero_output_set() {
    // y = x₁ ≡ 0 from (0, 5): the feedback input d·λ(|y|) vanishes and the
    // first coordinate never moves.
    let loop_sys = closed("decoupled_2d", "s/2");
    let budget = ConverseBudget::default();
    let verdict = zero_output_set_test(&loop_sys, &[0.0, 5.0], &budget).unwrap();
    assert_eq!(verdict, Membership::InD);
}

#[test]
fn nonzero_output_rejected_immediately() {
    let loop_sys = closed("paper_counterexample", "s/2");
    let budget = ConverseBudget::default();
    match zero_output_set_test(&loop_sys, &[3.0, 0.5], &budget).unwrap() {
        Membership::NotInD { time, output_norm } => {
            assert_eq!(time, 0.0);
            assert!((output_norm - 0.5).abs() < 1e-12);
        }
        Membership::InD => panic!("(3, 0.5) has nonzero output"),
    }
}

#[test]
fn omega_of_contracting_loop_is_initial_norm() {
    // Closed scalar_stable with λ(s) = s/2: |x| strictly decreases for every
    // admissible d, so the sup sits at t = 0.
    let loop_sys = closed("scalar_stable", "s/2");
    let mut est = ValueFunctionEstimator::new(loop_sys, ConverseBudget::default()).unwrap();
    let omega = est.omega(&[1.0], 0).unwrap();
    assert!((omega - 1.0).abs() < 1e-9, "ω(1) = {omega}");
}

#[test]
fn omega_of_counterexample_loop_ignores_x1() {
    let loop_sys = closed("paper_counterexample", "s/2");
    let mut est = ValueFunctionEstimator::new(loop_sys, ConverseBudget::default()).unwrap();
    for (a, b) in [(0.0, 1.0), (5.0, 1.0), (20.0, 2.0), (3.0, -0.5)] {
        let omega = est.omega(&[a, b], 0).unwrap();
        assert!(
            (omega - b.abs()).abs() < 1e-9 * b.abs().max(1.0),
            "ω({a},{b}) = {omega}"
        );
    }
}

#[test]
fn omega_at_least_initial_output_everywhere() {
    use rand::{Rng, SeedableRng};
    let loop_sys = closed("paper_counterexample", "s/2");
    let mut est = ValueFunctionEstimator::new(loop_sys.clone(), ConverseBudget::default())
        .unwrap();
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(8);
    for i in 0..100 {
        let xi = [rng.gen_range(-5.0..5.0), rng.gen_range(-3.0..3.0)];
        let omega = est.omega(&xi, i).unwrap();
        let h0 = loop_sys.output_norm(&xi).unwrap();
        assert!(omega >= h0 - 1e-12 * h0.max(1.0));
    }
}

#[test]
fn weighted_value_matches_dense_scan_oracle() {
    // Closed scalar_stable, ξ = 1, (c₁, c₂) = (1, 2). Along the slowest
    // contraction x(t) = e^{−t/2} and ω(x(t)) = x(t), so the oracle is a
    // dense one-dimensional scan of k(t)·e^{−t/2}.
    let loop_sys = closed("scalar_stable", "s/2");
    let weight = WeightFunction::new(1.0, 2.0).unwrap();
    let mut budget = ConverseBudget::default();
    budget.outer_time_points = 33;
    let mut est = ValueFunctionEstimator::new(loop_sys, budget).unwrap();
    let w = est.weighted(&[1.0], &weight, None, 0).unwrap();

    let mut oracle = 0.0f64;
    for i in 0..=20000 {
        let t = 20.0 * i as f64 / 20000.0;
        let v = weight.eval(t) * (-t / 2.0).exp();
        oracle = oracle.max(v);
    }
    assert!(
        (w - oracle).abs() <= 0.02 * oracle,
        "W = {w}, oracle = {oracle}"
    );
    assert!(w >= 1.0 && w <= 2.0, "W ∈ [c₁ω, c₂ω]");
}

#[test]
fn weighted_value_brackets_omega() {
    use rand::{Rng, SeedableRng};
    let loop_sys = closed("paper_counterexample", "s/2");
    let weight = WeightFunction::default();
    let mut est = ValueFunctionEstimator::new(loop_sys, ConverseBudget::default()).unwrap();
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(99);
    for i in 0..100 {
        let xi = [rng.gen_range(-5.0..5.0), rng.gen_range(-3.0..3.0)];
        let w = est.weighted(&xi, &weight, None, i).unwrap();
        let om = est.omega(&xi, i).unwrap();
        if om == 0.0 {
            assert_eq!(w, 0.0);
            continue;
        }
        let ratio = w / om;
        assert!(
            ratio >= weight.c1() - 1e-9 && ratio <= weight.c2() + 1e-9,
            "W/ω = {ratio} at {xi:?}"
        );
    }
}

#[test]
fn omega_nonincreasing_along_trajectories() {
    use rand::{Rng, SeedableRng};
    let loop_sys = closed("paper_counterexample", "s/2");
    let mut est =
        ValueFunctionEstimator::new(loop_sys.clone(), ConverseBudget::default()).unwrap();
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(2024);
    let mut checked = 0;
    while checked < 100 {
        let xi = [rng.gen_range(-4.0..4.0), rng.gen_range(-2.0..2.0)];
        let d = if rng.gen_bool(0.5) { 1.0 } else { -1.0 };
        let t = rng.gen_range(0.1..3.0);
        let sig = InputSignal::constant(vec![d], t);
        let traj = simulate(&loop_sys, &xi, &sig, t, 1e-9, 1e-12).unwrap();
        let x_t = traj.final_state().to_vec();
        let om0 = est.omega(&xi, checked as u64).unwrap();
        let om1 = est.omega(&x_t, checked as u64).unwrap();
        assert!(
            om1 <= om0 * (1.0 + 1e-3),
            "ω increased along the flow: {om0} → {om1}"
        );
        checked += 1;
    }
}

#[test]
fn doubling_budget_never_decreases_estimates() {
    let loop_sys = closed("paper_counterexample", "s/2");
    let weight = WeightFunction::default();
    let points = [[2.0, 1.5], [-3.0, 0.5], [1.0, -1.0]];

    let mut small = ValueFunctionEstimator::new(loop_sys.clone(), ConverseBudget {
        random_signals: 4,
        ..Default::default()
    })
    .unwrap();
    let mut large = ValueFunctionEstimator::new(loop_sys, ConverseBudget {
        random_signals: 8,
        ..Default::default()
    })
    .unwrap();
    for (i, xi) in points.iter().enumerate() {
        let o_small = small.omega(xi, i as u64).unwrap();
        let o_large = large.omega(xi, i as u64).unwrap();
        assert!(o_large >= o_small - 1e-15, "ω shrank with budget");
        let w_small = small.weighted(xi, &weight, None, i as u64).unwrap();
        let w_large = large.weighted(xi, &weight, None, i as u64).unwrap();
        assert!(w_large >= w_small - 1e-12, "W shrank with budget");
    }
}

#[test]
fn decay_certificate_contracting_loop() {
    let loop_sys = closed("scalar_stable", "s/2");
    let weight = WeightFunction::default();
    let mut est = ValueFunctionEstimator::new(loop_sys, ConverseBudget::default()).unwrap();
    let samples: Vec<Vec<f64>> = (1..=10).map(|i| vec![0.4 * i as f64]).collect();
    let (margin, report) =
        empirical_decay_certificate(&mut est, &weight, &samples, None, &[1e-2, 1e-3]).unwrap();
    assert_eq!(report.positive_fraction, 0.0, "failures: {:?}", report.failures);
    let margin = margin.expect("margin fitted");
    let (s_grid, r_grid, _) = margin.grids();
    for &s in s_grid.iter().filter(|&&s| s > 0.0) {
        for &r in r_grid {
            assert!(margin.eval(s, r) > 0.0, "α({s},{r}) not positive");
        }
    }
}

#[test]
fn decay_certificate_skips_zero_output_states() {
    let loop_sys = closed("decoupled_2d", "s/2");
    let weight = WeightFunction::default();
    let mut est = ValueFunctionEstimator::new(loop_sys, ConverseBudget::default()).unwrap();
    // states on the x₂ axis have identically zero output
    let samples = vec![vec![0.0, 1.0], vec![0.0, -2.0], vec![1.0, 0.0]];
    let (_, report) =
        empirical_decay_certificate(&mut est, &weight, &samples, None, &[1e-2]).unwrap();
    assert_eq!(report.skipped_in_d, 2);
    assert_eq!(report.observations.len(), 1);
}

#[test]
fn decay_certificate_counterexample_rate_shrinks_with_radius() {
    // The closed counterexample decays at rate ~(3/2)/(1+x₁²): at a fixed
    // value level the fitted margin must drop as the radius bin grows.
    let loop_sys = closed("paper_counterexample", "s/2");
    let weight = WeightFunction::default();
    let mut est = ValueFunctionEstimator::new(loop_sys, ConverseBudget::default()).unwrap();
    let mut samples = Vec::new();
    for a in [0.0, 1.0, 2.0, 4.0, 6.0] {
        for b in [1.0, 1.5] {
            samples.push(vec![a, b]);
        }
    }
    let (margin, report) =
        empirical_decay_certificate(&mut est, &weight, &samples, None, &[1e-2, 1e-3]).unwrap();
    assert_eq!(report.positive_fraction, 0.0, "failures: {:?}", report.failures);
    let margin = margin.expect("margin fitted");
    let (s_grid, _, _) = margin.grids();
    let s_mid = s_grid[s_grid.len() / 2];
    let near = margin.eval(s_mid, 1.8);
    let far = margin.eval(s_mid, 6.0);
    assert!(
        far < near,
        "margin did not shrink with radius: α({s_mid}, 1.8) = {near}, α({s_mid}, 6) = {far}"
    );
}

#[test]
fn assemble_candidate_for_contracting_loop() {
    let loop_sys = closed("scalar_stable", "s/2");
    let weight = WeightFunction::default();
    let mut est =
        ValueFunctionEstimator::new(loop_sys.clone(), ConverseBudget::default()).unwrap();
    let samples: Vec<Vec<f64>> = (1..=12)
        .flat_map(|i| {
            let v = 0.35 * i as f64;
            [vec![v], vec![-v]]
        })
        .collect();
    let (margin, report) =
        empirical_decay_certificate(&mut est, &weight, &samples, None, &[1e-2, 1e-3]).unwrap();
    assert_eq!(report.positive_fraction, 0.0);
    let margin = margin.unwrap();

    let alpha1 = k("s/2");
    let alpha2 = k("3*s");
    let chi = k("s");
    let holdout: Vec<Vec<f64>> = (1..=8).map(|i| vec![0.5 * i as f64 - 2.2]).collect();
    let (cand, rep) =
        assemble_ios_candidate(&est, alpha1, alpha2, chi, margin, &holdout).unwrap();
    assert!(
        rep.rejected.is_none(),
        "assembly rejected: {:?} (fraction {})",
        rep.rejected,
        rep.holdout_pass_fraction
    );
    let cand = cand.unwrap();
    // the interpolated W is positive away from zero and vanishes at zero
    assert!(cand.value(&[1.0]).unwrap() > 0.2);
    assert!(cand.value(&[0.0]).unwrap().abs() < 1e-9);
}

#[test]
fn assemble_rejects_zero_system() {
    let loop_sys = closed("zero", "s/2");
    let weight = WeightFunction::default();
    let mut est =
        ValueFunctionEstimator::new(loop_sys.clone(), ConverseBudget::default()).unwrap();
    // populate the cache; all values are zero
    for i in 1..=5 {
        let xi = vec![0.3 * i as f64];
        est.weighted(&xi, &weight, None, i as u64).unwrap();
    }
    let margin = ioslab::comparison::DecayMargin::from_grid(
        vec![0.0, 1.0],
        vec![0.5, 1.0],
        vec![vec![0.0, 0.0], vec![1.0, 1.0]],
    )
    .unwrap();
    let (cand, rep) = assemble_ios_candidate(
        &est,
        k("s/2"),
        k("3*s"),
        k("s"),
        margin,
        &[vec![1.0]],
    )
    .unwrap();
    assert!(cand.is_none());
    let reason = rep.rejected.expect("diagnostic");
    assert!(reason.contains("α₁"), "diagnostic: {reason}");
}

#[test]
fn weighted_value_with_threshold_capped_horizon() {
    // T̄ from a time-threshold family: contributions beyond the cap sit
    // below the cut level, so the capped estimate matches the full one.
    use ioslab::comparison::{KLFunction, KlCheck, TimeThresholdFamily};
    let loop_sys = closed("scalar_stable", "s/2");
    let weight = WeightFunction::default();
    let beta = KLFunction::from_expr(
        Expr::parse("s*exp(-t/2)", &["s", "t"]).unwrap(),
        &KlCheck::default(),
    )
    .unwrap();
    let mut fam = TimeThresholdFamily::new(beta, 1e-9);
    // decay from the working radius 4 to the truncation level
    let t_bar = fam.query(4.0, 1e-3).unwrap();
    assert!(t_bar > 1.0 && t_bar < 20.0, "T̄ = {t_bar}");

    let mut capped = ValueFunctionEstimator::new(loop_sys.clone(), ConverseBudget::default())
        .unwrap();
    let mut full =
        ValueFunctionEstimator::new(loop_sys, ConverseBudget::default()).unwrap();
    for (i, xi) in [[1.0], [2.5], [-3.0]].iter().enumerate() {
        let w_capped = capped.weighted(xi, &weight, Some(t_bar), i as u64).unwrap();
        let w_full = full.weighted(xi, &weight, None, i as u64).unwrap();
        assert!(
            (w_capped - w_full).abs() <= 1e-2 * w_full.max(1e-9),
            "capped {w_capped} vs full {w_full}"
        );
    }
}

#[test]
fn weight_function_invariants() {
    let w = WeightFunction::new(1.0, 2.0).unwrap();
    assert_eq!(w.eval(0.0), 1.0);
    assert!((w.eval(100.0) - 2.0).abs() < 1e-12);
    assert!((w.c3() - 0.25).abs() < 1e-15);
    let mut prev = w.eval(0.0);
    for i in 1..=100 {
        let t = i as f64 * 0.1;
        let v = w.eval(t);
        assert!(v > prev);
        assert!(w.derivative(t) > 0.0);
        prev = v;
    }
    assert!(WeightFunction::new(2.0, 1.0).is_err());
    assert!(WeightFunction::new(0.0, 1.0).is_err());
}
