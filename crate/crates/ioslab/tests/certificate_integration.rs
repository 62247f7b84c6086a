//! Certificate checks against the worked two-dimensional system and the
//! small reference systems.

use ioslab::certificate::{
    check_dissipation, check_sandwich, dini_decrease_along_flow, predict_bound,
    rescale_certificate, CandidateLyapunov, CertVariant, DissipationOptions, GradientMode,
    SandwichMode, TriggerForm, DecayBound,
};
use ioslab::comparison::{ClassCheck, DecayMargin, FunctionClass, ScalarMonotone};
use ioslab::expr::Expr;
use ioslab::system::{registry_get, InputSignal};

fn k_expr(text: &str) -> ScalarMonotone {
    ScalarMonotone::from_expr(
        Expr::parse(text, &["s"]).unwrap(),
        FunctionClass::KInf,
        &ClassCheck::default(),
    )
    .unwrap()
}

fn pd_expr(text: &str) -> ScalarMonotone {
    ScalarMonotone::from_expr(
        Expr::parse(text, &["s"]).unwrap(),
        FunctionClass::PositiveDefinite,
        &ClassCheck::default(),
    )
    .unwrap()
}

/// The analytic margin 2s/(1+r²) tabulated with a zero anchor row (no
/// demand below the first positive level).
fn counterexample_margin(s_max: f64, r_max: f64) -> DecayMargin {
    let mut s_grid = vec![0.0, 1e-9];
    let mut r_grid = vec![];
    for i in 1..=60 {
        s_grid.push(s_max * i as f64 / 60.0);
    }
    for j in 0..=40 {
        r_grid.push(r_max * j as f64 / 40.0);
    }
    let values = s_grid
        .iter()
        .map(|&s| r_grid.iter().map(|&r| 2.0 * s / (1.0 + r * r)).collect())
        .collect();
    DecayMargin::from_grid(s_grid, r_grid, values).unwrap()
}

fn v_x2_squared() -> CandidateLyapunov {
    CandidateLyapunov::from_formula("x2^2", "x2^2", &["x1", "x2"], GradientMode::Symbolic)
        .unwrap()
}

#[test]
fn sandwich_equality_case() {
    // V = x₂², α₁ = α₂ = s² in output mode: equality everywhere.
    let sys = registry_get("paper_counterexample").unwrap();
    let cand = v_x2_squared().with_sandwich(k_expr("s^2"), k_expr("s^2"), SandwichMode::OutputNorm);
    let report = check_sandwich(&cand, &sys, &[(-5.0, 5.0), (-5.0, 5.0)], 21).unwrap();
    assert!(report.lower.passed && report.upper.passed);
    assert!(report.lower.worst_margin <= 2e-9);
}

#[test]
fn sandwich_violation_is_witnessed() {
    // α₁ = 2s² in output mode fails: 2x₂² > x₂² away from zero.
    let sys = registry_get("paper_counterexample").unwrap();
    let cand =
        v_x2_squared().with_sandwich(k_expr("2*s^2"), k_expr("s^2"), SandwichMode::OutputNorm);
    let report = check_sandwich(&cand, &sys, &[(-2.0, 2.0), (-2.0, 2.0)], 9).unwrap();
    assert!(!report.lower.passed);
    let w = report.lower.witness.expect("witness");
    assert!(w.lhs > w.rhs);
}

#[test]
fn sandwich_state_mode_upper() {
    // V = x₁² + x₂² ≤ α₂(|ξ|) = |ξ|² with equality.
    let sys = registry_get("paper_counterexample").unwrap();
    let v = CandidateLyapunov::from_formula(
        "norm2",
        "x1^2+x2^2",
        &["x1", "x2"],
        GradientMode::Symbolic,
    )
    .unwrap()
    .with_sandwich(k_expr("s^2/2"), k_expr("s^2"), SandwichMode::StateNorm);
    let report = check_sandwich(&v, &sys, &[(-3.0, 3.0), (-3.0, 3.0)], 13).unwrap();
    assert!(report.upper.passed, "upper: {:?}", report.upper.worst_margin);
}

#[test]
fn counterexample_dissipation_with_margin_decay() {
    // V = x₂², χ(s) = s², decay 2V/(1+|ξ|²): passes since 1+x₁² ≤ 1+|ξ|².
    let sys = registry_get("paper_counterexample").unwrap();
    let cand = v_x2_squared()
        .with_trigger(k_expr("s^2"))
        .with_decay(DecayBound::Margin(counterexample_margin(100.0, 15.0)));
    let report = check_dissipation(
        &cand,
        &sys,
        CertVariant::IosLf,
        &[(-10.0, 10.0), (-10.0, 10.0)],
        &[(-10.0, 10.0)],
        41,
        41,
        &DissipationOptions::default(),
    )
    .unwrap();
    assert!(report.passed, "worst margin {}", report.worst_margin);
    assert!(!report.vacuous);
}

#[test]
fn counterexample_exact_dissipation_formula() {
    // The demanded decrease 2x₂²/(1+x₁²) is analytically exact.
    let sys = registry_get("paper_counterexample").unwrap();
    let decay = Expr::parse("2*x2^2/(1+x1^2)", &["x1", "x2"]).unwrap();
    let cand = v_x2_squared()
        .with_trigger(k_expr("s^2"))
        .with_decay(DecayBound::StateFormula(decay));
    let report = check_dissipation(
        &cand,
        &sys,
        CertVariant::IosLf,
        &[(-10.0, 10.0), (-10.0, 10.0)],
        &[(-10.0, 10.0)],
        51,
        51,
        &DissipationOptions::default(),
    )
    .unwrap();
    assert!(report.passed, "worst margin {}", report.worst_margin);
}

#[test]
fn uniform_decay_refuted_with_witness() {
    // α₃(v) = v fails: at (x₁, x₂, u) = (3, 1, 0), DVf = −0.4 > −1.
    let sys = registry_get("paper_counterexample").unwrap();
    let cand = v_x2_squared()
        .with_trigger(k_expr("s^2"))
        .with_decay(DecayBound::Scalar(pd_expr("s")));
    let report = check_dissipation(
        &cand,
        &sys,
        CertVariant::SiiosLf,
        &[(-3.0, 3.0), (-3.0, 3.0)],
        &[(-3.0, 3.0)],
        7,
        7,
        &DissipationOptions::default(),
    )
    .unwrap();
    assert!(!report.passed);
    let w = report.witness.expect("witness point");
    // the witness is reproducible: DVf at the point matches the report
    let cand2 = v_x2_squared();
    let dvf = cand2.dvf(&sys, &w.state, &w.input).unwrap().unwrap();
    assert!((dvf - w.lhs).abs() < 1e-9);
    assert!(w.lhs > w.rhs);
}

#[test]
fn second_certificate_with_output_trigger() {
    // U = ((1+x₁²)|x₂|)^(1+x₁²), trigger |x₂| ≥ |u|, decay α₃(v) = v, on a
    // box that excludes the singular line x₂ = 0.
    let sys = registry_get("paper_counterexample").unwrap();
    let u_expr = "((1+x1^2)*abs(x2))^(1+x1^2)";
    let cand = CandidateLyapunov::from_formula(
        "U",
        u_expr,
        &["x1", "x2"],
        GradientMode::FiniteDifference { step: 1e-6 },
    )
    .unwrap()
    .with_trigger(k_expr("s"))
    .with_singular_set(Expr::parse("x2", &["x1", "x2"]).unwrap(), 1e-3)
    .with_decay(DecayBound::Scalar(pd_expr("s")));
    let opts = DissipationOptions {
        tol_rel: 1e-6,
        ..Default::default()
    };
    let report = check_dissipation(
        &cand,
        &sys,
        CertVariant::RosLf,
        &[(-3.0, 3.0), (-3.0, 3.0)],
        &[(-3.0, 3.0)],
        31,
        31,
        &opts,
    )
    .unwrap();
    assert!(report.passed, "worst margin {}", report.worst_margin);
    assert!(report.skipped_singular > 0, "singular line never sampled");
}

#[test]
fn symbolic_gradient_refused_for_abs() {
    let r = CandidateLyapunov::from_formula(
        "U",
        "((1+x1^2)*abs(x2))^(1+x1^2)",
        &["x1", "x2"],
        GradientMode::Symbolic,
    );
    assert!(r.is_err());
}

#[test]
fn trigger_monotonicity() {
    // Enlarging χ pointwise shrinks the triggered set and never turns a
    // pass into a fail.
    let sys = registry_get("paper_counterexample").unwrap();
    let margin = counterexample_margin(100.0, 15.0);
    let run = |chi: ScalarMonotone| {
        let cand = v_x2_squared()
            .with_trigger(chi)
            .with_decay(DecayBound::Margin(margin.clone()));
        check_dissipation(
            &cand,
            &sys,
            CertVariant::IosLf,
            &[(-6.0, 6.0), (-6.0, 6.0)],
            &[(-6.0, 6.0)],
            21,
            21,
            &DissipationOptions::default(),
        )
        .unwrap()
    };
    let small = run(k_expr("s^2"));
    let large = run(k_expr("3*s^2"));
    assert!(small.passed);
    assert!(large.passed, "enlarged trigger must still pass");
    assert!(large.triggered_points <= small.triggered_points);
}

#[test]
fn nonstrict_pass_implies_strict_pass() {
    let sys = registry_get("paper_counterexample").unwrap();
    let margin = counterexample_margin(100.0, 15.0);
    let run = |form: TriggerForm| {
        let cand = v_x2_squared()
            .with_trigger(k_expr("s^2"))
            .with_decay(DecayBound::Margin(margin.clone()));
        check_dissipation(
            &cand,
            &sys,
            CertVariant::IosLf,
            &[(-6.0, 6.0), (-6.0, 6.0)],
            &[(-6.0, 6.0)],
            21,
            21,
            &DissipationOptions {
                trigger_form: form,
                ..Default::default()
            },
        )
        .unwrap()
    };
    let nonstrict = run(TriggerForm::NonStrict);
    let strict = run(TriggerForm::Strict);
    assert!(nonstrict.passed);
    assert!(strict.passed);
    assert!(strict.triggered_points <= nonstrict.triggered_points);
}

#[test]
fn trigger_never_firing_reports_vacuous() {
    // χ so large the trigger cannot fire for any nonzero grid input (the
    // input box excludes 0, where every trigger fires)
    let sys = registry_get("paper_counterexample").unwrap();
    let cand = v_x2_squared()
        .with_trigger(k_expr("1000000*s^2"))
        .with_decay(DecayBound::Scalar(pd_expr("s")));
    let report = check_dissipation(
        &cand,
        &sys,
        CertVariant::IosLf,
        &[(-1.0, 1.0), (-1.0, 1.0)],
        &[(0.5, 1.0)],
        5,
        5,
        &DissipationOptions::default(),
    )
    .unwrap();
    assert!(report.vacuous);
    assert!(report.passed, "a vacuous check passes but is flagged");
    assert_eq!(report.triggered_points, 0);
}

#[test]
fn sios_form_nonincrease_only() {
    // zero decay: the output-Lagrange form just forbids increase on the
    // triggered set
    let sys = registry_get("scalar_stable").unwrap();
    let cand = CandidateLyapunov::from_formula("x^2", "x1^2", &["x1"], GradientMode::Symbolic)
        .unwrap()
        .with_trigger(k_expr("4*s^2"))
        .with_decay(DecayBound::Zero);
    let report = check_dissipation(
        &cand,
        &sys,
        CertVariant::SiosLf,
        &[(-3.0, 3.0)],
        &[(-3.0, 3.0)],
        31,
        31,
        &DissipationOptions::default(),
    )
    .unwrap();
    assert!(report.passed, "worst margin {}", report.worst_margin);
}

#[test]
fn rescaling_by_identity_is_neutral() {
    let cand = v_x2_squared()
        .with_sandwich(k_expr("s^2"), k_expr("s^2"), SandwichMode::OutputNorm)
        .with_trigger(k_expr("s^2"))
        .with_decay(DecayBound::Scalar(pd_expr("s/100")));
    let id = ScalarMonotone::identity();
    let scaled = rescale_certificate(&cand, &id, &ClassCheck::default()).unwrap();
    for x in [[0.5, 1.5], [2.0, -1.0], [0.0, 0.0]] {
        let a = cand.value(&x).unwrap();
        let b = scaled.value(&x).unwrap();
        assert!((a - b).abs() < 1e-12);
    }
}

#[test]
fn rescaling_preserves_dissipation_pass() {
    // ρ(s) = s² sends V = x₂² to W = x₂⁴; chain-rule decay keeps the margin.
    let sys = registry_get("paper_counterexample").unwrap();
    let decay = Expr::parse("2*x2^2/(1+x1^2)", &["x1", "x2"]).unwrap();
    let cand = v_x2_squared()
        .with_trigger(k_expr("s^2"))
        .with_decay(DecayBound::StateFormula(decay));
    let box2 = [(-2.0, 2.0), (-2.0, 2.0)];
    let ibox = [(-2.0, 2.0)];
    let base = check_dissipation(
        &cand,
        &sys,
        CertVariant::IosLf,
        &box2,
        &ibox,
        15,
        15,
        &DissipationOptions::default(),
    )
    .unwrap();
    assert!(base.passed);

    let rho = k_expr("s^2");
    let scaled = rescale_certificate(&cand, &rho, &ClassCheck::with_range(20.0)).unwrap();
    // W = x₂⁴ pointwise
    assert!((scaled.value(&[1.0, 2.0]).unwrap() - 16.0).abs() < 1e-9);
    let after = check_dissipation(
        &scaled,
        &sys,
        CertVariant::IosLf,
        &box2,
        &ibox,
        15,
        15,
        &DissipationOptions {
            tol_abs: 1e-7,
            ..Default::default()
        },
    )
    .unwrap();
    assert!(
        after.passed,
        "rescaled certificate failed with margin {}",
        after.worst_margin
    );
}

#[test]
fn nonmonotone_rescaling_rejected() {
    let cand = v_x2_squared();
    let table = vec![(0.0, 0.0), (1.0, 2.0), (2.0, 1.5), (3.0, 3.0)];
    assert!(ScalarMonotone::from_table(table, FunctionClass::KInf, &ClassCheck::default())
        .is_err());
    // a class-L function is also rejected as a rescaling
    let ell = ScalarMonotone::from_expr(
        Expr::parse("exp(-s)", &["s"]).unwrap(),
        FunctionClass::L,
        &ClassCheck::default(),
    )
    .unwrap();
    assert!(rescale_certificate(&cand, &ell, &ClassCheck::default()).is_err());
}

#[test]
fn dini_quotients_approach_analytic_derivative() {
    // scalar_stable, V = x², ξ = 1, μ = 0: DVf = −2x² = −2.
    let sys = registry_get("scalar_stable").unwrap();
    let cand =
        CandidateLyapunov::from_formula("x^2", "x1^2", &["x1"], GradientMode::Symbolic).unwrap();
    let qs = dini_decrease_along_flow(&cand, &sys, &[1.0], &[0.0], &[1e-2, 1e-3, 1e-4], 1e-10)
        .unwrap();
    let last = qs.last().unwrap().1;
    assert!((last + 2.0).abs() < 0.02, "quotient at 1e-4: {last}");
    // monotone trend toward the limit
    let errs: Vec<f64> = qs.iter().map(|&(_, q)| (q + 2.0).abs()).collect();
    assert!(errs[0] >= errs[1] && errs[1] >= errs[2]);
}

#[test]
fn dini_quotients_zero_at_equilibrium() {
    let sys = registry_get("scalar_stable").unwrap();
    let cand =
        CandidateLyapunov::from_formula("x^2", "x1^2", &["x1"], GradientMode::Symbolic).unwrap();
    let qs = dini_decrease_along_flow(&cand, &sys, &[0.0], &[0.0], &[1e-2, 1e-3], 1e-10).unwrap();
    for (_, q) in qs {
        assert!(q.abs() < 1e-12);
    }
}

#[test]
fn dini_quotients_counterexample() {
    // V = x₂², ξ = (0, 1), μ = 0: DVf = −2·2/(1+0)·V = −4.
    let sys = registry_get("paper_counterexample").unwrap();
    let cand = v_x2_squared();
    let qs =
        dini_decrease_along_flow(&cand, &sys, &[0.0, 1.0], &[0.0], &[1e-2, 1e-3, 1e-4], 1e-10)
            .unwrap();
    let last = qs.last().unwrap().1;
    assert!((last + 4.0).abs() < 0.04, "quotient at 1e-4: {last}");
}

#[test]
fn dini_matches_symbolic_on_random_points() {
    // For smooth V the quotient at dt = 1e-4 agrees with DVf within 1%.
    use rand::{Rng, SeedableRng};
    let sys = registry_get("paper_counterexample").unwrap();
    let cand = v_x2_squared();
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(5150);
    let mut checked = 0;
    while checked < 100 {
        let x = [rng.gen_range(-3.0..3.0), rng.gen_range(-3.0..3.0)];
        let u = [rng.gen_range(-1.0..1.0)];
        let dvf = cand.dvf(&sys, &x, &u).unwrap().unwrap();
        if dvf.abs() < 1e-2 {
            continue; // relative comparison needs a nonvanishing derivative
        }
        let q = dini_decrease_along_flow(&cand, &sys, &x, &u, &[1e-4], 1e-10).unwrap()[0].1;
        assert!(
            (q - dvf).abs() <= 0.01 * dvf.abs(),
            "at {x:?}, {u:?}: quotient {q} vs DVf {dvf}"
        );
        checked += 1;
    }
}

#[test]
fn predicted_envelope_bounds_linear_system() {
    // scalar_stable with V = x², α₁ = s², χ = 4s², u ≡ 0, ξ = 1: the
    // envelope is e^{−t/2} and the simulation e^{−t} stays below it.
    let sys = registry_get("scalar_stable").unwrap();
    let cand = CandidateLyapunov::from_formula("x^2", "x1^2", &["x1"], GradientMode::Symbolic)
        .unwrap()
        .with_sandwich(k_expr("s^2"), k_expr("s^2"), SandwichMode::StateNorm)
        .with_trigger(k_expr("4*s^2"))
        .with_decay(DecayBound::Scalar(pd_expr("s")));
    let u = InputSignal::zero(1, 5.0);
    let report = predict_bound(&cand, &sys, &[1.0], &u, 5.0, 1e-8).unwrap();
    assert!(report.passed, "max ratio {}", report.max_ratio);
    for &(t, _y, bound) in &report.samples {
        let analytic = (-t / 2.0f64).exp();
        assert!(
            bound >= analytic * (1.0 - 1e-3),
            "envelope at t={t}: {bound} vs e^(-t/2) = {analytic}"
        );
    }
}

#[test]
fn predicted_envelope_zero_case() {
    let sys = registry_get("scalar_stable").unwrap();
    let cand = CandidateLyapunov::from_formula("x^2", "x1^2", &["x1"], GradientMode::Symbolic)
        .unwrap()
        .with_sandwich(k_expr("s^2"), k_expr("s^2"), SandwichMode::StateNorm)
        .with_trigger(k_expr("4*s^2"))
        .with_decay(DecayBound::Scalar(pd_expr("s")));
    let u = InputSignal::zero(1, 2.0);
    let report = predict_bound(&cand, &sys, &[0.0], &u, 2.0, 1e-8).unwrap();
    assert!(report.passed);
    for &(_, y, bound) in &report.samples {
        assert!(y <= 1e-12 && bound <= 1e-12);
    }
}

#[test]
fn predicted_envelope_counterexample_rate() {
    // ξ = (5, 1), u ≡ 0: the margin freezes at r ≈ √26, so the envelope
    // decays like e^{−t/27} and must bound the simulated e^{−t/13}.
    let sys = registry_get("paper_counterexample").unwrap();
    let cand = v_x2_squared()
        .with_sandwich(k_expr("s^2"), k_expr("s^2"), SandwichMode::OutputNorm)
        .with_trigger(k_expr("s^2"))
        .with_decay(DecayBound::Margin(counterexample_margin(4.0, 8.0)));
    let u = InputSignal::zero(1, 10.0);
    let report = predict_bound(&cand, &sys, &[5.0, 1.0], &u, 10.0, 1e-8).unwrap();
    assert!(report.passed, "max ratio {}", report.max_ratio);
    // the envelope actually decays (not vacuous)
    let last = report.samples.last().unwrap();
    assert!(last.2 < 1.0 && last.2 > last.1);
}
