//! Property tests for the comparison-function constructions.

use ioslab::comparison::{
    invert, kl_exponential_factorization, ode_comparison_bound, ClassCheck, FlowGridParams,
    FunctionClass, KLFunction, KlCheck, ScalarMonotone,
};
use ioslab::expr::Expr;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn kl(text: &str) -> KLFunction {
    KLFunction::from_expr(Expr::parse(text, &["s", "t"]).unwrap(), &KlCheck::default()).unwrap()
}

fn uniform_grid(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    (0..n)
        .map(|i| lo + (hi - lo) * i as f64 / (n - 1) as f64)
        .collect()
}

#[test]
fn invert_roundtrip_over_random_targets() {
    // f(invert(f, y)) within tolerance for 100 random y per function.
    let check = ClassCheck::default();
    let fns = [
        ScalarMonotone::from_expr(
            Expr::parse("3*s+s^3", &["s"]).unwrap(),
            FunctionClass::KInf,
            &check,
        )
        .unwrap(),
        ScalarMonotone::from_expr(
            Expr::parse("exp(s)-1", &["s"]).unwrap(),
            FunctionClass::KInf,
            &check,
        )
        .unwrap(),
    ];
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    for f in &fns {
        for _ in 0..100 {
            let y: f64 = rng.gen_range(0.0..100.0);
            let s = invert(f, y, 1e-10).unwrap();
            assert!(
                (f.eval(s) - y).abs() <= 1e-10 * y.max(1.0) * 1.01,
                "{}: y={y}",
                f.name()
            );
        }
    }
}

/// The comparison-lemma contract on a family of random power-law rates:
/// integrate `ẏ = −c·κ(y)` directly and check `y(t) ≤ β_κ(y(0), c·t)`.
#[test]
fn flow_bound_dominates_scaled_inequalities() {
    let mut rng = ChaCha8Rng::seed_from_u64(23);
    for trial in 0..20 {
        let a: f64 = rng.gen_range(0.2..3.0);
        // p ≥ 1 keeps the flow extinction-free; sublinear rates hit zero in
        // finite time, where tabulated relative accuracy has no meaning
        let p: f64 = rng.gen_range(1.0..2.0);
        let kappa = ScalarMonotone::from_fn(
            format!("{a:.3}*s^{p:.3}"),
            move |s: f64| a * s.powf(p),
            FunctionClass::KInf,
            &ClassCheck::default(),
        )
        .unwrap();
        let beta = ode_comparison_bound(&kappa, &FlowGridParams::default()).unwrap();

        // KL shape on a sample grid
        for s in [0.1, 1.0, 5.0] {
            let mut prev = f64::INFINITY;
            for j in 0..40 {
                let t = j as f64 * 0.25;
                let v = beta.eval(s, t);
                assert!(v <= prev + 1e-12, "β not nonincreasing in t");
                prev = v;
            }
        }
        for t in [0.0, 1.0, 4.0] {
            let mut prev = -1.0;
            for i in 0..20 {
                let s = 0.05 + i as f64 * 0.25;
                let v = beta.eval(s, t);
                assert!(v >= prev - 1e-12, "β not nondecreasing in s");
                prev = v;
            }
        }

        // direct integration of the scaled inequality (classic RK4, small
        // steps, so the oracle error is far below the contract slack)
        let c: f64 = rng.gen_range(0.3..3.0);
        let y0: f64 = rng.gen_range(0.1..8.0);
        let n_steps = 8000;
        let t_end = 6.0;
        let dt = t_end / n_steps as f64;
        let f = |y: f64| -c * kappa.eval(y.max(0.0));
        let mut y = y0;
        for k in 0..n_steps {
            let k1 = f(y);
            let k2 = f(y + 0.5 * dt * k1);
            let k3 = f(y + 0.5 * dt * k2);
            let k4 = f(y + dt * k3);
            y = (y + dt / 6.0 * (k1 + 2.0 * k2 + 2.0 * k3 + k4)).max(0.0);
            let t = (k + 1) as f64 * dt;
            // absolute floor: below a billionth of the initial value the
            // comparison is beyond numeric meaning
            let bound = beta.eval(y0, c * t) * (1.0 + 1e-4) + 1e-9 * y0;
            assert!(
                y <= bound,
                "trial {trial}: y({t}) = {y} above β(y0, ct) = {bound} (a={a}, p={p}, c={c})"
            );
        }
    }
}

#[test]
fn flow_bound_equilibrium_row_is_zero() {
    let beta = ode_comparison_bound(&ScalarMonotone::identity(), &FlowGridParams::default())
        .unwrap();
    for t in [0.0, 0.5, 3.0, 20.0] {
        assert_eq!(beta.eval(0.0, t), 0.0);
    }
}

/// Factorizations re-checked on a 10× finer grid with slack 1.05.
#[test]
fn factorization_holds_on_finer_grid_with_slack() {
    let cases = [
        kl("s*exp(-t)"),
        kl("s/(1+t)"),
        kl("s^2*exp(-2*t)"),
    ];
    let s_grid = uniform_grid(0.0, 10.0, 40);
    let t_grid = uniform_grid(0.0, 12.0, 40);
    for beta in &cases {
        let (k1, k2) = kl_exponential_factorization(beta, &s_grid, &t_grid).unwrap();
        let fine_s = uniform_grid(0.0, 10.0, 400);
        let fine_t = uniform_grid(0.0, 12.0, 400);
        for &s in &fine_s {
            for &t in &fine_t {
                let lhs = beta.eval(s, t);
                let rhs = 1.05 * k1.eval(s) * k2.eval((-t).exp());
                assert!(
                    lhs <= rhs + 1e-12,
                    "{}: ({s}, {t}): {lhs} > {rhs}",
                    beta.name()
                );
            }
        }
    }
}

#[test]
fn factorization_rejects_degenerate_grids() {
    let beta = kl("s*exp(-t)");
    assert!(kl_exponential_factorization(&beta, &[1.0], &[0.0, 1.0]).is_err());
    assert!(kl_exponential_factorization(&beta, &[0.0, 1.0], &[1.0, 2.0]).is_err());
}

#[test]
fn composition_class_propagation() {
    let check = ClassCheck::default();
    let sq = ScalarMonotone::from_expr(
        Expr::parse("s^2", &["s"]).unwrap(),
        FunctionClass::KInf,
        &check,
    )
    .unwrap();
    let bounded = ScalarMonotone::from_expr(
        Expr::parse("s/(1+s)", &["s"]).unwrap(),
        FunctionClass::K,
        &check,
    )
    .unwrap();
    let c = ioslab::comparison::compose(&sq, &bounded, &check).unwrap();
    assert_eq!(c.class(), FunctionClass::K);
    let c2 = ioslab::comparison::compose(&sq, &sq, &check).unwrap();
    assert_eq!(c2.class(), FunctionClass::KInf);
}
