//! Task execution: turns a validated configuration into a run report and
//! any file artifacts.

use std::path::Path;
use std::time::Instant;

use serde_json::json;
use thiserror::Error;

use crate::certificate::{check_dissipation, check_sandwich, DissipationOptions};
use crate::comparison::{
    invert, kl_exponential_factorization, ode_comparison_bound, ClassCheck, FlowGridParams,
    TimeThresholdFamily,
};
use crate::config::{
    validate_config, ConfigError, KlOperation, RunConfig, TaskConfig,
};
use crate::converse::{
    assemble_ios_candidate, empirical_decay_certificate, ValueFunctionEstimator,
};
use crate::expr::Expr;
use crate::report::{RunReport, TaskOutcome};
use crate::stability::{falsify, fit_overshoot, implication_audit, FalsifyVerdict, FitOutcome};
use crate::system::{close_loop_robust, simulate_with, SimOptions, SimStatus};

#[derive(Debug, Error)]
pub enum TaskError {
    /// Configuration problems (exit code 2).
    #[error("configuration error:\n{}", .0.join("\n"))]
    Config(Vec<String>),
    /// Runtime or domain failures (exit code 3).
    #[error("{0}")]
    Runtime(String),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

impl From<ConfigError> for TaskError {
    fn from(e: ConfigError) -> Self {
        TaskError::Config(vec![e.0])
    }
}

fn runtime(e: impl std::fmt::Display) -> TaskError {
    TaskError::Runtime(e.to_string())
}

/// Executes the configured task, writing artifacts below `out_dir` when
/// output paths are configured.
pub fn run_task(cfg: &RunConfig, out_dir: Option<&Path>) -> Result<RunReport, TaskError> {
    let problems = validate_config(cfg);
    if !problems.is_empty() {
        return Err(TaskError::Config(problems));
    }
    let started = Instant::now();
    let sys = cfg.system.build()?;
    let mut warnings: Vec<String> = Vec::new();

    let (outcome, verdicts) = match &cfg.task {
        TaskConfig::Simulate(t) => {
            let signal = t.signal.build(t.horizon)?;
            let opts = SimOptions {
                samples: t.samples,
                ..Default::default()
            };
            let traj = simulate_with(
                &sys,
                &t.initial_state,
                &signal,
                t.horizon,
                t.rtol,
                t.atol,
                &opts,
            )
            .map_err(runtime)?;
            if let (Some(dir), Some(csv)) = (out_dir, &cfg.output.trajectory_csv) {
                let mut file = std::fs::File::create(dir.join(csv))?;
                traj.write_csv(&mut file)?;
            }
            let outcome = match traj.status {
                SimStatus::Completed => TaskOutcome::Passed,
                ref other => {
                    warnings.push(format!("trajectory truncated: {other:?}"));
                    TaskOutcome::ViolationsFound
                }
            };
            let v = json!({
                "status": traj.status,
                "samples": traj.times.len(),
                "final_time": traj.times.last(),
                "final_state": traj.final_state(),
                "sup_state_norm": traj.sup_state_norm(),
                "sup_output_norm": traj.sup_output_norm(),
                "integrator": traj.stats,
            });
            (outcome, v)
        }

        TaskConfig::Falsify(t) => {
            let spec = t.build_spec()?;
            let budget = t.budget.build(cfg.seed);
            let report = falsify(&spec, &sys, &budget).map_err(runtime)?;
            let outcome = if report.verdict.is_violated() {
                TaskOutcome::ViolationsFound
            } else {
                TaskOutcome::Passed
            };
            if let (Some(dir), Some(csv), FalsifyVerdict::Violated(w)) =
                (out_dir, &cfg.output.trajectory_csv, &report.verdict)
            {
                let traj = simulate_with(
                    &sys,
                    &w.xi,
                    &w.signal,
                    budget.horizon,
                    budget.rtol,
                    budget.atol,
                    &SimOptions::default(),
                )
                .map_err(runtime)?;
                let mut file = std::fs::File::create(dir.join(csv))?;
                traj.write_csv(&mut file)?;
            }
            if report.blowups_seen > 0 {
                warnings.push(format!(
                    "{} trajectories crossed the blow-up threshold during search",
                    report.blowups_seen
                ));
            }
            if !report.verdict.is_violated() && report.sims_used >= budget.max_sims {
                warnings.push(format!(
                    "search hit the budget ceiling ({} simulations); absence of a witness is \
                     evidence, not proof",
                    budget.max_sims
                ));
            }
            (outcome, serde_json::to_value(&report).map_err(runtime)?)
        }

        TaskConfig::CheckCertificate(t) => {
            let cand = t.candidate.build(&sys)?;
            let mut all_passed = true;
            let mut verdicts = serde_json::Map::new();
            if t.check_sandwich && cand.alpha1.is_some() && cand.alpha2.is_some() {
                let sw = check_sandwich(&cand, &sys, &t.box_bounds, t.grid).map_err(runtime)?;
                all_passed &= sw.lower.passed && sw.upper.passed;
                verdicts.insert(
                    "sandwich_lower".into(),
                    serde_json::to_value(&sw.lower).map_err(runtime)?,
                );
                verdicts.insert(
                    "sandwich_upper".into(),
                    serde_json::to_value(&sw.upper).map_err(runtime)?,
                );
            }
            let opts = DissipationOptions {
                tol_abs: t.tolerance.abs,
                tol_rel: t.tolerance.rel,
                trigger_form: t.trigger_form.into(),
            };
            let report = check_dissipation(
                &cand,
                &sys,
                t.variant.into(),
                &t.box_bounds,
                &t.input_box,
                t.grid,
                t.input_grid,
                &opts,
            )
            .map_err(runtime)?;
            if report.vacuous {
                warnings.push("trigger never fired on the grid (vacuous pass)".into());
            }
            if let Some(radius) = report.chi_coverage_radius {
                let box_radius = t
                    .input_box
                    .iter()
                    .map(|&(lo, hi)| lo.abs().max(hi.abs()))
                    .fold(0.0f64, f64::max);
                if box_radius < radius {
                    warnings.push(format!(
                        "input box radius {box_radius} below the trigger coverage radius \
                         {radius:.6}; larger inputs could still fire the trigger"
                    ));
                }
            }
            all_passed &= report.passed;
            let witnesses: Vec<serde_json::Value> = report
                .witness
                .iter()
                .map(|w| serde_json::to_value(w).unwrap_or_default())
                .collect();
            verdicts.insert(
                "dissipation".into(),
                serde_json::to_value(&report).map_err(runtime)?,
            );
            let block = json!({
                "variant": t.variant,
                "V": t.candidate.v,
                "alpha1": t.candidate.alpha1,
                "alpha2": t.candidate.alpha2,
                "chi": t.candidate.chi,
                "decay": t.candidate.decay,
                "box": t.box_bounds,
                "grid": t.grid,
                "verdicts": serde_json::Value::Object(verdicts),
                "witnesses": witnesses,
            });
            let outcome = if all_passed {
                TaskOutcome::Passed
            } else {
                TaskOutcome::ViolationsFound
            };
            (outcome, block)
        }

        TaskConfig::Fit(t) => {
            if t.audit {
                let plan = t.plan.build(cfg.seed, None);
                let budget = t
                    .audit_budget
                    .as_ref()
                    .expect("validated")
                    .build(cfg.seed.wrapping_add(1));
                let report = implication_audit(&sys, &plan, &budget).map_err(runtime)?;
                let outcome = if report.consistent {
                    TaskOutcome::Passed
                } else {
                    TaskOutcome::ViolationsFound
                };
                (outcome, serde_json::to_value(&report).map_err(runtime)?)
            } else {
                let lambda = match &t.lambda {
                    Some(f) => Some(f.build()?),
                    None => None,
                };
                let plan = t.plan.build(cfg.seed, lambda);
                let fit = fit_overshoot(&sys, t.notion, &plan).map_err(runtime)?;
                let mut verdicts = serde_json::Map::new();
                verdicts.insert(
                    "outcome".into(),
                    serde_json::to_value(&fit.outcome).map_err(runtime)?,
                );
                verdicts.insert(
                    "raw_envelope".into(),
                    serde_json::to_value(&fit.raw_envelope).map_err(runtime)?,
                );
                if let Some(sigma) = &fit.sigma {
                    verdicts.insert(
                        "sigma_table".into(),
                        serde_json::to_value(sigma.tabulate(
                            plan.levels.last().copied().unwrap_or(1.0),
                            33,
                        ))
                        .map_err(runtime)?,
                    );
                }
                if let Some(gamma) = &fit.gamma {
                    verdicts.insert(
                        "gamma_table".into(),
                        serde_json::to_value(gamma.tabulate(
                            plan.levels.last().copied().unwrap_or(1.0),
                            33,
                        ))
                        .map_err(runtime)?,
                    );
                }
                let mut outcome = match fit.outcome {
                    FitOutcome::Fitted | FitOutcome::DegenerateZero => TaskOutcome::Passed,
                    FitOutcome::Unfittable { .. } => TaskOutcome::ViolationsFound,
                };
                if let (Some(bcfg), Some(spec)) = (&t.validate_budget, &fit.spec) {
                    let budget = bcfg.build(cfg.seed.wrapping_add(1));
                    let spec = spec.clone().with_slack(1.1);
                    let check = falsify(&spec, &sys, &budget).map_err(runtime)?;
                    if check.verdict.is_violated() {
                        outcome = TaskOutcome::ViolationsFound;
                        warnings.push("fitted candidates failed independent falsification".into());
                    }
                    verdicts.insert(
                        "validation".into(),
                        serde_json::to_value(&check).map_err(runtime)?,
                    );
                }
                (outcome, serde_json::Value::Object(verdicts))
            }
        }

        TaskConfig::ConstructConverse(t) => {
            let lambda = t.build_lambda()?;
            let weight = t.build_weight()?;
            let closed = close_loop_robust(&sys, &lambda).map_err(runtime)?;
            let budget = t.budget.build(cfg.seed);
            let samples = t.samples.build(cfg.seed, sys.state_dim())?;
            let mut est = ValueFunctionEstimator::new(closed, budget).map_err(runtime)?;
            let (margin, decay_report) =
                empirical_decay_certificate(&mut est, &weight, &samples, None, &t.deltas)
                    .map_err(runtime)?;
            let mut outcome = if decay_report.positive_fraction == 0.0 {
                TaskOutcome::Passed
            } else {
                warnings.push(
                    "positive forward differences observed; budget too small or the \
                     stability hypothesis fails"
                        .into(),
                );
                TaskOutcome::ViolationsFound
            };

            // Persistable bundle: sample points and value tables, sorted for
            // deterministic serialization.
            let mut omega_entries: Vec<(Vec<f64>, f64, f64, usize)> = est
                .omega_cache()
                .map(|(x, c)| (x, c.value, c.achieving_time, c.achieving_signal))
                .collect();
            omega_entries.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap());
            let mut w_entries: Vec<(Vec<f64>, f64)> = est.w_cache().collect();
            w_entries.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap());

            let mut verdicts = serde_json::Map::new();
            verdicts.insert(
                "lambda_table".into(),
                serde_json::to_value(lambda.tabulate(10.0, 41)).map_err(runtime)?,
            );
            verdicts.insert(
                "weight".into(),
                json!({"c1": weight.c1(), "c2": weight.c2(), "c3": weight.c3()}),
            );
            verdicts.insert(
                "omega_table".into(),
                serde_json::to_value(&omega_entries).map_err(runtime)?,
            );
            verdicts.insert(
                "w_table".into(),
                serde_json::to_value(&w_entries).map_err(runtime)?,
            );
            verdicts.insert(
                "decay_report".into(),
                serde_json::to_value(&decay_report).map_err(runtime)?,
            );
            if let Some(m) = &margin {
                let (s, r, v) = m.grids();
                verdicts.insert(
                    "decay_margin".into(),
                    json!({"s_grid": s, "r_grid": r, "values": v}),
                );
            }
            if let (Some(a1), Some(a2), Some(chi), Some(m)) =
                (&t.alpha1, &t.alpha2, &t.chi, margin)
            {
                let holdout = match &t.holdout {
                    Some(h) => h.build(cfg.seed.wrapping_add(7), sys.state_dim())?,
                    None => samples.clone(),
                };
                let (cand, assembly) = assemble_ios_candidate(
                    &est,
                    a1.build()?,
                    a2.build()?,
                    chi.build()?,
                    m,
                    &holdout,
                )
                .map_err(runtime)?;
                if cand.is_none() {
                    outcome = TaskOutcome::ViolationsFound;
                }
                verdicts.insert(
                    "assembly".into(),
                    serde_json::to_value(&assembly).map_err(runtime)?,
                );
            }
            (outcome, serde_json::Value::Object(verdicts))
        }

        TaskConfig::KlTools(t) => run_kl_tools(t, &mut warnings)?,
    };

    let report = RunReport::new(
        cfg,
        sys.name().to_string(),
        outcome,
        verdicts,
        warnings,
        started.elapsed().as_millis(),
    );
    if let (Some(dir), Some(name)) = (out_dir, &cfg.output.report) {
        std::fs::create_dir_all(dir)?;
        std::fs::write(dir.join(name), report.to_json_pretty())?;
    }
    Ok(report)
}

fn run_kl_tools(
    t: &crate::config::KlToolsTask,
    warnings: &mut Vec<String>,
) -> Result<(TaskOutcome, serde_json::Value), TaskError> {
    match &t.operation {
        KlOperation::Invert {
            function,
            targets,
            tol,
        } => {
            let f = function.build()?;
            let mut rows = Vec::new();
            let mut ok = true;
            for &y in targets {
                match invert(&f, y, *tol) {
                    Ok(s) => rows.push(json!({"y": y, "s": s, "f_of_s": f.eval(s)})),
                    Err(e) => {
                        ok = false;
                        rows.push(json!({"y": y, "error": e.to_string()}));
                    }
                }
            }
            let outcome = if ok {
                TaskOutcome::Passed
            } else {
                TaskOutcome::ViolationsFound
            };
            Ok((outcome, json!({"inversions": rows})))
        }
        KlOperation::Compose {
            outer,
            inner,
            eval_at,
        } => {
            let f = outer.build()?;
            let g = inner.build()?;
            let c = crate::comparison::compose(&f, &g, &ClassCheck::default())
                .map_err(runtime)?;
            let rows: Vec<serde_json::Value> = eval_at
                .iter()
                .map(|&s| json!({"s": s, "value": c.eval(s)}))
                .collect();
            Ok((
                TaskOutcome::Passed,
                json!({"class": c.class(), "values": rows}),
            ))
        }
        KlOperation::TimeThreshold { beta, queries, tol } => {
            let b = beta.build()?;
            let mut fam = TimeThresholdFamily::new(b, *tol);
            let mut rows = Vec::new();
            for &(r, s) in queries {
                let t_val = fam.query(r, s).map_err(runtime)?;
                rows.push(json!({"r": r, "s": s, "T": t_val}));
            }
            Ok((TaskOutcome::Passed, json!({"thresholds": rows})))
        }
        KlOperation::Factorize {
            beta,
            s_max,
            t_max,
            points,
            holdout_refine,
            holdout_slack,
        } => {
            let b = beta.build()?;
            let grid = |hi: f64, n: usize| -> Vec<f64> {
                (0..n).map(|i| hi * i as f64 / (n - 1) as f64).collect()
            };
            let s_grid = grid(*s_max, *points);
            let t_grid = grid(*t_max, *points);
            let (k1, k2) =
                kl_exponential_factorization(&b, &s_grid, &t_grid).map_err(runtime)?;
            // holdout re-verification on a finer grid with slack
            let fine_s = grid(*s_max, points * holdout_refine);
            let fine_t = grid(*t_max, points * holdout_refine);
            let mut worst: f64 = f64::INFINITY;
            let mut ok = true;
            for &s in &fine_s {
                for &tt in &fine_t {
                    let lhs = b.eval(s, tt);
                    let rhs = holdout_slack * k1.eval(s) * k2.eval((-tt).exp());
                    let slack = rhs - lhs;
                    if slack < worst {
                        worst = slack;
                    }
                    if lhs > rhs + 1e-12 {
                        ok = false;
                    }
                }
            }
            if !ok {
                warnings.push("factorization bound failed on the holdout grid".into());
            }
            let outcome = if ok {
                TaskOutcome::Passed
            } else {
                TaskOutcome::ViolationsFound
            };
            Ok((
                outcome,
                json!({
                    "kappa1_table": k1.tabulate(*s_max, 65),
                    "kappa2_table": k2.tabulate(1.0, 65),
                    "grid_points": points * points,
                    "holdout_worst_slack": worst,
                    "holdout_passed": ok,
                }),
            ))
        }
        KlOperation::ComparisonFlow {
            kappa,
            eval_at,
            reference,
            rel_tol,
        } => {
            let k = kappa.build()?;
            let beta = ode_comparison_bound(&k, &FlowGridParams::default()).map_err(runtime)?;
            let reference = match reference {
                Some(r) => Some(Expr::parse(r, &["s", "t"]).map_err(runtime)?),
                None => None,
            };
            let mut rows = Vec::new();
            let mut ok = true;
            let mut worst_rel: f64 = 0.0;
            for &(s, tt) in eval_at {
                let v = beta.eval(s, tt);
                let mut row = serde_json::Map::new();
                row.insert("s".into(), json!(s));
                row.insert("t".into(), json!(tt));
                row.insert("value".into(), json!(v));
                if let Some(r) = &reference {
                    let want = r.eval(&[s, tt]).map_err(runtime)?;
                    let rel = if want.abs() > 0.0 {
                        (v - want).abs() / want.abs()
                    } else {
                        v.abs()
                    };
                    worst_rel = worst_rel.max(rel);
                    if rel > *rel_tol {
                        ok = false;
                    }
                    row.insert("reference".into(), json!(want));
                    row.insert("rel_error".into(), json!(rel));
                }
                rows.push(serde_json::Value::Object(row));
            }
            let outcome = if ok {
                TaskOutcome::Passed
            } else {
                TaskOutcome::ViolationsFound
            };
            Ok((
                outcome,
                json!({"values": rows, "worst_rel_error": worst_rel}),
            ))
        }
        KlOperation::SmallGain {
            sigma1,
            sigma2,
            eval_at,
            reference,
            tol,
        } => {
            let s1 = sigma1.build()?;
            let s2 = sigma2.build()?;
            let range = eval_at.iter().copied().fold(10.0f64, f64::max);
            let lambda = crate::converse::small_gain_lambda(
                &s1,
                &s2,
                &ClassCheck::with_range(range),
            )
            .map_err(runtime)?;
            let reference = match reference {
                Some(r) => Some(Expr::parse(r, &["s"]).map_err(runtime)?),
                None => None,
            };
            let mut rows = Vec::new();
            let mut ok = true;
            for &s in eval_at {
                let v = lambda.eval(s);
                let mut row = serde_json::Map::new();
                row.insert("s".into(), json!(s));
                row.insert("lambda".into(), json!(v));
                if let Some(r) = &reference {
                    let want = r.eval(&[s]).map_err(runtime)?;
                    let err = (v - want).abs();
                    if err > *tol {
                        ok = false;
                    }
                    row.insert("reference".into(), json!(want));
                    row.insert("abs_error".into(), json!(err));
                }
                rows.push(serde_json::Value::Object(row));
            }
            let outcome = if ok {
                TaskOutcome::Passed
            } else {
                TaskOutcome::ViolationsFound
            };
            Ok((outcome, json!({"values": rows})))
        }
    }
}
