//! Output-stability notions as checkable estimate templates, trajectory
//! falsification, and empirical envelope fitting.
//!
//! Every notion is a per-sample inequality `|y(t)| ≤ rhs(...)` (or `|x(t)|`
//! for the bounded-state property). Falsification searches for a trajectory
//! violating the inequality; the absence of a witness is evidence, not
//! proof, and every report carries its budget and seed.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;
use thiserror::Error;

use crate::comparison::{
    ClassCheck, ComparisonError, FunctionClass, KLFunction, KlCheck, ScalarMonotone,
};
use crate::converse::small_gain_lambda;
use crate::system::{
    close_loop_robust, norm, simulate_with, ControlSystem, InputDomain, InputSignal, SimOptions,
    SimStatus, SystemError, Trajectory,
};

#[derive(Debug, Clone, Error)]
pub enum StabilityError {
    #[error("property spec for {notion:?} is missing the `{slot}` slot")]
    MissingSlot { notion: Notion, slot: &'static str },
    #[error("slack must be ≥ 1, got {0}")]
    BadSlack(f64),
    #[error(transparent)]
    System(#[from] SystemError),
    #[error(transparent)]
    Comparison(#[from] ComparisonError),
    #[error("trajectory does not start at the given initial state")]
    TrajectoryMismatch,
    #[error("{0}")]
    Invalid(String),
}

/// The stability notions the laboratory can express.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, serde::Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Notion {
    /// Output bounded by a decay in `|ξ|` combined with a gain in `‖u‖`.
    Ios,
    /// Overshoot measured from the initial output magnitude.
    Sios,
    /// State-independent version: decay also depends only on `|h(ξ)|`.
    Siios,
    /// Output stability of the robust closed loop `ẋ = f(x, dλ(|y|))`.
    Ros,
    /// Uniformly bounded input, bounded state.
    Ubibs,
    /// Uniform output stability over unit-ball disturbances.
    Uos,
    /// Uniform output-Lagrange bound `|y(t)| ≤ σ(|h(ξ)|)`.
    OlUniform,
    /// Uniform state-independent decay `|y(t)| ≤ β(|h(ξ)|, t)`.
    SiiosUniform,
}

/// How the decay and gain terms combine on the right-hand side.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, serde::Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum CombinationMode {
    /// `max{a, b}` — the default, matching the bracketed max estimates.
    #[default]
    Max,
    /// `a + b` — interchangeable with max-form up to rescaling.
    Sum,
}

impl CombinationMode {
    fn combine(self, a: f64, b: f64) -> f64 {
        match self {
            CombinationMode::Max => a.max(b),
            CombinationMode::Sum => a + b,
        }
    }
}

/// A candidate estimate for one notion: which comparison functions fill the
/// slots, the combination mode, and the slack factor a violation must beat.
#[derive(Debug, Clone)]
pub struct PropertySpec {
    pub notion: Notion,
    pub beta: Option<KLFunction>,
    pub gamma: Option<ScalarMonotone>,
    pub sigma: Option<ScalarMonotone>,
    pub sigma1: Option<ScalarMonotone>,
    pub sigma2: Option<ScalarMonotone>,
    /// Feedback radius for the robust closed loop (ROS only).
    pub lambda: Option<ScalarMonotone>,
    pub mode: CombinationMode,
    pub slack: f64,
}

impl PropertySpec {
    pub fn new(notion: Notion) -> PropertySpec {
        PropertySpec {
            notion,
            beta: None,
            gamma: None,
            sigma: None,
            sigma1: None,
            sigma2: None,
            lambda: None,
            mode: CombinationMode::Max,
            slack: 1.0,
        }
    }

    pub fn with_beta(mut self, beta: KLFunction) -> Self {
        self.beta = Some(beta);
        self
    }

    pub fn with_gamma(mut self, gamma: ScalarMonotone) -> Self {
        self.gamma = Some(gamma);
        self
    }

    pub fn with_sigma(mut self, sigma: ScalarMonotone) -> Self {
        self.sigma = Some(sigma);
        self
    }

    pub fn with_lambda(mut self, lambda: ScalarMonotone) -> Self {
        self.lambda = Some(lambda);
        self
    }

    pub fn with_mode(mut self, mode: CombinationMode) -> Self {
        self.mode = mode;
        self
    }

    pub fn with_slack(mut self, slack: f64) -> Self {
        self.slack = slack;
        self
    }

    /// Checks that every slot the notion requires is filled.
    pub fn validate(&self) -> Result<(), StabilityError> {
        if !(self.slack >= 1.0) {
            return Err(StabilityError::BadSlack(self.slack));
        }
        let need = |ok: bool, slot: &'static str| {
            if ok {
                Ok(())
            } else {
                Err(StabilityError::MissingSlot {
                    notion: self.notion,
                    slot,
                })
            }
        };
        match self.notion {
            Notion::Ios | Notion::Siios => {
                need(self.beta.is_some(), "beta")?;
                need(self.gamma.is_some(), "gamma")?;
            }
            Notion::Sios => {
                need(self.beta.is_some() || self.sigma1.is_some(), "beta|sigma1")?;
                need(self.gamma.is_some() || self.sigma2.is_some(), "gamma|sigma2")?;
            }
            Notion::Ros => {
                need(self.beta.is_some(), "beta")?;
                need(self.lambda.is_some(), "lambda")?;
            }
            Notion::Ubibs => need(self.sigma.is_some(), "sigma")?,
            Notion::Uos => need(self.beta.is_some(), "beta")?,
            Notion::OlUniform => need(self.sigma.is_some(), "sigma")?,
            Notion::SiiosUniform => need(self.beta.is_some(), "beta")?,
        }
        Ok(())
    }

    /// The estimate right-hand side at elapsed time `t`.
    fn rhs(&self, xi_norm: f64, h_xi_norm: f64, t: f64, u_norm: f64) -> f64 {
        match self.notion {
            Notion::Ios => self.mode.combine(
                self.beta.as_ref().unwrap().eval(xi_norm, t),
                self.gamma.as_ref().unwrap().eval(u_norm),
            ),
            Notion::Sios => {
                let a = match (&self.beta, &self.sigma1) {
                    (Some(b), _) => b.eval(h_xi_norm, t),
                    (None, Some(s1)) => s1.eval(h_xi_norm),
                    (None, None) => unreachable!("validated"),
                };
                let b = match (&self.gamma, &self.sigma2) {
                    (Some(g), _) => g.eval(u_norm),
                    (None, Some(s2)) => s2.eval(u_norm),
                    (None, None) => unreachable!("validated"),
                };
                self.mode.combine(a, b)
            }
            Notion::Siios => self.mode.combine(
                self.beta.as_ref().unwrap().eval(h_xi_norm, t),
                self.gamma.as_ref().unwrap().eval(u_norm),
            ),
            Notion::Ros | Notion::Uos => self.beta.as_ref().unwrap().eval(xi_norm, t),
            Notion::Ubibs => {
                let s = self.sigma.as_ref().unwrap();
                self.mode.combine(s.eval(xi_norm), s.eval(u_norm))
            }
            Notion::OlUniform => self.sigma.as_ref().unwrap().eval(h_xi_norm),
            Notion::SiiosUniform => self.beta.as_ref().unwrap().eval(h_xi_norm, t),
        }
    }

    /// Whether the left-hand side is the state norm rather than the output.
    fn lhs_is_state(&self) -> bool {
        self.notion == Notion::Ubibs
    }

    /// Whether the notion quantifies over unit-ball disturbances.
    fn unit_ball_inputs(&self) -> bool {
        matches!(
            self.notion,
            Notion::Ros | Notion::Uos | Notion::OlUniform | Notion::SiiosUniform
        )
    }
}

/// One per-sample comparison of the estimate.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct MarginSample {
    pub t: f64,
    pub lhs: f64,
    pub rhs: f64,
    /// `slack·rhs − lhs`; negative means violated.
    pub margin: f64,
}

/// Evaluates the estimate along a trajectory produced from `xi`.
pub fn evaluate_estimate(
    spec: &PropertySpec,
    traj: &Trajectory,
    xi: &[f64],
) -> Result<Vec<MarginSample>, StabilityError> {
    spec.validate()?;
    let x0 = traj
        .states
        .first()
        .ok_or_else(|| StabilityError::Invalid("empty trajectory".into()))?;
    if x0.len() != xi.len()
        || x0
            .iter()
            .zip(xi)
            .any(|(a, b)| (a - b).abs() > 1e-9 * b.abs().max(1.0))
    {
        return Err(StabilityError::TrajectoryMismatch);
    }
    let xi_norm = norm(xi);
    let h_xi_norm = norm(&traj.outputs[0]);
    let u_norm = traj.input.sup_norm();
    Ok(traj
        .times
        .iter()
        .enumerate()
        .map(|(k, &t)| {
            let lhs = if spec.lhs_is_state() {
                norm(&traj.states[k])
            } else {
                norm(&traj.outputs[k])
            };
            let rhs = spec.rhs(xi_norm, h_xi_norm, t, u_norm);
            MarginSample {
                t,
                lhs,
                rhs,
                margin: spec.slack * rhs - lhs,
            }
        })
        .collect())
}

// ---------------------------------------------------------------------------
// Falsification
// ---------------------------------------------------------------------------

/// Finite search budget for [`falsify`]. All randomness derives from `seed`.
#[derive(Debug, Clone, Serialize)]
pub struct SearchBudget {
    pub max_sims: usize,
    pub horizon: f64,
    /// Per-axis bounds for initial states.
    pub state_box: Vec<(f64, f64)>,
    /// Sup-norm bound for free-input signals (unit-ball systems use 1).
    pub input_bound: f64,
    /// Segments per random piecewise-constant signal.
    pub signal_segments: usize,
    pub seed: u64,
    pub rtol: f64,
    pub atol: f64,
    pub samples_per_sim: usize,
}

impl SearchBudget {
    pub fn new(state_box: Vec<(f64, f64)>, horizon: f64, max_sims: usize, seed: u64) -> Self {
        SearchBudget {
            max_sims,
            horizon,
            state_box,
            input_bound: 1.0,
            signal_segments: 4,
            seed,
            // tight enough that integration error stays far below the
            // violation threshold even for knife-edge estimates
            rtol: 1e-9,
            atol: 1e-12,
            samples_per_sim: 101,
        }
    }

    pub fn with_input_bound(mut self, b: f64) -> Self {
        self.input_bound = b;
        self
    }
}

#[derive(Debug, Clone, Serialize, PartialEq)]
pub enum WitnessKind {
    /// The estimate inequality failed at the recorded time.
    MarginViolation,
    /// The trajectory crossed the blow-up threshold (forward-completeness
    /// questions, reported distinctly).
    BlowUp,
}

#[derive(Debug, Clone, Serialize)]
pub struct Witness {
    pub xi: Vec<f64>,
    pub signal: InputSignal,
    pub time: f64,
    pub lhs: f64,
    pub rhs: f64,
    pub kind: WitnessKind,
}

#[derive(Debug, Clone, Serialize)]
pub enum FalsifyVerdict {
    NoViolationFound { min_margin: f64 },
    Violated(Witness),
}

impl FalsifyVerdict {
    pub fn is_violated(&self) -> bool {
        matches!(self, FalsifyVerdict::Violated(_))
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct FalsificationReport {
    pub verdict: FalsifyVerdict,
    pub sims_used: usize,
    pub seed: u64,
    /// Blow-ups observed while searching a notion that does not treat them
    /// as violations.
    pub blowups_seen: usize,
}

/// A reproducible violation must beat the slack by `1e-9` relative to the
/// estimate's scale.
fn violation_threshold(rhs: f64) -> f64 {
    1e-9 * rhs.abs().max(1.0)
}

struct Candidate {
    xi: Vec<f64>,
    signal: InputSignal,
}

/// Budgeted search for a trajectory violating the estimate.
///
/// Layered: a deterministic corner/axis sweep, Latin-hypercube random
/// states with random piecewise-constant signals, then coordinate-wise
/// refinement around the worst margin seen. Deterministic given the seed
/// (results are independent of how candidate batches are scheduled).
pub fn falsify(
    spec: &PropertySpec,
    sys: &ControlSystem,
    budget: &SearchBudget,
) -> Result<FalsificationReport, StabilityError> {
    spec.validate()?;
    if budget.state_box.len() != sys.state_dim() {
        return Err(StabilityError::Invalid(format!(
            "state box has {} axes for state dimension {}",
            budget.state_box.len(),
            sys.state_dim()
        )));
    }

    // ROS closes the loop with the candidate's feedback radius.
    let closed;
    let sys = if spec.notion == Notion::Ros {
        closed = close_loop_robust(sys, spec.lambda.as_ref().unwrap())?;
        &closed
    } else {
        sys
    };

    let unit_ball = sys.input_domain() == InputDomain::UnitBall;
    // A uniform notion on a free-input system has no disturbance class to
    // quantify over; its estimate concerns the undriven response.
    let zero_input_only = spec.unit_ball_inputs() && !unit_ball;
    let input_bound = if unit_ball { 1.0 } else { budget.input_bound };
    let m = sys.input_dim();
    let horizon = budget.horizon;
    let mut rng = ChaCha8Rng::seed_from_u64(budget.seed);

    // Layer 1: deterministic corner/axis sweep.
    let mut candidates: Vec<Candidate> = Vec::new();
    let corner_states = corner_and_axis_states(&budget.state_box);
    let sweep_signals = if zero_input_only {
        vec![InputSignal::zero(m, horizon)]
    } else {
        sweep_signals(m, input_bound, horizon, unit_ball)
    };
    for xi in &corner_states {
        for sig in &sweep_signals {
            candidates.push(Candidate {
                xi: xi.clone(),
                signal: sig.clone(),
            });
        }
    }

    // Layer 2: Latin-hypercube states, random signals.
    let remaining = budget.max_sims.saturating_sub(candidates.len());
    let random_count = remaining.saturating_sub(remaining / 4); // leave room for refinement
    let lhs_states = latin_hypercube(&budget.state_box, random_count, &mut rng);
    for xi in lhs_states {
        let signal = if zero_input_only {
            InputSignal::zero(m, horizon)
        } else {
            random_signal(
                m,
                input_bound,
                horizon,
                budget.signal_segments,
                unit_ball,
                &mut rng,
            )
        };
        candidates.push(Candidate { xi, signal });
    }
    candidates.truncate(budget.max_sims);

    let sim_opts = SimOptions {
        samples: budget.samples_per_sim,
        ..Default::default()
    };
    let run = |cand: &Candidate| -> Result<(f64, f64, f64, f64, bool), StabilityError> {
        // returns (min margin, time, lhs, rhs, blown_up)
        let traj = simulate_with(
            sys,
            &cand.xi,
            &cand.signal,
            horizon,
            budget.rtol,
            budget.atol,
            &sim_opts,
        )?;
        let blown = matches!(traj.status, SimStatus::BlewUp(_));
        let margins = evaluate_estimate(spec, &traj, &cand.xi)?;
        let worst = margins
            .iter()
            .min_by(|a, b| a.margin.partial_cmp(&b.margin).unwrap())
            .copied()
            .unwrap_or(MarginSample {
                t: 0.0,
                lhs: 0.0,
                rhs: 0.0,
                margin: f64::INFINITY,
            });
        Ok((worst.margin, worst.t, worst.lhs, worst.rhs, blown))
    };

    let mut sims_used = 0usize;
    let mut blowups = 0usize;
    let mut best: Option<(f64, usize)> = None; // (margin, candidate index)

    // Evaluate in order-stable parallel chunks; the first violation in
    // candidate order wins regardless of scheduling.
    let mut found: Option<(usize, (f64, f64, f64, f64, bool))> = None;
    'chunks: for (chunk_idx, chunk) in candidates.chunks(64).enumerate() {
        let batch: Vec<Result<(f64, f64, f64, f64, bool), StabilityError>> =
            chunk.par_iter().map(run).collect();
        for (off, r) in batch.into_iter().enumerate() {
            let i = chunk_idx * 64 + off;
            let r = r?;
            sims_used += 1;
            if r.4 {
                blowups += 1;
                if spec.notion == Notion::Ubibs {
                    found = Some((i, r));
                    break 'chunks;
                }
            }
            if r.0 < -violation_threshold(r.3) {
                found = Some((i, r));
                break 'chunks;
            }
            if best.map(|(mb, _)| r.0 < mb).unwrap_or(true) {
                best = Some((r.0, i));
            }
        }
    }

    if let Some((i, r)) = found {
        let r = &r;
        let cand = &candidates[i];
        let kind = if r.4 && spec.notion == Notion::Ubibs && r.0 >= -violation_threshold(r.3) {
            WitnessKind::BlowUp
        } else {
            WitnessKind::MarginViolation
        };
        let witness = confirm_witness(spec, sys, budget, cand, r.1, kind)?;
        return Ok(FalsificationReport {
            verdict: FalsifyVerdict::Violated(witness),
            sims_used,
            seed: budget.seed,
            blowups_seen: blowups,
        });
    }

    // Layer 3: coordinate-wise refinement around the worst margin.
    let mut min_margin = best.map(|(mb, _)| mb).unwrap_or(f64::INFINITY);
    if let Some((_, idx)) = best {
        let mut center = candidates[idx].xi.clone();
        let mut center_sig = candidates[idx].signal.clone();
        let mut radius: Vec<f64> = budget
            .state_box
            .iter()
            .map(|&(lo, hi)| 0.25 * (hi - lo))
            .collect();
        'refine: while sims_used < budget.max_sims {
            let mut improved = false;
            for axis in 0..center.len() {
                for dir in [-1.0, 1.0] {
                    if sims_used >= budget.max_sims {
                        break 'refine;
                    }
                    let mut xi = center.clone();
                    xi[axis] = (xi[axis] + dir * radius[axis])
                        .clamp(budget.state_box[axis].0, budget.state_box[axis].1);
                    let cand = Candidate {
                        xi,
                        signal: center_sig.clone(),
                    };
                    let r = run(&cand)?;
                    sims_used += 1;
                    if r.4 {
                        blowups += 1;
                    }
                    let violated = r.0 < -violation_threshold(r.3)
                        || (r.4 && spec.notion == Notion::Ubibs);
                    if violated {
                        let kind = if r.0 < -violation_threshold(r.3) {
                            WitnessKind::MarginViolation
                        } else {
                            WitnessKind::BlowUp
                        };
                        let witness = confirm_witness(spec, sys, budget, &cand, r.1, kind)?;
                        return Ok(FalsificationReport {
                            verdict: FalsifyVerdict::Violated(witness),
                            sims_used,
                            seed: budget.seed,
                            blowups_seen: blowups,
                        });
                    }
                    if r.0 < min_margin {
                        min_margin = r.0;
                        center = cand.xi;
                        center_sig = cand.signal;
                        improved = true;
                    }
                }
            }
            if !improved {
                for r in radius.iter_mut() {
                    *r *= 0.5;
                }
                if radius.iter().all(|&r| r < 1e-9) {
                    break;
                }
            }
        }
    }

    Ok(FalsificationReport {
        verdict: FalsifyVerdict::NoViolationFound { min_margin },
        sims_used,
        seed: budget.seed,
        blowups_seen: blowups,
    })
}

/// Re-simulates the candidate and locates the violation before reporting it;
/// a witness that does not reproduce is a tooling bug.
fn confirm_witness(
    spec: &PropertySpec,
    sys: &ControlSystem,
    budget: &SearchBudget,
    cand: &Candidate,
    _time_hint: f64,
    kind: WitnessKind,
) -> Result<Witness, StabilityError> {
    let sim_opts = SimOptions {
        samples: budget.samples_per_sim,
        ..Default::default()
    };
    let traj = simulate_with(
        sys,
        &cand.xi,
        &cand.signal,
        budget.horizon,
        budget.rtol,
        budget.atol,
        &sim_opts,
    )?;
    if kind == WitnessKind::BlowUp {
        let t = match traj.status {
            SimStatus::BlewUp(t) => t,
            _ => {
                return Err(StabilityError::Invalid(
                    "blow-up witness did not reproduce".into(),
                ));
            }
        };
        return Ok(Witness {
            xi: cand.xi.clone(),
            signal: cand.signal.clone(),
            time: t,
            lhs: traj.sup_state_norm(),
            rhs: f64::INFINITY,
            kind,
        });
    }
    let margins = evaluate_estimate(spec, &traj, &cand.xi)?;
    let worst = margins
        .iter()
        .min_by(|a, b| a.margin.partial_cmp(&b.margin).unwrap())
        .copied()
        .ok_or_else(|| StabilityError::Invalid("empty margin series".into()))?;
    if worst.lhs <= spec.slack * worst.rhs + violation_threshold(worst.rhs) {
        return Err(StabilityError::Invalid(
            "violation did not reproduce on re-simulation".into(),
        ));
    }
    Ok(Witness {
        xi: cand.xi.clone(),
        signal: cand.signal.clone(),
        time: worst.t,
        lhs: worst.lhs,
        rhs: worst.rhs,
        kind,
    })
}

fn corner_and_axis_states(state_box: &[(f64, f64)]) -> Vec<Vec<f64>> {
    let n = state_box.len();
    let mut out: Vec<Vec<f64>> = vec![vec![0.0; n]];
    // axis extremes and midpoints
    for axis in 0..n {
        for &v in &[state_box[axis].0, state_box[axis].1, 0.5 * state_box[axis].1] {
            let mut x = vec![0.0; n];
            x[axis] = v;
            out.push(x);
        }
    }
    // full corners for small n
    if n <= 4 {
        for mask in 0..(1usize << n) {
            let x: Vec<f64> = (0..n)
                .map(|a| {
                    if mask & (1 << a) != 0 {
                        state_box[a].1
                    } else {
                        state_box[a].0
                    }
                })
                .collect();
            out.push(x);
        }
    }
    out.dedup();
    out
}

fn sweep_signals(m: usize, bound: f64, horizon: f64, unit_ball: bool) -> Vec<InputSignal> {
    let mut out = vec![InputSignal::zero(m, horizon)];
    let scale = if unit_ball && m > 1 {
        bound / (m as f64).sqrt()
    } else {
        bound
    };
    for axis in 0..m {
        for sign in [1.0, -1.0] {
            let mut v = vec![0.0; m];
            v[axis] = sign * scale;
            out.push(InputSignal::constant(v.clone(), horizon));
            for x in v.iter_mut() {
                *x *= 0.5;
            }
            out.push(InputSignal::constant(v, horizon));
        }
    }
    if m >= 1 {
        // one alternating square wave per sign
        for sign in [1.0, -1.0] {
            let k = 4;
            let bps: Vec<f64> = (0..=k).map(|i| horizon * i as f64 / k as f64).collect();
            let vals: Vec<Vec<f64>> = (0..k)
                .map(|i| {
                    let s = if i % 2 == 0 { sign } else { -sign };
                    let mut v = vec![0.0; m];
                    v[0] = s * scale;
                    v
                })
                .collect();
            if let Ok(sig) = InputSignal::new(bps, vals) {
                out.push(sig);
            }
        }
    }
    out
}

fn latin_hypercube(
    state_box: &[(f64, f64)],
    count: usize,
    rng: &mut ChaCha8Rng,
) -> Vec<Vec<f64>> {
    if count == 0 {
        return Vec::new();
    }
    let n = state_box.len();
    let mut strata: Vec<Vec<usize>> = (0..n)
        .map(|_| {
            let mut p: Vec<usize> = (0..count).collect();
            for i in (1..p.len()).rev() {
                let j = rng.gen_range(0..=i);
                p.swap(i, j);
            }
            p
        })
        .collect();
    let strata = std::mem::take(&mut strata);
    (0..count)
        .map(|k| {
            (0..n)
                .map(|a| {
                    let (lo, hi) = state_box[a];
                    let stratum = strata[a][k] as f64;
                    let u: f64 = rng.gen_range(0.0..1.0);
                    lo + (hi - lo) * (stratum + u) / count as f64
                })
                .collect()
        })
        .collect()
}

fn random_signal(
    m: usize,
    bound: f64,
    horizon: f64,
    segments: usize,
    unit_ball: bool,
    rng: &mut ChaCha8Rng,
) -> InputSignal {
    let k = segments.max(1);
    let bps: Vec<f64> = (0..=k).map(|i| horizon * i as f64 / k as f64).collect();
    let vals: Vec<Vec<f64>> = (0..k)
        .map(|_| {
            if rng.gen_bool(0.35) {
                // extreme value: sign corner scaled into the ball
                let scale = if unit_ball && m > 1 {
                    bound / (m as f64).sqrt()
                } else {
                    bound
                };
                (0..m)
                    .map(|_| if rng.gen_bool(0.5) { scale } else { -scale })
                    .collect()
            } else {
                let v: Vec<f64> = (0..m).map(|_| rng.gen_range(-bound..=bound)).collect();
                if unit_ball {
                    let nv = norm(&v);
                    if nv > 1.0 {
                        return v.iter().map(|x| x / nv).collect();
                    }
                }
                v
            }
        })
        .collect();
    InputSignal::new(bps, vals).expect("generated signal is valid")
}

// ---------------------------------------------------------------------------
// Envelope fitting
// ---------------------------------------------------------------------------

/// Sampling plan for [`fit_overshoot`].
#[derive(Debug, Clone)]
pub struct FitPlan {
    /// Conditioning levels for the initial magnitude (ascending, positive).
    pub levels: Vec<f64>,
    pub states_per_level: usize,
    pub signals_per_state: usize,
    pub horizon: f64,
    pub t_points: usize,
    /// Box from which states are drawn when conditioning on the output.
    pub state_box: Vec<(f64, f64)>,
    pub input_bound: f64,
    pub seed: u64,
    pub rtol: f64,
    /// Headroom multiplier on fitted envelopes.
    pub inflation: f64,
    /// Feedback radius when fitting ROS.
    pub lambda: Option<ScalarMonotone>,
    /// Tail/head decay ratio above which a KL fit is declared unfittable.
    pub decay_requirement: f64,
}

impl FitPlan {
    pub fn new(levels: Vec<f64>, state_box: Vec<(f64, f64)>, horizon: f64, seed: u64) -> FitPlan {
        FitPlan {
            levels,
            states_per_level: 12,
            signals_per_state: 4,
            horizon,
            t_points: 33,
            state_box,
            input_bound: 1.0,
            seed,
            rtol: 1e-6,
            inflation: 1.25,
            lambda: None,
            decay_requirement: 0.5,
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub enum FitOutcome {
    Fitted,
    /// All sampled responses were identically zero.
    DegenerateZero,
    /// The notion could not be fitted (no decay within the horizon, or
    /// blow-up while sampling); the reason is recorded.
    Unfittable { reason: String },
}

/// Result of an envelope fit: raw sampled envelopes plus rectified
/// comparison functions and an assembled property spec when fitting
/// succeeded.
#[derive(Debug, Clone)]
pub struct FitResult {
    pub notion: Notion,
    pub outcome: FitOutcome,
    /// `(level, sup)` envelope for σ-type fits.
    pub raw_envelope: Vec<(f64, f64)>,
    pub sigma: Option<ScalarMonotone>,
    pub beta: Option<KLFunction>,
    pub gamma: Option<ScalarMonotone>,
    pub spec: Option<PropertySpec>,
}

const STRICTNESS_EPS: f64 = 1e-6;

/// Fits tabulated monotone envelopes for the notion from trajectory clouds.
///
/// For UBIBS the envelope is `σ(s) = sup{ sup_t |x(t)| : max(|ξ|, ‖u‖) ≤ s }`;
/// the output notions envelope `sup_t |y(t)|` (σ-fits) or the tail supremum
/// `sup_{t' ≥ t} |y(t')|` (β-fits) conditioned on the initial state or
/// initial output magnitude. Envelopes are inflated by the plan's headroom
/// so the assembled spec survives falsification on an independent seed.
pub fn fit_overshoot(
    sys: &ControlSystem,
    notion: Notion,
    plan: &FitPlan,
) -> Result<FitResult, StabilityError> {
    if plan.levels.is_empty() || plan.levels.windows(2).any(|w| w[1] <= w[0]) {
        return Err(StabilityError::Invalid(
            "fit levels must be ascending and nonempty".into(),
        ));
    }
    let closed;
    let sys = if notion == Notion::Ros {
        let lambda = plan.lambda.as_ref().ok_or(StabilityError::MissingSlot {
            notion,
            slot: "lambda",
        })?;
        closed = close_loop_robust(sys, lambda)?;
        &closed
    } else {
        sys
    };
    let unit_ball = sys.input_domain() == InputDomain::UnitBall;
    // Uniform notions on a free-input system fit the undriven response.
    let zero_input_only = !unit_ball
        && matches!(notion, Notion::Uos | Notion::OlUniform | Notion::SiiosUniform);
    // Separately fitted decay and gain slots combine in max form, which
    // costs a factor of two (a + b ≤ 2·max{a, b}).
    let mixing = if matches!(notion, Notion::Ios | Notion::Sios | Notion::Siios) {
        2.0
    } else {
        1.0
    };
    let inflation = plan.inflation * mixing;

    let mut rng = ChaCha8Rng::seed_from_u64(plan.seed);
    let m = sys.input_dim();
    let t_grid: Vec<f64> = (0..plan.t_points)
        .map(|j| plan.horizon * j as f64 / (plan.t_points - 1) as f64)
        .collect();

    // Conditioning mode per notion.
    let condition_on_output = matches!(
        notion,
        Notion::Sios | Notion::Siios | Notion::OlUniform | Notion::SiiosUniform
    );
    let lhs_is_state = notion == Notion::Ubibs;

    let mut raw_envelope: Vec<(f64, f64)> = Vec::new();
    let mut beta_rows: Vec<Vec<f64>> = Vec::new();
    let sim_opts = SimOptions::default();

    for &level in &plan.levels {
        let states = states_at_level(sys, level, condition_on_output, plan, &mut rng)?;
        let mut signals: Vec<InputSignal> = Vec::new();
        let input_bound = if unit_ball {
            1.0
        } else if notion == Notion::Ubibs {
            level
        } else {
            plan.input_bound
        };
        if zero_input_only || matches!(notion, Notion::Ios | Notion::Sios | Notion::Siios) {
            // decay slot fitted with zero input; the gain slot separately
            signals.push(InputSignal::zero(m, plan.horizon));
        } else {
            signals.push(InputSignal::zero(m, plan.horizon));
            signals.extend(sweep_signals(m, input_bound, plan.horizon, unit_ball));
            for _ in 0..plan.signals_per_state {
                signals.push(random_signal(
                    m,
                    input_bound,
                    plan.horizon,
                    4,
                    unit_ball,
                    &mut rng,
                ));
            }
        }

        let mut level_sup = 0.0f64;
        let mut tail_sup = vec![0.0f64; t_grid.len()];
        for xi in &states {
            for sig in &signals {
                let traj = simulate_with(
                    sys,
                    xi,
                    sig,
                    plan.horizon,
                    plan.rtol,
                    1e-9,
                    &sim_opts,
                )?;
                if matches!(traj.status, SimStatus::BlewUp(_)) {
                    return Ok(FitResult {
                        notion,
                        outcome: FitOutcome::Unfittable {
                            reason: format!(
                                "trajectory from {xi:?} blew up while sampling level {level}"
                            ),
                        },
                        raw_envelope,
                        sigma: None,
                        beta: None,
                        gamma: None,
                        spec: None,
                    });
                }
                let series: Vec<f64> = (0..traj.times.len())
                    .map(|k| {
                        if lhs_is_state {
                            norm(&traj.states[k])
                        } else {
                            norm(&traj.outputs[k])
                        }
                    })
                    .collect();
                level_sup = level_sup.max(series.iter().copied().fold(0.0, f64::max));
                // tail suprema resampled on the fit grid
                let mut suffix = vec![0.0f64; traj.times.len()];
                let mut acc: f64 = 0.0;
                for k in (0..traj.times.len()).rev() {
                    acc = acc.max(series[k]);
                    suffix[k] = acc;
                }
                for (j, &tj) in t_grid.iter().enumerate() {
                    // first trajectory sample at or after tj
                    let idx = traj.times.partition_point(|&t| t < tj);
                    if idx < suffix.len() {
                        tail_sup[j] = tail_sup[j].max(suffix[idx]);
                    }
                }
            }
        }
        raw_envelope.push((level, level_sup));
        beta_rows.push(tail_sup);
    }

    // Degenerate-zero detection.
    if raw_envelope.iter().all(|&(_, v)| v <= 1e-12) {
        return Ok(FitResult {
            notion,
            outcome: FitOutcome::DegenerateZero,
            raw_envelope,
            sigma: None,
            beta: None,
            gamma: None,
            spec: None,
        });
    }

    // Monotone envelope over levels.
    let mut run = 0.0f64;
    for row in raw_envelope.iter_mut() {
        run = run.max(row.1);
        row.1 = run;
    }
    for j in 0..t_grid.len() {
        let mut run = 0.0f64;
        for row in beta_rows.iter_mut() {
            run = run.max(row[j]);
            row[j] = run;
        }
    }

    let fits_sigma = matches!(notion, Notion::Ubibs | Notion::OlUniform | Notion::Sios);
    let fits_beta = matches!(
        notion,
        Notion::Ios | Notion::Siios | Notion::Ros | Notion::Uos | Notion::SiiosUniform
    );
    let fits_gamma = matches!(notion, Notion::Ios | Notion::Sios | Notion::Siios);

    let class_check = ClassCheck::with_range(*plan.levels.last().unwrap());
    let sigma = if fits_sigma {
        let mut pts = vec![(0.0, 0.0)];
        pts.extend(
            raw_envelope
                .iter()
                .map(|&(s, v)| (s, inflation * v + STRICTNESS_EPS * s)),
        );
        Some(
            ScalarMonotone::from_table(pts, FunctionClass::KInf, &class_check)
                .map_err(StabilityError::Comparison)?,
        )
    } else {
        None
    };

    let beta = if fits_beta {
        // Decay requirement: the tail must come down within the horizon.
        for (row, &(level, _)) in beta_rows.iter().zip(&raw_envelope) {
            let head = row[0];
            let tail = row[row.len() - 1];
            if head > 1e-12 && tail > plan.decay_requirement * head {
                return Ok(FitResult {
                    notion,
                    outcome: FitOutcome::Unfittable {
                        reason: format!(
                            "no usable decay at level {level}: tail {tail} vs head {head} over horizon {}",
                            plan.horizon
                        ),
                    },
                    raw_envelope,
                    sigma,
                    beta: None,
                    gamma: None,
                    spec: None,
                });
            }
        }
        let mut s_axis = vec![0.0];
        s_axis.extend(plan.levels.iter().copied());
        let mut values = vec![vec![0.0; t_grid.len()]];
        for (i, row) in beta_rows.iter().enumerate() {
            let level = plan.levels[i];
            values.push(
                row.iter()
                    .map(|&v| inflation * v + STRICTNESS_EPS * level)
                    .collect(),
            );
        }
        let check = KlCheck {
            s_max: *plan.levels.last().unwrap(),
            t_max: plan.horizon,
            decay_factor: 1.0, // decay is enforced separately above
            ..Default::default()
        };
        Some(
            KLFunction::from_grid(
                s_axis,
                t_grid.clone(),
                values,
                format!("fitted β[{}]", sys.name()),
                &check,
            )
            .map_err(StabilityError::Comparison)?,
        )
    } else {
        None
    };

    let gamma = if fits_gamma {
        let mut pts = vec![(0.0, 0.0)];
        for &level in &plan.levels {
            let mut sup = 0.0f64;
            let mut signals = sweep_signals(m, level, plan.horizon, false);
            for _ in 0..plan.signals_per_state {
                signals.push(random_signal(m, level, plan.horizon, 4, false, &mut rng));
            }
            let zero_state = vec![0.0; sys.state_dim()];
            for sig in &signals {
                let traj = simulate_with(
                    sys,
                    &zero_state,
                    sig,
                    plan.horizon,
                    plan.rtol,
                    1e-9,
                    &sim_opts,
                )?;
                if matches!(traj.status, SimStatus::BlewUp(_)) {
                    return Ok(FitResult {
                        notion,
                        outcome: FitOutcome::Unfittable {
                            reason: format!("gain sampling blew up at level {level}"),
                        },
                        raw_envelope,
                        sigma,
                        beta,
                        gamma: None,
                        spec: None,
                    });
                }
                sup = sup.max(traj.sup_output_norm());
            }
            pts.push((level, sup));
        }
        let mut run = 0.0f64;
        for p in pts.iter_mut().skip(1) {
            run = run.max(p.1);
            p.1 = run;
        }
        for p in pts.iter_mut() {
            p.1 = inflation * p.1 + STRICTNESS_EPS * p.0;
        }
        Some(
            ScalarMonotone::from_table(pts, FunctionClass::KInf, &class_check)
                .map_err(StabilityError::Comparison)?,
        )
    } else {
        None
    };

    let mut spec = PropertySpec::new(notion);
    spec.beta = beta.clone();
    spec.gamma = gamma.clone();
    spec.sigma = sigma.clone();
    spec.sigma1 = sigma.clone();
    spec.sigma2 = gamma.clone();
    spec.lambda = plan.lambda.clone();
    let spec = spec.validate().ok().map(|_| spec);

    Ok(FitResult {
        notion,
        outcome: FitOutcome::Fitted,
        raw_envelope,
        sigma,
        beta,
        gamma,
        spec,
    })
}

/// States with `|ξ| ≤ level` (state conditioning) or `|h(ξ)| ≤ level`
/// (output conditioning), including boundary-targeted points.
fn states_at_level(
    sys: &ControlSystem,
    level: f64,
    on_output: bool,
    plan: &FitPlan,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<Vec<f64>>, StabilityError> {
    let n = sys.state_dim();
    let mut out: Vec<Vec<f64>> = Vec::new();
    if !on_output {
        // axis extremes at the level radius plus random ball points
        for axis in 0..n {
            for sign in [1.0, -1.0] {
                let mut x = vec![0.0; n];
                x[axis] = sign * level;
                out.push(x);
            }
        }
        while out.len() < plan.states_per_level + 2 * n {
            let dir: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0f64)).collect();
            let len = norm(&dir);
            if len < 1e-6 {
                continue;
            }
            let radius = level * rng.gen_range(0.0f64..1.0).powf(1.0 / n as f64);
            out.push(dir.iter().map(|d| d / len * radius).collect());
        }
    } else {
        if plan.state_box.len() != n {
            return Err(StabilityError::Invalid(
                "output-conditioned fit needs a state box".into(),
            ));
        }
        // rejection sampling from the box, plus radially scaled boundary hits
        let mut tries = 0;
        while out.len() < plan.states_per_level && tries < 200 * plan.states_per_level {
            tries += 1;
            let x: Vec<f64> = plan
                .state_box
                .iter()
                .map(|&(lo, hi)| rng.gen_range(lo..hi))
                .collect();
            let hx = sys.output_norm(&x).map_err(StabilityError::Invalid)?;
            if hx <= level {
                out.push(x);
            } else {
                // scale down toward the origin to land near the level set
                let mut lo = 0.0;
                let mut hi = 1.0;
                for _ in 0..40 {
                    let mid = 0.5 * (lo + hi);
                    let xs: Vec<f64> = x.iter().map(|v| v * mid).collect();
                    let h = sys.output_norm(&xs).map_err(StabilityError::Invalid)?;
                    if h <= level * 0.999 {
                        lo = mid;
                    } else {
                        hi = mid;
                    }
                }
                out.push(x.iter().map(|v| v * lo).collect());
            }
        }
        if out.is_empty() {
            return Err(StabilityError::Invalid(format!(
                "could not sample states with output magnitude ≤ {level}"
            )));
        }
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Implication audit
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize)]
pub struct AuditRow {
    pub notion: Notion,
    pub fitted: bool,
    pub fit_note: Option<String>,
    pub verdict: Option<FalsifyVerdict>,
}

#[derive(Debug, Clone, Serialize)]
pub struct AuditReport {
    pub system: String,
    pub rows: Vec<AuditRow>,
    /// False when a stronger notion passed while a weaker one failed —
    /// a tooling bug or an under-budgeted search, never a property of the
    /// chain itself.
    pub consistent: bool,
    pub notes: Vec<String>,
}

/// Fits SIIOS, IOS, and ROS candidates for the system and checks the
/// implication chain: a SIIOS pass must co-occur with IOS and ROS passes
/// under the same budget.
pub fn implication_audit(
    sys: &ControlSystem,
    plan: &FitPlan,
    budget: &SearchBudget,
) -> Result<AuditReport, StabilityError> {
    let mut rows = Vec::new();
    let mut notes = Vec::new();

    let run_notion = |notion: Notion, plan: &FitPlan| -> Result<AuditRow, StabilityError> {
        let fit = fit_overshoot(sys, notion, plan)?;
        match (&fit.outcome, &fit.spec) {
            (FitOutcome::Fitted, Some(spec)) => {
                let spec = spec.clone().with_slack(1.1);
                let verdict = falsify(&spec, sys, budget)?;
                Ok(AuditRow {
                    notion,
                    fitted: true,
                    fit_note: None,
                    verdict: Some(verdict.verdict),
                })
            }
            (outcome, _) => Ok(AuditRow {
                notion,
                fitted: false,
                fit_note: Some(format!("{outcome:?}")),
                verdict: None,
            }),
        }
    };

    let siios = run_notion(Notion::Siios, plan)?;
    let ios_fit = fit_overshoot(sys, Notion::Ios, plan)?;
    let ios = match (&ios_fit.outcome, &ios_fit.spec) {
        (FitOutcome::Fitted, Some(spec)) => {
            let spec = spec.clone().with_slack(1.1);
            let verdict = falsify(&spec, sys, budget)?;
            AuditRow {
                notion: Notion::Ios,
                fitted: true,
                fit_note: None,
                verdict: Some(verdict.verdict),
            }
        }
        (outcome, _) => AuditRow {
            notion: Notion::Ios,
            fitted: false,
            fit_note: Some(format!("{outcome:?}")),
            verdict: None,
        },
    };

    // ROS loop radius from the fitted IOS pieces: σ₁ from the overshoot at
    // time zero rectified above the identity, σ₂ the fitted gain.
    let ros = if let (Some(beta), Some(gamma)) = (&ios_fit.beta, &ios_fit.gamma) {
        let beta = beta.clone();
        let check = ClassCheck::with_range(plan.levels.last().copied().unwrap_or(10.0));
        let sigma1 = ScalarMonotone::from_fn(
            "max(s, fitted overshoot)",
            move |s| s.max(beta.eval(s, 0.0)),
            FunctionClass::KInf,
            &check,
        )
        .map_err(StabilityError::Comparison)?;
        // tabulated copy: the loop radius is evaluated at every integrator
        // stage, and the nested inversions are far too slow there
        let tab_range = plan.levels.last().copied().unwrap_or(10.0) * 8.0;
        match small_gain_lambda(&sigma1, gamma, &check)
            .and_then(|l| l.tabulated_copy(tab_range, 2049))
        {
            Ok(lambda) => {
                let mut ros_plan = plan.clone();
                ros_plan.lambda = Some(lambda);
                run_notion(Notion::Ros, &ros_plan)?
            }
            Err(e) => AuditRow {
                notion: Notion::Ros,
                fitted: false,
                fit_note: Some(format!("loop radius construction failed: {e}")),
                verdict: None,
            },
        }
    } else {
        AuditRow {
            notion: Notion::Ros,
            fitted: false,
            fit_note: Some("no fitted IOS pieces for the loop radius".into()),
            verdict: None,
        }
    };

    let passed = |row: &AuditRow| {
        matches!(
            row.verdict,
            Some(FalsifyVerdict::NoViolationFound { .. })
        )
    };
    let mut consistent = true;
    if passed(&siios) {
        if !passed(&ios) {
            consistent = false;
            notes.push("SIIOS passed but IOS did not".into());
        }
        if !passed(&ros) {
            consistent = false;
            notes.push("SIIOS passed but ROS did not".into());
        }
    }

    rows.push(siios);
    rows.push(ios);
    rows.push(ros);

    Ok(AuditReport {
        system: sys.name().to_string(),
        rows,
        consistent,
        notes,
    })
}
