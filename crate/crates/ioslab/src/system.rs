//! Control systems `ẋ = f(x, u), y = h(x)`, piecewise-constant input
//! signals, the robust closed-loop transform `ẋ = f(x, d·λ(|y|))`, and the
//! adaptive trajectory engine.

use std::fmt;
use std::io::{self, Write};
use std::sync::Arc;

use thiserror::Error;

use crate::comparison::ScalarMonotone;
use crate::expr::{Expr, ExprError};
use crate::ode::{self, OdeOptions, OdeStatus};

pub use crate::ode::OdeStats as SimStats;

/// Tolerance for the equilibrium conditions `f(0,0) = 0`, `h(0) = 0`.
const EQUILIBRIUM_TOL: f64 = 1e-12;

/// State-norm threshold at which a trajectory is declared blown up.
pub const BLOWUP_THRESHOLD: f64 = 1e8;

#[derive(Debug, Clone, Error)]
pub enum SystemError {
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("equilibrium violated: {what} = {value} at the origin")]
    Equilibrium { what: String, value: f64 },
    #[error("invalid input signal: {0}")]
    InvalidSignal(String),
    #[error("input value {value:?} outside the unit ball required by `{system}`")]
    InputOutsideDomain { system: String, value: Vec<f64> },
    #[error(transparent)]
    Expr(#[from] ExprError),
    #[error("{0}")]
    Invalid(String),
}

/// Input-constraint descriptor.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum InputDomain {
    /// All of ℝᵐ.
    #[serde(rename = "free")]
    Free,
    /// The closed unit ball (disturbance systems).
    #[serde(rename = "unit_ball")]
    UnitBall,
}

#[derive(Clone)]
enum Dynamics {
    /// Explicit formulas over the state and input variables.
    Explicit(Vec<Expr>),
    /// `g(x, d) = f_base(x, d·λ(|h(x)|))` with the unit-ball input domain.
    RobustLoop {
        base: Arc<ControlSystem>,
        lambda: ScalarMonotone,
    },
}

/// A finite-dimensional control system with formula-defined dynamics.
#[derive(Clone)]
pub struct ControlSystem {
    name: String,
    state_vars: Vec<String>,
    input_vars: Vec<String>,
    dynamics: Dynamics,
    h: Vec<Expr>,
    input_domain: InputDomain,
}

impl fmt::Debug for ControlSystem {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("ControlSystem")
            .field("name", &self.name)
            .field("n", &self.state_dim())
            .field("m", &self.input_dim())
            .field("p", &self.output_dim())
            .field("input_domain", &self.input_domain)
            .finish()
    }
}

impl ControlSystem {
    /// Builds a system from formula strings. `f` entries may use the state
    /// and input variables; `h` entries only the state variables.
    pub fn from_formulas(
        name: impl Into<String>,
        state_vars: &[&str],
        input_vars: &[&str],
        f: &[&str],
        h: &[&str],
        input_domain: InputDomain,
    ) -> Result<ControlSystem, SystemError> {
        let name = name.into();
        if f.len() != state_vars.len() {
            return Err(SystemError::Dimension(format!(
                "system `{name}`: {} state variables but {} f-components",
                state_vars.len(),
                f.len()
            )));
        }
        let mut all_vars: Vec<&str> = state_vars.to_vec();
        all_vars.extend_from_slice(input_vars);
        let f_exprs = f
            .iter()
            .map(|s| Expr::parse(s, &all_vars))
            .collect::<Result<Vec<_>, _>>()?;
        let h_exprs = h
            .iter()
            .map(|s| Expr::parse(s, state_vars))
            .collect::<Result<Vec<_>, _>>()?;
        ControlSystem::new(
            name,
            state_vars.iter().map(|s| s.to_string()).collect(),
            input_vars.iter().map(|s| s.to_string()).collect(),
            f_exprs,
            h_exprs,
            input_domain,
        )
    }

    pub fn new(
        name: String,
        state_vars: Vec<String>,
        input_vars: Vec<String>,
        f: Vec<Expr>,
        h: Vec<Expr>,
        input_domain: InputDomain,
    ) -> Result<ControlSystem, SystemError> {
        if h.is_empty() {
            return Err(SystemError::Dimension(format!(
                "system `{name}` has no output map"
            )));
        }
        let sys = ControlSystem {
            name,
            state_vars,
            input_vars,
            dynamics: Dynamics::Explicit(f),
            h,
            input_domain,
        };
        sys.check_equilibrium()?;
        Ok(sys)
    }

    fn check_equilibrium(&self) -> Result<(), SystemError> {
        let zero_x = vec![0.0; self.state_dim()];
        let zero_u = vec![0.0; self.input_dim()];
        let mut out = vec![0.0; self.state_dim()];
        self.eval_f(&zero_x, &zero_u, &mut out)
            .map_err(SystemError::Invalid)?;
        for v in &out {
            if v.abs() > EQUILIBRIUM_TOL {
                return Err(SystemError::Equilibrium {
                    what: "f(0,0)".into(),
                    value: *v,
                });
            }
        }
        let y = self.eval_h(&zero_x).map_err(SystemError::Invalid)?;
        for v in &y {
            if v.abs() > EQUILIBRIUM_TOL {
                return Err(SystemError::Equilibrium {
                    what: "h(0)".into(),
                    value: *v,
                });
            }
        }
        Ok(())
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn state_dim(&self) -> usize {
        self.state_vars.len()
    }

    pub fn input_dim(&self) -> usize {
        self.input_vars.len()
    }

    pub fn output_dim(&self) -> usize {
        self.h.len()
    }

    pub fn input_domain(&self) -> InputDomain {
        self.input_domain
    }

    pub fn state_vars(&self) -> &[String] {
        &self.state_vars
    }

    pub fn input_vars(&self) -> &[String] {
        &self.input_vars
    }

    /// The right-hand-side formulas, when the dynamics are explicit.
    pub fn f_formulas(&self) -> Option<&[Expr]> {
        match &self.dynamics {
            Dynamics::Explicit(f) => Some(f),
            Dynamics::RobustLoop { .. } => None,
        }
    }

    pub fn h_formulas(&self) -> &[Expr] {
        &self.h
    }

    /// Evaluates `ẋ = f(x, u)` into `out`.
    pub fn eval_f(&self, x: &[f64], u: &[f64], out: &mut [f64]) -> Result<(), String> {
        match &self.dynamics {
            Dynamics::Explicit(f) => {
                let n = self.state_dim();
                let mut vals = [0.0f64; 16];
                let total = n + u.len();
                if total <= 16 {
                    vals[..n].copy_from_slice(x);
                    vals[n..total].copy_from_slice(u);
                    for (i, e) in f.iter().enumerate() {
                        out[i] = e.eval(&vals[..total]).map_err(|e| e.to_string())?;
                    }
                } else {
                    let mut vals = Vec::with_capacity(total);
                    vals.extend_from_slice(x);
                    vals.extend_from_slice(u);
                    for (i, e) in f.iter().enumerate() {
                        out[i] = e.eval(&vals).map_err(|e| e.to_string())?;
                    }
                }
                Ok(())
            }
            Dynamics::RobustLoop { base, lambda } => {
                let ynorm = base.output_norm(x)?;
                let gain = lambda.eval(ynorm);
                let mut scaled = [0.0f64; 16];
                if u.len() <= 16 {
                    for (i, d) in u.iter().enumerate() {
                        scaled[i] = d * gain;
                    }
                    base.eval_f(x, &scaled[..u.len()], out)
                } else {
                    let scaled: Vec<f64> = u.iter().map(|d| d * gain).collect();
                    base.eval_f(x, &scaled, out)
                }
            }
        }
    }

    /// Evaluates the output map `y = h(x)`.
    pub fn eval_h(&self, x: &[f64]) -> Result<Vec<f64>, String> {
        self.h
            .iter()
            .map(|e| e.eval(x).map_err(|e| e.to_string()))
            .collect()
    }

    /// Euclidean norm of the output, without allocating.
    pub fn output_norm(&self, x: &[f64]) -> Result<f64, String> {
        let mut acc = 0.0;
        for e in &self.h {
            let v = e.eval(x).map_err(|e| e.to_string())?;
            acc += v * v;
        }
        Ok(acc.sqrt())
    }

    /// Samples `f` and `h` on a coarse lattice over `box_bounds` and reports
    /// the first domain error, if any.
    pub fn validate_on_box(&self, box_bounds: &[(f64, f64)]) -> Result<(), SystemError> {
        let n = self.state_dim();
        if box_bounds.len() != n {
            return Err(SystemError::Dimension(format!(
                "box has {} axes for state dimension {n}",
                box_bounds.len()
            )));
        }
        let per_axis = 5usize;
        let m = self.input_dim();
        let mut idx = vec![0usize; n];
        let mut out = vec![0.0; n];
        loop {
            let x: Vec<f64> = idx
                .iter()
                .zip(box_bounds)
                .map(|(&k, &(lo, hi))| lo + (hi - lo) * k as f64 / (per_axis - 1) as f64)
                .collect();
            for u_mag in [0.0, 1.0] {
                let u = vec![u_mag; m];
                self.eval_f(&x, &u, &mut out)
                    .map_err(|msg| SystemError::Invalid(format!("f at {x:?}: {msg}")))?;
            }
            self.eval_h(&x)
                .map_err(|msg| SystemError::Invalid(format!("h at {x:?}: {msg}")))?;
            let mut carry = true;
            for d in idx.iter_mut() {
                *d += 1;
                if *d < per_axis {
                    carry = false;
                    break;
                }
                *d = 0;
            }
            if carry {
                return Ok(());
            }
        }
    }
}

/// Robust closed loop `ẋ = f(x, d·λ(|y|)), y = h(x)` with disturbances `d`
/// constrained to the unit ball.
pub fn close_loop_robust(
    sys: &ControlSystem,
    lambda: &ScalarMonotone,
) -> Result<ControlSystem, SystemError> {
    if !lambda.class().is_k_family() {
        return Err(SystemError::Invalid(format!(
            "feedback radius `{}` must be class K, got {:?}",
            lambda.name(),
            lambda.class()
        )));
    }
    Ok(ControlSystem {
        name: format!("{}_robust_loop", sys.name),
        state_vars: sys.state_vars.clone(),
        input_vars: sys.input_vars.clone(),
        dynamics: Dynamics::RobustLoop {
            base: Arc::new(sys.clone()),
            lambda: lambda.clone(),
        },
        h: sys.h.clone(),
        input_domain: InputDomain::UnitBall,
    })
}

// ---------------------------------------------------------------------------
// Input signals
// ---------------------------------------------------------------------------

/// Piecewise-constant vector signal on `[0, T]`.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct InputSignal {
    /// `N+1` strictly increasing breakpoints starting at 0.
    breakpoints: Vec<f64>,
    /// `N` constant values, one per interval.
    values: Vec<Vec<f64>>,
}

impl InputSignal {
    pub fn new(breakpoints: Vec<f64>, values: Vec<Vec<f64>>) -> Result<InputSignal, SystemError> {
        if breakpoints.len() < 2 {
            return Err(SystemError::InvalidSignal(
                "need at least two breakpoints".into(),
            ));
        }
        if breakpoints[0] != 0.0 {
            return Err(SystemError::InvalidSignal(format!(
                "first breakpoint must be 0, got {}",
                breakpoints[0]
            )));
        }
        if breakpoints.windows(2).any(|w| w[1] <= w[0]) {
            return Err(SystemError::InvalidSignal(
                "breakpoints must be strictly increasing".into(),
            ));
        }
        if values.len() + 1 != breakpoints.len() {
            return Err(SystemError::InvalidSignal(format!(
                "{} breakpoints require {} interval values, got {}",
                breakpoints.len(),
                breakpoints.len() - 1,
                values.len()
            )));
        }
        let dim = values.first().map(|v| v.len()).unwrap_or(0);
        if values.iter().any(|v| v.len() != dim) {
            return Err(SystemError::InvalidSignal(
                "all interval values must share one dimension".into(),
            ));
        }
        if values.iter().flatten().any(|v| !v.is_finite()) {
            return Err(SystemError::InvalidSignal("non-finite value".into()));
        }
        Ok(InputSignal {
            breakpoints,
            values,
        })
    }

    /// The constant signal `u(t) ≡ value` on `[0, horizon]`.
    pub fn constant(value: Vec<f64>, horizon: f64) -> InputSignal {
        InputSignal {
            breakpoints: vec![0.0, horizon.max(f64::MIN_POSITIVE)],
            values: vec![value],
        }
    }

    /// The zero signal of dimension `m`.
    pub fn zero(m: usize, horizon: f64) -> InputSignal {
        InputSignal::constant(vec![0.0; m], horizon)
    }

    pub fn dim(&self) -> usize {
        self.values.first().map(|v| v.len()).unwrap_or(0)
    }

    pub fn horizon(&self) -> f64 {
        *self.breakpoints.last().unwrap()
    }

    pub fn breakpoints(&self) -> &[f64] {
        &self.breakpoints
    }

    pub fn segments(&self) -> impl Iterator<Item = (f64, f64, &[f64])> + '_ {
        self.breakpoints
            .windows(2)
            .zip(&self.values)
            .map(|(w, v)| (w[0], w[1], v.as_slice()))
    }

    /// Value on the interval containing `t` (intervals are `[tᵢ, tᵢ₊₁)`,
    /// the last one closed).
    pub fn value_at(&self, t: f64) -> &[f64] {
        let i = match self
            .breakpoints
            .binary_search_by(|b| b.partial_cmp(&t).unwrap())
        {
            Ok(i) => i,
            Err(i) => i.saturating_sub(1),
        };
        &self.values[i.min(self.values.len() - 1)]
    }

    /// Supremum of the Euclidean norm over the intervals.
    pub fn sup_norm(&self) -> f64 {
        self.values
            .iter()
            .map(|v| norm(v))
            .fold(0.0f64, f64::max)
    }
}

pub fn norm(x: &[f64]) -> f64 {
    x.iter().map(|v| v * v).sum::<f64>().sqrt()
}

// ---------------------------------------------------------------------------
// Trajectories
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, serde::Serialize)]
pub enum SimStatus {
    Completed,
    /// State norm crossed the blow-up threshold at the reported time.
    BlewUp(f64),
    /// The vector field raised a domain error at the reported time.
    DomainError { t: f64, msg: String },
}

/// Simulation output: matched time/state/output samples plus diagnostics.
#[derive(Debug, Clone)]
pub struct Trajectory {
    pub times: Vec<f64>,
    pub states: Vec<Vec<f64>>,
    pub outputs: Vec<Vec<f64>>,
    pub input: InputSignal,
    pub stats: SimStats,
    pub status: SimStatus,
}

impl Trajectory {
    pub fn is_complete(&self) -> bool {
        self.status == SimStatus::Completed
    }

    pub fn final_state(&self) -> &[f64] {
        self.states.last().unwrap()
    }

    pub fn output_norm_at(&self, idx: usize) -> f64 {
        norm(&self.outputs[idx])
    }

    pub fn sup_output_norm(&self) -> f64 {
        self.outputs.iter().map(|y| norm(y)).fold(0.0, f64::max)
    }

    pub fn sup_state_norm(&self) -> f64 {
        self.states.iter().map(|x| norm(x)).fold(0.0, f64::max)
    }

    /// CSV export: header `t,x1..xn,u1..um,y1..yp`, 17 significant digits.
    pub fn write_csv<W: Write>(&self, w: &mut W) -> io::Result<()> {
        let n = self.states.first().map(|x| x.len()).unwrap_or(0);
        let m = self.input.dim();
        let p = self.outputs.first().map(|y| y.len()).unwrap_or(0);
        let mut header = String::from("t");
        for i in 1..=n {
            header.push_str(&format!(",x{i}"));
        }
        for i in 1..=m {
            header.push_str(&format!(",u{i}"));
        }
        for i in 1..=p {
            header.push_str(&format!(",y{i}"));
        }
        writeln!(w, "{header}")?;
        for (k, t) in self.times.iter().enumerate() {
            let mut row = format!("{t:.16e}");
            for v in &self.states[k] {
                row.push_str(&format!(",{v:.16e}"));
            }
            for v in self.input.value_at(*t) {
                row.push_str(&format!(",{v:.16e}"));
            }
            for v in &self.outputs[k] {
                row.push_str(&format!(",{v:.16e}"));
            }
            writeln!(w, "{row}")?;
        }
        Ok(())
    }
}

/// Knobs for [`simulate_with`]; [`simulate`] uses the defaults.
#[derive(Debug, Clone, Copy)]
pub struct SimOptions {
    /// Uniform sample count over the horizon (breakpoints are added on top).
    pub samples: usize,
    pub blowup_threshold: f64,
    pub max_steps: usize,
}

impl Default for SimOptions {
    fn default() -> Self {
        SimOptions {
            samples: 201,
            blowup_threshold: BLOWUP_THRESHOLD,
            max_steps: 2_000_000,
        }
    }
}

/// Simulates the system from `xi` under the signal `u` on `[0, horizon]`.
///
/// Integration is an adaptive embedded Runge–Kutta 5(4) pair with dense
/// output at the requested samples and a hard restart at every signal
/// breakpoint. Domain errors and blow-ups truncate the trajectory and are
/// reported in the status; preconditions (dimensions, domain constraints)
/// are errors.
pub fn simulate(
    sys: &ControlSystem,
    xi: &[f64],
    u: &InputSignal,
    horizon: f64,
    rtol: f64,
    atol: f64,
) -> Result<Trajectory, SystemError> {
    simulate_with(sys, xi, u, horizon, rtol, atol, &SimOptions::default())
}

pub fn simulate_with(
    sys: &ControlSystem,
    xi: &[f64],
    u: &InputSignal,
    horizon: f64,
    rtol: f64,
    atol: f64,
    opts: &SimOptions,
) -> Result<Trajectory, SystemError> {
    let n = sys.state_dim();
    if xi.len() != n {
        return Err(SystemError::Dimension(format!(
            "initial state has {} entries for state dimension {n}",
            xi.len()
        )));
    }
    if xi.iter().any(|v| !v.is_finite()) {
        return Err(SystemError::Invalid("non-finite initial state".into()));
    }
    if u.dim() != sys.input_dim() {
        return Err(SystemError::Dimension(format!(
            "signal dimension {} for input dimension {}",
            u.dim(),
            sys.input_dim()
        )));
    }
    if !(horizon > 0.0) {
        return Err(SystemError::Invalid(format!(
            "horizon must be positive, got {horizon}"
        )));
    }
    if sys.input_domain == InputDomain::UnitBall {
        for (_, _, v) in u.segments() {
            if norm(v) > 1.0 + 1e-9 {
                return Err(SystemError::InputOutsideDomain {
                    system: sys.name.clone(),
                    value: v.to_vec(),
                });
            }
        }
    }

    // Sample grid: uniform points plus every breakpoint inside the horizon.
    let mut times: Vec<f64> = (0..opts.samples.max(2))
        .map(|i| horizon * i as f64 / (opts.samples.max(2) - 1) as f64)
        .collect();
    for &b in u.breakpoints() {
        if b > 0.0 && b < horizon {
            times.push(b);
        }
    }
    times.sort_by(|a, b| a.partial_cmp(b).unwrap());
    times.dedup();

    // Segment boundaries: breakpoints clipped to the horizon.
    let mut bounds: Vec<f64> = vec![0.0];
    for &b in u.breakpoints().iter().skip(1) {
        if b < horizon {
            bounds.push(b);
        }
    }
    bounds.push(horizon);
    bounds.dedup();

    let ode_opts = OdeOptions {
        rtol,
        atol,
        h_max: f64::INFINITY,
        max_steps: opts.max_steps,
    };

    let mut states: Vec<Vec<f64>> = Vec::with_capacity(times.len());
    let mut stats = SimStats::default();
    let mut status = SimStatus::Completed;
    let mut x = xi.to_vec();
    let mut cursor = 0usize; // next sample to fill
    let blowup = opts.blowup_threshold;

    'segments: for w in bounds.windows(2) {
        let (t0, t1) = (w[0], w[1]);
        let u_val = u.value_at(0.5 * (t0 + t1)).to_vec();
        let seg_end = times.partition_point(|&t| t <= t1);
        let seg_times = &times[cursor..seg_end];
        let mut rhs = |_t: f64, y: &[f64], out: &mut [f64]| sys.eval_f(y, &u_val, out);
        let out = ode::integrate(&mut rhs, t0, t1, &x, seg_times, &ode_opts, |_t, y| {
            norm(y) > blowup
        });
        stats.absorb(&out.stats);
        states.extend(out.samples);
        cursor += out.filled;
        match out.status {
            OdeStatus::Completed => {
                // Seed the next segment with the endpoint state. The last
                // filled sample is exactly t1 whenever t1 is a sample time;
                // recover the endpoint from it, otherwise re-integrate is
                // unnecessary because breakpoints are always sample times.
                if let Some(last) = states.last() {
                    if cursor > 0 && times[cursor - 1] == t1 {
                        x = last.clone();
                        continue 'segments;
                    }
                }
                // t1 not sampled (can only happen for t1 == horizon with a
                // degenerate grid); fall back to the final sample.
                x = states.last().cloned().unwrap_or(x);
            }
            OdeStatus::Stopped { t } => {
                status = SimStatus::BlewUp(t);
                break 'segments;
            }
            OdeStatus::RhsError { t, msg } => {
                status = SimStatus::DomainError { t, msg };
                break 'segments;
            }
            OdeStatus::StepTooSmall { t } => {
                status = SimStatus::DomainError {
                    t,
                    msg: "step size underflow".into(),
                };
                break 'segments;
            }
            OdeStatus::StepLimit { t } => {
                status = SimStatus::DomainError {
                    t,
                    msg: "step budget exhausted".into(),
                };
                break 'segments;
            }
        }
    }

    let times = times[..states.len()].to_vec();
    let outputs: Vec<Vec<f64>> = states
        .iter()
        .map(|x| sys.eval_h(x).unwrap_or_else(|_| vec![f64::NAN; sys.output_dim()]))
        .collect();

    Ok(Trajectory {
        times,
        states,
        outputs,
        input: u.clone(),
        stats,
        status,
    })
}

// ---------------------------------------------------------------------------
// Built-in registry
// ---------------------------------------------------------------------------

/// The systems shipped with the tool.
///
/// `paper_counterexample` is the two-dimensional system
/// `ẋ₁ = 0, ẋ₂ = −(2x₂+u)/(1+x₁²), y = x₂` whose output decay rate
/// degrades with `|x₁(0)|`; the others are small reference systems.
pub fn builtin_registry() -> Vec<ControlSystem> {
    let mk = |name: &str,
              sv: &[&str],
              iv: &[&str],
              f: &[&str],
              h: &[&str]|
     -> ControlSystem {
        ControlSystem::from_formulas(name, sv, iv, f, h, InputDomain::Free)
            .expect("registry system must construct")
    };
    vec![
        mk(
            "paper_counterexample",
            &["x1", "x2"],
            &["u"],
            &["0", "-(2*x2+u)/(1+x1^2)"],
            &["x2"],
        ),
        mk("scalar_stable", &["x1"], &["u1"], &["-x1+u1"], &["x1"]),
        mk("integrator", &["x1"], &["u1"], &["u1"], &["x1"]),
        mk(
            "decoupled_2d",
            &["x1", "x2"],
            &["u1"],
            &["-x1+u1", "-x2"],
            &["x1"],
        ),
        mk("zero", &["x1"], &["u1"], &["0"], &["0"]),
    ]
}

/// Looks up a registry system by name.
pub fn registry_get(name: &str) -> Option<ControlSystem> {
    builtin_registry().into_iter().find(|s| s.name() == name)
}
