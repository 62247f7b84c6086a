//! Candidate Lyapunov functions and the dissipation-inequality checks.
//!
//! A candidate carries a value function `V`, a sandwich pair `(α₁, α₂)`, a
//! trigger `χ`, and a decay bound. Checks are grid sweeps: every verdict
//! records its worst margin and a reproducible witness point, and singular
//! sets (declared zero sets of an expression, plus a margin band) are
//! excluded and counted rather than silently skipped.

use rayon::prelude::*;
use serde::Serialize;
use thiserror::Error;

use crate::comparison::{
    invert, ComparisonError, DecayMargin, FlowGridParams, ScalarMonotone,
};
use crate::expr::{Expr, ExprError};
use crate::system::{norm, simulate_with, ControlSystem, SimOptions, SimStatus, SystemError};

#[derive(Debug, Clone, Error)]
pub enum CertificateError {
    #[error(transparent)]
    Expr(#[from] ExprError),
    #[error(transparent)]
    Comparison(#[from] ComparisonError),
    #[error(transparent)]
    System(#[from] SystemError),
    #[error("candidate `{name}`: {what}")]
    Candidate { name: String, what: String },
    #[error("{0}")]
    Invalid(String),
}

/// How the candidate's gradient is obtained.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub enum GradientMode {
    /// Exact symbolic differentiation (fails for formulas containing `abs`).
    Symbolic,
    /// Central differences with relative step `step`.
    FiniteDifference { step: f64 },
}

/// Declared singular set `{ξ : |g(ξ)| < band}` on which gradients are not
/// requested.
#[derive(Debug, Clone)]
pub struct SingularSet {
    pub guard: Expr,
    pub band: f64,
}

impl SingularSet {
    pub fn excludes(&self, x: &[f64]) -> bool {
        match self.guard.eval(x) {
            Ok(v) => v.abs() < self.band,
            Err(_) => true,
        }
    }
}

/// The candidate's value function.
#[derive(Debug, Clone)]
pub enum ValueFn {
    /// Closed-form expression over the state variables.
    Formula(Expr),
    /// `ρ ∘ inner` from a certificate rescaling.
    Rescaled {
        rho: ScalarMonotone,
        inner: Box<ValueFn>,
    },
    /// Scattered-data interpolation (constructed value functions).
    Scattered(ScatteredTable),
}

impl ValueFn {
    pub fn eval(&self, x: &[f64]) -> Result<f64, CertificateError> {
        match self {
            ValueFn::Formula(e) => Ok(e.eval(x)?),
            ValueFn::Rescaled { rho, inner } => Ok(rho.eval(inner.eval(x)?)),
            ValueFn::Scattered(t) => Ok(t.eval(x)),
        }
    }

    fn symbolic_gradient(&self) -> Option<Vec<Expr>> {
        match self {
            ValueFn::Formula(e) => e.gradient().ok(),
            _ => None,
        }
    }
}

/// Scattered-data evaluation by weighted moving least squares: a local
/// linear model fitted to the k nearest samples with inverse-distance
/// weights. Unlike plain inverse-distance averaging, the local fit has a
/// faithful gradient, which is what finite-difference probes of constructed
/// value functions need. Deterministic; falls back to the weighted mean
/// when the local system is degenerate.
#[derive(Debug, Clone)]
pub struct ScatteredTable {
    points: Vec<Vec<f64>>,
    values: Vec<f64>,
    neighbors: usize,
}

impl ScatteredTable {
    pub fn new(points: Vec<Vec<f64>>, values: Vec<f64>) -> Result<ScatteredTable, CertificateError> {
        if points.is_empty() || points.len() != values.len() {
            return Err(CertificateError::Invalid(
                "scattered table needs matching nonempty points and values".into(),
            ));
        }
        let dim = points[0].len();
        Ok(ScatteredTable {
            points,
            values,
            neighbors: (3 * (dim + 1)).max(8),
        })
    }

    pub fn eval(&self, x: &[f64]) -> f64 {
        let n = x.len();
        let mut dists: Vec<(f64, usize)> = self
            .points
            .iter()
            .enumerate()
            .map(|(i, p)| {
                let d2: f64 = p.iter().zip(x).map(|(a, b)| (a - b) * (a - b)).sum();
                (d2, i)
            })
            .collect();
        let k = self.neighbors.min(dists.len());
        dists.select_nth_unstable_by(k - 1, |a, b| {
            a.partial_cmp(b).unwrap_or(std::cmp::Ordering::Equal)
        });
        let neighborhood = &dists[..k];
        // exact hit
        for &(d2, i) in neighborhood {
            if d2 < 1e-28 {
                return self.values[i];
            }
        }
        let scale2: f64 = neighborhood
            .iter()
            .map(|&(d2, _)| d2)
            .fold(0.0, f64::max)
            .max(1e-30);

        // weighted normal equations for value + gradient, centered at x
        let dim = n + 1;
        let mut ata = vec![0.0; dim * dim];
        let mut atb = vec![0.0; dim];
        let mut wsum = 0.0;
        let mut mean = 0.0;
        for &(d2, i) in neighborhood {
            let w = 1.0 / (d2 + 1e-4 * scale2);
            let p = &self.points[i];
            let mut row = vec![0.0; dim];
            row[0] = 1.0;
            for a in 0..n {
                row[a + 1] = p[a] - x[a];
            }
            for a in 0..dim {
                for b in 0..dim {
                    ata[a * dim + b] += w * row[a] * row[b];
                }
                atb[a] += w * row[a] * self.values[i];
            }
            wsum += w;
            mean += w * self.values[i];
        }
        match solve_dense(&mut ata, &mut atb, dim) {
            Some(beta) => beta[0],
            None => mean / wsum,
        }
    }
}

/// Gaussian elimination with partial pivoting; `None` on near-singularity.
fn solve_dense(a: &mut [f64], b: &mut [f64], n: usize) -> Option<Vec<f64>> {
    for col in 0..n {
        let mut pivot = col;
        for row in (col + 1)..n {
            if a[row * n + col].abs() > a[pivot * n + col].abs() {
                pivot = row;
            }
        }
        if a[pivot * n + col].abs() < 1e-12 {
            return None;
        }
        if pivot != col {
            for j in 0..n {
                a.swap(col * n + j, pivot * n + j);
            }
            b.swap(col, pivot);
        }
        let d = a[col * n + col];
        for row in (col + 1)..n {
            let f = a[row * n + col] / d;
            if f == 0.0 {
                continue;
            }
            for j in col..n {
                a[row * n + j] -= f * a[col * n + j];
            }
            b[row] -= f * b[col];
        }
    }
    let mut x = vec![0.0; n];
    for row in (0..n).rev() {
        let mut acc = b[row];
        for j in (row + 1)..n {
            acc -= a[row * n + j] * x[j];
        }
        x[row] = acc / a[row * n + row];
    }
    Some(x)
}

/// The decay side of the dissipation inequality.
#[derive(Debug, Clone)]
pub enum DecayBound {
    /// No decrease demanded beyond nonincrease.
    Zero,
    /// `α₃(V(ξ))` — state-independent decay.
    Scalar(ScalarMonotone),
    /// `α₃(V(ξ), |ξ|)` — non-uniform decay margin.
    Margin(DecayMargin),
    /// Required decrease as an explicit formula over the state variables.
    StateFormula(Expr),
    /// Chain-rule image of `inner` under the rescaling `ρ`.
    Chained {
        rho: ScalarMonotone,
        inner: Box<DecayBound>,
    },
}

impl DecayBound {
    /// Required decrease at a point with candidate value `v`.
    pub fn required(&self, v: f64, x: &[f64]) -> Result<f64, CertificateError> {
        match self {
            DecayBound::Zero => Ok(0.0),
            DecayBound::Scalar(a) => Ok(a.eval(v)),
            DecayBound::Margin(m) => Ok(m.eval(v, norm(x))),
            DecayBound::StateFormula(e) => Ok(e.eval(x)?),
            DecayBound::Chained { rho, inner } => {
                // v = ρ(V_inner); transform back and apply the chain rule.
                let v_inner = invert(rho, v, 1e-10)?;
                Ok(rho.derivative(v_inner) * inner.required(v_inner, x)?)
            }
        }
    }

    pub fn is_zero(&self) -> bool {
        matches!(self, DecayBound::Zero)
    }
}

/// Which upper sandwich argument the candidate uses.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum SandwichMode {
    /// `V(ξ) ≤ α₂(|ξ|)`.
    StateNorm,
    /// `V(ξ) ≤ α₂(|h(ξ)|)`.
    OutputNorm,
}

/// Dissipation variants: which trigger activates the inequality. The decay
/// demanded is the candidate's decay bound; the canonical pairings are a
/// non-uniform margin `α₃(V, |ξ|)` for the IOS/ROS forms, a
/// state-independent `α₃(V)` for the SIIOS form, and plain nonincrease for
/// the output-Lagrange form.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum CertVariant {
    /// Trigger `V(ξ) ≥ χ(|μ|)`.
    IosLf,
    /// Trigger `V(ξ) ≥ χ(|μ|)`, conventionally with zero decay.
    SiosLf,
    /// Trigger `V(ξ) ≥ χ(|μ|)`, conventionally with `α₃(V)`.
    SiiosLf,
    /// Output trigger `|h(ξ)| ≥ χ(|μ|)`.
    RosLf,
    /// No trigger; quantified over the unit input ball.
    UosLf,
}

/// Strict vs non-strict trigger comparison.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Default)]
pub enum TriggerForm {
    #[default]
    NonStrict,
    Strict,
}

/// A candidate Lyapunov function with its certificate data.
#[derive(Debug, Clone)]
pub struct CandidateLyapunov {
    pub name: String,
    pub v: ValueFn,
    pub gradient: GradientMode,
    pub alpha1: Option<ScalarMonotone>,
    pub alpha2: Option<ScalarMonotone>,
    pub sandwich_mode: SandwichMode,
    pub chi: Option<ScalarMonotone>,
    pub decay: DecayBound,
    pub singular: Option<SingularSet>,
    symbolic_gradient: Option<Vec<Expr>>,
}

impl CandidateLyapunov {
    pub fn new(
        name: impl Into<String>,
        v: ValueFn,
        gradient: GradientMode,
    ) -> Result<CandidateLyapunov, CertificateError> {
        let name = name.into();
        let symbolic_gradient = match gradient {
            GradientMode::Symbolic => {
                let g = v.symbolic_gradient();
                if g.is_none() {
                    return Err(CertificateError::Candidate {
                        name,
                        what: "symbolic gradient unavailable (nonsmooth or non-formula value \
                               function); use the finite-difference mode"
                            .into(),
                    });
                }
                g
            }
            GradientMode::FiniteDifference { .. } => None,
        };
        Ok(CandidateLyapunov {
            name,
            v,
            gradient,
            alpha1: None,
            alpha2: None,
            sandwich_mode: SandwichMode::StateNorm,
            chi: None,
            decay: DecayBound::Zero,
            singular: None,
            symbolic_gradient,
        })
    }

    /// Convenience constructor from a formula string.
    pub fn from_formula(
        name: impl Into<String>,
        formula: &str,
        state_vars: &[&str],
        gradient: GradientMode,
    ) -> Result<CandidateLyapunov, CertificateError> {
        let e = Expr::parse(formula, state_vars)?;
        CandidateLyapunov::new(name, ValueFn::Formula(e), gradient)
    }

    pub fn with_sandwich(
        mut self,
        alpha1: ScalarMonotone,
        alpha2: ScalarMonotone,
        mode: SandwichMode,
    ) -> Self {
        self.alpha1 = Some(alpha1);
        self.alpha2 = Some(alpha2);
        self.sandwich_mode = mode;
        self
    }

    pub fn with_trigger(mut self, chi: ScalarMonotone) -> Self {
        self.chi = Some(chi);
        self
    }

    pub fn with_decay(mut self, decay: DecayBound) -> Self {
        self.decay = decay;
        self
    }

    pub fn with_singular_set(mut self, guard: Expr, band: f64) -> Self {
        self.singular = Some(SingularSet { guard, band });
        self
    }

    pub fn value(&self, x: &[f64]) -> Result<f64, CertificateError> {
        self.v.eval(x)
    }

    /// `∇V(ξ)`, symbolic or finite-difference per the gradient mode; `None`
    /// on the declared singular set.
    pub fn grad(&self, x: &[f64]) -> Result<Option<Vec<f64>>, CertificateError> {
        if let Some(s) = &self.singular {
            if s.excludes(x) {
                return Ok(None);
            }
        }
        if let Some(g) = &self.symbolic_gradient {
            let mut out = Vec::with_capacity(g.len());
            for e in g {
                out.push(e.eval(x)?);
            }
            return Ok(Some(out));
        }
        if let Some(r) = self.grad_rescaled(x) {
            return r.map(Some);
        }
        let step = match self.gradient {
            GradientMode::FiniteDifference { step } => step,
            GradientMode::Symbolic => 1e-6,
        };
        let mut out = Vec::with_capacity(x.len());
        let mut xp = x.to_vec();
        for i in 0..x.len() {
            let h = step * x[i].abs().max(1.0);
            xp[i] = x[i] + h;
            let f1 = self.v.eval(&xp)?;
            xp[i] = x[i] - h;
            let f0 = self.v.eval(&xp)?;
            xp[i] = x[i];
            out.push((f1 - f0) / (2.0 * h));
        }
        Ok(Some(out))
    }

    /// Directional derivative `DV(ξ)·f(ξ, μ)`; `None` on the singular set.
    pub fn dvf(
        &self,
        sys: &ControlSystem,
        x: &[f64],
        u: &[f64],
    ) -> Result<Option<f64>, CertificateError> {
        let grad = match self.grad(x)? {
            Some(g) => g,
            None => return Ok(None),
        };
        let mut fx = vec![0.0; x.len()];
        sys.eval_f(x, u, &mut fx)
            .map_err(CertificateError::Invalid)?;
        Ok(Some(grad.iter().zip(&fx).map(|(g, f)| g * f).sum()))
    }

    /// Basic sanity: `V(0) = 0`.
    pub fn check_origin(&self, state_dim: usize) -> Result<(), CertificateError> {
        let v0 = self.v.eval(&vec![0.0; state_dim])?;
        if v0.abs() > 1e-9 {
            return Err(CertificateError::Candidate {
                name: self.name.clone(),
                what: format!("V(0) = {v0} is not 0"),
            });
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Grid sweeps
// ---------------------------------------------------------------------------

/// Rectangular lattice over a box, `points_per_axis` samples per axis.
pub fn grid_points(box_bounds: &[(f64, f64)], points_per_axis: usize) -> Vec<Vec<f64>> {
    let k = points_per_axis.max(2);
    let mut out = Vec::new();
    let n = box_bounds.len();
    let mut idx = vec![0usize; n];
    loop {
        out.push(
            idx.iter()
                .zip(box_bounds)
                .map(|(&i, &(lo, hi))| lo + (hi - lo) * i as f64 / (k - 1) as f64)
                .collect(),
        );
        let mut carry = true;
        for d in idx.iter_mut() {
            *d += 1;
            if *d < k {
                carry = false;
                break;
            }
            *d = 0;
        }
        if carry {
            return out;
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct ConditionVerdict {
    pub passed: bool,
    /// Smallest slack observed (`tolerated rhs − lhs`).
    pub worst_margin: f64,
    pub witness: Option<WitnessPoint>,
    pub checked_points: usize,
    pub skipped_points: usize,
}

#[derive(Debug, Clone, Serialize)]
pub struct WitnessPoint {
    pub state: Vec<f64>,
    pub input: Vec<f64>,
    pub lhs: f64,
    pub rhs: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct SandwichReport {
    pub lower: ConditionVerdict,
    pub upper: ConditionVerdict,
}

/// Checks `α₁(|h(ξ)|) ≤ V(ξ)` and `V(ξ) ≤ α₂(|ξ| or |h(ξ)|)` on the grid,
/// tolerance `1e-9` absolute.
pub fn check_sandwich(
    cand: &CandidateLyapunov,
    sys: &ControlSystem,
    box_bounds: &[(f64, f64)],
    points_per_axis: usize,
) -> Result<SandwichReport, CertificateError> {
    let alpha1 = cand.alpha1.as_ref().ok_or_else(|| CertificateError::Candidate {
        name: cand.name.clone(),
        what: "sandwich check needs α₁".into(),
    })?;
    let alpha2 = cand.alpha2.as_ref().ok_or_else(|| CertificateError::Candidate {
        name: cand.name.clone(),
        what: "sandwich check needs α₂".into(),
    })?;
    let tol = 1e-9;
    let pts = grid_points(box_bounds, points_per_axis);
    let results: Vec<Result<(f64, f64, f64, f64, Vec<f64>), String>> = pts
        .par_iter()
        .map(|x| {
            let v = cand
                .v
                .eval(x)
                .map_err(|e| format!("V at {x:?}: {e}"))?;
            let hn = sys
                .output_norm(x)
                .map_err(|e| format!("h at {x:?}: {e}"))?;
            let lower_slack = v + tol - alpha1.eval(hn);
            let upper_arg = match cand.sandwich_mode {
                SandwichMode::StateNorm => norm(x),
                SandwichMode::OutputNorm => hn,
            };
            let upper_slack = alpha2.eval(upper_arg) + tol - v;
            Ok((lower_slack, upper_slack, v, hn, x.clone()))
        })
        .collect();

    let mut lower = ConditionVerdict {
        passed: true,
        worst_margin: f64::INFINITY,
        witness: None,
        checked_points: 0,
        skipped_points: 0,
    };
    let mut upper = lower.clone();
    for r in results {
        let (ls, us, v, hn, x) = r.map_err(CertificateError::Invalid)?;
        lower.checked_points += 1;
        upper.checked_points += 1;
        if ls < lower.worst_margin {
            lower.worst_margin = ls;
            lower.witness = Some(WitnessPoint {
                state: x.clone(),
                input: vec![],
                lhs: alpha1.eval(hn),
                rhs: v,
            });
        }
        if us < upper.worst_margin {
            upper.worst_margin = us;
            upper.witness = Some(WitnessPoint {
                state: x,
                input: vec![],
                lhs: v,
                rhs: us + v - tol,
            });
        }
    }
    lower.passed = lower.worst_margin >= 0.0;
    upper.passed = upper.worst_margin >= 0.0;
    if lower.passed {
        lower.witness = None;
    }
    if upper.passed {
        upper.witness = None;
    }
    Ok(SandwichReport { lower, upper })
}

#[derive(Debug, Clone, Copy)]
pub struct DissipationOptions {
    pub tol_abs: f64,
    /// Relative tolerance against the required decay (for certificates whose
    /// scale varies over many orders of magnitude).
    pub tol_rel: f64,
    pub trigger_form: TriggerForm,
}

impl Default for DissipationOptions {
    fn default() -> Self {
        DissipationOptions {
            tol_abs: 1e-9,
            tol_rel: 0.0,
            trigger_form: TriggerForm::NonStrict,
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct DissipationReport {
    pub variant: CertVariant,
    pub passed: bool,
    pub worst_margin: f64,
    pub witness: Option<WitnessPoint>,
    pub triggered_points: usize,
    /// Triggered points excluded from the check: the declared singular set
    /// plus any point where the gradient, vector field, or decay could not
    /// be evaluated.
    pub skipped_singular: usize,
    /// True when the trigger never fired on the grid (vacuous pass).
    pub vacuous: bool,
    /// Input radius beyond which the trigger cannot fire anywhere on the
    /// state box (`χ⁻¹` of the largest trigger level observed); an input
    /// box at least this large quantifies over every relevant input.
    pub chi_coverage_radius: Option<f64>,
}

/// Checks the dissipation implication of the variant on the state × input
/// grid: wherever the trigger holds, `DV(ξ)f(ξ, μ) ≤ −decay + tol`.
///
/// For the unit-ball variant the input grid is filtered to `|μ| ≤ 1` and no
/// trigger applies.
pub fn check_dissipation(
    cand: &CandidateLyapunov,
    sys: &ControlSystem,
    variant: CertVariant,
    box_bounds: &[(f64, f64)],
    input_box: &[(f64, f64)],
    points_per_axis: usize,
    input_points_per_axis: usize,
    opts: &DissipationOptions,
) -> Result<DissipationReport, CertificateError> {
    if variant != CertVariant::UosLf && cand.chi.is_none() {
        return Err(CertificateError::Candidate {
            name: cand.name.clone(),
            what: format!("variant {variant:?} needs a trigger χ"),
        });
    }
    let states = grid_points(box_bounds, points_per_axis);
    let inputs: Vec<Vec<f64>> = grid_points(input_box, input_points_per_axis)
        .into_iter()
        .filter(|u| variant != CertVariant::UosLf || norm(u) <= 1.0 + 1e-12)
        .collect();

    struct Cell {
        margin: f64,
        state: Vec<f64>,
        input: Vec<f64>,
        lhs: f64,
        rhs: f64,
    }
    let per_state: Vec<(Option<Cell>, usize, usize)> = states
        .par_iter()
        .map(|x| {
            let mut worst: Option<Cell> = None;
            let mut triggered = 0usize;
            let mut skipped = 0usize;
            let v = match cand.v.eval(x) {
                Ok(v) => v,
                Err(_) => return (None, 0, inputs.len()),
            };
            let hn = match sys.output_norm(x) {
                Ok(h) => h,
                Err(_) => return (None, 0, inputs.len()),
            };
            let mut grad_cache: Option<Option<Vec<f64>>> = None;
            for u in &inputs {
                let fire = match variant {
                    CertVariant::UosLf => true,
                    CertVariant::RosLf => {
                        let level = cand.chi.as_ref().unwrap().eval(norm(u));
                        match opts.trigger_form {
                            TriggerForm::NonStrict => hn >= level,
                            TriggerForm::Strict => hn > level,
                        }
                    }
                    _ => {
                        let level = cand.chi.as_ref().unwrap().eval(norm(u));
                        match opts.trigger_form {
                            TriggerForm::NonStrict => v >= level,
                            TriggerForm::Strict => v > level,
                        }
                    }
                };
                if !fire {
                    continue;
                }
                let grad = grad_cache
                    .get_or_insert_with(|| cand.grad(x).unwrap_or(None))
                    .clone();
                let grad = match grad {
                    Some(g) => g,
                    None => {
                        skipped += 1;
                        continue;
                    }
                };
                let mut fx = vec![0.0; x.len()];
                if sys.eval_f(x, u, &mut fx).is_err() {
                    skipped += 1;
                    continue;
                }
                let dvf: f64 = grad.iter().zip(&fx).map(|(g, f)| g * f).sum();
                let required = match cand.decay.required(v, x) {
                    Ok(r) => r,
                    Err(_) => {
                        skipped += 1;
                        continue;
                    }
                };
                triggered += 1;
                let tol = opts.tol_abs + opts.tol_rel * required.abs();
                let margin = (-required + tol) - dvf;
                if worst.as_ref().map(|w| margin < w.margin).unwrap_or(true) {
                    worst = Some(Cell {
                        margin,
                        state: x.clone(),
                        input: u.clone(),
                        lhs: dvf,
                        rhs: -required,
                    });
                }
            }
            (worst, triggered, skipped)
        })
        .collect();

    let mut worst: Option<Cell> = None;
    let mut triggered = 0usize;
    let mut skipped = 0usize;
    for (cell, t, s) in per_state {
        triggered += t;
        skipped += s;
        if let Some(c) = cell {
            if worst.as_ref().map(|w| c.margin < w.margin).unwrap_or(true) {
                worst = Some(c);
            }
        }
    }
    let vacuous = triggered == 0;
    // χ-coverage: the largest trigger level on the box, mapped back through
    // χ⁻¹, bounds the inputs that can ever fire the trigger.
    let chi_coverage_radius = cand.chi.as_ref().and_then(|chi| {
        let mut level_max = 0.0f64;
        for x in &states {
            let lvl = match variant {
                CertVariant::RosLf => sys.output_norm(x).ok(),
                _ => cand.v.eval(x).ok(),
            };
            if let Some(l) = lvl {
                level_max = level_max.max(l);
            }
        }
        crate::comparison::invert(chi, level_max, 1e-9).ok()
    });
    let (passed, worst_margin, witness) = match worst {
        None => (true, f64::INFINITY, None),
        Some(c) => (
            c.margin >= 0.0,
            c.margin,
            if c.margin >= 0.0 {
                None
            } else {
                Some(WitnessPoint {
                    state: c.state,
                    input: c.input,
                    lhs: c.lhs,
                    rhs: c.rhs,
                })
            },
        ),
    };
    Ok(DissipationReport {
        variant,
        passed,
        worst_margin,
        witness,
        triggered_points: triggered,
        skipped_singular: skipped,
        vacuous,
        chi_coverage_radius,
    })
}

// ---------------------------------------------------------------------------
// Rescaling
// ---------------------------------------------------------------------------

/// Rescales the candidate by a continuously differentiable class-K∞ `ρ`:
/// `W = ρ∘V`, `α₁ → ρ∘α₁`, `α₂ → ρ∘α₂`, `χ → ρ∘χ`, decay transformed by the
/// chain rule. A candidate that passed its dissipation check passes after
/// rescaling (checked pairwise in the test suite).
pub fn rescale_certificate(
    cand: &CandidateLyapunov,
    rho: &ScalarMonotone,
    check: &crate::comparison::ClassCheck,
) -> Result<CandidateLyapunov, CertificateError> {
    if rho.class() != crate::comparison::FunctionClass::KInf {
        return Err(CertificateError::Invalid(format!(
            "rescaling function `{}` must be class K∞, got {:?}",
            rho.name(),
            rho.class()
        )));
    }
    // differentiability probe on the open axis
    for i in 1..=32 {
        let s = check.s_max * i as f64 / 32.0;
        let d = rho.derivative(s);
        if !d.is_finite() || d <= 0.0 {
            return Err(CertificateError::Invalid(format!(
                "rescaling function `{}` has non-positive derivative {d} at s = {s}",
                rho.name()
            )));
        }
    }
    let compose_opt = |f: &Option<ScalarMonotone>| -> Result<Option<ScalarMonotone>, CertificateError> {
        match f {
            None => Ok(None),
            Some(f) => Ok(Some(
                crate::comparison::compose(rho, f, check).map_err(CertificateError::Comparison)?,
            )),
        }
    };
    let mut out = CandidateLyapunov {
        name: format!("{}∘{}", rho.name(), cand.name),
        v: ValueFn::Rescaled {
            rho: rho.clone(),
            inner: Box::new(cand.v.clone()),
        },
        gradient: cand.gradient,
        alpha1: compose_opt(&cand.alpha1)?,
        alpha2: compose_opt(&cand.alpha2)?,
        sandwich_mode: cand.sandwich_mode,
        chi: compose_opt(&cand.chi)?,
        decay: if cand.decay.is_zero() {
            DecayBound::Zero
        } else {
            DecayBound::Chained {
                rho: rho.clone(),
                inner: Box::new(cand.decay.clone()),
            }
        },
        singular: cand.singular.clone(),
        symbolic_gradient: None,
    };
    // chain-rule gradient stays exact when the inner gradient is symbolic
    out.symbolic_gradient = None;
    Ok(out)
}

impl CandidateLyapunov {
    /// Gradient of a rescaled candidate via `ρ'(V_inner)·∇V_inner` when the
    /// inner gradient is symbolic; falls back to finite differences.
    fn grad_rescaled(&self, x: &[f64]) -> Option<Result<Vec<f64>, CertificateError>> {
        if let ValueFn::Rescaled { rho, inner } = &self.v {
            if let Some(ge) = inner.symbolic_gradient() {
                let run = || -> Result<Vec<f64>, CertificateError> {
                    let vi = inner.eval(x)?;
                    let scale = rho.derivative(vi);
                    let mut g = Vec::with_capacity(ge.len());
                    for e in &ge {
                        g.push(scale * e.eval(x)?);
                    }
                    Ok(g)
                };
                return Some(run());
            }
        }
        None
    }
}

// ---------------------------------------------------------------------------
// Flow-based checks
// ---------------------------------------------------------------------------

/// Forward difference quotients `(V(x(dt)) − V(ξ))/dt` along the flow under
/// constant input `μ`. For smooth `V` the quotients approach the analytic
/// `DV(ξ)f(ξ, μ)` as `dt` shrinks.
pub fn dini_decrease_along_flow(
    cand: &CandidateLyapunov,
    sys: &ControlSystem,
    xi: &[f64],
    mu: &[f64],
    dt_list: &[f64],
    rtol: f64,
) -> Result<Vec<(f64, f64)>, CertificateError> {
    if let Some(s) = &cand.singular {
        if s.excludes(xi) {
            return Err(CertificateError::Candidate {
                name: cand.name.clone(),
                what: format!("{xi:?} lies in the declared singular set"),
            });
        }
    }
    let v0 = cand.v.eval(xi)?;
    let mut out = Vec::with_capacity(dt_list.len());
    let opts = SimOptions {
        samples: 2,
        ..Default::default()
    };
    for &dt in dt_list {
        let sig = crate::system::InputSignal::constant(mu.to_vec(), dt);
        let traj = simulate_with(sys, xi, &sig, dt, rtol, 1e-12, &opts)?;
        if !matches!(traj.status, SimStatus::Completed) {
            return Err(CertificateError::Invalid(format!(
                "flow step failed: {:?}",
                traj.status
            )));
        }
        let v1 = cand.v.eval(traj.final_state())?;
        out.push((dt, (v1 - v0) / dt));
    }
    Ok(out)
}

#[derive(Debug, Clone, Serialize)]
pub struct PredictionReport {
    pub passed: bool,
    /// `(t, |y(t)|, envelope(t))` samples.
    pub samples: Vec<(f64, f64, f64)>,
    pub max_ratio: f64,
}

/// Predicted output envelope from the certificate versus the simulation.
///
/// The comparison-lemma flow of the candidate's decay (frozen at the
/// trajectory's radius bound for margin-type decay) bounds `V` along the
/// trajectory; `α₁⁻¹` turns that into an output envelope, floored at the
/// trigger level `χ(‖u‖)`. The simulated output must stay below
/// `envelope × 1.05`.
pub fn predict_bound(
    cand: &CandidateLyapunov,
    sys: &ControlSystem,
    xi: &[f64],
    u: &crate::system::InputSignal,
    horizon: f64,
    rtol: f64,
) -> Result<PredictionReport, CertificateError> {
    let alpha1 = cand.alpha1.as_ref().ok_or_else(|| CertificateError::Candidate {
        name: cand.name.clone(),
        what: "prediction needs α₁".into(),
    })?;
    if cand.decay.is_zero() || matches!(cand.decay, DecayBound::StateFormula(_)) {
        return Err(CertificateError::Candidate {
            name: cand.name.clone(),
            what: "prediction needs a decay bound expressed in (V, |ξ|)".into(),
        });
    }
    let traj = simulate_with(
        sys,
        xi,
        u,
        horizon,
        rtol,
        1e-12,
        &SimOptions::default(),
    )?;
    if !matches!(traj.status, SimStatus::Completed) {
        return Err(CertificateError::Invalid(format!(
            "simulation failed: {:?}",
            traj.status
        )));
    }
    let r_bound = traj.sup_state_norm();
    let v0 = cand.v.eval(xi)?;
    let decay = cand.decay.clone();
    let xi_dim = xi.len();
    // Decay frozen at the trajectory's radius bound. Margin-backed decay has
    // no information below its first grid level; the flow stalls there,
    // which keeps the envelope an upper bound.
    let support_floor = match &cand.decay {
        DecayBound::Margin(m) => m.first_positive_level(),
        _ => 0.0,
    };
    let kappa = move |v: f64| -> f64 {
        if v < support_floor {
            return 0.0;
        }
        let probe = vec![r_bound / (xi_dim as f64).sqrt(); xi_dim];
        decay.required(v, &probe).unwrap_or(f64::NAN).max(0.0)
    };
    let flow_params = FlowGridParams {
        s_min: (v0.max(1e-6)) * 1e-8,
        s_max: (v0 * 2.0).max(1.0),
        s_points: 200,
        t_max: horizon.max(1.0),
        t_points: 513,
    };
    let beta = crate::comparison::flow_upper_bound_relaxed(
        kappa,
        &flow_params,
        format!("frozen decay flow[{}]", cand.name),
    )?;
    let u_norm = u.sup_norm();
    let level = match (&cand.chi, u_norm > 0.0) {
        (Some(chi), true) => chi.eval(u_norm),
        _ => 0.0,
    };
    let mut samples = Vec::with_capacity(traj.times.len());
    let mut max_ratio = 0.0f64;
    let mut passed = true;
    for (k, &t) in traj.times.iter().enumerate() {
        let v_env = beta.eval(v0, t).max(level);
        let bound = if v_env <= 0.0 {
            0.0
        } else {
            invert(alpha1, v_env, 1e-9).unwrap_or(f64::INFINITY)
        };
        let y = norm(&traj.outputs[k]);
        samples.push((t, y, bound));
        let limit = bound * 1.05 + 1e-12;
        if y > limit {
            passed = false;
        }
        if bound > 0.0 {
            max_ratio = max_ratio.max(y / bound);
        }
    }
    Ok(PredictionReport {
        passed,
        samples,
        max_ratio,
    })
}
