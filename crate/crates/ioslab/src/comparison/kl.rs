//! Class-KL functions and the appendix constructions attached to them:
//! time-threshold families, the exponential factorization
//! `β(s,t) ≤ κ₁(s)·κ₂(e⁻ᵗ)`, and the comparison-lemma flow bound.

use std::fmt;

use super::scalar::ScalarMonotone;
use super::table::{bracket, pchip_window};
use super::{ClassCheck, ComparisonError, FunctionClass};
use crate::expr::Expr;
use crate::ode::{self, OdeOptions, OdeStatus};

#[derive(Clone)]
enum KlBacking {
    /// Closed form in the two variables `(s, t)`.
    Expr(Expr),
    /// Separable product `κ(s)·ℓ(t)`.
    Separable {
        kappa: ScalarMonotone,
        ell: ScalarMonotone,
    },
    /// Tabulated values on a rectangular grid, monotone-cubic interpolated.
    Grid(KlGrid),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum KlBackingKind {
    Expr,
    Separable,
    Grid,
}

#[derive(Clone)]
struct KlGrid {
    s: Vec<f64>,
    t: Vec<f64>,
    /// `values[i][j] = β(s[i], t[j])`
    values: Vec<Vec<f64>>,
}

impl KlGrid {
    fn eval(&self, s: f64, t: f64) -> f64 {
        let t = t.max(self.t[0]);
        // Beyond the tabulated horizon the function is frozen at its last
        // column; the backing is nonincreasing in t, so this stays an upper
        // bound for the tabulated decay.
        let t = t.min(*self.t.last().unwrap());
        let j = bracket(&self.t, t);
        let j_lo = j.saturating_sub(1);
        let j_hi = (j + 2).min(self.t.len() - 1);
        let mut col_t = Vec::with_capacity(j_hi - j_lo + 1);
        let mut col_v = Vec::with_capacity(j_hi - j_lo + 1);
        for jj in j_lo..=j_hi {
            let row: Vec<f64> = self.values.iter().map(|r| r[jj]).collect();
            col_t.push(self.t[jj]);
            col_v.push(pchip_window(&self.s, &row, s));
        }
        pchip_window(&col_t, &col_v, t)
    }
}

/// Bivariate map `β(s, t)`: class K in `s` for fixed `t`, nonincreasing to
/// zero in `t` for fixed `s`. Checked on grids at construction.
#[derive(Clone)]
pub struct KLFunction {
    backing: KlBacking,
    name: String,
}

impl fmt::Debug for KLFunction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("KLFunction")
            .field("name", &self.name)
            .field("backing", &self.backing_kind())
            .finish()
    }
}

/// Grid parameters for KL class checks.
#[derive(Debug, Clone, Copy)]
pub struct KlCheck {
    pub s_max: f64,
    pub s_points: usize,
    pub t_max: f64,
    pub t_points: usize,
    pub tol: f64,
    /// Decay required at `t_max` relative to the value at `t = 0`.
    pub decay_factor: f64,
}

impl Default for KlCheck {
    fn default() -> Self {
        KlCheck {
            s_max: 10.0,
            s_points: 64,
            t_max: 100.0,
            t_points: 64,
            tol: 1e-9,
            decay_factor: 1e-2,
        }
    }
}

impl KLFunction {
    pub fn from_expr(expr: Expr, check: &KlCheck) -> Result<KLFunction, ComparisonError> {
        if expr.variables() != ["s", "t"] {
            return Err(ComparisonError::Invalid(
                "a KL expression must use exactly the variables (s, t)".into(),
            ));
        }
        let name = expr.print().to_string();
        let f = KLFunction {
            backing: KlBacking::Expr(expr),
            name,
        };
        f.check_kl(check)?;
        Ok(f)
    }

    /// Separable product `κ(s)·ℓ(t)` with `κ` of class K and `ℓ` of class L.
    pub fn separable(
        kappa: ScalarMonotone,
        ell: ScalarMonotone,
        check: &KlCheck,
    ) -> Result<KLFunction, ComparisonError> {
        if !kappa.class().is_k_family() {
            return Err(ComparisonError::IncompatibleClass(
                "separable KL needs a class-K first factor".into(),
            ));
        }
        if kappa.class().is_k_family() && ell.class() != FunctionClass::L {
            return Err(ComparisonError::IncompatibleClass(
                "separable KL needs a class-L second factor".into(),
            ));
        }
        let name = format!("({})*({})", kappa.name(), ell.name());
        let f = KLFunction {
            backing: KlBacking::Separable { kappa, ell },
            name,
        };
        f.check_kl(check)?;
        Ok(f)
    }

    /// Tabulated values on the rectangular grid `s × t`.
    pub fn from_grid(
        s: Vec<f64>,
        t: Vec<f64>,
        values: Vec<Vec<f64>>,
        name: impl Into<String>,
        check: &KlCheck,
    ) -> Result<KLFunction, ComparisonError> {
        if s.len() < 2 || t.len() < 2 {
            return Err(ComparisonError::InvalidGrid(
                "KL grid needs at least 2 points per axis".into(),
            ));
        }
        if values.len() != s.len() || values.iter().any(|r| r.len() != t.len()) {
            return Err(ComparisonError::InvalidGrid(
                "KL grid value matrix has wrong shape".into(),
            ));
        }
        for w in s.windows(2) {
            if w[1] <= w[0] {
                return Err(ComparisonError::InvalidGrid("s grid not increasing".into()));
            }
        }
        for w in t.windows(2) {
            if w[1] <= w[0] {
                return Err(ComparisonError::InvalidGrid("t grid not increasing".into()));
            }
        }
        let f = KLFunction {
            backing: KlBacking::Grid(KlGrid { s, t, values }),
            name: name.into(),
        };
        f.check_grid_nodes(check)?;
        Ok(f)
    }

    /// Node-exact KL check for grid backings. The interpolant inherits
    /// monotonicity along each axis from the data; checking the nodes avoids
    /// penalizing harmless cross-axis interpolation wiggle.
    fn check_grid_nodes(&self, check: &KlCheck) -> Result<(), ComparisonError> {
        let g = match &self.backing {
            KlBacking::Grid(g) => g,
            _ => return self.check_kl(check),
        };
        for (i, row) in g.values.iter().enumerate() {
            for (j, &v) in row.iter().enumerate() {
                if !v.is_finite() {
                    return Err(self.kl_err(format!(
                        "non-finite value at (s={}, t={})",
                        g.s[i], g.t[j]
                    )));
                }
                if g.s[i] == 0.0 && v.abs() > check.tol {
                    return Err(self.kl_err(format!("β(0, {}) = {v} is not 0", g.t[j])));
                }
                if i > 0 && v < g.values[i - 1][j] - check.tol {
                    return Err(self.kl_err(format!(
                        "decreasing in s at (s={}, t={})",
                        g.s[i], g.t[j]
                    )));
                }
                if i > 0 && j == 0 && v <= g.values[i - 1][0] {
                    return Err(self.kl_err(format!(
                        "not strictly increasing in s at (s={}, t=0)",
                        g.s[i]
                    )));
                }
                if j > 0 && v > row[j - 1] + check.tol {
                    return Err(self.kl_err(format!(
                        "increasing in t at (s={}, t={})",
                        g.s[i], g.t[j]
                    )));
                }
            }
            let head = row[0];
            let tail = *row.last().unwrap();
            if g.s[i] > 0.0 && head > 0.0 && tail > head * check.decay_factor {
                return Err(self.kl_err(format!(
                    "insufficient decay at s={}: head {head}, tail {tail}",
                    g.s[i]
                )));
            }
        }
        Ok(())
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn backing_kind(&self) -> KlBackingKind {
        match self.backing {
            KlBacking::Expr(_) => KlBackingKind::Expr,
            KlBacking::Separable { .. } => KlBackingKind::Separable,
            KlBacking::Grid(_) => KlBackingKind::Grid,
        }
    }

    pub fn eval(&self, s: f64, t: f64) -> f64 {
        match &self.backing {
            KlBacking::Expr(e) => e.eval(&[s, t]).unwrap_or(f64::NAN),
            KlBacking::Separable { kappa, ell } => kappa.eval(s) * ell.eval(t),
            KlBacking::Grid(g) => g.eval(s, t),
        }
    }

    /// Grid check of the KL properties. In `s` the check asks for
    /// nondecrease everywhere plus strict increase at `t = 0` (tabulated
    /// flows are legitimately flat once trajectories have decayed below the
    /// floor); in `t` it asks for nonincrease and decay at the horizon.
    pub fn check_kl(&self, check: &KlCheck) -> Result<(), ComparisonError> {
        let s_grid: Vec<f64> = (0..check.s_points)
            .map(|i| check.s_max * i as f64 / (check.s_points - 1) as f64)
            .collect();
        let t_grid: Vec<f64> = (0..check.t_points)
            .map(|j| check.t_max * j as f64 / (check.t_points - 1) as f64)
            .collect();
        for (j, &t) in t_grid.iter().enumerate() {
            let mut prev = None;
            for &s in &s_grid {
                let v = self.eval(s, t);
                if !v.is_finite() {
                    return Err(self.kl_err(format!("non-finite value at (s={s}, t={t})")));
                }
                if s == 0.0 && v.abs() > check.tol {
                    return Err(self.kl_err(format!("β(0, {t}) = {v} is not 0")));
                }
                if let Some(p) = prev {
                    if v < p - check.tol {
                        return Err(
                            self.kl_err(format!("decreasing in s at (s={s}, t={t})"))
                        );
                    }
                    if j == 0 && v <= p {
                        return Err(self.kl_err(format!(
                            "not strictly increasing in s at (s={s}, t=0)"
                        )));
                    }
                }
                prev = Some(v);
            }
        }
        for &s in s_grid.iter().skip(1) {
            let mut prev = f64::INFINITY;
            for &t in &t_grid {
                let v = self.eval(s, t);
                if v > prev + check.tol {
                    return Err(self.kl_err(format!("increasing in t at (s={s}, t={t})")));
                }
                prev = v;
            }
            let head = self.eval(s, 0.0);
            let tail = self.eval(s, check.t_max);
            if head > 0.0 && tail > head * check.decay_factor {
                return Err(self.kl_err(format!(
                    "insufficient decay at s={s}: β(s,0)={head}, β(s,{})={tail}",
                    check.t_max
                )));
            }
        }
        Ok(())
    }

    fn kl_err(&self, what: String) -> ComparisonError {
        ComparisonError::ClassCheck {
            name: self.name.clone(),
            class: FunctionClass::K,
            what: format!("KL check: {what}"),
        }
    }
}

// ---------------------------------------------------------------------------
// Time-threshold family
// ---------------------------------------------------------------------------

/// The family `{T_r}`: `T_r(s) = inf{ t ≥ 0 : β(r, t') ≤ s for all t' ≥ t }`.
///
/// Queries are answered by monotone bisection in `t` and post-processed
/// against a cache of earlier answers so that the returned family is
/// nonincreasing in `s` and nondecreasing in `r` exactly, not just up to
/// bisection noise.
pub struct TimeThresholdFamily {
    beta: KLFunction,
    tol: f64,
    cache: Vec<(f64, f64, f64)>, // (r, s, T)
}

impl TimeThresholdFamily {
    pub fn new(beta: KLFunction, tol: f64) -> TimeThresholdFamily {
        TimeThresholdFamily {
            beta,
            tol,
            cache: Vec::new(),
        }
    }

    pub fn beta(&self) -> &KLFunction {
        &self.beta
    }

    /// `T_r(s)` for `r ≥ 0`, `s > 0`.
    pub fn query(&mut self, r: f64, s: f64) -> Result<f64, ComparisonError> {
        if !(s > 0.0) {
            return Err(ComparisonError::Invalid(format!(
                "time threshold needs s > 0, got {s}"
            )));
        }
        if r < 0.0 {
            return Err(ComparisonError::Invalid(format!(
                "time threshold needs r ≥ 0, got {r}"
            )));
        }
        let raw = self.raw_threshold(r, s)?;
        // Running extremum over the query cache: answers must be
        // nondecreasing in r and nonincreasing in s.
        let mut lo = f64::NEG_INFINITY;
        let mut hi = f64::INFINITY;
        for &(rc, sc, tc) in &self.cache {
            if rc <= r && sc >= s {
                lo = lo.max(tc);
            }
            if rc >= r && sc <= s {
                hi = hi.min(tc);
            }
        }
        let mut v = raw.max(lo);
        if hi >= lo {
            v = v.min(hi.max(lo));
        }
        self.cache.push((r, s, v));
        Ok(v)
    }

    fn raw_threshold(&self, r: f64, s: f64) -> Result<f64, ComparisonError> {
        if self.beta.eval(r, 0.0) <= s {
            return Ok(0.0);
        }
        let mut lo = 0.0;
        let mut hi = 1.0;
        let mut guard = 0;
        while self.beta.eval(r, hi) > s {
            lo = hi;
            hi *= 2.0;
            guard += 1;
            if guard > 60 {
                return Err(ComparisonError::Construction(format!(
                    "β({r}, ·) does not decay below {s} within t = {hi:.3e}"
                )));
            }
        }
        while hi - lo > self.tol * hi.max(1.0) {
            let mid = 0.5 * (lo + hi);
            if self.beta.eval(r, mid) <= s {
                hi = mid;
            } else {
                lo = mid;
            }
        }
        // Upper end of the bracket: β(r, T) ≤ s is guaranteed there.
        Ok(hi)
    }
}

// ---------------------------------------------------------------------------
// Exponential KL factorization
// ---------------------------------------------------------------------------

/// Strictness rectification constant added to the sup-envelopes.
const FACTORIZATION_EPS: f64 = 1e-6;

/// Constructs class-K∞ functions `(κ₁, κ₂)` with
/// `β(s, t) ≤ κ₁(s)·κ₂(e⁻ᵗ)` at every point of `s_grid × t_grid`
/// (hard-verified before returning).
///
/// `κ₁(s) = max(s, β(s, 0)) + ε·s` (monotone envelope), and
/// `κ₂(r) = sup_s β(s, ln(1/r)) / κ₁(s) + ε·r` on `r = e⁻ᵗ`, extended to a
/// strictly increasing table anchored at `κ₂(0) = 0`.
pub fn kl_exponential_factorization(
    beta: &KLFunction,
    s_grid: &[f64],
    t_grid: &[f64],
) -> Result<(ScalarMonotone, ScalarMonotone), ComparisonError> {
    if s_grid.len() < 2 || t_grid.len() < 2 {
        return Err(ComparisonError::InvalidGrid(
            "factorization needs at least 2 grid points per axis".into(),
        ));
    }
    if s_grid.iter().any(|&s| s < 0.0) || s_grid.windows(2).any(|w| w[1] <= w[0]) {
        return Err(ComparisonError::InvalidGrid(
            "s grid must be nonnegative and increasing".into(),
        ));
    }
    if t_grid[0] != 0.0 || t_grid.windows(2).any(|w| w[1] <= w[0]) {
        return Err(ComparisonError::InvalidGrid(
            "t grid must start at 0 and increase".into(),
        ));
    }

    // κ₁: envelope of max(s, sup_t β(s,t)) = max(s, β(s,0)), rectified.
    let mut k1_pts: Vec<(f64, f64)> = Vec::with_capacity(s_grid.len() + 1);
    if s_grid[0] > 0.0 {
        k1_pts.push((0.0, 0.0));
    }
    let mut running = 0.0f64;
    for &s in s_grid {
        let raw = s.max(beta.eval(s, 0.0));
        running = running.max(raw);
        k1_pts.push((s, running + FACTORIZATION_EPS * s));
    }
    let check1 = ClassCheck {
        s_max: *s_grid.last().unwrap(),
        ..Default::default()
    };
    let kappa1 = ScalarMonotone::from_table(k1_pts.clone(), FunctionClass::KInf, &check1)?;

    // κ₂ on r = e^{-t}, ascending in r (descending in t), anchored at 0.
    let mut k2_pts: Vec<(f64, f64)> = Vec::with_capacity(t_grid.len() + 1);
    k2_pts.push((0.0, 0.0));
    let mut rows: Vec<(f64, f64)> = t_grid
        .iter()
        .map(|&t| {
            let r = (-t).exp();
            let mut sup: f64 = 0.0;
            for &(s, k1v) in k1_pts.iter().skip(if s_grid[0] > 0.0 { 1 } else { 0 }) {
                if k1v > 0.0 {
                    sup = sup.max(beta.eval(s, t) / k1v);
                }
            }
            (r, sup)
        })
        .collect();
    rows.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap());
    let mut running = 0.0f64;
    for (r, sup) in rows {
        running = running.max(sup);
        k2_pts.push((r, running + FACTORIZATION_EPS * r));
    }
    // Collapse duplicate abscissae from repeated e^{-t} underflow.
    k2_pts.dedup_by(|a, b| a.0 == b.0);
    let check2 = ClassCheck {
        s_max: 1.0,
        ..Default::default()
    };
    let kappa2 = ScalarMonotone::from_table(k2_pts, FunctionClass::KInf, &check2)?;

    // Verify the bound at every grid point before returning.
    let mut worst: Option<(f64, f64, f64)> = None;
    for &s in s_grid {
        for &t in t_grid {
            let lhs = beta.eval(s, t);
            let rhs = kappa1.eval(s) * kappa2.eval((-t).exp());
            let slack = rhs * (1.0 + 1e-12) + 1e-300 - lhs;
            if slack < 0.0 {
                let gap = lhs - rhs;
                if worst.map(|w| gap > w.2).unwrap_or(true) {
                    worst = Some((s, t, gap));
                }
            }
        }
    }
    if let Some((s, t, gap)) = worst {
        return Err(ComparisonError::Construction(format!(
            "factorization bound fails at (s={s}, t={t}) by {gap:.3e}; refine the grid or check the KL input"
        )));
    }
    Ok((kappa1, kappa2))
}

// ---------------------------------------------------------------------------
// Comparison-lemma flow bound
// ---------------------------------------------------------------------------

/// Tabulation ranges for [`ode_comparison_bound`].
#[derive(Debug, Clone, Copy)]
pub struct FlowGridParams {
    pub s_min: f64,
    pub s_max: f64,
    pub s_points: usize,
    pub t_max: f64,
    pub t_points: usize,
}

impl Default for FlowGridParams {
    fn default() -> Self {
        FlowGridParams {
            s_min: 1e-4,
            s_max: 1e4,
            s_points: 320,
            t_max: 40.0,
            t_points: 2001,
        }
    }
}

/// Underflow floor at which flow integration stops and the tail is zero.
const FLOW_FLOOR: f64 = 1e-30;

/// Builds the KL bound `β_κ` of the scalar comparison lemma: `β_κ(s, t)` is
/// the flow of `ż = −κ(z)`, `z(0) = s`, evaluated at time `t`.
///
/// Contract: any absolutely continuous `y ≥ 0` with `ẏ(t) ≤ −c·κ(y(t))`
/// a.e. on `[0, T]` for some `c > 0` satisfies `y(t) ≤ β_κ(y(0), c·t)`.
///
/// The flow is integrated adaptively per grid column with an event stop at
/// the underflow floor and returned tabulated. Rates with `κ(s) ~ s^p`,
/// `p < 1`, reach zero in finite time; near that extinction boundary the
/// tabulated values are accurate only in an absolute sense.
pub fn ode_comparison_bound(
    kappa: &ScalarMonotone,
    params: &FlowGridParams,
) -> Result<KLFunction, ComparisonError> {
    // Positive definiteness on (0, s_max] is what the flow needs.
    let probe = ClassCheck {
        s_max: params.s_max,
        ..Default::default()
    };
    for &s in probe.grid().iter().skip(1) {
        let v = kappa.eval(s);
        if !(v > 0.0) {
            return Err(ComparisonError::ClassCheck {
                name: kappa.name().to_string(),
                class: FunctionClass::PositiveDefinite,
                what: format!("κ({s}) = {v} is not positive"),
            });
        }
    }
    if kappa.eval(0.0).abs() > 1e-9 {
        return Err(ComparisonError::ClassCheck {
            name: kappa.name().to_string(),
            class: FunctionClass::PositiveDefinite,
            what: format!("κ(0) = {} is not 0", kappa.eval(0.0)),
        });
    }
    let k = kappa.clone();
    flow_upper_bound(
        move |s| k.eval(s),
        params,
        format!("flow[ż=-({})(z)]", kappa.name()),
    )
}

/// Flow tabulation without the class precondition: `κ` only needs to be
/// nonnegative. Where `κ` vanishes the flow stalls, which still yields a
/// valid (if weaker) upper envelope. Used for bounds built from grid-backed
/// decay margins whose support starts above zero.
pub(crate) fn flow_upper_bound(
    kappa: impl Fn(f64) -> f64 + Sync,
    params: &FlowGridParams,
    name: String,
) -> Result<KLFunction, ComparisonError> {
    let mut s_grid = Vec::with_capacity(params.s_points + 1);
    s_grid.push(0.0);
    let log_lo = params.s_min.ln();
    let log_hi = params.s_max.ln();
    for i in 0..params.s_points {
        s_grid.push((log_lo + (log_hi - log_lo) * i as f64 / (params.s_points - 1) as f64).exp());
    }
    let t_grid: Vec<f64> = (0..params.t_points)
        .map(|j| params.t_max * j as f64 / (params.t_points - 1) as f64)
        .collect();

    let opts = OdeOptions {
        rtol: 1e-8,
        atol: 1e-300,
        ..Default::default()
    };
    let mut values: Vec<Vec<f64>> = Vec::with_capacity(s_grid.len());
    values.push(vec![0.0; t_grid.len()]); // equilibrium row at s = 0
    for &s0 in s_grid.iter().skip(1) {
        let out = ode::integrate(
            |_t, z: &[f64], dz: &mut [f64]| {
                let k = kappa(z[0].max(0.0));
                if k < 0.0 {
                    return Err(format!("negative decay rate at z = {}", z[0]));
                }
                dz[0] = -k;
                Ok(())
            },
            0.0,
            params.t_max,
            &[s0],
            &t_grid,
            &opts,
            |_t, z| z[0] <= FLOW_FLOOR,
        );
        match out.status {
            OdeStatus::Completed | OdeStatus::Stopped { .. } => {}
            other => {
                return Err(ComparisonError::Construction(format!(
                    "flow integration from s = {s0} failed: {other:?}"
                )));
            }
        }
        let mut row: Vec<f64> = out.samples.iter().map(|v| v[0].max(0.0)).collect();
        row.resize(t_grid.len(), 0.0);
        // Enforce exact nonincrease against integrator rounding.
        for j in 1..row.len() {
            if row[j] > row[j - 1] {
                row[j] = row[j - 1];
            }
        }
        values.push(row);
    }
    // Flows from ordered starts may merge; lift any noise-level crossings so
    // the table is exactly nondecreasing in s (raising preserves the upper
    // bound and the per-row nonincrease in t).
    for i in 1..values.len() {
        for j in 0..t_grid.len() {
            if values[i][j] < values[i - 1][j] {
                values[i][j] = values[i - 1][j];
            }
        }
    }

    let check = KlCheck {
        s_max: params.s_max.min(10.0),
        t_max: params.t_max,
        decay_factor: 1.0, // decay rate depends on κ; nonincrease is checked
        ..Default::default()
    };
    KLFunction::from_grid(s_grid, t_grid, values, name, &check)
}
