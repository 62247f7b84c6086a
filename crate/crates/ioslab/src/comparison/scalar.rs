//! Scalar comparison functions and the pointwise calculus on them.

use std::fmt;
use std::sync::Arc;

use super::table::MonotoneTable;
use super::{ClassCheck, ComparisonError, FunctionClass};
use crate::expr::Expr;

#[derive(Clone)]
enum Backing {
    /// Closed form in one variable.
    Expr(Expr),
    /// Tabulated samples with monotone cubic interpolation.
    Table(MonotoneTable),
    /// Computed form (compositions, inverses, fitted envelopes). Serialized
    /// by tabulation.
    Func(Arc<dyn Fn(f64) -> f64 + Send + Sync>),
}

/// Which representation backs a [`ScalarMonotone`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BackingKind {
    Expr,
    Table,
    Computed,
}

/// A scalar function on `[0, ∞)` tagged with a claimed comparison class.
///
/// The tag is validated on a sample grid at construction; the function itself
/// is total (domain problems surface as construction errors, not evaluation
/// panics). Values are immutable and cheap to clone.
#[derive(Clone)]
pub struct ScalarMonotone {
    backing: Backing,
    class: FunctionClass,
    name: String,
}

impl fmt::Debug for ScalarMonotone {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("ScalarMonotone")
            .field("name", &self.name)
            .field("class", &self.class)
            .field("backing", &self.backing_kind())
            .finish()
    }
}

impl ScalarMonotone {
    /// Wraps a closed-form expression in one variable.
    pub fn from_expr(
        expr: Expr,
        class: FunctionClass,
        check: &ClassCheck,
    ) -> Result<ScalarMonotone, ComparisonError> {
        if expr.variables().len() != 1 {
            return Err(ComparisonError::Invalid(format!(
                "comparison function must have exactly one variable, got {}",
                expr.variables().len()
            )));
        }
        let name = expr.print().to_string();
        let f = ScalarMonotone {
            backing: Backing::Expr(expr),
            class,
            name,
        };
        f.check_class(check)?;
        Ok(f)
    }

    /// Wraps strictly monotone `(s, value)` samples.
    pub fn from_table(
        points: Vec<(f64, f64)>,
        class: FunctionClass,
        check: &ClassCheck,
    ) -> Result<ScalarMonotone, ComparisonError> {
        let table = MonotoneTable::new(points)?;
        let f = ScalarMonotone {
            backing: Backing::Table(table),
            class,
            name: "table".into(),
        };
        f.check_class(check)?;
        Ok(f)
    }

    /// Wraps an arbitrary computed function (still grid-checked).
    pub fn from_fn(
        name: impl Into<String>,
        f: impl Fn(f64) -> f64 + Send + Sync + 'static,
        class: FunctionClass,
        check: &ClassCheck,
    ) -> Result<ScalarMonotone, ComparisonError> {
        let f = ScalarMonotone {
            backing: Backing::Func(Arc::new(f)),
            class,
            name: name.into(),
        };
        f.check_class(check)?;
        Ok(f)
    }

    /// The identity, class K∞.
    pub fn identity() -> ScalarMonotone {
        ScalarMonotone {
            backing: Backing::Func(Arc::new(|s| s)),
            class: FunctionClass::KInf,
            name: "s".into(),
        }
    }

    /// Linear function `c·s`, class K∞ (requires `c > 0`).
    pub fn linear(c: f64) -> Result<ScalarMonotone, ComparisonError> {
        if !(c > 0.0) {
            return Err(ComparisonError::Invalid(format!(
                "linear gain must be positive, got {c}"
            )));
        }
        Ok(ScalarMonotone {
            backing: Backing::Func(Arc::new(move |s| c * s)),
            class: FunctionClass::KInf,
            name: format!("{c}*s"),
        })
    }

    pub fn class(&self) -> FunctionClass {
        self.class
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn backing_kind(&self) -> BackingKind {
        match self.backing {
            Backing::Expr(_) => BackingKind::Expr,
            Backing::Table(_) => BackingKind::Table,
            Backing::Func(_) => BackingKind::Computed,
        }
    }

    /// The closed-form expression, when that is the backing.
    pub fn as_expr(&self) -> Option<&Expr> {
        match &self.backing {
            Backing::Expr(e) => Some(e),
            _ => None,
        }
    }

    /// The sample table, when that is the backing.
    pub fn as_table(&self) -> Option<&MonotoneTable> {
        match &self.backing {
            Backing::Table(t) => Some(t),
            _ => None,
        }
    }

    /// Evaluates at `s ≥ 0`. Evaluation never fails; construction-time grid
    /// checks are responsible for rejecting ill-defined formulas. A genuine
    /// domain failure at evaluation time surfaces as NaN.
    pub fn eval(&self, s: f64) -> f64 {
        match &self.backing {
            Backing::Expr(e) => e.eval(&[s]).unwrap_or(f64::NAN),
            Backing::Table(t) => t.eval(s),
            Backing::Func(f) => f(s),
        }
    }

    /// Derivative at `s`: symbolic for expressions, interpolant slope for
    /// tables, central difference for computed forms.
    pub fn derivative(&self, s: f64) -> f64 {
        match &self.backing {
            Backing::Expr(e) => match e.gradient() {
                Ok(g) => g[0].eval(&[s]).unwrap_or(f64::NAN),
                Err(_) => self.derivative_fd(s),
            },
            Backing::Table(t) => t.derivative(s),
            Backing::Func(_) => self.derivative_fd(s),
        }
    }

    fn derivative_fd(&self, s: f64) -> f64 {
        let h = 1e-6 * s.abs().max(1.0);
        let lo = (s - h).max(0.0);
        (self.eval(s + h) - self.eval(lo)) / (s + h - lo)
    }

    /// Samples the function on `n` uniform points of `[0, s_max]`.
    pub fn tabulate(&self, s_max: f64, n: usize) -> Vec<(f64, f64)> {
        let n = n.max(2);
        (0..n)
            .map(|i| {
                let s = s_max * i as f64 / (n - 1) as f64;
                (s, self.eval(s))
            })
            .collect()
    }

    /// A table-backed copy sampled on `[0, s_max]`, for hot paths where the
    /// original backing is expensive to evaluate (nested inversions inside
    /// integrator right-hand sides). Linear extension applies beyond the
    /// table.
    pub fn tabulated_copy(
        &self,
        s_max: f64,
        n: usize,
    ) -> Result<ScalarMonotone, ComparisonError> {
        let check = ClassCheck {
            s_max,
            ..Default::default()
        };
        let mut copy = ScalarMonotone::from_table(self.tabulate(s_max, n), self.class, &check)?;
        copy.name = self.name.clone();
        Ok(copy)
    }

    /// Verifies the claimed class on the check grid.
    pub fn check_class(&self, check: &ClassCheck) -> Result<(), ComparisonError> {
        let grid = check.grid();
        let values: Vec<f64> = grid.iter().map(|&s| self.eval(s)).collect();
        if let Some(idx) = values.iter().position(|v| !v.is_finite()) {
            return Err(self.class_err(check, format!("non-finite value at s={}", grid[idx])));
        }
        match self.class {
            FunctionClass::K | FunctionClass::KInf => {
                if values[0].abs() > check.tol {
                    return Err(self.class_err(check, format!("value at 0 is {}", values[0])));
                }
                for i in 1..values.len() {
                    if values[i] <= values[i - 1] {
                        return Err(self.class_err(
                            check,
                            format!(
                                "not strictly increasing between s={} and s={}",
                                grid[i - 1],
                                grid[i]
                            ),
                        ));
                    }
                }
                if self.class == FunctionClass::KInf {
                    // Unboundedness is a slope condition beyond the grid.
                    let far = self.eval(2.0 * check.s_max);
                    let end = values[values.len() - 1];
                    if !(far > end) {
                        return Err(
                            self.class_err(check, "no growth beyond the check range".into())
                        );
                    }
                }
            }
            FunctionClass::L => {
                for i in 1..values.len() {
                    if values[i] > values[i - 1] + check.tol {
                        return Err(self.class_err(
                            check,
                            format!(
                                "not nonincreasing between s={} and s={}",
                                grid[i - 1],
                                grid[i]
                            ),
                        ));
                    }
                }
                let tail = self.eval(check.decay_horizon);
                if tail.abs() > check.decay_tol {
                    return Err(self.class_err(
                        check,
                        format!(
                            "value {tail} at horizon {} above decay tolerance {}",
                            check.decay_horizon, check.decay_tol
                        ),
                    ));
                }
            }
            FunctionClass::PositiveDefinite => {
                if values[0].abs() > check.tol {
                    return Err(self.class_err(check, format!("value at 0 is {}", values[0])));
                }
                for i in 1..values.len() {
                    if values[i] <= 0.0 {
                        return Err(self.class_err(
                            check,
                            format!("non-positive value {} at s={}", values[i], grid[i]),
                        ));
                    }
                }
            }
        }
        Ok(())
    }

    fn class_err(&self, _check: &ClassCheck, what: String) -> ComparisonError {
        ComparisonError::ClassCheck {
            name: self.name.clone(),
            class: self.class,
            what,
        }
    }
}

/// Solves `f(s) = y` for a class-K function by bracketing bisection.
///
/// Returns `s` with `|f(s) − y| ≤ tol·max(1, |y|)`; the solution is unique by
/// strict monotonicity. `y` below `f(0)` is a range error, as is `y` above
/// the reachable range of a non-K∞ function.
pub fn invert(f: &ScalarMonotone, y: f64, tol: f64) -> Result<f64, ComparisonError> {
    if !f.class().is_k_family() {
        return Err(ComparisonError::IncompatibleClass(format!(
            "cannot invert `{}` of class {:?}",
            f.name(),
            f.class()
        )));
    }
    let f0 = f.eval(0.0);
    let target_tol = tol * y.abs().max(1.0);
    if y < f0 - target_tol {
        return Err(ComparisonError::Range {
            name: f.name().to_string(),
            y,
            what: format!("below f(0) = {f0}"),
        });
    }
    if y <= f0 {
        return Ok(0.0);
    }
    // Find an upper bracket by doubling.
    let mut hi = 1.0;
    let mut lo = 0.0;
    let mut guard = 0;
    while f.eval(hi) < y {
        lo = hi;
        hi *= 2.0;
        guard += 1;
        if guard > 1100 || !hi.is_finite() {
            return Err(ComparisonError::Range {
                name: f.name().to_string(),
                y,
                what: "above the function range".into(),
            });
        }
    }
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        let v = f.eval(mid);
        if (v - y).abs() <= target_tol {
            return Ok(mid);
        }
        if v < y {
            lo = mid;
        } else {
            hi = mid;
        }
        if (hi - lo) <= f64::EPSILON * hi.abs().max(1.0) {
            break;
        }
    }
    Ok(0.5 * (lo + hi))
}

/// Pointwise composition `f ∘ g` with class propagation
/// (K∘K = K, K∞∘K∞ = K∞); the result is re-checked on the grid.
pub fn compose(
    f: &ScalarMonotone,
    g: &ScalarMonotone,
    check: &ClassCheck,
) -> Result<ScalarMonotone, ComparisonError> {
    if !f.class().is_k_family() || !g.class().is_k_family() {
        return Err(ComparisonError::IncompatibleClass(format!(
            "compose requires class-K operands, got {:?} and {:?}",
            f.class(),
            g.class()
        )));
    }
    let class = if f.class() == FunctionClass::KInf && g.class() == FunctionClass::KInf {
        FunctionClass::KInf
    } else {
        FunctionClass::K
    };
    let name = format!("({})∘({})", f.name(), g.name());
    let fc = f.clone();
    let gc = g.clone();
    ScalarMonotone::from_fn(name, move |s| fc.eval(gc.eval(s)), class, check)
}
