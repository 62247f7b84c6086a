//! Comparison-function calculus: class K/K∞/L scalar functions, class-KL
//! bivariate functions, and the constructions built on top of them
//! (inversion, composition, time-threshold families, exponential KL
//! factorization, comparison-lemma flow bounds, and decay margins).
//!
//! Class membership is never proved symbolically; every tag is backed by a
//! grid check at a configurable resolution, and all constructions re-verify
//! their outputs on grids before returning them.

mod decay;
mod kl;
mod scalar;
mod table;

pub use decay::{build_decay_margin, DecayMargin, DecayMarginParams};
pub use kl::{
    kl_exponential_factorization, ode_comparison_bound, FlowGridParams, KlBackingKind, KlCheck,
    KLFunction, TimeThresholdFamily,
};
pub(crate) use kl::flow_upper_bound as flow_upper_bound_relaxed;
pub use scalar::{compose, invert, BackingKind, ScalarMonotone};
pub use table::MonotoneTable;

use thiserror::Error;

/// Claimed class of a scalar comparison function.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum FunctionClass {
    /// Continuous, zero at zero, strictly increasing.
    #[serde(rename = "K")]
    K,
    /// Class K and unbounded.
    #[serde(rename = "Kinf")]
    KInf,
    /// Continuous, nonincreasing, tending to zero at infinity.
    #[serde(rename = "L")]
    L,
    /// Zero at zero, positive elsewhere; no monotonicity requirement.
    #[serde(rename = "positive_definite")]
    PositiveDefinite,
}

impl FunctionClass {
    pub fn is_k_family(self) -> bool {
        matches!(self, FunctionClass::K | FunctionClass::KInf)
    }
}

/// Grid parameters for numerical class checks.
///
/// The continuum conditions (strict monotonicity, decay at infinity) are not
/// decidable numerically; these checks sample `points` locations on
/// `[0, s_max]` and test to `tol`.
#[derive(Debug, Clone, Copy)]
pub struct ClassCheck {
    pub s_max: f64,
    pub points: usize,
    pub tol: f64,
    /// Where the class-L limit is probed.
    pub decay_horizon: f64,
    /// Largest value accepted as "decayed" at the horizon.
    pub decay_tol: f64,
}

impl Default for ClassCheck {
    fn default() -> Self {
        ClassCheck {
            s_max: 10.0,
            points: 512,
            tol: 1e-12,
            decay_horizon: 100.0,
            decay_tol: 1e-3,
        }
    }
}

impl ClassCheck {
    pub fn with_range(s_max: f64) -> Self {
        ClassCheck {
            s_max,
            ..Default::default()
        }
    }

    pub(crate) fn grid(&self) -> Vec<f64> {
        let n = self.points.max(2);
        (0..n)
            .map(|i| self.s_max * i as f64 / (n - 1) as f64)
            .collect()
    }
}

#[derive(Debug, Clone, Error)]
pub enum ComparisonError {
    #[error("invalid table: {0}")]
    InvalidTable(String),
    #[error("`{name}` fails the class {class:?} check: {what}")]
    ClassCheck {
        name: String,
        class: FunctionClass,
        what: String,
    },
    #[error("value {y} is out of range for `{name}`: {what}")]
    Range { name: String, y: f64, what: String },
    #[error("incompatible classes: {0}")]
    IncompatibleClass(String),
    #[error("expression error: {0}")]
    Expr(#[from] crate::expr::ExprError),
    #[error("construction failed: {0}")]
    Construction(String),
    #[error("decrease hypothesis violated at state {state:?}, input {input:?}: directional derivative {value}")]
    HypothesisViolation {
        state: Vec<f64>,
        input: Vec<f64>,
        value: f64,
    },
    #[error("invalid grid: {0}")]
    InvalidGrid(String),
    #[error("{0}")]
    Invalid(String),
}
