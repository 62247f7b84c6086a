//! Configuration schema for the command-line front end.
//!
//! Configs are JSON documents with a `system` (registry name or inline
//! formulas), exactly one `task`, and optional output paths. Every
//! comparison function is written as `{"form": "expr"|"table", "class":
//! ..., ...}` and is class-checked at build time; `validate` collects all
//! problems instead of stopping at the first.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::certificate::{
    CandidateLyapunov, CertVariant, DecayBound, GradientMode, SandwichMode, TriggerForm,
};
use crate::comparison::{
    ClassCheck, DecayMargin, FunctionClass, KLFunction, KlCheck, ScalarMonotone,
};
use crate::converse::{ConverseBudget, WeightFunction};
use crate::expr::Expr;
use crate::stability::{CombinationMode, FitPlan, Notion, PropertySpec, SearchBudget};
use crate::system::{registry_get, builtin_registry, ControlSystem, InputDomain, InputSignal};

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, Error)]
#[error("{0}")]
pub struct ConfigError(pub String);

/// Top-level run configuration.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunConfig {
    pub schema_version: u32,
    #[serde(default = "default_seed")]
    pub seed: u64,
    pub system: SystemConfig,
    pub task: TaskConfig,
    #[serde(default)]
    pub output: OutputConfig,
}

fn default_seed() -> u64 {
    0
}

#[derive(Debug, Clone, Serialize, Deserialize, Default)]
pub struct OutputConfig {
    /// Report file name (under the output directory).
    #[serde(default)]
    pub report: Option<String>,
    /// Trajectory CSV file name, for tasks that produce one.
    #[serde(default)]
    pub trajectory_csv: Option<String>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(untagged)]
pub enum SystemConfig {
    Registry(String),
    Inline(InlineSystem),
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct InlineSystem {
    pub name: String,
    pub state_vars: Vec<String>,
    pub input_vars: Vec<String>,
    pub f: Vec<String>,
    pub h: Vec<String>,
    #[serde(default = "default_domain")]
    pub input_domain: InputDomain,
}

fn default_domain() -> InputDomain {
    InputDomain::Free
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "kebab-case")]
pub enum TaskConfig {
    Simulate(SimulateTask),
    Falsify(FalsifyTask),
    CheckCertificate(CheckCertificateTask),
    Fit(FitTask),
    ConstructConverse(ConstructConverseTask),
    KlTools(KlToolsTask),
}

impl TaskConfig {
    pub fn kind(&self) -> &'static str {
        match self {
            TaskConfig::Simulate(_) => "simulate",
            TaskConfig::Falsify(_) => "falsify",
            TaskConfig::CheckCertificate(_) => "check-certificate",
            TaskConfig::Fit(_) => "fit",
            TaskConfig::ConstructConverse(_) => "construct-converse",
            TaskConfig::KlTools(_) => "kl-tools",
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SimulateTask {
    pub initial_state: Vec<f64>,
    pub signal: SignalConfig,
    pub horizon: f64,
    #[serde(default = "default_rtol")]
    pub rtol: f64,
    #[serde(default = "default_atol")]
    pub atol: f64,
    #[serde(default = "default_samples")]
    pub samples: usize,
}

fn default_rtol() -> f64 {
    1e-8
}
fn default_atol() -> f64 {
    1e-10
}
fn default_samples() -> usize {
    201
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(untagged)]
pub enum SignalConfig {
    Constant { constant: Vec<f64> },
    Piecewise {
        breakpoints: Vec<f64>,
        values: Vec<Vec<f64>>,
    },
}

impl SignalConfig {
    pub fn build(&self, horizon: f64) -> Result<InputSignal, ConfigError> {
        match self {
            SignalConfig::Constant { constant } => {
                Ok(InputSignal::constant(constant.clone(), horizon))
            }
            SignalConfig::Piecewise {
                breakpoints,
                values,
            } => InputSignal::new(breakpoints.clone(), values.clone())
                .map_err(|e| ConfigError(format!("signal: {e}"))),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FalsifyTask {
    pub notion: Notion,
    #[serde(default)]
    pub functions: FunctionSlots,
    #[serde(default)]
    pub mode: CombinationMode,
    #[serde(default = "default_slack")]
    pub slack: f64,
    pub budget: BudgetConfig,
}

fn default_slack() -> f64 {
    1.0
}

#[derive(Debug, Clone, Serialize, Deserialize, Default)]
pub struct FunctionSlots {
    #[serde(default)]
    pub beta: Option<KlConfig>,
    #[serde(default)]
    pub gamma: Option<FnConfig>,
    #[serde(default)]
    pub sigma: Option<FnConfig>,
    #[serde(default)]
    pub sigma1: Option<FnConfig>,
    #[serde(default)]
    pub sigma2: Option<FnConfig>,
    #[serde(default)]
    pub lambda: Option<FnConfig>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BudgetConfig {
    pub max_sims: usize,
    pub horizon: f64,
    pub state_box: Vec<(f64, f64)>,
    #[serde(default = "one")]
    pub input_bound: f64,
    #[serde(default = "default_segments")]
    pub signal_segments: usize,
    #[serde(default = "default_search_rtol")]
    pub rtol: f64,
    #[serde(default = "default_search_atol")]
    pub atol: f64,
    #[serde(default = "default_search_samples")]
    pub samples_per_sim: usize,
}

fn one() -> f64 {
    1.0
}
fn default_segments() -> usize {
    4
}
fn default_search_rtol() -> f64 {
    1e-9
}
fn default_search_atol() -> f64 {
    1e-12
}
fn default_search_samples() -> usize {
    101
}

impl BudgetConfig {
    pub fn build(&self, seed: u64) -> SearchBudget {
        let mut b = SearchBudget::new(self.state_box.clone(), self.horizon, self.max_sims, seed);
        b.input_bound = self.input_bound;
        b.signal_segments = self.signal_segments;
        b.rtol = self.rtol;
        b.atol = self.atol;
        b.samples_per_sim = self.samples_per_sim;
        b
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CheckCertificateTask {
    pub variant: VariantConfig,
    pub candidate: CandidateConfig,
    pub box_bounds: Vec<(f64, f64)>,
    pub grid: usize,
    pub input_box: Vec<(f64, f64)>,
    #[serde(default = "default_input_grid")]
    pub input_grid: usize,
    #[serde(default)]
    pub tolerance: ToleranceConfig,
    #[serde(default)]
    pub trigger_form: TriggerFormConfig,
    #[serde(default = "yes")]
    pub check_sandwich: bool,
}

fn default_input_grid() -> usize {
    21
}
fn yes() -> bool {
    true
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum VariantConfig {
    IosLf,
    SiosLf,
    SiiosLf,
    RosLf,
    UosLf,
}

impl From<VariantConfig> for CertVariant {
    fn from(v: VariantConfig) -> CertVariant {
        match v {
            VariantConfig::IosLf => CertVariant::IosLf,
            VariantConfig::SiosLf => CertVariant::SiosLf,
            VariantConfig::SiiosLf => CertVariant::SiiosLf,
            VariantConfig::RosLf => CertVariant::RosLf,
            VariantConfig::UosLf => CertVariant::UosLf,
        }
    }
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum TriggerFormConfig {
    #[default]
    NonStrict,
    Strict,
}

impl From<TriggerFormConfig> for TriggerForm {
    fn from(v: TriggerFormConfig) -> TriggerForm {
        match v {
            TriggerFormConfig::NonStrict => TriggerForm::NonStrict,
            TriggerFormConfig::Strict => TriggerForm::Strict,
        }
    }
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct ToleranceConfig {
    #[serde(default = "default_tol_abs")]
    pub abs: f64,
    #[serde(default)]
    pub rel: f64,
}

fn default_tol_abs() -> f64 {
    1e-9
}

impl Default for ToleranceConfig {
    fn default() -> Self {
        ToleranceConfig {
            abs: 1e-9,
            rel: 0.0,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CandidateConfig {
    /// Closed-form value function over the state variables.
    #[serde(default)]
    pub v: Option<String>,
    /// Scattered-data value function (e.g. a reloaded weighted-value
    /// table); exactly one of `v` / `v_scattered` must be given.
    #[serde(default)]
    pub v_scattered: Option<ScatteredConfig>,
    #[serde(default)]
    pub gradient: GradientConfig,
    #[serde(default)]
    pub alpha1: Option<FnConfig>,
    #[serde(default)]
    pub alpha2: Option<FnConfig>,
    #[serde(default)]
    pub sandwich_mode: SandwichModeConfig,
    #[serde(default)]
    pub chi: Option<FnConfig>,
    #[serde(default)]
    pub decay: DecayConfig,
    #[serde(default)]
    pub singular_guard: Option<SingularConfig>,
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum GradientConfig {
    #[default]
    Symbolic,
    FiniteDifference {
        step: f64,
    },
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum SandwichModeConfig {
    #[default]
    State,
    Output,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SingularConfig {
    pub expr: String,
    pub band: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ScatteredConfig {
    pub points: Vec<Vec<f64>>,
    pub values: Vec<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize, Default)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum DecayConfig {
    #[default]
    Zero,
    Scalar {
        function: FnConfig,
    },
    StateFormula {
        expr: String,
    },
    Margin {
        s_grid: Vec<f64>,
        r_grid: Vec<f64>,
        values: Vec<Vec<f64>>,
    },
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FitTask {
    pub notion: Notion,
    pub plan: PlanConfig,
    #[serde(default)]
    pub lambda: Option<FnConfig>,
    #[serde(default)]
    pub validate_budget: Option<BudgetConfig>,
    /// Run the SIIOS ⇒ IOS ⇒ ROS implication audit instead of a single fit.
    #[serde(default)]
    pub audit: bool,
    #[serde(default)]
    pub audit_budget: Option<BudgetConfig>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PlanConfig {
    pub levels: Vec<f64>,
    pub state_box: Vec<(f64, f64)>,
    pub horizon: f64,
    #[serde(default = "default_states_per_level")]
    pub states_per_level: usize,
    #[serde(default = "default_signals_per_state")]
    pub signals_per_state: usize,
    #[serde(default = "default_t_points")]
    pub t_points: usize,
    #[serde(default = "one")]
    pub input_bound: f64,
    #[serde(default = "default_fit_rtol")]
    pub rtol: f64,
    #[serde(default = "default_inflation")]
    pub inflation: f64,
    #[serde(default = "default_decay_requirement")]
    pub decay_requirement: f64,
}

fn default_states_per_level() -> usize {
    12
}
fn default_signals_per_state() -> usize {
    4
}
fn default_t_points() -> usize {
    33
}
fn default_fit_rtol() -> f64 {
    1e-6
}
fn default_inflation() -> f64 {
    1.25
}
fn default_decay_requirement() -> f64 {
    0.5
}

impl PlanConfig {
    pub fn build(&self, seed: u64, lambda: Option<ScalarMonotone>) -> FitPlan {
        let mut p = FitPlan::new(
            self.levels.clone(),
            self.state_box.clone(),
            self.horizon,
            seed,
        );
        p.states_per_level = self.states_per_level;
        p.signals_per_state = self.signals_per_state;
        p.t_points = self.t_points;
        p.input_bound = self.input_bound;
        p.rtol = self.rtol;
        p.inflation = self.inflation;
        p.decay_requirement = self.decay_requirement;
        p.lambda = lambda;
        p
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ConstructConverseTask {
    pub lambda: LambdaConfig,
    #[serde(default)]
    pub weight: WeightConfig,
    #[serde(default)]
    pub budget: ConverseBudgetConfig,
    pub samples: SampleSetConfig,
    #[serde(default = "default_deltas")]
    pub deltas: Vec<f64>,
    /// Optional assembly inputs; without them the task stops after the
    /// decay certificate.
    #[serde(default)]
    pub alpha1: Option<FnConfig>,
    #[serde(default)]
    pub alpha2: Option<FnConfig>,
    #[serde(default)]
    pub chi: Option<FnConfig>,
    #[serde(default)]
    pub holdout: Option<SampleSetConfig>,
}

fn default_deltas() -> Vec<f64> {
    vec![1e-2, 1e-3]
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(untagged)]
pub enum LambdaConfig {
    Direct(FnConfig),
    SmallGain {
        small_gain: SmallGainConfig,
    },
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SmallGainConfig {
    pub sigma1: FnConfig,
    pub sigma2: FnConfig,
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct WeightConfig {
    pub c1: f64,
    pub c2: f64,
}

impl Default for WeightConfig {
    fn default() -> Self {
        WeightConfig { c1: 1.0, c2: 2.0 }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ConverseBudgetConfig {
    #[serde(default = "default_converse_horizon")]
    pub horizon: f64,
    #[serde(default = "default_random_signals")]
    pub random_signals: usize,
    #[serde(default = "default_segments")]
    pub signal_segments: usize,
    #[serde(default = "default_outer_points")]
    pub outer_time_points: usize,
    #[serde(default = "default_fit_rtol")]
    pub rtol: f64,
    #[serde(default = "default_search_samples")]
    pub samples_per_sim: usize,
}

fn default_converse_horizon() -> f64 {
    20.0
}
fn default_random_signals() -> usize {
    4
}
fn default_outer_points() -> usize {
    12
}

impl Default for ConverseBudgetConfig {
    fn default() -> Self {
        ConverseBudgetConfig {
            horizon: default_converse_horizon(),
            random_signals: default_random_signals(),
            signal_segments: default_segments(),
            outer_time_points: default_outer_points(),
            rtol: default_fit_rtol(),
            samples_per_sim: default_search_samples(),
        }
    }
}

impl ConverseBudgetConfig {
    pub fn build(&self, seed: u64) -> ConverseBudget {
        ConverseBudget {
            horizon: self.horizon,
            random_signals: self.random_signals,
            signal_segments: self.signal_segments,
            outer_time_points: self.outer_time_points,
            rtol: self.rtol,
            samples_per_sim: self.samples_per_sim,
            seed,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(untagged)]
pub enum SampleSetConfig {
    Explicit(Vec<Vec<f64>>),
    Random {
        random: RandomSamples,
    },
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RandomSamples {
    pub count: usize,
    pub box_bounds: Vec<(f64, f64)>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct KlToolsTask {
    pub operation: KlOperation,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "kebab-case")]
pub enum KlOperation {
    Invert {
        function: FnConfig,
        targets: Vec<f64>,
        #[serde(default = "default_invert_tol")]
        tol: f64,
    },
    Compose {
        outer: FnConfig,
        inner: FnConfig,
        eval_at: Vec<f64>,
    },
    TimeThreshold {
        beta: KlConfig,
        /// `(r, s)` query pairs.
        queries: Vec<(f64, f64)>,
        #[serde(default = "default_invert_tol")]
        tol: f64,
    },
    Factorize {
        beta: KlConfig,
        s_max: f64,
        t_max: f64,
        #[serde(default = "default_factor_points")]
        points: usize,
        #[serde(default = "default_holdout_refine")]
        holdout_refine: usize,
        #[serde(default = "default_holdout_slack")]
        holdout_slack: f64,
    },
    ComparisonFlow {
        kappa: FnConfig,
        /// `(s, t)` evaluation points.
        eval_at: Vec<(f64, f64)>,
        /// Optional closed-form reference over (s, t) with a relative
        /// tolerance to verify against.
        #[serde(default)]
        reference: Option<String>,
        #[serde(default = "default_flow_rel_tol")]
        rel_tol: f64,
    },
    /// `λ(s) = σ₂⁻¹(σ₁⁻¹(s/2)/2)` evaluated at the given points, with an
    /// optional closed-form reference over `s`.
    SmallGain {
        sigma1: FnConfig,
        sigma2: FnConfig,
        eval_at: Vec<f64>,
        #[serde(default)]
        reference: Option<String>,
        #[serde(default = "default_invert_tol")]
        tol: f64,
    },
}

fn default_invert_tol() -> f64 {
    1e-9
}
fn default_factor_points() -> usize {
    200
}
fn default_holdout_refine() -> usize {
    10
}
fn default_holdout_slack() -> f64 {
    1.05
}
fn default_flow_rel_tol() -> f64 {
    1e-4
}

// ---------------------------------------------------------------------------
// Comparison-function configs
// ---------------------------------------------------------------------------

/// Scalar comparison function: closed form or table.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "form", rename_all = "kebab-case")]
pub enum FnConfig {
    Expr {
        class: FunctionClass,
        expr: String,
        #[serde(default)]
        check: Option<CheckConfig>,
    },
    Table {
        class: FunctionClass,
        points: Vec<(f64, f64)>,
        #[serde(default)]
        check: Option<CheckConfig>,
    },
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct CheckConfig {
    #[serde(default = "default_check_range")]
    pub s_max: f64,
    #[serde(default = "default_check_points")]
    pub points: usize,
    #[serde(default = "default_check_tol")]
    pub tol: f64,
    #[serde(default = "default_check_horizon")]
    pub decay_horizon: f64,
    #[serde(default = "default_check_decay_tol")]
    pub decay_tol: f64,
}

fn default_check_range() -> f64 {
    10.0
}
fn default_check_points() -> usize {
    512
}
fn default_check_tol() -> f64 {
    1e-12
}
fn default_check_horizon() -> f64 {
    100.0
}
fn default_check_decay_tol() -> f64 {
    1e-3
}

impl CheckConfig {
    pub fn build(&self) -> ClassCheck {
        ClassCheck {
            s_max: self.s_max,
            points: self.points,
            tol: self.tol,
            decay_horizon: self.decay_horizon,
            decay_tol: self.decay_tol,
        }
    }
}

impl FnConfig {
    pub fn build(&self) -> Result<ScalarMonotone, ConfigError> {
        match self {
            FnConfig::Expr { class, expr, check } => {
                let e = Expr::parse(expr, &["s"])
                    .map_err(|err| ConfigError(format!("`{expr}`: {err}")))?;
                let check = check.map(|c| c.build()).unwrap_or_default();
                ScalarMonotone::from_expr(e, *class, &check)
                    .map_err(|err| ConfigError(err.to_string()))
            }
            FnConfig::Table {
                class,
                points,
                check,
            } => {
                let check = check.map(|c| c.build()).unwrap_or_else(|| ClassCheck {
                    s_max: points.last().map(|p| p.0).unwrap_or(10.0),
                    ..Default::default()
                });
                ScalarMonotone::from_table(points.clone(), *class, &check)
                    .map_err(|err| ConfigError(err.to_string()))
            }
        }
    }
}

/// Class-KL function: closed form in (s, t), separable product, or grid.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "form", rename_all = "kebab-case")]
pub enum KlConfig {
    Expr {
        expr: String,
        #[serde(default)]
        check: Option<KlCheckConfig>,
    },
    Separable {
        kappa: FnConfig,
        ell: FnConfig,
        #[serde(default)]
        check: Option<KlCheckConfig>,
    },
    Grid {
        s: Vec<f64>,
        t: Vec<f64>,
        values: Vec<Vec<f64>>,
        #[serde(default)]
        check: Option<KlCheckConfig>,
    },
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct KlCheckConfig {
    #[serde(default = "default_check_range")]
    pub s_max: f64,
    #[serde(default = "default_kl_t_max")]
    pub t_max: f64,
    #[serde(default = "default_kl_decay_factor")]
    pub decay_factor: f64,
}

fn default_kl_t_max() -> f64 {
    100.0
}
fn default_kl_decay_factor() -> f64 {
    1e-2
}

impl KlCheckConfig {
    fn build(&self) -> KlCheck {
        KlCheck {
            s_max: self.s_max,
            t_max: self.t_max,
            decay_factor: self.decay_factor,
            ..Default::default()
        }
    }
}

impl KlConfig {
    pub fn build(&self) -> Result<KLFunction, ConfigError> {
        match self {
            KlConfig::Expr { expr, check } => {
                let e = Expr::parse(expr, &["s", "t"])
                    .map_err(|err| ConfigError(format!("`{expr}`: {err}")))?;
                let check = check.map(|c| c.build()).unwrap_or_default();
                KLFunction::from_expr(e, &check).map_err(|err| ConfigError(err.to_string()))
            }
            KlConfig::Separable { kappa, ell, check } => {
                let check = check.map(|c| c.build()).unwrap_or_default();
                KLFunction::separable(kappa.build()?, ell.build()?, &check)
                    .map_err(|err| ConfigError(err.to_string()))
            }
            KlConfig::Grid {
                s,
                t,
                values,
                check,
            } => {
                let check = check.map(|c| c.build()).unwrap_or_default();
                KLFunction::from_grid(s.clone(), t.clone(), values.clone(), "grid", &check)
                    .map_err(|err| ConfigError(err.to_string()))
            }
        }
    }
}

// ---------------------------------------------------------------------------
// Building and validation
// ---------------------------------------------------------------------------

impl SystemConfig {
    pub fn build(&self) -> Result<ControlSystem, ConfigError> {
        match self {
            SystemConfig::Registry(name) => registry_get(name).ok_or_else(|| {
                let suggestion = nearest_registry_name(name);
                ConfigError(match suggestion {
                    Some(s) => format!("unknown system `{name}` (did you mean `{s}`?)"),
                    None => format!("unknown system `{name}`"),
                })
            }),
            SystemConfig::Inline(inline) => {
                let sv: Vec<&str> = inline.state_vars.iter().map(|s| s.as_str()).collect();
                let iv: Vec<&str> = inline.input_vars.iter().map(|s| s.as_str()).collect();
                let f: Vec<&str> = inline.f.iter().map(|s| s.as_str()).collect();
                let h: Vec<&str> = inline.h.iter().map(|s| s.as_str()).collect();
                ControlSystem::from_formulas(
                    inline.name.clone(),
                    &sv,
                    &iv,
                    &f,
                    &h,
                    inline.input_domain,
                )
                .map_err(|e| ConfigError(e.to_string()))
            }
        }
    }
}

/// Nearest registry name by edit distance, for diagnostics.
pub fn nearest_registry_name(name: &str) -> Option<String> {
    builtin_registry()
        .iter()
        .map(|s| (edit_distance(name, s.name()), s.name().to_string()))
        .min()
        .filter(|(d, _)| *d <= name.len().max(3))
        .map(|(_, n)| n)
}

fn edit_distance(a: &str, b: &str) -> usize {
    let a: Vec<char> = a.chars().collect();
    let b: Vec<char> = b.chars().collect();
    let mut prev: Vec<usize> = (0..=b.len()).collect();
    let mut cur = vec![0usize; b.len() + 1];
    for i in 1..=a.len() {
        cur[0] = i;
        for j in 1..=b.len() {
            let cost = if a[i - 1] == b[j - 1] { 0 } else { 1 };
            cur[j] = (prev[j] + 1).min(cur[j - 1] + 1).min(prev[j - 1] + cost);
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

impl FalsifyTask {
    pub fn build_spec(&self) -> Result<PropertySpec, ConfigError> {
        let mut spec = PropertySpec::new(self.notion);
        spec.mode = self.mode;
        spec.slack = self.slack;
        if let Some(b) = &self.functions.beta {
            spec.beta = Some(b.build()?);
        }
        if let Some(f) = &self.functions.gamma {
            spec.gamma = Some(f.build()?);
        }
        if let Some(f) = &self.functions.sigma {
            spec.sigma = Some(f.build()?);
        }
        if let Some(f) = &self.functions.sigma1 {
            spec.sigma1 = Some(f.build()?);
        }
        if let Some(f) = &self.functions.sigma2 {
            spec.sigma2 = Some(f.build()?);
        }
        if let Some(f) = &self.functions.lambda {
            spec.lambda = Some(f.build()?);
        }
        spec.validate().map_err(|e| ConfigError(e.to_string()))?;
        Ok(spec)
    }
}

impl CandidateConfig {
    pub fn build(&self, sys: &ControlSystem) -> Result<CandidateLyapunov, ConfigError> {
        let state_vars: Vec<&str> = sys.state_vars().iter().map(|s| s.as_str()).collect();
        let gradient = match self.gradient {
            GradientConfig::Symbolic => GradientMode::Symbolic,
            GradientConfig::FiniteDifference { step } => GradientMode::FiniteDifference { step },
        };
        let mut cand = match (&self.v, &self.v_scattered) {
            (Some(v), None) => CandidateLyapunov::from_formula(v, v, &state_vars, gradient)
                .map_err(|e| ConfigError(e.to_string()))?,
            (None, Some(sc)) => {
                if matches!(gradient, GradientMode::Symbolic) {
                    return Err(ConfigError(
                        "a scattered value function needs a finite-difference gradient".into(),
                    ));
                }
                let table =
                    crate::certificate::ScatteredTable::new(sc.points.clone(), sc.values.clone())
                        .map_err(|e| ConfigError(e.to_string()))?;
                CandidateLyapunov::new(
                    "scattered value function",
                    crate::certificate::ValueFn::Scattered(table),
                    gradient,
                )
                .map_err(|e| ConfigError(e.to_string()))?
            }
            _ => {
                return Err(ConfigError(
                    "exactly one of `v` and `v_scattered` must be given".into(),
                ));
            }
        };
        if self.v.is_some() {
            cand.check_origin(sys.state_dim())
                .map_err(|e| ConfigError(e.to_string()))?;
        }
        if let (Some(a1), Some(a2)) = (&self.alpha1, &self.alpha2) {
            let mode = match self.sandwich_mode {
                SandwichModeConfig::State => SandwichMode::StateNorm,
                SandwichModeConfig::Output => SandwichMode::OutputNorm,
            };
            cand = cand.with_sandwich(a1.build()?, a2.build()?, mode);
        }
        if let Some(chi) = &self.chi {
            cand = cand.with_trigger(chi.build()?);
        }
        let decay = match &self.decay {
            DecayConfig::Zero => DecayBound::Zero,
            DecayConfig::Scalar { function } => DecayBound::Scalar(function.build()?),
            DecayConfig::StateFormula { expr } => {
                let e = Expr::parse(expr, &state_vars)
                    .map_err(|err| ConfigError(format!("decay `{expr}`: {err}")))?;
                DecayBound::StateFormula(e)
            }
            DecayConfig::Margin {
                s_grid,
                r_grid,
                values,
            } => DecayBound::Margin(
                DecayMargin::from_grid(s_grid.clone(), r_grid.clone(), values.clone())
                    .map_err(|e| ConfigError(e.to_string()))?,
            ),
        };
        cand = cand.with_decay(decay);
        if let Some(sg) = &self.singular_guard {
            let e = Expr::parse(&sg.expr, &state_vars)
                .map_err(|err| ConfigError(format!("singular guard `{}`: {err}", sg.expr)))?;
            cand = cand.with_singular_set(e, sg.band);
        }
        Ok(cand)
    }
}

impl ConstructConverseTask {
    pub fn build_lambda(&self) -> Result<ScalarMonotone, ConfigError> {
        match &self.lambda {
            LambdaConfig::Direct(f) => f.build(),
            LambdaConfig::SmallGain { small_gain } => {
                let s1 = small_gain.sigma1.build()?;
                let s2 = small_gain.sigma2.build()?;
                crate::converse::small_gain_lambda(&s1, &s2, &ClassCheck::default())
                    .and_then(|l| l.tabulated_copy(100.0, 2049))
                    .map_err(|e| ConfigError(e.to_string()))
            }
        }
    }

    pub fn build_weight(&self) -> Result<WeightFunction, ConfigError> {
        WeightFunction::new(self.weight.c1, self.weight.c2)
            .map_err(|e| ConfigError(e.to_string()))
    }
}

impl SampleSetConfig {
    pub fn build(&self, seed: u64, state_dim: usize) -> Result<Vec<Vec<f64>>, ConfigError> {
        use rand::{Rng, SeedableRng};
        match self {
            SampleSetConfig::Explicit(pts) => {
                for p in pts {
                    if p.len() != state_dim {
                        return Err(ConfigError(format!(
                            "sample {p:?} has wrong dimension (state dimension is {state_dim})"
                        )));
                    }
                }
                Ok(pts.clone())
            }
            SampleSetConfig::Random { random } => {
                if random.box_bounds.len() != state_dim {
                    return Err(ConfigError(format!(
                        "sample box has {} axes for state dimension {state_dim}",
                        random.box_bounds.len()
                    )));
                }
                let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed ^ 0x5A5A5A);
                Ok((0..random.count)
                    .map(|_| {
                        random
                            .box_bounds
                            .iter()
                            .map(|&(lo, hi)| rng.gen_range(lo..hi))
                            .collect()
                    })
                    .collect())
            }
        }
    }
}

/// Parses a config document, returning every schema-level problem found.
pub fn parse_config(text: &str) -> Result<RunConfig, Vec<String>> {
    let cfg: RunConfig =
        serde_json::from_str(text).map_err(|e| vec![format!("config does not parse: {e}")])?;
    if cfg.schema_version != SCHEMA_VERSION {
        return Err(vec![format!(
            "unsupported schema_version {} (supported: {SCHEMA_VERSION})",
            cfg.schema_version
        )]);
    }
    Ok(cfg)
}

/// Full validation without simulation: builds the system, every comparison
/// function, and every candidate, collecting all diagnostics.
pub fn validate_config(cfg: &RunConfig) -> Vec<String> {
    let mut problems = Vec::new();
    let sys = match cfg.system.build() {
        Ok(s) => Some(s),
        Err(e) => {
            problems.push(format!("system: {e}"));
            None
        }
    };
    fn check_fn(problems: &mut Vec<String>, label: &str, f: &Option<FnConfig>) {
        if let Some(f) = f {
            if let Err(e) = f.build() {
                problems.push(format!("{label}: {e}"));
            }
        }
    }
    match &cfg.task {
        TaskConfig::Simulate(t) => {
            if let Some(sys) = &sys {
                if t.initial_state.len() != sys.state_dim() {
                    problems.push(format!(
                        "initial_state has {} entries for state dimension {}",
                        t.initial_state.len(),
                        sys.state_dim()
                    ));
                }
                if let Err(e) = t.signal.build(t.horizon) {
                    problems.push(format!("signal: {e}"));
                } else if let Ok(sig) = t.signal.build(t.horizon) {
                    if sig.dim() != sys.input_dim() {
                        problems.push(format!(
                            "signal dimension {} for input dimension {}",
                            sig.dim(),
                            sys.input_dim()
                        ));
                    }
                }
                if !(t.horizon > 0.0) {
                    problems.push("horizon must be positive".into());
                }
            }
        }
        TaskConfig::Falsify(t) => {
            if let Some(b) = &t.functions.beta {
                if let Err(e) = b.build() {
                    problems.push(format!("beta: {e}"));
                }
            }
            check_fn(&mut problems, "gamma", &t.functions.gamma);
            check_fn(&mut problems, "sigma", &t.functions.sigma);
            check_fn(&mut problems, "sigma1", &t.functions.sigma1);
            check_fn(&mut problems, "sigma2", &t.functions.sigma2);
            check_fn(&mut problems, "lambda", &t.functions.lambda);
            if problems.is_empty() {
                if let Err(e) = t.build_spec() {
                    problems.push(format!("property spec: {e}"));
                }
            }
            if let Some(sys) = &sys {
                if t.budget.state_box.len() != sys.state_dim() {
                    problems.push(format!(
                        "budget state_box has {} axes for state dimension {}",
                        t.budget.state_box.len(),
                        sys.state_dim()
                    ));
                }
            }
        }
        TaskConfig::CheckCertificate(t) => {
            if let Some(sys) = &sys {
                if let Err(e) = t.candidate.build(sys) {
                    problems.push(format!("candidate: {e}"));
                }
                if t.box_bounds.len() != sys.state_dim() {
                    problems.push(format!(
                        "box has {} axes for state dimension {}",
                        t.box_bounds.len(),
                        sys.state_dim()
                    ));
                }
                if t.input_box.len() != sys.input_dim() {
                    problems.push(format!(
                        "input_box has {} axes for input dimension {}",
                        t.input_box.len(),
                        sys.input_dim()
                    ));
                }
            }
            if t.grid < 2 {
                problems.push("grid needs at least 2 points per axis".into());
            }
        }
        TaskConfig::Fit(t) => {
            if t.plan.levels.is_empty() || t.plan.levels.windows(2).any(|w| w[1] <= w[0]) {
                problems.push("plan.levels must be ascending and nonempty".into());
            }
            check_fn(&mut problems, "lambda", &t.lambda);
            if t.audit && t.audit_budget.is_none() {
                problems.push("audit: true requires audit_budget".into());
            }
        }
        TaskConfig::ConstructConverse(t) => {
            if let Err(e) = t.build_lambda() {
                problems.push(format!("lambda: {e}"));
            }
            if let Err(e) = t.build_weight() {
                problems.push(format!("weight: {e}"));
            }
            check_fn(&mut problems, "alpha1", &t.alpha1);
            check_fn(&mut problems, "alpha2", &t.alpha2);
            check_fn(&mut problems, "chi", &t.chi);
            if let Some(sys) = &sys {
                if let Err(e) = t.samples.build(cfg.seed, sys.state_dim()) {
                    problems.push(format!("samples: {e}"));
                }
            }
        }
        TaskConfig::KlTools(t) => match &t.operation {
            KlOperation::Invert { function, .. } => {
                if let Err(e) = function.build() {
                    problems.push(format!("function: {e}"));
                }
            }
            KlOperation::Compose { outer, inner, .. } => {
                if let Err(e) = outer.build() {
                    problems.push(format!("outer: {e}"));
                }
                if let Err(e) = inner.build() {
                    problems.push(format!("inner: {e}"));
                }
            }
            KlOperation::TimeThreshold { beta, .. } | KlOperation::Factorize { beta, .. } => {
                if let Err(e) = beta.build() {
                    problems.push(format!("beta: {e}"));
                }
            }
            KlOperation::ComparisonFlow { kappa, reference, .. } => {
                if let Err(e) = kappa.build() {
                    problems.push(format!("kappa: {e}"));
                }
                if let Some(r) = reference {
                    if let Err(e) = Expr::parse(r, &["s", "t"]) {
                        problems.push(format!("reference `{r}`: {e}"));
                    }
                }
            }
            KlOperation::SmallGain {
                sigma1,
                sigma2,
                reference,
                ..
            } => {
                if let Err(e) = sigma1.build() {
                    problems.push(format!("sigma1: {e}"));
                }
                if let Err(e) = sigma2.build() {
                    problems.push(format!("sigma2: {e}"));
                }
                if let Some(r) = reference {
                    if let Err(e) = Expr::parse(r, &["s"]) {
                        problems.push(format!("reference `{r}`: {e}"));
                    }
                }
            }
        },
    }
    problems
}
