//! The converse construction: small-gain feedback radius, zero-output set
//! membership, value function, weighted value function, and the empirical
//! decay certificate assembled from them.
//!
//! Everything here is a budgeted under-approximation: value functions are
//! suprema over sampled disturbance signals and time grids, so returned
//! values never exceed the true ones, re-querying with a larger budget never
//! decreases an estimate, and the structural bounds (`ω ≥ |h(ξ)|`,
//! `c₁ω ≤ W ≤ c₂ω`) hold by construction and are asserted on every query.

use std::collections::HashMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;
use thiserror::Error;

use crate::certificate::{
    dini_decrease_along_flow, CandidateLyapunov, CertificateError, DecayBound, GradientMode,
    ScatteredTable, SandwichMode, ValueFn,
};
use crate::comparison::{
    invert, ClassCheck, ComparisonError, DecayMargin, FunctionClass, ScalarMonotone,
};
use crate::system::{
    norm, simulate_with, ControlSystem, InputDomain, InputSignal, SimOptions, SimStatus,
    SystemError,
};

#[derive(Debug, Clone, Error)]
pub enum ConverseError {
    #[error(transparent)]
    System(#[from] SystemError),
    #[error(transparent)]
    Comparison(#[from] ComparisonError),
    #[error(transparent)]
    Certificate(#[from] CertificateError),
    #[error("trajectory from {state:?} blew up at t = {t}; the uniform output-stability hypothesis fails")]
    BlowUp { state: Vec<f64>, t: f64 },
    #[error("{0}")]
    Invalid(String),
}

// ---------------------------------------------------------------------------
// Weight function
// ---------------------------------------------------------------------------

/// The bounded increasing time weight `k(t) = c₂ − (c₂−c₁)e⁻ᵗ`.
///
/// `k(0) = c₁`, `k` increases strictly toward `c₂`, and `k'(t) > 0`
/// everywhere, which is what turns the plain value function into a strictly
/// decreasing one.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct WeightFunction {
    c1: f64,
    c2: f64,
}

impl WeightFunction {
    pub fn new(c1: f64, c2: f64) -> Result<WeightFunction, ConverseError> {
        if !(0.0 < c1 && c1 < c2) {
            return Err(ConverseError::Invalid(format!(
                "weight needs 0 < c1 < c2, got ({c1}, {c2})"
            )));
        }
        let w = WeightFunction { c1, c2 };
        debug_assert_eq!(w.eval(0.0), c1);
        Ok(w)
    }

    pub fn c1(&self) -> f64 {
        self.c1
    }

    pub fn c2(&self) -> f64 {
        self.c2
    }

    /// `c₃ = c₁/c₂²`, the constant entering the decay-rate bound.
    pub fn c3(&self) -> f64 {
        self.c1 / (self.c2 * self.c2)
    }

    pub fn eval(&self, t: f64) -> f64 {
        self.c2 - (self.c2 - self.c1) * (-t).exp()
    }

    pub fn derivative(&self, t: f64) -> f64 {
        (self.c2 - self.c1) * (-t).exp()
    }
}

impl Default for WeightFunction {
    fn default() -> Self {
        WeightFunction { c1: 1.0, c2: 2.0 }
    }
}

// ---------------------------------------------------------------------------
// Small-gain feedback radius
// ---------------------------------------------------------------------------

/// `λ(s) = σ₂⁻¹(σ₁⁻¹(s/2)/2)` for class-K∞ `σ₁, σ₂`, with `σ₁` rectified
/// above the identity first (`σ₁ ← max(σ₁, id)`), evaluated pointwise via
/// bracketing inversion.
pub fn small_gain_lambda(
    sigma1: &ScalarMonotone,
    sigma2: &ScalarMonotone,
    check: &ClassCheck,
) -> Result<ScalarMonotone, ComparisonError> {
    if sigma1.class() != FunctionClass::KInf || sigma2.class() != FunctionClass::KInf {
        return Err(ComparisonError::IncompatibleClass(format!(
            "small-gain radius needs class-K∞ inputs, got {:?} and {:?}",
            sigma1.class(),
            sigma2.class()
        )));
    }
    let s1 = sigma1.clone();
    let rectified = ScalarMonotone::from_fn(
        format!("max(s, {})", sigma1.name()),
        move |s| s1.eval(s).max(s),
        FunctionClass::KInf,
        check,
    )?;
    let s2 = sigma2.clone();
    let name = format!(
        "({})^-1(({})^-1(s/2)/2)",
        sigma2.name(),
        rectified.name()
    );
    ScalarMonotone::from_fn(
        name,
        move |s| {
            let inner = match invert(&rectified, 0.5 * s, 1e-12) {
                Ok(v) => v,
                Err(_) => return f64::NAN,
            };
            invert(&s2, 0.5 * inner, 1e-12).unwrap_or(f64::NAN)
        },
        FunctionClass::KInf,
        check,
    )
}

// ---------------------------------------------------------------------------
// Value-function estimation
// ---------------------------------------------------------------------------

/// Search budget for value-function queries.
#[derive(Debug, Clone, Serialize)]
pub struct ConverseBudget {
    /// Sup horizon for each output search.
    pub horizon: f64,
    /// Random disturbance signals per query (corner signals are always
    /// included and come first, so enlarging this never removes candidates).
    pub random_signals: usize,
    pub signal_segments: usize,
    /// Outer time points for the weighted value function.
    pub outer_time_points: usize,
    pub rtol: f64,
    pub samples_per_sim: usize,
    pub seed: u64,
}

impl Default for ConverseBudget {
    fn default() -> Self {
        ConverseBudget {
            horizon: 20.0,
            random_signals: 4,
            signal_segments: 4,
            outer_time_points: 12,
            rtol: 1e-6,
            samples_per_sim: 101,
            seed: 0,
        }
    }
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E3779B97F4A7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58476D1CE4E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D049BB133111EB);
    z ^ (z >> 31)
}

fn state_key(x: &[f64]) -> Vec<u64> {
    x.iter().map(|v| v.to_bits()).collect()
}

#[derive(Debug, Clone, Serialize)]
pub struct CachedValue {
    pub value: f64,
    /// Time and candidate index (corner signals first) of the best directly
    /// simulated trajectory. A merged value that came in by concatenation
    /// through a reached state may exceed what this candidate achieves; the
    /// concatenated signal itself is not materialized.
    pub achieving_time: f64,
    pub achieving_signal: usize,
}

/// Budgeted estimator for the value function `ω` and the weighted value
/// function `W` of a unit-ball disturbance system.
///
/// Caches are max-merged: concatenation makes every output reachable from a
/// later trajectory point reachable from the start, so folding downstream
/// query results back into upstream entries only sharpens them.
pub struct ValueFunctionEstimator {
    sys: ControlSystem,
    pub budget: ConverseBudget,
    omega_cache: HashMap<Vec<u64>, CachedValue>,
    /// `(state, pair_seed)` pairs whose search already ran; a repeat query
    /// returns the cached maximum instead of re-running identical
    /// simulations.
    searched: std::collections::HashSet<(Vec<u64>, u64)>,
    w_cache: HashMap<Vec<u64>, f64>,
    weight_guard: Option<(f64, f64)>,
}

impl ValueFunctionEstimator {
    pub fn new(sys_closed: ControlSystem, budget: ConverseBudget) -> Result<Self, ConverseError> {
        if sys_closed.input_domain() != InputDomain::UnitBall {
            return Err(ConverseError::Invalid(
                "value functions are defined for unit-ball disturbance systems; close the loop first"
                    .into(),
            ));
        }
        Ok(ValueFunctionEstimator {
            sys: sys_closed,
            budget,
            omega_cache: HashMap::new(),
            searched: std::collections::HashSet::new(),
            w_cache: HashMap::new(),
            weight_guard: None,
        })
    }

    pub fn system(&self) -> &ControlSystem {
        &self.sys
    }

    pub fn omega_cache(&self) -> impl Iterator<Item = (Vec<f64>, &CachedValue)> + '_ {
        self.omega_cache
            .iter()
            .map(|(k, v)| (k.iter().map(|b| f64::from_bits(*b)).collect(), v))
    }

    pub fn w_cache(&self) -> impl Iterator<Item = (Vec<f64>, f64)> + '_ {
        self.w_cache
            .iter()
            .map(|(k, &v)| (k.iter().map(|b| f64::from_bits(*b)).collect(), v))
    }

    /// Deterministic disturbance candidate family for one query. Corner
    /// signals (constant and square-wave extremes) come first; `count`
    /// random signals follow, generated as an indexed stream so a larger
    /// budget yields a superset.
    fn candidate_signals(&self, pair_seed: u64, count: usize) -> Vec<InputSignal> {
        let m = self.sys.input_dim();
        let horizon = self.budget.horizon;
        let scale = if m > 1 { 1.0 / (m as f64).sqrt() } else { 1.0 };
        let mut out = vec![InputSignal::zero(m, horizon)];
        for axis in 0..m {
            for sign in [1.0, -1.0] {
                let mut v = vec![0.0; m];
                v[axis] = sign * scale;
                out.push(InputSignal::constant(v, horizon));
            }
        }
        for k in [2usize, 4] {
            let bps: Vec<f64> = (0..=k).map(|i| horizon * i as f64 / k as f64).collect();
            let vals: Vec<Vec<f64>> = (0..k)
                .map(|i| {
                    let mut v = vec![0.0; m];
                    v[0] = if i % 2 == 0 { scale } else { -scale };
                    v
                })
                .collect();
            if let Ok(sig) = InputSignal::new(bps, vals) {
                out.push(sig);
            }
        }
        for i in 0..count {
            let mut rng =
                ChaCha8Rng::seed_from_u64(splitmix64(self.budget.seed ^ splitmix64(pair_seed))
                    .wrapping_add(i as u64));
            let k = self.budget.signal_segments.max(1);
            let bps: Vec<f64> = (0..=k).map(|j| horizon * j as f64 / k as f64).collect();
            let vals: Vec<Vec<f64>> = (0..k)
                .map(|_| {
                    if rng.gen_bool(0.5) {
                        (0..m)
                            .map(|_| if rng.gen_bool(0.5) { scale } else { -scale })
                            .collect()
                    } else {
                        let v: Vec<f64> = (0..m).map(|_| rng.gen_range(-1.0..1.0f64)).collect();
                        let nv = norm(&v);
                        if nv > 1.0 {
                            v.iter().map(|x| x / nv).collect()
                        } else {
                            v
                        }
                    }
                })
                .collect();
            out.push(InputSignal::new(bps, vals).expect("valid generated signal"));
        }
        out
    }

    /// Budgeted approximation of
    /// `ω(ξ) = sup { |y(t, ξ, d)| : t ∈ [0, T], d admissible }`.
    ///
    /// Lower-bound guarantee only; always at least `|h(ξ)|`. Blow-up aborts
    /// the construction (the hypothesis the construction rests on fails).
    pub fn omega(&mut self, xi: &[f64], pair_seed: u64) -> Result<f64, ConverseError> {
        let key = state_key(xi);
        if self.searched.contains(&(key.clone(), pair_seed)) {
            if let Some(c) = self.omega_cache.get(&key) {
                return Ok(c.value);
            }
        }
        self.searched.insert((key.clone(), pair_seed));
        let signals = self.candidate_signals(pair_seed, self.budget.random_signals);
        let opts = SimOptions {
            samples: self.budget.samples_per_sim,
            ..Default::default()
        };
        let runs: Vec<Result<(f64, f64), ConverseError>> = signals
            .par_iter()
            .map(|sig| {
                let traj = simulate_with(
                    &self.sys,
                    xi,
                    sig,
                    self.budget.horizon,
                    self.budget.rtol,
                    1e-9,
                    &opts,
                )?;
                if let SimStatus::BlewUp(t) = traj.status {
                    return Err(ConverseError::BlowUp {
                        state: xi.to_vec(),
                        t,
                    });
                }
                let mut best = (0.0f64, 0.0f64);
                for (k, y) in traj.outputs.iter().enumerate() {
                    let v = norm(y);
                    if v > best.0 {
                        best = (v, traj.times[k]);
                    }
                }
                Ok(best)
            })
            .collect();
        let mut value = 0.0f64;
        let mut at = (0.0f64, 0usize);
        for (i, r) in runs.into_iter().enumerate() {
            let (v, t) = r?;
            if v > value {
                value = v;
                at = (t, i);
            }
        }
        let h0 = self
            .sys
            .output_norm(xi)
            .map_err(ConverseError::Invalid)?;
        assert!(
            value >= h0 - 1e-12 * h0.abs().max(1.0),
            "value function fell below |h(ξ)|: {value} < {h0}"
        );
        let entry = self.omega_cache.entry(key).or_insert(CachedValue {
            value: 0.0,
            achieving_time: 0.0,
            achieving_signal: 0,
        });
        if value > entry.value {
            *entry = CachedValue {
                value,
                achieving_time: at.0,
                achieving_signal: at.1,
            };
        }
        Ok(entry.value)
    }

    fn merge_omega(&mut self, xi: &[f64], value: f64, time: f64, signal: usize) {
        let entry = self
            .omega_cache
            .entry(state_key(xi))
            .or_insert(CachedValue {
                value: 0.0,
                achieving_time: 0.0,
                achieving_signal: 0,
            });
        if value > entry.value {
            *entry = CachedValue {
                value,
                achieving_time: time,
                achieving_signal: signal,
            };
        }
    }

    /// Budgeted approximation of
    /// `W(ξ) = sup { ω(x(t, ξ, d))·k(t) : 0 ≤ t ≤ T̄, d admissible }`.
    ///
    /// The outer sup runs over a log-spaced time grid capped at `t_cap`
    /// (typically a time threshold from the fitted decay); inner values are
    /// `ω` queries from the reached states, whose results are folded back
    /// into the cache so that `c₁·ω(ξ) ≤ W(ξ) ≤ c₂·ω(ξ)` holds by
    /// construction. Both bounds are asserted.
    pub fn weighted(
        &mut self,
        xi: &[f64],
        weight: &WeightFunction,
        t_cap: Option<f64>,
        pair_seed: u64,
    ) -> Result<f64, ConverseError> {
        if let Some((c1, c2)) = self.weight_guard {
            if c1 != weight.c1() || c2 != weight.c2() {
                return Err(ConverseError::Invalid(
                    "one estimator caches values for one weight function".into(),
                ));
            }
        } else {
            self.weight_guard = Some((weight.c1(), weight.c2()));
        }
        let t_bar = t_cap.unwrap_or(self.budget.horizon).min(self.budget.horizon);
        let k_pts = self.budget.outer_time_points.max(2);
        let outer: Vec<f64> = (0..k_pts)
            .map(|j| ((1.0 + t_bar).ln() * j as f64 / (k_pts - 1) as f64).exp_m1())
            .collect();
        let signals = self.candidate_signals(splitmix64(pair_seed) ^ 0x5bd1e995, 2);
        let opts = SimOptions {
            samples: self.budget.samples_per_sim,
            ..Default::default()
        };

        // Outer trajectories and the states they reach at the grid times.
        let mut reached: Vec<(Vec<f64>, f64)> = vec![(xi.to_vec(), 0.0)];
        for sig in &signals {
            let traj = simulate_with(
                &self.sys,
                xi,
                sig,
                t_bar.max(1e-9),
                self.budget.rtol,
                1e-9,
                &opts,
            )?;
            if let SimStatus::BlewUp(t) = traj.status {
                return Err(ConverseError::BlowUp {
                    state: xi.to_vec(),
                    t,
                });
            }
            for &tj in outer.iter().skip(1) {
                let idx = traj
                    .times
                    .partition_point(|&t| t < tj)
                    .min(traj.times.len() - 1);
                reached.push((traj.states[idx].clone(), traj.times[idx]));
            }
        }

        let mut w_value = 0.0f64;
        let mut omega_sup = 0.0f64;
        for (state, tj) in &reached {
            let om = self.omega(state, pair_seed)?;
            omega_sup = omega_sup.max(om);
            w_value = w_value.max(weight.eval(*tj) * om);
        }
        // Reached-state suprema are reachable from ξ by concatenation.
        let cached = self.omega_cache.get(&state_key(xi)).cloned();
        if let Some(c) = cached {
            if omega_sup > c.value {
                self.merge_omega(xi, omega_sup, c.achieving_time, c.achieving_signal);
            }
        }
        let omega_xi = self
            .omega_cache
            .get(&state_key(xi))
            .map(|c| c.value)
            .unwrap_or(0.0);
        assert!(
            w_value >= weight.c1() * omega_xi - 1e-12 * omega_xi.max(1.0),
            "W(ξ) = {w_value} below c₁ω(ξ) = {}",
            weight.c1() * omega_xi
        );
        assert!(
            w_value <= weight.c2() * omega_xi + 1e-12 * omega_xi.max(1.0),
            "W(ξ) = {w_value} above c₂ω(ξ) = {}",
            weight.c2() * omega_xi
        );
        let entry = self.w_cache.entry(state_key(xi)).or_insert(0.0);
        if w_value > *entry {
            *entry = w_value;
        }
        Ok(*entry)
    }
}

// ---------------------------------------------------------------------------
// Zero-output set
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize)]
pub enum Membership {
    /// All budgeted trajectories kept the output below the threshold —
    /// evidence of membership, not proof.
    InD,
    NotInD {
        time: f64,
        output_norm: f64,
    },
}

const ZERO_OUTPUT_THRESHOLD: f64 = 1e-9;

/// One-sided membership test for the zero-output set
/// `D = {ξ : y(t, ξ, d) = 0 for all t, all admissible d}`.
pub fn zero_output_set_test(
    sys_closed: &ControlSystem,
    xi: &[f64],
    budget: &ConverseBudget,
) -> Result<Membership, ConverseError> {
    if sys_closed.input_domain() != InputDomain::UnitBall {
        return Err(ConverseError::Invalid(
            "membership test expects a unit-ball disturbance system".into(),
        ));
    }
    let h0 = sys_closed
        .output_norm(xi)
        .map_err(ConverseError::Invalid)?;
    if h0 > ZERO_OUTPUT_THRESHOLD {
        return Ok(Membership::NotInD {
            time: 0.0,
            output_norm: h0,
        });
    }
    let est = ValueFunctionEstimator::new(sys_closed.clone(), budget.clone())?;
    let signals = est.candidate_signals(0xD, budget.random_signals);
    let opts = SimOptions {
        samples: budget.samples_per_sim,
        ..Default::default()
    };
    for sig in &signals {
        let traj = simulate_with(
            sys_closed,
            xi,
            sig,
            budget.horizon,
            budget.rtol,
            1e-9,
            &opts,
        )?;
        for (k, y) in traj.outputs.iter().enumerate() {
            let v = norm(y);
            if v > ZERO_OUTPUT_THRESHOLD {
                return Ok(Membership::NotInD {
                    time: traj.times[k],
                    output_norm: v,
                });
            }
        }
    }
    Ok(Membership::InD)
}

// ---------------------------------------------------------------------------
// Empirical decay certificate
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize)]
pub struct DecayObservation {
    pub state: Vec<f64>,
    pub w: f64,
    pub radius: f64,
    /// Worst (smallest) decrease rate over the probed disturbances,
    /// measured as `−(W(x(δ)) − W(ξ))/δ` at the smallest δ.
    pub rate: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct DecayCertificateReport {
    pub observations: Vec<DecayObservation>,
    pub skipped_in_d: usize,
    /// Fraction of probes with a meaningfully nonnegative forward
    /// difference; must be zero for the construction to succeed.
    pub positive_fraction: f64,
    pub failures: Vec<DecayObservation>,
}

/// Forward-difference decay estimates of `W` along the closed loop, fitted
/// into a [`DecayMargin`] binned by `(W(ξ), |ξ|)`.
///
/// Samples in the zero-output set are skipped. Any probe whose forward
/// difference exceeds `1e-6·W(ξ)` is a construction failure (budget too
/// small or the stability hypothesis false): the report carries the
/// witnesses and no margin is emitted.
pub fn empirical_decay_certificate(
    est: &mut ValueFunctionEstimator,
    weight: &WeightFunction,
    samples: &[Vec<f64>],
    t_cap: Option<f64>,
    deltas: &[f64],
) -> Result<(Option<DecayMargin>, DecayCertificateReport), ConverseError> {
    let m = est.sys.input_dim();
    let mut observations = Vec::new();
    let mut failures = Vec::new();
    let mut skipped = 0usize;
    let mut probes = 0usize;
    let mut positive = 0usize;
    let opts = SimOptions {
        samples: 2,
        ..Default::default()
    };
    let deltas = if deltas.is_empty() {
        vec![1e-2, 1e-3]
    } else {
        deltas.to_vec()
    };
    let smallest = deltas.iter().copied().fold(f64::INFINITY, f64::min);

    for (idx, xi) in samples.iter().enumerate() {
        let h0 = est.sys.output_norm(xi).map_err(ConverseError::Invalid)?;
        if h0 <= ZERO_OUTPUT_THRESHOLD {
            skipped += 1;
            continue;
        }
        let pair_seed = idx as u64;
        let w0 = est.weighted(xi, weight, t_cap, pair_seed)?;
        if w0 <= 1e-12 {
            skipped += 1;
            continue;
        }
        let mut worst_rate = f64::INFINITY;
        let mut failed_here = false;
        for axis in 0..m {
            for sign in [1.0, -1.0] {
                let mut d = vec![0.0; m];
                d[axis] = sign;
                for &delta in &deltas {
                    let sig = InputSignal::constant(d.clone(), delta);
                    let traj = simulate_with(
                        &est.sys,
                        xi,
                        &sig,
                        delta,
                        est.budget.rtol,
                        1e-12,
                        &opts,
                    )?;
                    if !matches!(traj.status, SimStatus::Completed) {
                        return Err(ConverseError::Invalid(format!(
                            "decay probe failed: {:?}",
                            traj.status
                        )));
                    }
                    let x1 = traj.final_state().to_vec();
                    let w1 = est.weighted(&x1, weight, t_cap, pair_seed)?;
                    probes += 1;
                    let diff = w1 - w0;
                    if diff > 1e-6 * w0 {
                        positive += 1;
                        failed_here = true;
                    }
                    if delta == smallest {
                        worst_rate = worst_rate.min(-(diff / delta));
                    }
                }
            }
        }
        let obs = DecayObservation {
            state: xi.clone(),
            w: w0,
            radius: norm(xi),
            rate: worst_rate,
        };
        if failed_here {
            failures.push(obs);
        } else {
            observations.push(obs);
        }
    }

    let positive_fraction = if probes == 0 {
        0.0
    } else {
        positive as f64 / probes as f64
    };
    let report_margin = if failures.is_empty() && !observations.is_empty() {
        Some(fit_margin_from_observations(&observations)?)
    } else {
        None
    };
    Ok((
        report_margin,
        DecayCertificateReport {
            observations,
            skipped_in_d: skipped,
            positive_fraction,
            failures,
        },
    ))
}

/// Monotone-envelope fit of observed decrease rates binned by `(W, |ξ|)`.
fn fit_margin_from_observations(
    obs: &[DecayObservation],
) -> Result<DecayMargin, ConverseError> {
    let w_max = obs.iter().map(|o| o.w).fold(0.0f64, f64::max);
    let r_max = obs.iter().map(|o| o.radius).fold(0.0f64, f64::max);
    let w_min = obs.iter().map(|o| o.w).fold(f64::INFINITY, f64::min);
    let ns = 8;
    let nr = 6;
    let s_grid: Vec<f64> = (0..ns)
        .map(|i| w_min + (w_max - w_min).max(1e-9) * i as f64 / (ns - 1) as f64)
        .collect();
    let r_grid: Vec<f64> = (0..nr)
        .map(|j| r_max.max(1e-9) * (j + 1) as f64 / nr as f64)
        .collect();
    let mut values = vec![vec![f64::INFINITY; nr]; ns];
    for o in obs {
        let rate = o.rate.max(0.0);
        for (i, &s) in s_grid.iter().enumerate() {
            if o.w < s {
                continue;
            }
            for (j, &r) in r_grid.iter().enumerate() {
                if o.radius <= r && rate < values[i][j] {
                    values[i][j] = rate;
                }
            }
        }
    }
    let mut s_axis = vec![0.0];
    s_axis.extend(s_grid.iter().copied());
    let mut table = vec![vec![0.0; nr]];
    for (i, &s) in s_grid.iter().enumerate() {
        table.push(
            values[i]
                .iter()
                .map(|&v| {
                    if v.is_finite() {
                        (0.95 * v).min(s).max(1e-300)
                    } else {
                        s
                    }
                })
                .collect(),
        );
    }
    // envelope: nondecreasing in s, then nonincreasing in r
    for i in 1..table.len() {
        for j in 0..nr {
            if table[i][j] < table[i - 1][j] {
                table[i][j] = table[i - 1][j];
            }
        }
    }
    for row in table.iter_mut() {
        for j in 1..nr {
            if row[j] > row[j - 1] {
                row[j] = row[j - 1];
            }
        }
    }
    DecayMargin::from_grid(s_axis, r_grid, table).map_err(ConverseError::Comparison)
}

// ---------------------------------------------------------------------------
// Candidate assembly
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize)]
pub struct AssemblyReport {
    /// Fraction of holdout probes that showed decrease.
    pub holdout_pass_fraction: f64,
    pub holdout_points: usize,
    pub rejected: Option<String>,
}

/// Wraps the tabulated `W` as a candidate Lyapunov function with
/// finite-difference gradients, the fitted sandwich and trigger, and the
/// empirical decay margin; the candidate must show decrease on at least 95%
/// of holdout probes or it is rejected.
pub fn assemble_ios_candidate(
    est: &ValueFunctionEstimator,
    alpha1: ScalarMonotone,
    alpha2: ScalarMonotone,
    chi: ScalarMonotone,
    margin: DecayMargin,
    holdout: &[Vec<f64>],
) -> Result<(Option<CandidateLyapunov>, AssemblyReport), ConverseError> {
    let mut points: Vec<Vec<f64>> = Vec::new();
    let mut vals: Vec<f64> = Vec::new();
    for (state, w) in est.w_cache() {
        points.push(state);
        vals.push(w);
    }
    if points.is_empty() {
        return Err(ConverseError::Invalid(
            "assembly needs a populated weighted-value cache".into(),
        ));
    }
    // anchor the origin
    points.push(vec![0.0; est.sys.state_dim()]);
    vals.push(0.0);
    if vals.iter().all(|&v| v <= 1e-12) {
        return Ok((
            None,
            AssemblyReport {
                holdout_pass_fraction: 0.0,
                holdout_points: 0,
                rejected: Some(
                    "weighted value function is identically zero; the lower sandwich α₁ cannot \
                     be positive definite"
                        .into(),
                ),
            },
        ));
    }
    let table = ScatteredTable::new(points, vals)?;
    let cand = CandidateLyapunov::new(
        format!("W[{}]", est.sys.name()),
        ValueFn::Scattered(table),
        GradientMode::FiniteDifference { step: 1e-4 },
    )?
    .with_sandwich(alpha1, alpha2, SandwichMode::StateNorm)
    .with_trigger(chi)
    .with_decay(DecayBound::Margin(margin));

    // Holdout: forward difference quotients must decrease off D.
    let mut pass = 0usize;
    let mut total = 0usize;
    let m = est.sys.input_dim();
    for xi in holdout {
        let h0 = est.sys.output_norm(xi).map_err(ConverseError::Invalid)?;
        if h0 <= ZERO_OUTPUT_THRESHOLD {
            continue;
        }
        for axis in 0..m {
            for sign in [1.0, -1.0] {
                let mut d = vec![0.0; m];
                d[axis] = sign;
                let quotients = dini_decrease_along_flow(
                    &cand,
                    &est.sys,
                    xi,
                    &d,
                    &[1e-2],
                    est.budget.rtol,
                )?;
                total += 1;
                if quotients.iter().all(|&(_, q)| q < 0.0) {
                    pass += 1;
                }
            }
        }
    }
    let fraction = if total == 0 {
        1.0
    } else {
        pass as f64 / total as f64
    };
    if fraction < 0.95 {
        return Ok((
            None,
            AssemblyReport {
                holdout_pass_fraction: fraction,
                holdout_points: total,
                rejected: Some(format!(
                    "only {:.1}% of holdout probes showed decrease",
                    fraction * 100.0
                )),
            },
        ));
    }
    Ok((
        Some(cand),
        AssemblyReport {
            holdout_pass_fraction: fraction,
            holdout_points: total,
            rejected: None,
        },
    ))
}
