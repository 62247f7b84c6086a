//! Numerical laboratory for output-stability analysis of control systems
//! `ẋ = f(x, u), y = h(x)`.
//!
//! The crate provides, at desk scale:
//!
//! - [`expr`]: a small expression language for defining vector fields,
//!   output maps, and candidate functions in configuration files;
//! - [`comparison`]: class K/K∞/L/KL comparison-function calculus
//!   (inversion, composition, time thresholds, exponential KL factorization,
//!   comparison-lemma flow bounds, decay margins);
//! - [`system`]: control systems, piecewise-constant input signals, the
//!   robust closed-loop transform, and an adaptive trajectory engine;
//! - [`stability`]: the output-stability estimate templates (IOS, SIOS,
//!   SIIOS, ROS, UBIBS and their uniform variants), trajectory-based
//!   falsification, and empirical envelope fitting;
//! - [`certificate`]: Lyapunov certificate checking against the
//!   dissipation-inequality variants, trigger forms, and rescalings;
//! - [`converse`]: the converse construction — small-gain feedback radius,
//!   zero-output set membership, value function, weighted value function,
//!   and empirical decay certificates;
//! - [`config`] / [`report`] / [`tasks`]: the configuration-driven front end
//!   used by the `ioslab` command-line tool.

pub mod certificate;
pub mod comparison;
pub mod config;
pub mod converse;
pub mod expr;
mod ode;
pub mod report;
pub mod stability;
pub mod system;
pub mod tasks;
