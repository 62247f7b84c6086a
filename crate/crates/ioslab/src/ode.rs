//! Embedded Dormand–Prince 5(4) integrator with dense output.
//!
//! Shared by the trajectory engine and the comparison-function flow maps.
//! Step acceptance is controlled by the usual mixed absolute/relative local
//! error test; accepted steps also respect a ceiling that tightens with the
//! relative tolerance (`h <= H_CAP_SCALE * sqrt(rtol)`), so the observed
//! endpoint error decays superlinearly as `rtol` is tightened and tolerance
//! sweeps expose the method order.

/// Dormand–Prince coefficients.
const A21: f64 = 1.0 / 5.0;
const A31: f64 = 3.0 / 40.0;
const A32: f64 = 9.0 / 40.0;
const A41: f64 = 44.0 / 45.0;
const A42: f64 = -56.0 / 15.0;
const A43: f64 = 32.0 / 9.0;
const A51: f64 = 19372.0 / 6561.0;
const A52: f64 = -25360.0 / 2187.0;
const A53: f64 = 64448.0 / 6561.0;
const A54: f64 = -212.0 / 729.0;
const A61: f64 = 9017.0 / 3168.0;
const A62: f64 = -355.0 / 33.0;
const A63: f64 = 46732.0 / 5247.0;
const A64: f64 = 49.0 / 176.0;
const A65: f64 = -5103.0 / 18656.0;
const B1: f64 = 35.0 / 384.0;
const B3: f64 = 500.0 / 1113.0;
const B4: f64 = 125.0 / 192.0;
const B5: f64 = -2187.0 / 6784.0;
const B6: f64 = 11.0 / 84.0;
const E1: f64 = 5179.0 / 57600.0;
const E3: f64 = 7571.0 / 16695.0;
const E4: f64 = 393.0 / 640.0;
const E5: f64 = -92097.0 / 339200.0;
const E6: f64 = 187.0 / 2100.0;
const E7: f64 = 1.0 / 40.0;
const C2: f64 = 1.0 / 5.0;
const C3: f64 = 3.0 / 10.0;
const C4: f64 = 4.0 / 5.0;
const C5: f64 = 8.0 / 9.0;

/// Dense-output coefficients (continuous 4th-order extension).
const D1: f64 = -12715105075.0 / 11282082432.0;
const D3: f64 = 87487479700.0 / 32700410799.0;
const D4: f64 = -10690763975.0 / 1880347072.0;
const D5: f64 = 701980252875.0 / 199316789632.0;
const D6: f64 = -1453857185.0 / 822651844.0;
const D7: f64 = 69997945.0 / 29380423.0;

const H_CAP_SCALE: f64 = 200.0;
const SAFETY: f64 = 0.9;
const FAC_MIN: f64 = 0.2;
const FAC_MAX: f64 = 5.0;

#[derive(Debug, Clone, Copy)]
pub(crate) struct OdeOptions {
    pub rtol: f64,
    pub atol: f64,
    pub h_max: f64,
    pub max_steps: usize,
}

impl Default for OdeOptions {
    fn default() -> Self {
        OdeOptions {
            rtol: 1e-8,
            atol: 1e-10,
            h_max: f64::INFINITY,
            max_steps: 10_000_000,
        }
    }
}

/// Integrator work counters; re-exported as the trajectory `SimStats`.
#[derive(Debug, Clone, Copy, Default, PartialEq, serde::Serialize)]
pub struct OdeStats {
    pub steps: usize,
    pub rejected: usize,
    pub max_error_estimate: f64,
}

impl OdeStats {
    pub fn absorb(&mut self, other: &OdeStats) {
        self.steps += other.steps;
        self.rejected += other.rejected;
        self.max_error_estimate = self.max_error_estimate.max(other.max_error_estimate);
    }
}

#[derive(Debug, Clone, PartialEq)]
pub(crate) enum OdeStatus {
    /// Reached `t_end`; all samples filled.
    Completed,
    /// The stop predicate fired at time `t`.
    Stopped { t: f64 },
    /// The right-hand side reported a domain error at time `t`.
    RhsError { t: f64, msg: String },
    /// Error control forced the step below the resolvable size at time `t`.
    StepTooSmall { t: f64 },
    /// Step budget exhausted at time `t`.
    StepLimit { t: f64 },
}

#[derive(Debug, Clone)]
pub(crate) struct OdeOutput {
    /// One state per requested sample time; only the first `filled` entries
    /// are valid when integration stopped early.
    pub samples: Vec<Vec<f64>>,
    pub filled: usize,
    pub status: OdeStatus,
    pub stats: OdeStats,
}

/// Integrates `dy/dt = rhs(t, y)` from `t0` to `t_end`, producing dense
/// output at `sample_times` (ascending, inside `[t0, t_end]`).
///
/// `stop` is evaluated at every accepted step endpoint; returning true halts
/// integration with `OdeStatus::Stopped`. Samples earlier than the stop time
/// are still filled.
pub(crate) fn integrate<F, S>(
    mut rhs: F,
    t0: f64,
    t_end: f64,
    y0: &[f64],
    sample_times: &[f64],
    opts: &OdeOptions,
    mut stop: S,
) -> OdeOutput
where
    F: FnMut(f64, &[f64], &mut [f64]) -> Result<(), String>,
    S: FnMut(f64, &[f64]) -> bool,
{
    let n = y0.len();
    let span = t_end - t0;
    debug_assert!(span >= 0.0);
    let mut samples: Vec<Vec<f64>> = Vec::with_capacity(sample_times.len());
    let mut filled = 0usize;
    let mut stats = OdeStats::default();

    // Leading samples at exactly t0.
    while filled < sample_times.len() && sample_times[filled] <= t0 {
        samples.push(y0.to_vec());
        filled += 1;
    }

    let mut y = y0.to_vec();
    let mut t = t0;
    let mut k1 = vec![0.0; n];
    if let Err(msg) = rhs(t, &y, &mut k1) {
        return OdeOutput {
            samples,
            filled,
            status: OdeStatus::RhsError { t, msg },
            stats,
        };
    }
    if span == 0.0 {
        return OdeOutput {
            samples,
            filled,
            status: OdeStatus::Completed,
            stats,
        };
    }

    let h_cap = (H_CAP_SCALE * opts.rtol.sqrt()).min(opts.h_max).min(span);
    let mut h = initial_step(&y, &k1, opts).min(h_cap);
    let mut k = vec![vec![0.0; n]; 7];
    let mut y_stage = vec![0.0; n];
    let mut y_next = vec![0.0; n];
    let mut just_rejected = false;

    loop {
        if stats.steps + stats.rejected >= opts.max_steps {
            return OdeOutput {
                samples,
                filled,
                status: OdeStatus::StepLimit { t },
                stats,
            };
        }
        let mut last = false;
        if t + h >= t_end {
            h = t_end - t;
            last = true;
        }

        // Stage evaluations. k1 holds f(t, y) (FSAL).
        k[0].copy_from_slice(&k1);
        let stage = |c: &[(usize, f64)], y: &[f64], k: &[Vec<f64>], out: &mut [f64]| {
            for i in 0..y.len() {
                let mut acc = 0.0;
                for &(j, a) in c {
                    acc += a * k[j][i];
                }
                out[i] = y[i] + h * acc;
            }
        };
        let mut stage_err: Option<String> = None;
        let stages: [(&[(usize, f64)], f64); 5] = [
            (&[(0, A21)], C2),
            (&[(0, A31), (1, A32)], C3),
            (&[(0, A41), (1, A42), (2, A43)], C4),
            (&[(0, A51), (1, A52), (2, A53), (3, A54)], C5),
            (&[(0, A61), (1, A62), (2, A63), (3, A64), (4, A65)], 1.0),
        ];
        for (idx, (coeffs, c)) in stages.iter().enumerate() {
            stage(coeffs, &y, &k, &mut y_stage);
            let (head, tail) = k.split_at_mut(idx + 1);
            let _ = head;
            if let Err(msg) = rhs(t + c * h, &y_stage, &mut tail[0]) {
                stage_err = Some(msg);
                break;
            }
        }
        if stage_err.is_none() {
            // 5th-order solution
            for i in 0..n {
                y_next[i] = y[i]
                    + h * (B1 * k[0][i] + B3 * k[2][i] + B4 * k[3][i] + B5 * k[4][i]
                        + B6 * k[5][i]);
            }
            let (head, tail) = k.split_at_mut(6);
            let _ = head;
            if let Err(msg) = rhs(t + h, &y_next, &mut tail[0]) {
                stage_err = Some(msg);
            }
        }
        if let Some(msg) = stage_err {
            // Retry with a smaller step; if already tiny, give up.
            if h > 1e-14 * span.abs().max(1.0) {
                h *= 0.25;
                stats.rejected += 1;
                just_rejected = true;
                continue;
            }
            return OdeOutput {
                samples,
                filled,
                status: OdeStatus::RhsError { t, msg },
                stats,
            };
        }

        // Embedded error estimate.
        let mut err_sq = 0.0;
        let mut finite = true;
        for i in 0..n {
            let y4 = y[i]
                + h * (E1 * k[0][i] + E3 * k[2][i] + E4 * k[3][i] + E5 * k[4][i] + E6 * k[5][i]
                    + E7 * k[6][i]);
            let e = y_next[i] - y4;
            if !e.is_finite() || !y_next[i].is_finite() {
                finite = false;
                break;
            }
            let scale = opts.atol + opts.rtol * y[i].abs().max(y_next[i].abs());
            err_sq += (e / scale) * (e / scale);
        }
        let err_norm = if finite {
            (err_sq / n as f64).sqrt()
        } else {
            f64::INFINITY
        };

        if err_norm > 1.0 {
            let shrink = if finite {
                (SAFETY * err_norm.powf(-0.2)).max(FAC_MIN)
            } else {
                FAC_MIN
            };
            h *= shrink;
            stats.rejected += 1;
            just_rejected = true;
            if h < 1e-14 * span.abs().max(1.0) {
                return OdeOutput {
                    samples,
                    filled,
                    status: OdeStatus::StepTooSmall { t },
                    stats,
                };
            }
            continue;
        }

        // Accepted: dense output over (t, t+h].
        stats.steps += 1;
        stats.max_error_estimate = stats.max_error_estimate.max(err_norm);
        let t_new = if last { t_end } else { t + h };
        if filled < sample_times.len() && sample_times[filled] <= t_new {
            let dense = DenseStep::build(&y, &y_next, &k, h);
            while filled < sample_times.len() && sample_times[filled] <= t_new {
                let theta = ((sample_times[filled] - t) / h).clamp(0.0, 1.0);
                let v = if sample_times[filled] >= t_new {
                    y_next.clone()
                } else {
                    dense.eval(theta)
                };
                samples.push(v);
                filled += 1;
            }
        }

        y.copy_from_slice(&y_next);
        t = t_new;
        k1.copy_from_slice(&k[6]); // FSAL

        if stop(t, &y) {
            return OdeOutput {
                samples,
                filled,
                status: OdeStatus::Stopped { t },
                stats,
            };
        }
        if last {
            return OdeOutput {
                samples,
                filled,
                status: OdeStatus::Completed,
                stats,
            };
        }

        let fac_max = if just_rejected { 1.0 } else { FAC_MAX };
        just_rejected = false;
        let grow = (SAFETY * err_norm.max(1e-10).powf(-0.2)).clamp(FAC_MIN, fac_max);
        h = (h * grow).min(h_cap);
    }
}

fn initial_step(y: &[f64], dy: &[f64], opts: &OdeOptions) -> f64 {
    // Scale-based guess in the spirit of the usual starting-step heuristics.
    let mut d0: f64 = 0.0;
    let mut d1: f64 = 0.0;
    for i in 0..y.len() {
        let sc = opts.atol + opts.rtol * y[i].abs();
        d0 += (y[i] / sc) * (y[i] / sc);
        d1 += (dy[i] / sc) * (dy[i] / sc);
    }
    let d0 = (d0 / y.len() as f64).sqrt();
    let d1 = (d1 / y.len() as f64).sqrt();
    if d0 < 1e-5 || d1 < 1e-5 {
        1e-6
    } else {
        0.01 * (d0 / d1)
    }
}

struct DenseStep {
    rcont: [Vec<f64>; 5],
}

impl DenseStep {
    fn build(y0: &[f64], y1: &[f64], k: &[Vec<f64>], h: f64) -> DenseStep {
        let n = y0.len();
        let mut r1 = vec![0.0; n];
        let mut r2 = vec![0.0; n];
        let mut r3 = vec![0.0; n];
        let mut r4 = vec![0.0; n];
        let mut r5 = vec![0.0; n];
        for i in 0..n {
            let dy = y1[i] - y0[i];
            let bspl = h * k[0][i] - dy;
            r1[i] = y0[i];
            r2[i] = dy;
            r3[i] = bspl;
            r4[i] = dy - h * k[6][i] - bspl;
            r5[i] = h
                * (D1 * k[0][i]
                    + D3 * k[2][i]
                    + D4 * k[3][i]
                    + D5 * k[4][i]
                    + D6 * k[5][i]
                    + D7 * k[6][i]);
        }
        DenseStep {
            rcont: [r1, r2, r3, r4, r5],
        }
    }

    fn eval(&self, theta: f64) -> Vec<f64> {
        let [r1, r2, r3, r4, r5] = &self.rcont;
        let th1 = 1.0 - theta;
        (0..r1.len())
            .map(|i| {
                r1[i] + theta * (r2[i] + th1 * (r3[i] + theta * (r4[i] + th1 * r5[i])))
            })
            .collect()
    }
}
