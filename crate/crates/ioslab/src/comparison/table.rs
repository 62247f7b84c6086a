//! Strictly monotone sample tables with shape-preserving cubic interpolation.
//!
//! Interpolation inside the table is Fritsch–Carlson monotone cubic Hermite;
//! outside the table the function continues linearly with the boundary secant
//! slope, which keeps class tags (strictly increasing, unbounded) valid beyond
//! the sampled range.

use super::ComparisonError;

#[derive(Debug, Clone)]
pub struct MonotoneTable {
    xs: Vec<f64>,
    ys: Vec<f64>,
    slopes: Vec<f64>,
}

impl MonotoneTable {
    /// Builds a table from `(x, y)` pairs with strictly increasing `x` and
    /// monotone (nondecreasing or nonincreasing) `y`.
    pub fn new(points: Vec<(f64, f64)>) -> Result<MonotoneTable, ComparisonError> {
        if points.len() < 2 {
            return Err(ComparisonError::InvalidTable(
                "need at least two sample points".into(),
            ));
        }
        let xs: Vec<f64> = points.iter().map(|p| p.0).collect();
        let ys: Vec<f64> = points.iter().map(|p| p.1).collect();
        if xs.iter().any(|x| !x.is_finite()) || ys.iter().any(|y| !y.is_finite()) {
            return Err(ComparisonError::InvalidTable(
                "non-finite sample value".into(),
            ));
        }
        for w in xs.windows(2) {
            if w[1] <= w[0] {
                return Err(ComparisonError::InvalidTable(format!(
                    "abscissae not strictly increasing at x={}",
                    w[1]
                )));
            }
        }
        let increasing = ys.last().unwrap() >= ys.first().unwrap();
        for (i, w) in ys.windows(2).enumerate() {
            let ok = if increasing { w[1] >= w[0] } else { w[1] <= w[0] };
            if !ok {
                return Err(ComparisonError::InvalidTable(format!(
                    "ordinates not monotone between x={} and x={}",
                    xs[i],
                    xs[i + 1]
                )));
            }
        }
        let slopes = fritsch_carlson_slopes(&xs, &ys);
        Ok(MonotoneTable { xs, ys, slopes })
    }

    pub fn x_min(&self) -> f64 {
        self.xs[0]
    }

    pub fn x_max(&self) -> f64 {
        *self.xs.last().unwrap()
    }

    pub fn points(&self) -> impl Iterator<Item = (f64, f64)> + '_ {
        self.xs.iter().copied().zip(self.ys.iter().copied())
    }

    pub fn eval(&self, x: f64) -> f64 {
        let n = self.xs.len();
        if x <= self.xs[0] {
            let d = secant(&self.xs, &self.ys, 0);
            return self.ys[0] + (x - self.xs[0]) * d;
        }
        if x >= self.xs[n - 1] {
            let d = secant(&self.xs, &self.ys, n - 2);
            return self.ys[n - 1] + (x - self.xs[n - 1]) * d;
        }
        let i = bracket(&self.xs, x);
        hermite(
            self.xs[i],
            self.xs[i + 1],
            self.ys[i],
            self.ys[i + 1],
            self.slopes[i],
            self.slopes[i + 1],
            x,
        )
    }

    pub fn derivative(&self, x: f64) -> f64 {
        let n = self.xs.len();
        if x <= self.xs[0] {
            return secant(&self.xs, &self.ys, 0);
        }
        if x >= self.xs[n - 1] {
            return secant(&self.xs, &self.ys, n - 2);
        }
        let i = bracket(&self.xs, x);
        hermite_deriv(
            self.xs[i],
            self.xs[i + 1],
            self.ys[i],
            self.ys[i + 1],
            self.slopes[i],
            self.slopes[i + 1],
            x,
        )
    }
}

fn secant(xs: &[f64], ys: &[f64], i: usize) -> f64 {
    (ys[i + 1] - ys[i]) / (xs[i + 1] - xs[i])
}

/// Index `i` with `xs[i] <= x < xs[i+1]` (x strictly inside the table).
pub(crate) fn bracket(xs: &[f64], x: f64) -> usize {
    match xs.binary_search_by(|v| v.partial_cmp(&x).unwrap()) {
        Ok(i) => i.min(xs.len() - 2),
        Err(i) => i.saturating_sub(1).min(xs.len() - 2),
    }
}

/// Fritsch–Carlson tangent slopes for monotone data on a nonuniform grid.
pub(crate) fn fritsch_carlson_slopes(xs: &[f64], ys: &[f64]) -> Vec<f64> {
    let n = xs.len();
    let h: Vec<f64> = (0..n - 1).map(|i| xs[i + 1] - xs[i]).collect();
    let d: Vec<f64> = (0..n - 1).map(|i| (ys[i + 1] - ys[i]) / h[i]).collect();
    let mut m = vec![0.0; n];
    if n == 2 {
        m[0] = d[0];
        m[1] = d[0];
        return m;
    }
    m[0] = endpoint_slope(h[0], h[1], d[0], d[1]);
    m[n - 1] = endpoint_slope(h[n - 2], h[n - 3], d[n - 2], d[n - 3]);
    for i in 1..n - 1 {
        if d[i - 1] * d[i] <= 0.0 {
            m[i] = 0.0;
        } else {
            let w1 = 2.0 * h[i] + h[i - 1];
            let w2 = h[i] + 2.0 * h[i - 1];
            m[i] = (w1 + w2) / (w1 / d[i - 1] + w2 / d[i]);
        }
    }
    m
}

fn endpoint_slope(h0: f64, h1: f64, d0: f64, d1: f64) -> f64 {
    let m = ((2.0 * h0 + h1) * d0 - h0 * d1) / (h0 + h1);
    if m * d0 <= 0.0 {
        0.0
    } else if d0 * d1 <= 0.0 && m.abs() > 3.0 * d0.abs() {
        3.0 * d0
    } else {
        m
    }
}

fn hermite(x0: f64, x1: f64, y0: f64, y1: f64, m0: f64, m1: f64, x: f64) -> f64 {
    let h = x1 - x0;
    let t = (x - x0) / h;
    let t2 = t * t;
    let t3 = t2 * t;
    y0 * (2.0 * t3 - 3.0 * t2 + 1.0)
        + h * m0 * (t3 - 2.0 * t2 + t)
        + y1 * (-2.0 * t3 + 3.0 * t2)
        + h * m1 * (t3 - t2)
}

fn hermite_deriv(x0: f64, x1: f64, y0: f64, y1: f64, m0: f64, m1: f64, x: f64) -> f64 {
    let h = x1 - x0;
    let t = (x - x0) / h;
    let t2 = t * t;
    (y0 * (6.0 * t2 - 6.0 * t) / h)
        + m0 * (3.0 * t2 - 4.0 * t + 1.0)
        + (y1 * (-6.0 * t2 + 6.0 * t) / h)
        + m1 * (3.0 * t2 - 2.0 * t)
}

/// Monotone cubic evaluation through a small window of points, used for
/// interpolating rows and columns of tabulated bivariate functions without
/// materializing full slope vectors.
pub(crate) fn pchip_window(xs: &[f64], ys: &[f64], x: f64) -> f64 {
    debug_assert_eq!(xs.len(), ys.len());
    debug_assert!(xs.len() >= 2);
    if x <= xs[0] {
        let d = secant(xs, ys, 0);
        return ys[0] + (x - xs[0]) * d;
    }
    let n = xs.len();
    if x >= xs[n - 1] {
        let d = secant(xs, ys, n - 2);
        return ys[n - 1] + (x - xs[n - 1]) * d;
    }
    let i = bracket(xs, x);
    let lo = i.saturating_sub(1);
    let hi = (i + 2).min(n - 1);
    let wx = &xs[lo..=hi];
    let wy = &ys[lo..=hi];
    let slopes = fritsch_carlson_slopes(wx, wy);
    let j = i - lo;
    hermite(wx[j], wx[j + 1], wy[j], wy[j + 1], slopes[j], slopes[j + 1], x)
}
