//! Shifted saturating-exponential speed-accuracy curves.

use serde::{Deserialize, Serialize};

use super::lm::Problem;
use crate::error::{Error, Result};

/// One measured accuracy at a processing duration (or compute cost).
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SatPoint {
    pub t: f64,
    pub p: f64,
    pub n: f64,
}

impl SatPoint {
    pub fn new(t: f64, p: f64, n: f64) -> Self {
        SatPoint { t, p, n }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SatCurveFit {
    /// Asymptotic accuracy.
    pub lambda: f64,
    /// Intercept: accuracy stays at the floor until `t > delta`.
    pub delta: f64,
    /// Rate, in 1 / units of t.
    pub beta: f64,
    /// Floor (chance).
    pub gamma: f64,
    /// Weighted residual sum of squares.
    pub sse: f64,
}

impl SatCurveFit {
    pub fn new(lambda: f64, delta: f64, beta: f64, gamma: f64) -> Self {
        SatCurveFit {
            lambda,
            delta,
            beta,
            gamma,
            sse: 0.0,
        }
    }

    pub fn eval(&self, t: f64) -> f64 {
        eval_sat(t, self)
    }
}

/// `γ + (λ - γ)(1 - exp(-β (t - δ)))` for `t > δ`, else `γ`.
pub fn eval_sat(t: f64, fit: &SatCurveFit) -> f64 {
    sat_value(t, fit.lambda, fit.delta, fit.beta, fit.gamma)
}

fn sat_value(t: f64, lambda: f64, delta: f64, beta: f64, gamma: f64) -> f64 {
    if t > delta {
        gamma + (lambda - gamma) * (1.0 - (-beta * (t - delta)).exp())
    } else {
        gamma
    }
}

fn weighted_sse(points: &[SatPoint], lambda: f64, delta: f64, beta: f64, gamma: f64) -> f64 {
    points
        .iter()
        .map(|q| q.n * (q.p - sat_value(q.t, lambda, delta, beta, gamma)).powi(2))
        .sum()
}

/// Best λ for fixed (δ, β): the model is linear in λ, so this is a weighted
/// one-parameter least squares, clamped to `[γ, 1]`.
fn profile_lambda(points: &[SatPoint], delta: f64, beta: f64, gamma: f64) -> f64 {
    let (mut num, mut den) = (0.0, 0.0);
    for q in points {
        let g = if q.t > delta { 1.0 - (-beta * (q.t - delta)).exp() } else { 0.0 };
        num += q.n * g * (q.p - gamma);
        den += q.n * g * g;
    }
    if den <= 0.0 {
        return gamma;
    }
    (gamma + num / den).clamp(gamma, 1.0)
}

/// Grid point of the multi-start search: `(λ, δ, β, sse)`.
pub type GridStart = (f64, f64, f64, f64);

fn validate(points: &[SatPoint], gamma: f64) -> Result<(f64, f64)> {
    if points.len() < 4 {
        return Err(Error::Input(format!("need >= 4 points, got {}", points.len())));
    }
    if points
        .iter()
        .any(|q| !q.t.is_finite() || !(0.0..=1.0).contains(&q.p) || !(q.n > 0.0))
    {
        return Err(Error::Input("points need finite t, p in [0, 1] and n > 0".into()));
    }
    if !(0.0..1.0).contains(&gamma) {
        return Err(Error::Input(format!("floor must lie in [0, 1), got {gamma}")));
    }
    let t_min = points.iter().map(|q| q.t).fold(f64::INFINITY, f64::min);
    let t_max = points.iter().map(|q| q.t).fold(f64::NEG_INFINITY, f64::max);
    if t_max <= t_min {
        return Err(Error::Input("all t values are equal".into()));
    }
    if points.iter().all(|q| q.p <= gamma) {
        return Err(Error::NoSignal(format!(
            "no accuracy above the floor {gamma}"
        )));
    }
    Ok((t_min, t_max))
}

/// Deterministic grid: δ over `[0, max t]`, β log-spaced relative to the
/// time span, λ profiled out. Returned sorted by SSE.
pub fn sat_grid(points: &[SatPoint], gamma: f64) -> Result<Vec<GridStart>> {
    let (t_min, t_max) = validate(points, gamma)?;
    let span = t_max - t_min;
    let upper_delta = t_max.max(0.0);
    let mut out = Vec::new();
    for i in 0..=40 {
        let delta = upper_delta * i as f64 / 40.0;
        for j in 0..=40 {
            // rates whose time constant ranges from 1/100 to 10 spans
            let beta = (0.1 / span) * 1000f64.powf(j as f64 / 40.0);
            let lambda = profile_lambda(points, delta, beta, gamma);
            out.push((lambda, delta, beta, weighted_sse(points, lambda, delta, beta, gamma)));
        }
    }
    out.sort_by(|a, b| a.3.total_cmp(&b.3));
    Ok(out)
}

/// Weighted least-squares fit with the floor `gamma` held fixed.
pub fn fit_sat(points: &[SatPoint], gamma: f64) -> Result<SatCurveFit> {
    let grid = sat_grid(points, gamma)?;
    let t_max = points.iter().map(|q| q.t).fold(f64::NEG_INFINITY, f64::max);
    let sqrt_n: Vec<f64> = points.iter().map(|q| q.n.sqrt()).collect();
    let residuals = |x: &[f64]| -> Vec<f64> {
        points
            .iter()
            .zip(&sqrt_n)
            .map(|(q, w)| w * (q.p - sat_value(q.t, x[0], x[1], x[2], gamma)))
            .collect()
    };
    let problem = Problem {
        residuals: &residuals,
        lower: vec![gamma, 0.0, 1e-12],
        upper: vec![1.0, t_max.max(0.0), f64::INFINITY],
    };
    let mut best = grid[0];
    // refine the five best grid starts
    for start in grid.iter().take(5) {
        let sol = problem.solve(&[start.0, start.1, start.2], 500);
        if sol.sse < best.3 {
            best = (sol.x[0], sol.x[1], sol.x[2], sol.sse);
        }
    }
    Ok(SatCurveFit {
        lambda: best.0,
        delta: best.1,
        beta: best.2,
        gamma,
        sse: best.3,
    })
}
