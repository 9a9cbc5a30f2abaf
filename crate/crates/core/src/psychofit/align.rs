//! Linear correspondence between human processing time and network compute.

use serde::{Deserialize, Serialize};

use super::lm::Problem;
use super::sat::{fit_sat, SatCurveFit, SatPoint};
use crate::error::{Error, Result};

/// `F = a (T - t0)`: MFLOPs as a function of milliseconds.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TimeFlopMap {
    /// MFLOP per ms.
    pub a: f64,
    /// Offset in ms (sensory and motor delays).
    pub t0: f64,
}

impl TimeFlopMap {
    /// 11 MFLOP per 600 ms after a 400 ms delay.
    pub fn paper() -> Self {
        TimeFlopMap {
            a: 11.0 / 600.0,
            t0: 400.0,
        }
    }

    pub fn mflops_at(&self, ms: f64) -> f64 {
        self.a * (ms - self.t0)
    }

    pub fn ms_at(&self, mflops: f64) -> f64 {
        mflops / self.a + self.t0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AlignmentFit {
    pub map: TimeFlopMap,
    /// Fitted human curve the network points were compared against.
    pub human: SatCurveFit,
    /// Weighted mean squared accuracy difference at the optimum.
    pub mse: f64,
}

fn range(points: &[SatPoint]) -> (f64, f64) {
    points
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), q| (lo.min(q.p), hi.max(q.p)))
}

/// Chooses `(a, t0)` so the network curve, moved onto the time axis, sits on
/// the human curve. The human curve is first summarized by its SAT fit with
/// floor `gamma`; the objective is the n-weighted mean squared difference
/// between each network accuracy and the fitted human accuracy at the mapped
/// time. Log-grid over `a` and grid over `t0`, then local refinement.
pub fn fit_time_flop_map(human_ms: &[SatPoint], net_mflop: &[SatPoint], gamma: f64) -> Result<AlignmentFit> {
    if net_mflop.len() < 2 {
        return Err(Error::Input("network curve needs >= 2 points".into()));
    }
    let (h_lo, h_hi) = range(human_ms);
    let (n_lo, n_hi) = range(net_mflop);
    if n_hi < h_lo || n_lo > h_hi || h_hi <= gamma {
        return Err(Error::AlignmentInfeasible(format!(
            "human accuracy [{h_lo:.3}, {h_hi:.3}] and network accuracy [{n_lo:.3}, {n_hi:.3}] do not overlap"
        )));
    }
    let human = fit_sat(human_ms, gamma).map_err(|e| match e {
        Error::NoSignal(m) => Error::AlignmentInfeasible(m),
        other => other,
    })?;
    let total_n: f64 = net_mflop.iter().map(|q| q.n).sum();
    let objective = |a: f64, t0: f64| -> f64 {
        net_mflop
            .iter()
            .map(|q| q.n * (q.p - human.eval(q.t / a + t0)).powi(2))
            .sum::<f64>()
            / total_n
    };

    let t_min = human_ms.iter().map(|q| q.t).fold(f64::INFINITY, f64::min);
    let t_max = human_ms.iter().map(|q| q.t).fold(f64::NEG_INFINITY, f64::max);
    let f_max = net_mflop.iter().map(|q| q.t).fold(0.0, f64::max).max(1e-12);
    let span = (t_max - t_min).max(1e-9);
    // the network's range should land somewhere between 1/20 and 20 human spans
    let (a_lo, a_hi) = (f_max / (20.0 * span), 20.0 * f_max / span);
    let (t0_lo, t0_hi) = (t_min - span, t_max);
    let mut best = (f64::INFINITY, 0.0, 0.0);
    let mut starts = Vec::new();
    for i in 0..=60 {
        let a = a_lo * (a_hi / a_lo).powf(i as f64 / 60.0);
        for j in 0..=60 {
            let t0 = t0_lo + (t0_hi - t0_lo) * j as f64 / 60.0;
            let v = objective(a, t0);
            starts.push((v, a, t0));
            if v < best.0 {
                best = (v, a, t0);
            }
        }
    }
    starts.sort_by(|x, y| x.0.total_cmp(&y.0));
    let sqrt_w: Vec<f64> = net_mflop.iter().map(|q| (q.n / total_n).sqrt()).collect();
    // refine in (ln a, t0) so the rate stays positive
    let residuals = |x: &[f64]| -> Vec<f64> {
        let a = x[0].exp();
        net_mflop
            .iter()
            .zip(&sqrt_w)
            .map(|(q, w)| w * (q.p - human.eval(q.t / a + x[1])))
            .collect()
    };
    let problem = Problem {
        residuals: &residuals,
        lower: vec![(a_lo / 10.0).ln(), t0_lo - span],
        upper: vec![(a_hi * 10.0).ln(), t0_hi + span],
    };
    for s in starts.iter().take(5) {
        let sol = problem.solve(&[s.1.ln(), s.2], 500);
        if sol.sse < best.0 {
            best = (sol.sse, sol.x[0].exp(), sol.x[1]);
        }
    }
    Ok(AlignmentFit {
        map: TimeFlopMap {
            a: best.1,
            t0: best.2,
        },
        human,
        mse: best.0,
    })
}
