//! Equivalent input noise, curve matching across noise levels, and
//! relative efficiency.

use serde::{Deserialize, Serialize};

use super::lm::Problem;
use super::sat::SatPoint;
use crate::error::{Error, Result};

/// Accuracy at one external noise SD.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct NoisePoint {
    pub sd: f64,
    pub p: f64,
    pub n: f64,
}

/// Accuracy vs external noise at one fixed condition (an exit, a viewing
/// duration).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NoiseCondition {
    pub label: String,
    pub points: Vec<NoisePoint>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EquivalentNoiseFit {
    /// Intrinsic noise SD in image units.
    pub sigma_eq: f64,
    /// Accuracy at zero total noise, shared by all conditions.
    pub lambda0: f64,
    /// Noise scale of each condition.
    pub tau: Vec<f64>,
    pub gamma: f64,
    pub sse: f64,
    /// The data show no noise effect, so `sigma_eq` is only known to exceed
    /// the largest external SD; `sigma_eq` then reports that SD.
    pub lower_bound: bool,
    /// Some condition's accuracy rises with noise by more than the tolerance.
    pub non_monotone: bool,
}

impl EquivalentNoiseFit {
    /// Model accuracy of condition `c` at external SD `sd`.
    pub fn eval(&self, c: usize, sd: f64) -> f64 {
        equivalent_noise_value(sd, self.sigma_eq, self.lambda0, self.tau[c], self.gamma)
    }
}

/// `γ + (λ0 - γ) exp(-(σ_eq² + σ²) / τ²)`.
pub fn equivalent_noise_value(sd: f64, sigma_eq: f64, lambda0: f64, tau: f64, gamma: f64) -> f64 {
    gamma + (lambda0 - gamma) * (-(sigma_eq * sigma_eq + sd * sd) / (tau * tau)).exp()
}

/// Accuracy changes smaller than this count as "no effect" / "monotone".
pub const FLAT_TOLERANCE: f64 = 0.02;

/// Least-squares fit of the Gaussian-in-total-noise model with `σ_eq` and
/// `λ0` shared across conditions and one `τ` per condition. With a single
/// condition `λ0` is pinned to 1: a free per-curve ceiling would absorb
/// `exp(-σ_eq²/τ²)` and leave `σ_eq` undetermined.
pub fn fit_equivalent_noise(conditions: &[NoiseCondition], gamma: f64) -> Result<EquivalentNoiseFit> {
    if conditions.is_empty() {
        return Err(Error::Input("no noise conditions".into()));
    }
    let mut max_sd: f64 = 0.0;
    let mut non_monotone = false;
    let mut flat = true;
    for c in conditions {
        if c.points.len() < 3 {
            return Err(Error::Input(format!(
                "condition {} has {} noise levels; need >= 3",
                c.label,
                c.points.len()
            )));
        }
        let mut pts = c.points.clone();
        pts.sort_by(|a, b| a.sd.total_cmp(&b.sd));
        if pts[0].sd > 0.25 * pts[pts.len() - 1].sd {
            return Err(Error::Input(format!(
                "condition {} needs a noise level near 0",
                c.label
            )));
        }
        non_monotone |= pts.windows(2).any(|w| w[1].p > w[0].p + FLAT_TOLERANCE);
        let drop = pts[0].p - pts[pts.len() - 1].p;
        flat &= drop < FLAT_TOLERANCE;
        max_sd = max_sd.max(pts[pts.len() - 1].sd);
    }
    let shared_ceiling = conditions.len() > 1;
    let p_max = conditions
        .iter()
        .flat_map(|c| c.points.iter().map(|q| q.p))
        .fold(gamma, f64::max);

    if flat {
        let tau = vec![f64::INFINITY; conditions.len()];
        let lambda0 = if shared_ceiling { p_max } else { 1.0 };
        let sse = conditions
            .iter()
            .flat_map(|c| c.points.iter())
            .map(|q| q.n * (q.p - lambda0).powi(2))
            .sum();
        return Ok(EquivalentNoiseFit {
            sigma_eq: max_sd,
            lambda0,
            tau,
            gamma,
            sse,
            lower_bound: true,
            non_monotone,
        });
    }

    // parameters: [σ_eq, λ0, ln τ_1..]
    let k = conditions.len();
    let residuals = |x: &[f64]| -> Vec<f64> {
        let lambda0 = if shared_ceiling { x[1] } else { 1.0 };
        conditions
            .iter()
            .enumerate()
            .flat_map(|(c, cond)| {
                let tau = x[2 + c].exp();
                cond.points.iter().map(move |q| {
                    q.n.sqrt() * (q.p - equivalent_noise_value(q.sd, x[0], lambda0, tau, gamma))
                })
            })
            .collect()
    };
    let scale = max_sd.max(1e-6);
    let mut lower = vec![0.0, if shared_ceiling { gamma } else { 1.0 }];
    let mut upper = vec![20.0 * scale, 1.0];
    lower.extend(std::iter::repeat_n((scale * 1e-3).ln(), k));
    upper.extend(std::iter::repeat_n((scale * 1e3).ln(), k));
    let problem = Problem {
        residuals: &residuals,
        lower,
        upper,
    };
    let sse_of = |x: &[f64]| residuals(x).iter().map(|r| r * r).sum::<f64>();

    // multi-start over (σ_eq, λ0); each τ_c gets its best value on a log grid
    let lambda_starts: Vec<f64> = if shared_ceiling {
        vec![p_max, 0.5 * (p_max + 1.0), 1.0]
    } else {
        vec![1.0]
    };
    let mut starts = Vec::new();
    for i in 0..=24 {
        let sigma = 4.0 * scale * i as f64 / 24.0;
        for &lambda0 in &lambda_starts {
            let mut x = vec![sigma, lambda0];
            for cond in conditions {
                let best_tau = (0..=48)
                    .map(|j| (scale * 1e-2 * 1e4f64.powf(j as f64 / 48.0)).ln())
                    .map(|lt| {
                        let e: f64 = cond
                            .points
                            .iter()
                            .map(|q| q.n * (q.p - equivalent_noise_value(q.sd, sigma, lambda0, lt.exp(), gamma)).powi(2))
                            .sum();
                        (e, lt)
                    })
                    .fold((f64::INFINITY, 0.0), |a, b| if b.0 < a.0 { b } else { a });
                x.push(best_tau.1);
            }
            starts.push((sse_of(&x), x));
        }
    }
    starts.sort_by(|a, b| a.0.total_cmp(&b.0));
    let mut best = starts[0].clone();
    for (_, x) in starts.iter().take(6) {
        let sol = problem.solve(x, 1000);
        if sol.sse < best.0 {
            best = (sol.sse, sol.x);
        }
    }
    let x = best.1;
    Ok(EquivalentNoiseFit {
        sigma_eq: x[0],
        lambda0: if shared_ceiling { x[1] } else { 1.0 },
        tau: x[2..].iter().map(|v| v.exp()).collect(),
        gamma,
        sse: best.0,
        lower_bound: false,
        non_monotone,
    })
}

/// One observer's speed-accuracy curve at one external noise SD, on a common
/// cost axis.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NoiseCurve {
    pub sd: f64,
    pub points: Vec<SatPoint>,
}

fn interpolate(points: &[SatPoint], t: f64) -> Option<f64> {
    let first = points.first()?;
    let last = points.last()?;
    if t < first.t || t > last.t {
        return None;
    }
    for w in points.windows(2) {
        if t <= w[1].t {
            let span = w[1].t - w[0].t;
            if span <= 0.0 {
                return Some(w[1].p);
            }
            return Some(w[0].p + (w[1].p - w[0].p) * (t - w[0].t) / span);
        }
    }
    Some(last.p)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CurveMatch {
    pub sigma_test: f64,
    pub sigma_ref: f64,
    /// Mean absolute accuracy difference at the match.
    pub residual: f64,
    /// Test points inside the reference curves' cost range.
    pub points_used: usize,
}

/// Finds the reference noise SD whose curve best overlays `test` (mean
/// absolute accuracy difference), interpolating between measured reference
/// SDs linearly in σ². Both families must already share one cost axis.
pub fn match_curves(test: &NoiseCurve, reference: &[NoiseCurve]) -> Result<CurveMatch> {
    if reference.len() < 2 {
        return Err(Error::Matching("reference family needs >= 2 noise levels".into()));
    }
    let mut refs: Vec<NoiseCurve> = reference.to_vec();
    refs.sort_by(|a, b| a.sd.total_cmp(&b.sd));
    for r in refs.iter_mut() {
        r.points.sort_by(|a, b| a.t.total_cmp(&b.t));
    }
    // test points that every reference curve covers
    let usable: Vec<(SatPoint, Vec<f64>)> = test
        .points
        .iter()
        .filter_map(|q| {
            let accs: Option<Vec<f64>> = refs.iter().map(|r| interpolate(&r.points, q.t)).collect();
            accs.map(|a| (*q, a))
        })
        .collect();
    if usable.is_empty() {
        return Err(Error::Matching(
            "test curve does not overlap the reference curves' cost range".into(),
        ));
    }
    let total_n: f64 = usable.iter().map(|(q, _)| q.n).sum();
    let cost = |j: usize, frac: f64| -> f64 {
        usable
            .iter()
            .map(|(q, accs)| q.n * (q.p - (accs[j] + frac * (accs[j + 1] - accs[j]))).abs())
            .sum::<f64>()
            / total_n
    };
    let mut best = (f64::INFINITY, 0.0);
    const STEPS: usize = 2000;
    for j in 0..refs.len() - 1 {
        let (v0, v1) = (refs[j].sd.powi(2), refs[j + 1].sd.powi(2));
        for s in 0..=STEPS {
            let frac = s as f64 / STEPS as f64;
            let c = cost(j, frac);
            if c < best.0 {
                best = (c, (v0 + frac * (v1 - v0)).sqrt());
            }
        }
    }
    Ok(CurveMatch {
        sigma_test: test.sd,
        sigma_ref: best.1,
        residual: best.0,
        points_used: usable.len(),
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EfficiencyReport {
    pub sigma_test: f64,
    pub sigma_ref: f64,
    /// `(σ_test / σ_ref)²`.
    pub efficiency: f64,
    /// e.g. "0.6%".
    pub percent: String,
    pub matching_residual: Option<f64>,
}

pub fn efficiency(sigma_test: f64, sigma_ref: f64) -> Result<EfficiencyReport> {
    if !(sigma_test > 0.0) || !(sigma_ref > 0.0) {
        return Err(Error::Input("efficiency needs positive noise SDs".into()));
    }
    let e = (sigma_test / sigma_ref).powi(2);
    Ok(EfficiencyReport {
        sigma_test,
        sigma_ref,
        efficiency: e,
        percent: format!("{:.1}%", 100.0 * e),
        matching_residual: None,
    })
}

pub fn efficiency_from_match(m: &CurveMatch) -> Result<EfficiencyReport> {
    let mut r = efficiency(m.sigma_test, m.sigma_ref)?;
    r.matching_residual = Some(m.residual);
    Ok(r)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NoiseRatio {
    pub ratio: f64,
    pub statement: String,
}

/// States how much larger one observer's equivalent noise is than another's.
pub fn equivalent_noise_ratio(subject: &str, sigma_subject: f64, other: &str, sigma_other: f64) -> Result<NoiseRatio> {
    if !(sigma_subject > 0.0) || !(sigma_other > 0.0) {
        return Err(Error::Input("equivalent noise SDs must be positive".into()));
    }
    let ratio = sigma_subject / sigma_other;
    let fmt = |r: f64| {
        if (r - r.round()).abs() < 0.05 {
            format!("{:.0}", r.round())
        } else {
            format!("{r:.1}")
        }
    };
    let statement = if ratio >= 1.0 {
        format!("{subject} : {other} equivalent noise SD = {} : 1", fmt(ratio))
    } else {
        format!("{subject} : {other} equivalent noise SD = 1 : {}", fmt(1.0 / ratio))
    };
    Ok(NoiseRatio { ratio, statement })
}
