use anytime_core::psychofit::*;
use anytime_core::Error;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Binomial, Distribution};

const TRIPLES: [(f64, f64, f64); 3] = [(0.99, 0.29, 18.0), (0.96, 0.32, 14.0), (0.90, 0.25, 8.0)];

fn times() -> Vec<f64> {
    (0..10).map(|i| 0.3 + 0.1 * i as f64).collect()
}

// written out longhand rather than through eval_sat
fn sat_oracle(t: f64, lambda: f64, delta: f64, beta: f64, gamma: f64) -> f64 {
    if t <= delta {
        return gamma;
    }
    let rise = 1.0 - f64::exp(-beta * (t - delta));
    gamma + (lambda - gamma) * rise
}

fn rel(a: f64, b: f64) -> f64 {
    ((a - b) / b).abs()
}

#[test]
fn eval_sat_known_value() {
    let fit = SatCurveFit::new(0.99, 0.29, 18.0, 0.0);
    let expected = 0.99 * (1.0 - (-18.0f64 * 0.21).exp());
    assert!((fit.eval(0.5) - expected).abs() < 1e-12);
    assert!((fit.eval(0.5) - 0.9674).abs() < 5e-5);
}

#[test]
fn eval_sat_boundary_and_asymptote() {
    let fit = SatCurveFit::new(0.9, 0.25, 8.0, 0.1);
    assert_eq!(fit.eval(0.25), 0.1);
    assert_eq!(fit.eval(-3.0), 0.1);
    assert!((fit.eval(1e6) - 0.9).abs() < 1e-12);
}

#[test]
fn noiseless_recovery_of_each_triple() {
    for &(lambda, delta, beta) in &TRIPLES {
        let pts: Vec<SatPoint> = times()
            .into_iter()
            .map(|t| SatPoint::new(t, sat_oracle(t, lambda, delta, beta, 0.0), 100.0))
            .collect();
        let fit = fit_sat(&pts, 0.0).unwrap();
        assert!(rel(fit.lambda, lambda) < 0.01, "{fit:?}");
        assert!(rel(fit.delta, delta) < 0.01, "{fit:?}");
        assert!(rel(fit.beta, beta) < 0.01, "{fit:?}");
    }
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    0.5 * (v[(v.len() - 1) / 2] + v[v.len() / 2])
}

fn binomial_fits(times: &[f64], (lambda, delta, beta): (f64, f64, f64), seed: u64) -> (SatCurveFit, f64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let pts: Vec<SatPoint> = times
        .iter()
        .map(|&t| {
            let p = sat_oracle(t, lambda, delta, beta, 0.0);
            let k = Binomial::new(100, p).unwrap().sample(&mut rng);
            SatPoint::new(t, k as f64 / 100.0, 100.0)
        })
        .collect();
    let true_sse = pts
        .iter()
        .map(|q| q.n * (q.p - sat_oracle(q.t, lambda, delta, beta, 0.0)).powi(2))
        .sum();
    (fit_sat(&pts, 0.0).unwrap(), true_sse)
}

// 37 sampling times over [0.3, 1.2]; with only 10 the rate of the fast
// curves rests on one or two points in the rise and its sampling error alone
// exceeds 10%.
fn dense_times() -> Vec<f64> {
    (0..37).map(|i| 0.3 + 0.025 * i as f64).collect()
}

#[test]
fn binomial_recovery_median_over_seeds() {
    for &triple in &TRIPLES {
        let (lambda, delta, beta) = triple;
        let mut errs = [Vec::new(), Vec::new(), Vec::new()];
        for seed in 0..100u64 {
            let (fit, _) = binomial_fits(&dense_times(), triple, seed);
            errs[0].push(rel(fit.lambda, lambda));
            errs[1].push(rel(fit.delta, delta));
            errs[2].push(rel(fit.beta, beta));
        }
        for (name, e) in ["lambda", "delta", "beta"].iter().zip(errs) {
            let m = median(e);
            assert!(m < 0.10, "{name} median rel err {m} for {lambda}/{delta}/{beta}");
        }
    }
}

#[test]
fn sparse_binomial_fits_beat_the_generator() {
    // the fitter finds the least-squares optimum; any miss is sampling error
    for &triple in &TRIPLES {
        for seed in 0..100u64 {
            let (fit, true_sse) = binomial_fits(&times(), triple, seed);
            assert!(fit.sse <= true_sse + 1e-9, "seed {seed}: {} > {true_sse}", fit.sse);
            assert!(rel(fit.lambda, triple.0) < 0.1);
        }
    }
}

#[test]
fn saturated_points_give_exact_asymptote() {
    let pts: Vec<SatPoint> = (0..6).map(|i| SatPoint::new(10.0 + i as f64 * 2.0, 0.83, 50.0)).collect();
    let fit = fit_sat(&pts, 0.1).unwrap();
    assert!((fit.lambda - 0.83).abs() < 1e-6, "{fit:?}");
}

#[test]
fn fit_sat_rejects_bad_input() {
    let few = vec![SatPoint::new(0.1, 0.5, 10.0); 3];
    assert!(matches!(fit_sat(&few, 0.0), Err(Error::Input(_))));
    let same_t = vec![SatPoint::new(0.4, 0.5, 10.0); 5];
    assert!(matches!(fit_sat(&same_t, 0.0), Err(Error::Input(_))));
    let floor: Vec<SatPoint> = (0..5).map(|i| SatPoint::new(i as f64, 0.1, 10.0)).collect();
    assert!(matches!(fit_sat(&floor, 0.1), Err(Error::NoSignal(_))));
}

#[test]
fn time_flop_map_arithmetic() {
    let m = TimeFlopMap::paper();
    assert!((m.mflops_at(1000.0) - 11.0).abs() < 1e-12);
    assert_eq!(m.mflops_at(400.0), 0.0);
    assert!((m.ms_at(11.0) - 1000.0).abs() < 1e-9);
}

fn alignment_data(human_step: usize, net_step: usize) -> (Vec<SatPoint>, Vec<SatPoint>) {
    let (a, t0) = (11.0 / 600.0, 400.0);
    let human_curve = |ms: f64| sat_oracle(ms, 0.9, 350.0, 0.006, 0.1);
    let human: Vec<SatPoint> = (0..12)
        .step_by(human_step)
        .map(|i| {
            let ms = 200.0 + 100.0 * i as f64;
            SatPoint::new(ms, human_curve(ms), 100.0)
        })
        .collect();
    let net: Vec<SatPoint> = (0..14)
        .step_by(net_step)
        .map(|i| {
            let f = 1.0 + i as f64;
            SatPoint::new(f, human_curve(f / a + t0), 1000.0)
        })
        .collect();
    (human, net)
}

#[test]
fn alignment_recovers_generating_map() {
    let (human, net) = alignment_data(1, 1);
    let fit = fit_time_flop_map(&human, &net, 0.1).unwrap();
    assert!(rel(fit.map.a, 11.0 / 600.0) < 0.01, "{:?}", fit.map);
    assert!(rel(fit.map.t0, 400.0) < 0.01, "{:?}", fit.map);
}

#[test]
fn alignment_is_stable_under_subsampling() {
    let (human, net) = alignment_data(1, 1);
    let full = fit_time_flop_map(&human, &net, 0.1).unwrap().map;
    for (hs, ns) in [(2, 1), (1, 2)] {
        let (human, net) = alignment_data(hs, ns);
        let sub = fit_time_flop_map(&human, &net, 0.1).unwrap().map;
        assert!(rel(sub.a, full.a) < 0.05, "{sub:?} vs {full:?}");
        assert!(rel(sub.t0, full.t0) < 0.05, "{sub:?} vs {full:?}");
    }
}

#[test]
fn alignment_without_overlap_is_infeasible() {
    let human: Vec<SatPoint> = (0..6).map(|i| SatPoint::new(200.0 * i as f64, 0.1 + 0.02 * i as f64, 50.0)).collect();
    let net: Vec<SatPoint> = (0..6).map(|i| SatPoint::new(1.0 + i as f64, 0.8 + 0.02 * i as f64, 50.0)).collect();
    assert!(matches!(
        fit_time_flop_map(&human, &net, 0.1),
        Err(Error::AlignmentInfeasible(_))
    ));
}

fn noise_oracle(sd: f64, sigma_eq: f64, lambda0: f64, tau: f64, gamma: f64) -> f64 {
    let total_var = sigma_eq.powi(2) + sd.powi(2);
    gamma + (lambda0 - gamma) * (-total_var / tau.powi(2)).exp()
}

fn conditions(sigma_eq: f64, lambda0: f64, taus: &[f64], sds: &[f64]) -> Vec<NoiseCondition> {
    taus.iter()
        .enumerate()
        .map(|(c, &tau)| NoiseCondition {
            label: format!("exit {c}"),
            points: sds
                .iter()
                .map(|&sd| NoisePoint {
                    sd,
                    p: noise_oracle(sd, sigma_eq, lambda0, tau, 0.1),
                    n: 1000.0,
                })
                .collect(),
        })
        .collect()
}

#[test]
fn equivalent_noise_recovers_network_scale() {
    let conds = conditions(0.6, 0.92, &[0.9, 1.2, 1.6, 2.0], &[0.0, 0.25, 0.5, 1.0, 2.0]);
    let fit = fit_equivalent_noise(&conds, 0.1).unwrap();
    assert!(rel(fit.sigma_eq, 0.6) < 0.15, "{fit:?}");
    assert!(!fit.lower_bound && !fit.non_monotone);
}

#[test]
fn equivalent_noise_recovers_human_scale() {
    let conds = conditions(0.04, 0.95, &[0.06, 0.09, 0.12], &[0.0, 0.02, 0.04, 0.08, 0.16]);
    let fit = fit_equivalent_noise(&conds, 0.1).unwrap();
    assert!(rel(fit.sigma_eq, 0.04) < 0.15, "{fit:?}");
}

#[test]
fn equivalent_noise_single_condition_with_unit_ceiling() {
    let conds = conditions(0.6, 1.0, &[1.3], &[0.0, 0.25, 0.5, 1.0, 2.0]);
    let fit = fit_equivalent_noise(&conds, 0.1).unwrap();
    assert_eq!(fit.lambda0, 1.0);
    assert!(rel(fit.sigma_eq, 0.6) < 0.15, "{fit:?}");
}

#[test]
fn equivalent_noise_binomial_recovery() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut conds = conditions(0.6, 0.92, &[0.9, 1.2, 1.6, 2.0], &[0.0, 0.25, 0.5, 1.0, 2.0]);
    for c in conds.iter_mut() {
        for q in c.points.iter_mut() {
            q.p = Binomial::new(5000, q.p).unwrap().sample(&mut rng) as f64 / 5000.0;
            q.n = 5000.0;
        }
    }
    let fit = fit_equivalent_noise(&conds, 0.1).unwrap();
    assert!(rel(fit.sigma_eq, 0.6) < 0.15, "{fit:?}");
}

#[test]
fn flat_curves_report_lower_bound() {
    let flat = vec![NoiseCondition {
        label: "flat".into(),
        points: [0.0, 0.1, 0.2, 0.4]
            .iter()
            .map(|&sd| NoisePoint { sd, p: 0.7, n: 100.0 })
            .collect(),
    }];
    let fit = fit_equivalent_noise(&flat, 0.1).unwrap();
    assert!(fit.lower_bound);
    assert_eq!(fit.sigma_eq, 0.4);
}

#[test]
fn non_monotone_curves_are_flagged() {
    let mut conds = conditions(0.3, 0.9, &[0.8], &[0.0, 0.25, 0.5, 1.0]);
    conds[0].points[2].p += 0.2;
    let fit = fit_equivalent_noise(&conds, 0.1).unwrap();
    assert!(fit.non_monotone);
}

#[test]
fn equivalent_noise_needs_levels_near_zero() {
    let conds = conditions(0.3, 0.9, &[0.8], &[0.5, 0.6, 0.7]);
    assert!(matches!(fit_equivalent_noise(&conds, 0.1), Err(Error::Input(_))));
    let conds = conditions(0.3, 0.9, &[0.8], &[0.0, 0.6]);
    assert!(matches!(fit_equivalent_noise(&conds, 0.1), Err(Error::Input(_))));
}

#[test]
fn efficiency_arithmetic() {
    let r = efficiency(0.06, 0.75).unwrap();
    assert!((r.efficiency - 0.0064).abs() < 1e-12);
    assert_eq!(r.percent, "0.6%");
    assert_eq!(efficiency(0.3, 0.3).unwrap().efficiency, 1.0);
    assert!(efficiency(0.0, 0.3).is_err());
}

#[test]
fn noise_ratio_statement() {
    let r = equivalent_noise_ratio("network", 0.6, "human", 0.04).unwrap();
    assert!((r.ratio - 15.0).abs() < 1e-9);
    assert_eq!(r.statement, "network : human equivalent noise SD = 15 : 1");
    let r = equivalent_noise_ratio("human", 0.04, "network", 0.6).unwrap();
    assert!(r.statement.ends_with("= 1 : 15"));
}

fn family_curve(sd: f64) -> NoiseCurve {
    NoiseCurve {
        sd,
        points: (1..=8)
            .map(|i| {
                let t = i as f64;
                // accuracy falls with total variance, rises with cost
                let tau = 0.3 * t;
                SatPoint::new(t, noise_oracle(sd, 0.0, 0.95, tau, 0.1), 100.0)
            })
            .collect(),
    }
}

#[test]
fn match_curves_interpolates_on_variance_axis() {
    let reference: Vec<NoiseCurve> = [0.0, 0.2, 0.4, 0.8].iter().map(|&s| family_curve(s)).collect();
    // a reference-observer curve at an unmeasured SD, relabelled as the test observer
    let mut test = family_curve(0.3);
    test.sd = 0.03;
    let m = match_curves(&test, &reference).unwrap();
    assert!(rel(m.sigma_ref, 0.3) < 0.05, "{m:?}");
    assert_eq!(m.points_used, 8);
    let report = efficiency_from_match(&m).unwrap();
    assert!((report.efficiency - (0.03 / m.sigma_ref).powi(2)).abs() < 1e-12);
    assert_eq!(report.matching_residual, Some(m.residual));
}

#[test]
fn match_curves_errors() {
    let reference = vec![family_curve(0.0)];
    assert!(matches!(match_curves(&family_curve(0.1), &reference), Err(Error::Matching(_))));
    let reference: Vec<NoiseCurve> = [0.0, 0.4].iter().map(|&s| family_curve(s)).collect();
    let mut far = family_curve(0.1);
    for q in far.points.iter_mut() {
        q.t += 100.0;
    }
    assert!(matches!(match_curves(&far, &reference), Err(Error::Matching(_))));
}

#[test]
fn curve_csv_skips_convention_rows() {
    let text = "noise_sd,exit_index,mflop,accuracy,n\n\
                0,-1,0,0.1,0\n0,0,3.5,0.4,100\n0,1,7.1,0.6,100\n\
                0.5,-1,0,0.1,0\n0.5,0,3.5,0.3,100\n";
    let curves = read_curves_csv(text).unwrap();
    assert_eq!(curves.len(), 2);
    assert_eq!(curves[0].points.len(), 2);
    assert_eq!(curves[1].sd, 0.5);
    assert_eq!(curves[1].points[0], SatPoint::new(3.5, 0.3, 100.0));
    let human = "display_ms,p,n\n200,0.2,60\n400,0.5,58\n";
    assert_eq!(read_curves_csv(human).unwrap()[0].points.len(), 2);
    assert!(read_curves_csv("x,y\n1,2\n").is_err());
}

#[test]
fn plot_csv_has_hundred_samples_per_fit() {
    let fits = vec![
        ("a".to_string(), SatCurveFit::new(0.9, 0.25, 8.0, 0.1)),
        ("b".to_string(), SatCurveFit::new(0.8, 0.2, 5.0, 0.1)),
    ];
    let text = plot_csv(&fits, 0.0, 1.5);
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines[0], "label,t,p");
    assert_eq!(lines.len(), 201);
    assert!(lines[100].starts_with("a,1.5,"));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn eval_sat_monotone_and_continuous(
        lambda in 0.2f64..1.0, delta in 0.0f64..1.0, beta in 0.1f64..50.0,
        t1 in -1.0f64..3.0, dt in 0.0f64..2.0,
    ) {
        let fit = SatCurveFit::new(lambda, delta, beta, 0.1);
        prop_assert!(fit.eval(t1 + dt) >= fit.eval(t1));
        prop_assert!((fit.eval(delta + 1e-12) - 0.1).abs() < 1e-9);
    }

    #[test]
    fn fit_never_worse_than_grid(
        lambda in 0.5f64..1.0, delta in 0.0f64..0.4, beta in 2.0f64..30.0, seed in 0u64..1000,
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let pts: Vec<SatPoint> = times()
            .into_iter()
            .map(|t| {
                let p = sat_oracle(t, lambda, delta, beta, 0.1);
                SatPoint::new(t, Binomial::new(50, p).unwrap().sample(&mut rng) as f64 / 50.0, 50.0)
            })
            .collect();
        prop_assume!(pts.iter().any(|q| q.p > 0.1));
        let grid = sat_grid(&pts, 0.1).unwrap();
        let fit = fit_sat(&pts, 0.1).unwrap();
        let grid_min = grid.iter().map(|g| g.3).fold(f64::INFINITY, f64::min);
        prop_assert!(fit.sse <= grid_min + 1e-12);
        prop_assert!(fit.lambda >= 0.1 && fit.beta > 0.0 && fit.delta >= 0.0);
    }

    #[test]
    fn efficiency_reciprocal(a in 1e-3f64..5.0, b in 1e-3f64..5.0) {
        let ab = efficiency(a, b).unwrap().efficiency;
        let ba = efficiency(b, a).unwrap().efficiency;
        prop_assert!((ab * ba - 1.0).abs() < 1e-12);
    }
}


#[test]
fn noise_conditions_csv_groups_by_exit() {
    let text = "noise_sd,exit_index,mflop,accuracy,n\n\
                0,-1,0,0.1,0\n0,0,3.5,0.6,100\n0,1,7.1,0.8,100\n\
                0.5,-1,0,0.1,0\n0.5,0,3.5,0.4,100\n0.5,1,7.1,0.5,100\n";
    let conds = read_noise_conditions_csv(text).unwrap();
    assert_eq!(conds.len(), 2);
    assert_eq!(conds[1].label, "exit_index=1");
    assert_eq!(conds[1].points[1], NoisePoint { sd: 0.5, p: 0.5, n: 100.0 });
    let human = "noise_sd,display_ms,p,n,trials,warning\n0,200,0.3,50,60,\n0.04,200,,0,10,no valid\n";
    let conds = read_noise_conditions_csv(human).unwrap();
    assert_eq!(conds.len(), 1);
    assert_eq!(conds[0].points.len(), 1);
}
