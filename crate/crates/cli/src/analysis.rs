//! fit and compare.

use std::fmt::Write as _;

use anyhow::{bail, Context};
use serde_json::{json, Value};

use anytime_core::psychofit::{
    efficiency, efficiency_from_match, equivalent_noise_ratio, fit_equivalent_noise, fit_sat, fit_time_flop_map,
    match_curves, plot_csv, read_curves_csv, read_noise_conditions_csv, EquivalentNoiseFit, NoiseCondition,
    NoiseCurve, SatCurveFit, SatPoint,
};

use crate::settings::{CompareSection, FitSection};
use crate::util::{read_text, write_summary, write_text, DirLock};

fn sat_fits(curves: &[NoiseCurve], gamma: f64) -> (Vec<(String, SatCurveFit)>, Vec<Value>) {
    let mut fits = Vec::new();
    let mut report = Vec::new();
    for c in curves {
        let label = format!("sd={}", c.sd);
        match fit_sat(&c.points, gamma) {
            Ok(f) => {
                report.push(json!({ "noise_sd": c.sd, "fit": f, "points": c.points.len() }));
                fits.push((label, f));
            }
            Err(e) => report.push(json!({ "noise_sd": c.sd, "error": e.to_string() })),
        }
    }
    (fits, report)
}

fn t_range(curves: &[NoiseCurve]) -> (f64, f64) {
    let ts = curves.iter().flat_map(|c| c.points.iter().map(|p| p.t));
    let (lo, hi) = ts.fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), t| (a.min(t), b.max(t)));
    (lo.min(0.0), hi)
}

fn noise_plot(fit: &EquivalentNoiseFit, conds: &[NoiseCondition]) -> String {
    let max_sd = conds
        .iter()
        .flat_map(|c| c.points.iter().map(|p| p.sd))
        .fold(0.0, f64::max);
    let mut out = String::from("label,sd,p\n");
    for (k, c) in conds.iter().enumerate() {
        for i in 0..100 {
            let sd = max_sd * i as f64 / 99.0;
            let p = if fit.lower_bound { fit.lambda0 } else { fit.eval(k, sd) };
            let _ = writeln!(out, "{},{sd},{p}", c.label);
        }
    }
    out
}

fn noise_report(conds: &[NoiseCondition], gamma: f64) -> (Option<EquivalentNoiseFit>, Value) {
    match fit_equivalent_noise(conds, gamma) {
        Ok(f) => {
            if f.non_monotone {
                tracing::warn!("accuracy rises with noise somewhere; fitted anyway (see non_monotone)");
            }
            let labels: Vec<&str> = conds.iter().map(|c| c.label.as_str()).collect();
            (Some(f.clone()), json!({ "fit": f, "conditions": labels }))
        }
        Err(e) => (None, json!({ "error": e.to_string() })),
    }
}

pub fn fit_cmd(cfg: &FitSection) -> anyhow::Result<()> {
    if cfg.sat.is_none() && cfg.noise.is_none() {
        bail!("nothing to fit: pass --sat and/or --noise (CSV files)");
    }
    let _lock = DirLock::acquire(&cfg.out_dir)?;
    let mut results = serde_json::Map::new();
    if let Some(path) = &cfg.sat {
        let curves = read_curves_csv(&read_text(path)?).with_context(|| format!("reading {}", path.display()))?;
        let (fits, report) = sat_fits(&curves, cfg.gamma);
        let (lo, hi) = t_range(&curves);
        write_text(&cfg.out_dir.join("fitted_curves.csv"), &plot_csv(&fits, lo, hi))?;
        for (label, f) in &fits {
            println!("{label}: lambda={:.4} delta={:.4} beta={:.4} (sse {:.4})", f.lambda, f.delta, f.beta, f.sse);
        }
        results.insert("sat".into(), json!(report));
    }
    if let Some(path) = &cfg.noise {
        let conds = read_noise_conditions_csv(&read_text(path)?).with_context(|| format!("reading {}", path.display()))?;
        let (fit, report) = noise_report(&conds, cfg.gamma);
        if let Some(f) = &fit {
            write_text(&cfg.out_dir.join("fitted_noise.csv"), &noise_plot(f, &conds))?;
            let bound = if f.lower_bound { " (lower bound)" } else { "" };
            println!("equivalent input noise SD {:.4}{bound}", f.sigma_eq);
        }
        results.insert("equivalent_noise".into(), report);
    }
    write_summary(&cfg.out_dir, "fit", cfg, &results)?;
    Ok(())
}

fn nearest(curves: &[NoiseCurve], sd: f64) -> Option<&NoiseCurve> {
    curves
        .iter()
        .min_by(|a, b| (a.sd - sd).abs().total_cmp(&(b.sd - sd).abs()))
}

pub fn compare_cmd(cfg: &CompareSection) -> anyhow::Result<()> {
    let direct = match (cfg.sigma_test, cfg.sigma_ref) {
        (Some(t), Some(r)) => Some(efficiency(t, r)?),
        (None, None) => None,
        _ => bail!("give both --sigma-test and --sigma-ref, or neither"),
    };
    if direct.is_none() && (cfg.human.is_none() || cfg.network.is_none()) {
        bail!("compare needs --human and --network curve files, or a matched --sigma-test/--sigma-ref pair");
    }
    let _lock = DirLock::acquire(&cfg.out_dir)?;
    let mut results = serde_json::Map::new();

    if let (Some(hp), Some(np)) = (&cfg.human, &cfg.network) {
        let human_text = read_text(hp)?;
        let net_text = read_text(np)?;
        let human = read_curves_csv(&human_text).with_context(|| format!("reading {}", hp.display()))?;
        let network = read_curves_csv(&net_text).with_context(|| format!("reading {}", np.display()))?;
        if human.is_empty() || network.is_empty() {
            bail!("empty human or network curve file");
        }
        let h_align = nearest(&human, cfg.align_human_sd.unwrap_or(human[0].sd)).expect("non-empty");
        let n_align = nearest(&network, cfg.align_network_sd.unwrap_or(h_align.sd)).expect("non-empty");
        let alignment = fit_time_flop_map(&h_align.points, &n_align.points, cfg.gamma)?;
        let map = alignment.map;
        println!("F = {:.6} (T - {:.1})  [MFLOP, ms]", map.a, map.t0);
        results.insert(
            "alignment".into(),
            json!({ "human_sd": h_align.sd, "network_sd": n_align.sd, "fit": alignment }),
        );

        let (hf, hr) = sat_fits(&human, cfg.gamma);
        let (nf, nr) = sat_fits(&network, cfg.gamma);
        let (lo, hi) = t_range(&human);
        write_text(&cfg.out_dir.join("fitted_human.csv"), &plot_csv(&hf, lo, hi))?;
        let (lo, hi) = t_range(&network);
        write_text(&cfg.out_dir.join("fitted_network.csv"), &plot_csv(&nf, lo, hi))?;
        results.insert("human_sat".into(), json!(hr));
        results.insert("network_sat".into(), json!(nr));

        let (net_eq, net_rep) = noise_report(&read_noise_conditions_csv(&net_text)?, cfg.gamma);
        let (hum_eq, hum_rep) = noise_report(&read_noise_conditions_csv(&human_text)?, cfg.gamma);
        results.insert("network_equivalent_noise".into(), net_rep);
        results.insert("human_equivalent_noise".into(), hum_rep);
        if let (Some(n), Some(h)) = (&net_eq, &hum_eq) {
            if !n.lower_bound && !h.lower_bound && h.sigma_eq > 0.0 {
                let r = equivalent_noise_ratio("network", n.sigma_eq, "human", h.sigma_eq)?;
                println!("{}", r.statement);
                results.insert("equivalent_noise_ratio".into(), json!(r));
            }
        }

        if human.len() >= 2 {
            let test_sd = cfg
                .test_sd
                .unwrap_or_else(|| network.iter().map(|c| c.sd).find(|&s| s > 0.0).unwrap_or(0.0));
            let test = nearest(&network, test_sd).expect("non-empty");
            let reference: Vec<NoiseCurve> = human
                .iter()
                .map(|c| NoiseCurve {
                    sd: c.sd,
                    points: c
                        .points
                        .iter()
                        .map(|p| SatPoint::new(map.mflops_at(p.t), p.p, p.n))
                        .collect(),
                })
                .collect();
            match match_curves(test, &reference).and_then(|m| efficiency_from_match(&m)) {
                Ok(e) => {
                    println!("matched efficiency {} ({} vs {})", e.percent, e.sigma_test, e.sigma_ref);
                    results.insert("matched_efficiency".into(), json!(e));
                }
                Err(e) => {
                    results.insert("matched_efficiency".into(), json!({ "error": e.to_string() }));
                }
            }
        }
    }
    if let Some(e) = direct {
        println!("efficiency {} = ({} / {})^2", e.percent, e.sigma_test, e.sigma_ref);
        results.insert("efficiency".into(), json!(e));
    }
    write_summary(&cfg.out_dir, "compare", cfg, &results)?;
    Ok(())
}
