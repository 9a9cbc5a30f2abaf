//! Curve files in and plot-ready samples out.

use std::fmt::Write as _;

use super::noise::{NoiseCondition, NoiseCurve, NoisePoint};
use super::sat::{SatCurveFit, SatPoint};
use crate::error::{Error, Result};

const TIME_COLUMNS: [&str; 5] = ["t", "mflop", "display_ms", "ms", "time"];
const ACCURACY_COLUMNS: [&str; 2] = ["accuracy", "p"];

/// Reads a curve CSV into one curve per `noise_sd` (sd 0 when the column is
/// absent). The cost column may be any of `t`, `mflop`, `display_ms`, `ms`,
/// `time`; accuracy is `accuracy` or `p`; `n` defaults to 1. Convention rows
/// (`exit_index` < 0 or `n` = 0) are skipped.
pub fn read_curves_csv(text: &str) -> Result<Vec<NoiseCurve>> {
    let mut reader = csv::Reader::from_reader(text.as_bytes());
    let headers = reader
        .headers()
        .map_err(|e| Error::Input(format!("curve csv header: {e}")))?
        .clone();
    let find = |names: &[&str]| headers.iter().position(|h| names.contains(&h.trim()));
    let t_col = find(&TIME_COLUMNS).ok_or_else(|| {
        Error::Input(format!("curve csv needs one of the columns {TIME_COLUMNS:?}"))
    })?;
    let p_col = find(&ACCURACY_COLUMNS)
        .ok_or_else(|| Error::Input(format!("curve csv needs one of the columns {ACCURACY_COLUMNS:?}")))?;
    let sd_col = find(&["noise_sd", "sd"]);
    let n_col = find(&["n"]);
    let exit_col = find(&["exit_index"]);
    let mut curves: Vec<NoiseCurve> = Vec::new();
    for (line, row) in reader.records().enumerate() {
        let row = row.map_err(|e| Error::Input(format!("curve csv: {e}")))?;
        let num = |c: usize| -> Result<f64> {
            row.get(c)
                .unwrap_or("")
                .trim()
                .parse()
                .map_err(|_| Error::Input(format!("curve csv row {}: bad number in column {c}", line + 2)))
        };
        if let Some(c) = exit_col {
            if num(c)? < 0.0 {
                continue;
            }
        }
        let n = n_col.map_or(Ok(1.0), num)?;
        if n <= 0.0 {
            continue;
        }
        let sd = sd_col.map_or(Ok(0.0), num)?;
        let point = SatPoint::new(num(t_col)?, num(p_col)?, n);
        match curves.iter_mut().find(|c| c.sd == sd) {
            Some(c) => c.points.push(point),
            None => curves.push(NoiseCurve {
                sd,
                points: vec![point],
            }),
        }
    }
    for c in curves.iter_mut() {
        c.points.sort_by(|a, b| a.t.total_cmp(&b.t));
    }
    curves.sort_by(|a, b| a.sd.total_cmp(&b.sd));
    Ok(curves)
}

/// Reads accuracy-vs-noise data: one condition per distinct value of the
/// first present of `exit_index`, `display_ms`, `condition`, `mflop`, `t`,
/// `ms`; needs `noise_sd` and `accuracy`/`p`. Convention rows are skipped as
/// in [`read_curves_csv`].
pub fn read_noise_conditions_csv(text: &str) -> Result<Vec<NoiseCondition>> {
    let mut reader = csv::Reader::from_reader(text.as_bytes());
    let headers = reader
        .headers()
        .map_err(|e| Error::Input(format!("noise csv header: {e}")))?
        .clone();
    let find = |names: &[&str]| headers.iter().position(|h| names.contains(&h.trim()));
    let (c_col, c_name) = ["exit_index", "display_ms", "condition", "mflop", "t", "ms"]
        .iter()
        .find_map(|n| find(&[n]).map(|c| (c, *n)))
        .ok_or_else(|| Error::Input("noise csv needs a condition column (exit_index, display_ms, ...)".into()))?;
    let sd_col = find(&["noise_sd", "sd"]).ok_or_else(|| Error::Input("noise csv needs a noise_sd column".into()))?;
    let p_col = find(&ACCURACY_COLUMNS)
        .ok_or_else(|| Error::Input(format!("noise csv needs one of the columns {ACCURACY_COLUMNS:?}")))?;
    let n_col = find(&["n"]);
    let mut out: Vec<(String, NoiseCondition)> = Vec::new();
    for (line, row) in reader.records().enumerate() {
        let row = row.map_err(|e| Error::Input(format!("noise csv: {e}")))?;
        let cell = |c: usize| row.get(c).unwrap_or("").trim().to_string();
        let num = |c: usize| -> Result<f64> {
            cell(c)
                .parse()
                .map_err(|_| Error::Input(format!("noise csv row {}: bad number in column {c}", line + 2)))
        };
        let key = cell(c_col);
        if c_name == "exit_index" && num(c_col)? < 0.0 {
            continue;
        }
        let n = n_col.map_or(Ok(1.0), num)?;
        if n <= 0.0 {
            continue;
        }
        let point = NoisePoint {
            sd: num(sd_col)?,
            p: num(p_col)?,
            n,
        };
        match out.iter_mut().find(|(k, _)| *k == key) {
            Some((_, c)) => c.points.push(point),
            None => out.push((
                key.clone(),
                NoiseCondition {
                    label: format!("{c_name}={key}"),
                    points: vec![point],
                },
            )),
        }
    }
    Ok(out.into_iter().map(|(_, c)| c).collect())
}

/// `label,t,p` at 100 evenly spaced t per fitted curve.
pub fn plot_csv(fits: &[(String, SatCurveFit)], t_lo: f64, t_hi: f64) -> String {
    let mut out = String::from("label,t,p\n");
    for (label, fit) in fits {
        for i in 0..100 {
            let t = t_lo + (t_hi - t_lo) * i as f64 / 99.0;
            let _ = writeln!(out, "{label},{t},{}", fit.eval(t));
        }
    }
    out
}
