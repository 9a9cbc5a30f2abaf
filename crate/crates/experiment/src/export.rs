//! Trial export and aggregation into speed-accuracy points.

use std::collections::BTreeMap;

use serde::Serialize;

use anytime_core::psychofit::SatPoint;

use crate::error::{Result, ServiceError};
use crate::session::{Session, Validity};

#[derive(Serialize)]
struct TrialRow<'a> {
    trial: &'a str,
    block: usize,
    image_id: usize,
    label: u8,
    display_ms: u32,
    noise_sd: f32,
    key: Option<char>,
    response_class: Option<u8>,
    rt_ms: Option<f64>,
    actual_display_ms: Option<f64>,
    validity: Option<&'static str>,
    correct: Option<bool>,
}

fn finish(w: csv::Writer<Vec<u8>>) -> Result<String> {
    let bytes = w
        .into_inner()
        .map_err(|e| ServiceError::Encoding(e.to_string()))?;
    Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
}

fn csv_err(e: csv::Error) -> ServiceError {
    ServiceError::Encoding(format!("csv: {e}"))
}

/// One row per scheduled trial; unanswered trials have empty response cells.
pub fn export_csv(session: &Session) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for t in &session.trials {
        w.serialize(TrialRow {
            trial: &t.trial_id,
            block: t.block,
            image_id: t.image_id,
            label: t.label,
            display_ms: t.display_ms,
            noise_sd: t.noise_sd,
            key: t.key,
            response_class: t.response_class,
            rt_ms: t.rt_ms,
            actual_display_ms: t.actual_display_ms,
            validity: t.validity.map(Validity::as_str),
            correct: t.correct,
        })
        .map_err(csv_err)?;
    }
    finish(w)
}

/// Accuracy over the valid trials of one (display time, noise SD) cell.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct AggregateCell {
    pub noise_sd: f32,
    pub display_ms: u32,
    /// `None` when the cell has no valid trial.
    pub p: Option<f64>,
    /// Valid trials.
    pub n: usize,
    /// Answered trials, valid or not.
    pub trials: usize,
    pub warning: Option<String>,
}

pub fn aggregate<'a>(sessions: impl IntoIterator<Item = &'a Session>) -> Vec<AggregateCell> {
    // (sd bits, display) -> (answered, valid, correct)
    let mut cells: BTreeMap<(u32, u32), (usize, usize, usize)> = BTreeMap::new();
    for s in sessions {
        for t in s.trials.iter().filter(|t| t.validity.is_some()) {
            let c = cells.entry((t.noise_sd.to_bits(), t.display_ms)).or_default();
            c.0 += 1;
            if t.validity == Some(Validity::Valid) {
                c.1 += 1;
                c.2 += usize::from(t.correct == Some(true));
            }
        }
    }
    let mut out: Vec<AggregateCell> = cells
        .into_iter()
        .map(|((sd, display_ms), (trials, n, correct))| AggregateCell {
            noise_sd: f32::from_bits(sd),
            display_ms,
            p: (n > 0).then(|| correct as f64 / n as f64),
            n,
            trials,
            warning: (n == 0).then(|| format!("no valid trials among {trials}; cell omitted")),
        })
        .collect();
    out.sort_by(|a, b| a.noise_sd.total_cmp(&b.noise_sd).then(a.display_ms.cmp(&b.display_ms)));
    out
}

/// Columns `noise_sd,display_ms,p,n,trials,warning`; the psychofit curve
/// reader skips warning rows (n = 0).
pub fn aggregate_csv(cells: &[AggregateCell]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for c in cells {
        w.serialize(c).map_err(csv_err)?;
    }
    finish(w)
}

/// Speed-accuracy points (t = display ms) per noise SD, ascending.
pub fn sat_points(cells: &[AggregateCell]) -> Vec<(f32, Vec<SatPoint>)> {
    let mut out: Vec<(f32, Vec<SatPoint>)> = Vec::new();
    for c in cells {
        let Some(p) = c.p else { continue };
        let point = SatPoint::new(f64::from(c.display_ms), p, c.n as f64);
        match out.iter_mut().find(|(sd, _)| *sd == c.noise_sd) {
            Some((_, pts)) => pts.push(point),
            None => out.push((c.noise_sd, vec![point])),
        }
    }
    out
}
