//! Scripted observers for exercising the service without a person.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use anytime_core::data::NUM_CLASSES;
use anytime_core::psychofit::SatCurveFit;

use crate::error::Result;
use crate::plan::KEYS;
use crate::session::{ResponseInput, Session, Trial};

/// Answers correctly with probability `curve.eval(display_ms)` (t in ms),
/// otherwise picks one of the other classes uniformly; presses at the
/// deadline with Gaussian timing error.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SimulatedObserver {
    pub curve: SatCurveFit,
    pub rt_sd_ms: f64,
    pub miss_probability: f64,
}

impl SimulatedObserver {
    pub fn respond<R: Rng>(&self, trial: &Trial, rng: &mut R) -> ResponseInput {
        let display = f64::from(trial.display_ms);
        if rng.random::<f64>() < self.miss_probability {
            return ResponseInput {
                key: None,
                rt_ms: None,
                actual_display_ms: Some(display),
            };
        }
        let class = if rng.random::<f64>() < self.curve.eval(display) {
            usize::from(trial.label)
        } else {
            let other = rng.random_range(0..NUM_CLASSES - 1);
            if other >= usize::from(trial.label) {
                other + 1
            } else {
                other
            }
        };
        let jitter = Normal::new(0.0, self.rt_sd_ms.max(0.0))
            .expect("finite sd")
            .sample(rng);
        ResponseInput {
            key: Some(KEYS[class].to_string()),
            rt_ms: Some((display + jitter).max(0.0)),
            actual_display_ms: Some(display),
        }
    }

    /// Answers every remaining trial of `session` in place.
    pub fn complete<R: Rng>(&self, session: &mut Session, rng: &mut R) -> Result<()> {
        while let Some(trial) = session.pending() {
            let (index, input) = (trial.index, self.respond(trial, rng));
            session.record_response(index, &input, 0)?;
        }
        Ok(())
    }
}
