//! Trial schedule, response rules and session state.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use anytime_core::data::derive_seed;

use crate::error::{Result, ServiceError};
use crate::plan::{class_for_key, key_map, BlockPlan};
use crate::pool::ImagePool;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Validity {
    Valid,
    TooQuick,
    TooSlow,
    Missed,
}

impl Validity {
    pub fn as_str(self) -> &'static str {
        match self {
            Validity::Valid => "valid",
            Validity::TooQuick => "too_quick",
            Validity::TooSlow => "too_slow",
            Validity::Missed => "missed",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Feedback {
    Quick,
    Slow,
    Perfect,
}

/// Validity and feedback of a response `rt_ms` after onset against the
/// deadline `display_ms`. No response counts as missed and is fed back as slow.
pub fn classify(rt_ms: Option<f64>, display_ms: u32, tolerance_ms: u32) -> (Validity, Feedback) {
    let Some(rt) = rt_ms else {
        return (Validity::Missed, Feedback::Slow);
    };
    let (d, tol) = (f64::from(display_ms), f64::from(tolerance_ms));
    if rt < d - tol {
        (Validity::TooQuick, Feedback::Quick)
    } else if rt > d + tol {
        (Validity::TooSlow, Feedback::Slow)
    } else {
        (Validity::Valid, Feedback::Perfect)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Trial {
    pub trial_id: String,
    pub index: usize,
    pub block: usize,
    /// Index of the image in the stimulus pool's source set.
    pub image_id: usize,
    pub label: u8,
    pub display_ms: u32,
    pub noise_sd: f32,
    pub stimulus_seed: u64,
    pub key: Option<char>,
    pub response_class: Option<u8>,
    pub rt_ms: Option<f64>,
    pub actual_display_ms: Option<f64>,
    pub validity: Option<Validity>,
    pub correct: Option<bool>,
    /// Server clock (ms since the Unix epoch) when the response arrived; audit only.
    pub received_at_ms: Option<u64>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Status {
    Active,
    Complete,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Session {
    pub id: String,
    pub observer: String,
    pub plan: BlockPlan,
    pub seed: u64,
    pub trials: Vec<Trial>,
    /// Index of the pending trial; equals `trials.len()` once complete.
    pub cursor: usize,
    pub status: Status,
}

/// What the client submits for the pending trial. `key: None` is an
/// explicit miss (timeout or skip).
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ResponseInput {
    pub key: Option<String>,
    pub rt_ms: Option<f64>,
    pub actual_display_ms: Option<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ResponseOutcome {
    pub feedback: Feedback,
    pub correct: bool,
    pub validity: Validity,
}

pub fn trial_id(session_id: &str, index: usize) -> String {
    format!("{session_id}-{index}")
}

/// Splits a trial id back into session id and trial index.
pub fn parse_trial_id(id: &str) -> Option<(&str, usize)> {
    let (session, index) = id.rsplit_once('-')?;
    Some((session, index.parse().ok()?))
}

impl Session {
    /// Pre-generates the whole schedule from `seed`: each block draws its
    /// images from the pool without replacement.
    pub fn create(id: &str, observer: &str, plan: &BlockPlan, seed: u64, pool: &ImagePool) -> Result<Session> {
        plan.validate()?;
        if plan.trials_per_block > pool.len() {
            return Err(ServiceError::InvalidPlan(format!(
                "{} trials per block but the image pool holds {}",
                plan.trials_per_block,
                pool.len()
            )));
        }
        let mut trials = Vec::with_capacity(plan.total_trials());
        for (block, &display_ms) in plan.display_ms.iter().enumerate() {
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, block as u64));
            for slot in sample(&mut rng, pool.len(), plan.trials_per_block) {
                let index = trials.len();
                trials.push(Trial {
                    trial_id: trial_id(id, index),
                    index,
                    block,
                    image_id: pool.image_id(slot),
                    label: pool.label(slot),
                    display_ms,
                    noise_sd: plan.block_sd(block),
                    stimulus_seed: derive_seed(seed ^ 0x5354_494d_554c_5553, index as u64),
                    key: None,
                    response_class: None,
                    rt_ms: None,
                    actual_display_ms: None,
                    validity: None,
                    correct: None,
                    received_at_ms: None,
                });
            }
        }
        Ok(Session {
            id: id.to_string(),
            observer: observer.to_string(),
            plan: plan.clone(),
            seed,
            trials,
            cursor: 0,
            status: Status::Active,
        })
    }

    pub fn pending(&self) -> Option<&Trial> {
        self.trials.get(self.cursor)
    }

    /// Stores the response to trial `index`, which must be the pending one.
    pub fn record_response(&mut self, index: usize, input: &ResponseInput, received_at_ms: u64) -> Result<ResponseOutcome> {
        if index >= self.trials.len() {
            return Err(ServiceError::NotFound(format!("trial {}", trial_id(&self.id, index))));
        }
        if index < self.cursor {
            return Err(ServiceError::Conflict(format!(
                "trial {} already has a response",
                self.trials[index].trial_id
            )));
        }
        if index > self.cursor {
            return Err(ServiceError::Conflict(format!(
                "trial {} is not the pending trial ({})",
                self.trials[index].trial_id, self.trials[self.cursor].trial_id
            )));
        }
        let class = match &input.key {
            None => None,
            Some(k) => Some(class_for_key(k).ok_or_else(|| ServiceError::UnknownKey {
                key: k.clone(),
                key_map: key_map(),
            })?),
        };
        let rt = match (class, input.rt_ms) {
            (None, _) => None,
            (Some(_), Some(rt)) if rt.is_finite() && rt >= 0.0 => Some(rt),
            (Some(_), Some(rt)) => return Err(ServiceError::InvalidResponse(format!("rt_ms must be finite and >= 0, got {rt}"))),
            (Some(_), None) => return Err(ServiceError::InvalidResponse("a keypress needs rt_ms".into())),
        };
        if let Some(a) = input.actual_display_ms {
            if !(a.is_finite() && a >= 0.0) {
                return Err(ServiceError::InvalidResponse(format!(
                    "actual_display_ms must be finite and >= 0, got {a}"
                )));
            }
        }
        let tolerance = self.plan.tolerance_ms;
        let trial = &mut self.trials[index];
        let (validity, feedback) = classify(rt, trial.display_ms, tolerance);
        let correct = class == Some(trial.label);
        trial.key = class.map(|c| crate::plan::KEYS[usize::from(c)]);
        trial.response_class = class;
        trial.rt_ms = rt;
        trial.actual_display_ms = input.actual_display_ms;
        trial.validity = Some(validity);
        trial.correct = Some(correct);
        trial.received_at_ms = Some(received_at_ms);
        self.cursor += 1;
        if self.cursor == self.trials.len() {
            self.status = Status::Complete;
        }
        Ok(ResponseOutcome {
            feedback,
            correct,
            validity,
        })
    }
}
