//! Block design and response key map.

use serde::{Deserialize, Serialize};

use anytime_core::data::{CLASS_NAMES, NUM_CLASSES};

use crate::error::{Result, ServiceError};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BlockPlan {
    /// Viewing time of each block, in presentation order.
    pub display_ms: Vec<u32>,
    pub trials_per_block: usize,
    /// One SD per block, or a single value used for every block.
    pub noise_sd: Vec<f32>,
    pub tolerance_ms: u32,
    pub beep_ms: u32,
}

impl Default for BlockPlan {
    fn default() -> Self {
        BlockPlan {
            display_ms: vec![1000, 800, 600, 400, 200],
            trials_per_block: 100,
            noise_sd: vec![0.04],
            tolerance_ms: 100,
            beep_ms: 60,
        }
    }
}

impl BlockPlan {
    pub fn num_blocks(&self) -> usize {
        self.display_ms.len()
    }

    pub fn total_trials(&self) -> usize {
        self.num_blocks() * self.trials_per_block
    }

    pub fn block_sd(&self, block: usize) -> f32 {
        if self.noise_sd.len() == 1 {
            self.noise_sd[0]
        } else {
            self.noise_sd[block]
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(ServiceError::InvalidPlan(m));
        if self.display_ms.is_empty() {
            return bad("at least one block is required".into());
        }
        if self.display_ms.contains(&0) {
            return bad("display times must be positive".into());
        }
        if self.trials_per_block == 0 {
            return bad("trials per block must be >= 1".into());
        }
        if self.noise_sd.len() != 1 && self.noise_sd.len() != self.display_ms.len() {
            return bad(format!(
                "{} noise SDs for {} blocks (give one, or one per block)",
                self.noise_sd.len(),
                self.display_ms.len()
            ));
        }
        if self.noise_sd.iter().any(|s| !(s.is_finite() && *s >= 0.0)) {
            return bad("noise SDs must be finite and >= 0".into());
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct KeyBinding {
    pub key: char,
    pub class: u8,
    pub name: String,
}

/// The letter each class name is prompted by: (A)irplane, a(U)tomobile,
/// (B)ird, (C)at, d(E)er, (D)og, (F)rog, (H)orse, (S)hip, (T)ruck.
pub const KEYS: [char; NUM_CLASSES] = ['A', 'U', 'B', 'C', 'E', 'D', 'F', 'H', 'S', 'T'];

pub fn key_map() -> Vec<KeyBinding> {
    KEYS.iter()
        .enumerate()
        .map(|(c, &key)| KeyBinding {
            key,
            class: c as u8,
            name: CLASS_NAMES[c].to_string(),
        })
        .collect()
}

/// Case-insensitive lookup of a single-letter key.
pub fn class_for_key(key: &str) -> Option<u8> {
    let mut chars = key.trim().chars();
    let c = chars.next()?.to_ascii_uppercase();
    if chars.next().is_some() {
        return None;
    }
    KEYS.iter().position(|&k| k == c).map(|i| i as u8)
}
