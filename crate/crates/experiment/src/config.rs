use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use crate::plan::BlockPlan;

/// The `[serve]` section of the pipeline config file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ServiceConfig {
    pub bind: String,
    pub port: u16,
    /// Session logs and exports live here.
    pub data_dir: PathBuf,
    /// CIFAR-10 binary directory; synthetic stand-ins are used when unset.
    pub dataset_dir: Option<PathBuf>,
    /// Built experiment UI, served at `/`.
    pub ui_dir: Option<PathBuf>,
    /// Images drawn from the test split into the stimulus pool.
    pub pool_size: usize,
    pub pool_seed: u64,
    /// Displayed stimulus side in pixels.
    pub stimulus_size: usize,
    pub plan: BlockPlan,
}

impl Default for ServiceConfig {
    fn default() -> Self {
        ServiceConfig {
            bind: "127.0.0.1".into(),
            port: 8080,
            data_dir: PathBuf::from("runs/experiment"),
            dataset_dir: None,
            ui_dir: None,
            pool_size: 1000,
            pool_seed: 0,
            stimulus_size: 190,
            plan: BlockPlan::default(),
        }
    }
}
