//! The pipeline config file: one TOML table per subcommand. Command-line
//! flags override the file; the merged section is what gets echoed into
//! every summary.

use std::path::{Path, PathBuf};

use anyhow::Context;
use serde::{Deserialize, Serialize};

use anytime_experiment::ServiceConfig;

#[derive(Clone, Debug, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FileConfig {
    pub prepare: PrepareSection,
    pub train: TrainSection,
    pub evaluate: EvaluateSection,
    pub anytime: AnytimeSection,
    pub fit: FitSection,
    pub compare: CompareSection,
    pub serve: ServiceConfig,
    pub export: ExportSection,
}

pub fn load(path: Option<&Path>) -> anyhow::Result<FileConfig> {
    let Some(path) = path else {
        return Ok(FileConfig::default());
    };
    let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
    toml::from_str(&text).with_context(|| format!("parsing config {}", path.display()))
}

fn data_dir() -> PathBuf {
    PathBuf::from("data/cifar-10-batches-bin")
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PrepareSection {
    pub data_dir: PathBuf,
    pub out_dir: PathBuf,
}

impl Default for PrepareSection {
    fn default() -> Self {
        PrepareSection {
            data_dir: data_dir(),
            out_dir: "runs/prepare".into(),
        }
    }
}

/// Where images come from: the CIFAR-10 binaries, or `synthetic` generated
/// stand-ins (that many training images) when set.
#[derive(Clone, Debug)]
pub struct DataSource {
    pub data_dir: PathBuf,
    pub synthetic: Option<usize>,
    pub data_seed: u64,
}

macro_rules! data_source {
    ($($section:ty),*) => {$(
        impl $section {
            pub fn source(&self) -> DataSource {
                DataSource {
                    data_dir: self.data_dir.clone(),
                    synthetic: self.synthetic,
                    data_seed: self.data_seed,
                }
            }
        }
    )*};
}

data_source!(TrainSection, EvaluateSection, AnytimeSection);

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSection {
    pub preset: String,
    pub data_dir: PathBuf,
    pub synthetic: Option<usize>,
    pub data_seed: u64,
    pub out_dir: PathBuf,
    pub epochs: Option<usize>,
    pub seed: Option<u64>,
    pub train_images: Option<usize>,
    pub validation_size: Option<usize>,
    pub batch_size: Option<usize>,
    pub learning_rate: Option<f64>,
}

impl Default for TrainSection {
    fn default() -> Self {
        TrainSection {
            preset: "desk".into(),
            data_dir: data_dir(),
            synthetic: None,
            data_seed: 0,
            out_dir: "runs/train".into(),
            epochs: None,
            seed: None,
            train_images: None,
            validation_size: None,
            batch_size: None,
            learning_rate: None,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvaluateSection {
    pub checkpoint: PathBuf,
    pub data_dir: PathBuf,
    pub synthetic: Option<usize>,
    pub data_seed: u64,
    pub out_dir: PathBuf,
    pub noise: Vec<f32>,
    pub seed: u64,
    pub batch_size: usize,
    /// Evaluate on the first `limit` test images only.
    pub limit: Option<usize>,
}

impl Default for EvaluateSection {
    fn default() -> Self {
        EvaluateSection {
            checkpoint: "runs/train/best.ckpt".into(),
            data_dir: data_dir(),
            synthetic: None,
            data_seed: 0,
            out_dir: "runs/evaluate".into(),
            noise: vec![0.0, 0.25, 0.5, 1.0, 5.0],
            seed: 0,
            batch_size: 250,
            limit: None,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AnytimeSection {
    pub checkpoint: PathBuf,
    pub data_dir: PathBuf,
    pub synthetic: Option<usize>,
    pub data_seed: u64,
    pub out_dir: PathBuf,
    pub noise: Vec<f32>,
    pub seed: u64,
    pub batch_size: usize,
    pub limit: Option<usize>,
    /// Budgets (MFLOP) to report the affordable exit and its clean accuracy for.
    pub budgets_mflop: Vec<f64>,
    /// Calibrate a confidence threshold to this mean cost (MFLOP).
    pub target_mflop: Option<f64>,
    /// Test images used for calibration; accuracy is reported on the rest.
    pub calibration_images: usize,
}

impl Default for AnytimeSection {
    fn default() -> Self {
        AnytimeSection {
            checkpoint: "runs/train/best.ckpt".into(),
            data_dir: data_dir(),
            synthetic: None,
            data_seed: 0,
            out_dir: "runs/anytime".into(),
            noise: vec![0.0, 0.25, 0.5, 0.75, 1.0],
            seed: 0,
            batch_size: 250,
            limit: None,
            budgets_mflop: Vec::new(),
            target_mflop: None,
            calibration_images: 5000,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FitSection {
    /// Speed-accuracy points: one SAT fit per noise level.
    pub sat: Option<PathBuf>,
    /// Accuracy vs noise per condition: equivalent input noise fit.
    pub noise: Option<PathBuf>,
    pub gamma: f64,
    pub out_dir: PathBuf,
}

impl Default for FitSection {
    fn default() -> Self {
        FitSection {
            sat: None,
            noise: None,
            gamma: 0.1,
            out_dir: "runs/fit".into(),
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CompareSection {
    /// Aggregated human points (`noise_sd,display_ms,p,n`).
    pub human: Option<PathBuf>,
    /// Network curves (`noise_sd,exit_index,mflop,accuracy,n`).
    pub network: Option<PathBuf>,
    pub gamma: f64,
    /// Noise level of the human and network curves used for the time/FLOP alignment.
    pub align_human_sd: Option<f64>,
    pub align_network_sd: Option<f64>,
    /// Network noise level matched against the human family.
    pub test_sd: Option<f64>,
    /// Matched pair given directly, skipping curve matching.
    pub sigma_test: Option<f64>,
    pub sigma_ref: Option<f64>,
    pub out_dir: PathBuf,
}

impl Default for CompareSection {
    fn default() -> Self {
        CompareSection {
            human: None,
            network: None,
            gamma: 0.1,
            align_human_sd: None,
            align_network_sd: None,
            test_sd: None,
            sigma_test: None,
            sigma_ref: None,
            out_dir: "runs/compare".into(),
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExportSection {
    pub sessions_dir: PathBuf,
    pub out_dir: PathBuf,
}

impl Default for ExportSection {
    fn default() -> Self {
        ExportSection {
            sessions_dir: "runs/experiment/sessions".into(),
            out_dir: "runs/export".into(),
        }
    }
}
