use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use serde::Serialize;

use anytime_core::data::{
    derive_seed, expected_files, load_cifar10, synthetic_images, to_grayscale, Cifar10, ImageRecord,
};

use crate::settings::DataSource;

/// Exclusive claim on an output directory, released on drop.
pub struct DirLock {
    path: PathBuf,
}

impl DirLock {
    pub fn acquire(dir: &Path) -> anyhow::Result<Self> {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
        let path = dir.join(".anytime.lock");
        match fs::OpenOptions::new().write(true).create_new(true).open(&path) {
            Ok(_) => {
                fs::write(&path, std::process::id().to_string()).ok();
                Ok(DirLock { path })
            }
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => bail!(
                "{} is in use by another run (lock file {}; delete it if that run is gone)",
                dir.display(),
                path.display()
            ),
            Err(e) => Err(e).with_context(|| format!("creating lock {}", path.display())),
        }
    }
}

impl Drop for DirLock {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.path);
    }
}

pub fn write_text(path: &Path, text: &str) -> anyhow::Result<()> {
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

/// `summary.json`: the command, its effective config and results.
pub fn write_summary<C: Serialize, R: Serialize>(
    dir: &Path,
    command: &str,
    config: &C,
    results: &R,
) -> anyhow::Result<PathBuf> {
    let doc = serde_json::json!({
        "command": command,
        "effective_config": config,
        "results": results,
    });
    let path = dir.join("summary.json");
    write_text(&path, &serde_json::to_string_pretty(&doc)?)?;
    Ok(path)
}

pub fn read_text(path: &Path) -> anyhow::Result<String> {
    fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))
}

/// Grayscale train and test images.
pub struct Dataset {
    pub train: Vec<ImageRecord>,
    pub test: Vec<ImageRecord>,
    pub description: String,
}

pub fn missing_cifar_files(dir: &Path) -> Vec<&'static str> {
    expected_files()
        .into_iter()
        .filter(|f| !dir.join(f).is_file())
        .collect()
}

pub fn load_raw_cifar(dir: &Path) -> anyhow::Result<Cifar10> {
    let missing = missing_cifar_files(dir);
    if !missing.is_empty() {
        bail!(
            "CIFAR-10 not found in {}: missing {}.\nExpected the binary distribution (cifar-10-binary.tar.gz, extracted) with files: {}",
            dir.display(),
            missing.join(", "),
            expected_files().join(", ")
        );
    }
    Ok(load_cifar10(dir)?)
}

pub fn load_dataset(source: &DataSource) -> anyhow::Result<Dataset> {
    if let Some(n) = source.synthetic {
        let test_n = (n / 5).max(100);
        return Ok(Dataset {
            train: synthetic_images(n, source.data_seed),
            test: synthetic_images(test_n, derive_seed(source.data_seed, 1)),
            description: format!("synthetic gratings ({n} train, {test_n} test, seed {})", source.data_seed),
        });
    }
    let raw = load_raw_cifar(&source.data_dir)?;
    Ok(Dataset {
        train: raw.train.iter().map(to_grayscale).collect(),
        test: raw.test.iter().map(to_grayscale).collect(),
        description: format!("CIFAR-10 grayscale from {}", source.data_dir.display()),
    })
}
