//! serve and export.

use anyhow::Context;
use serde_json::json;

use anytime_experiment::export::{aggregate, aggregate_csv, export_csv};
use anytime_experiment::store::resume_all;
use anytime_experiment::{serve, ImagePool, ServiceConfig};

use crate::settings::ExportSection;
use crate::util::{load_raw_cifar, write_summary, write_text, DirLock};

pub fn serve_cmd(cfg: &ServiceConfig) -> anyhow::Result<()> {
    let pool = match &cfg.dataset_dir {
        Some(dir) => {
            let raw = load_raw_cifar(dir)?;
            ImagePool::sample_from(&raw.test, cfg.pool_size, cfg.pool_seed)?
        }
        None => {
            tracing::warn!("no dataset_dir configured; serving synthetic stand-in stimuli");
            ImagePool::synthetic(cfg.pool_size, cfg.pool_seed)
        }
    };
    let _lock = DirLock::acquire(&cfg.data_dir)?;
    write_summary(&cfg.data_dir, "serve", cfg, &json!({ "pool_images": pool.len() }))?;
    let rt = tokio::runtime::Runtime::new().context("starting async runtime")?;
    rt.block_on(serve(cfg, pool))?;
    Ok(())
}

pub fn export_cmd(cfg: &ExportSection) -> anyhow::Result<()> {
    let logs = resume_all(&cfg.sessions_dir)?;
    let _lock = DirLock::acquire(&cfg.out_dir)?;
    let sessions: Vec<_> = logs.into_iter().map(|(s, _)| s).collect();
    let mut files = Vec::new();
    for s in &sessions {
        let name = format!("{}.csv", s.id);
        write_text(&cfg.out_dir.join(&name), &export_csv(s)?)?;
        files.push(json!({ "session": s.id, "observer": s.observer, "file": name, "answered": s.cursor }));
    }
    let cells = aggregate(&sessions);
    write_text(&cfg.out_dir.join("aggregate.csv"), &aggregate_csv(&cells)?)?;
    for c in cells.iter().filter(|c| c.warning.is_some()) {
        tracing::warn!("sd {} / {} ms: {}", c.noise_sd, c.display_ms, c.warning.as_deref().unwrap_or(""));
    }
    write_summary(&cfg.out_dir, "export", cfg, &json!({ "sessions": files, "aggregate": "aggregate.csv" }))?;
    println!("{} sessions exported to {}", sessions.len(), cfg.out_dir.display());
    Ok(())
}
