//! Configuration-driven experiment runner for `tic-core`.
//!
//! [`run`] validates a config, dispatches to the [registry](registry::EXPERIMENTS)
//! and writes the run directory `<output_dir>/<experiment>-<seed>-<hash>`.

pub mod config;
pub mod experiments;
pub mod registry;
pub mod report;

use std::path::{Path, PathBuf};

use anyhow::Result;

pub use config::{ConfigError, ExperimentConfig};
pub use report::{Check, ExperimentReport, Verdict};

/// Where a run landed and what it found.
#[derive(Debug, Clone)]
pub struct RunResult {
    pub dir: PathBuf,
    pub report: ExperimentReport,
}

/// Runs a validated config. `output_root` overrides `output_dir`.
pub fn run(cfg: &ExperimentConfig, output_root: Option<&Path>) -> Result<RunResult> {
    let exp = cfg.validate()?;
    for field in cfg.unused_fields(exp) {
        log::warn!("config key '{field}' is not read by '{}'", exp.name);
    }
    let outcome = if cfg.parallel.unwrap_or(false) {
        (exp.run)(cfg)?
    } else {
        rayon::ThreadPoolBuilder::new().num_threads(1).build()?.install(|| (exp.run)(cfg))?
    };
    let root = output_root.map(Path::to_path_buf).unwrap_or_else(|| PathBuf::from(cfg.output_dir.as_deref().unwrap_or("runs")));
    let dir = root.join(cfg.run_name());
    let report = report::write_run(&dir, exp.name, exp.anchor, cfg, outcome)?;
    Ok(RunResult { dir, report })
}
