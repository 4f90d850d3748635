//! Output files for runs, sweeps and comparisons.

use std::fs;
use std::path::Path;

use serde::Serialize;

use crate::config::ExperimentConfig;
use crate::error::{Error, Result};
use crate::experiments::{CompareRow, SweepRow};
use crate::orchestrator::RunOutput;

pub const METRICS_CSV: &str = "metrics.csv";
pub const ASSIGNMENTS_CSV: &str = "assignments.csv";
pub const SUMMARY_JSON: &str = "summary.json";
pub const CONFIG_FILE: &str = "config.yaml";
pub const SWEEP_CSV: &str = "sweep.csv";
pub const COMPARE_CSV: &str = "compare.csv";

fn write_csv<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for row in rows {
        w.serialize(row)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

/// Writes metrics.csv, assignments.csv, summary.json and the resolved config.
pub fn write_run(dir: &Path, cfg: &ExperimentConfig, out: &RunOutput) -> Result<()> {
    create_dir(dir)?;
    write_csv(&dir.join(METRICS_CSV), &out.rounds)?;
    write_csv(&dir.join(ASSIGNMENTS_CSV), &out.clients)?;
    let summary = dir.join(SUMMARY_JSON);
    let text = serde_json::to_string_pretty(&out.summary)?;
    fs::write(&summary, text + "\n").map_err(|e| Error::io(&summary, e))?;
    let config = dir.join(CONFIG_FILE);
    fs::write(&config, cfg.to_text()).map_err(|e| Error::io(&config, e))
}

pub fn write_sweep(dir: &Path, rows: &[SweepRow]) -> Result<()> {
    create_dir(dir)?;
    write_csv(&dir.join(SWEEP_CSV), rows)
}

/// Writes compare.csv plus one subdirectory of run outputs per strategy.
pub fn write_compare(dir: &Path, cfg: &ExperimentConfig, outputs: &[RunOutput]) -> Result<()> {
    create_dir(dir)?;
    let rows: Vec<CompareRow> = outputs.iter().map(|o| CompareRow::from(&o.summary)).collect();
    write_csv(&dir.join(COMPARE_CSV), &rows)?;
    for o in outputs {
        let mut c = cfg.clone();
        c.strategy = o.summary.strategy.parse().map_err(Error::Contract)?;
        write_run(&dir.join(&o.summary.strategy), &c, o)?;
    }
    Ok(())
}
