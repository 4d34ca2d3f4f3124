use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::gamma::{classify_table, standard_table_configs};

use super::config::{ExperimentConfig, Phase};
use super::grid::{GridResult, GridSummary};
use super::manifest::Manifest;
use super::GRID_CSV;

/// Merged grid results of several runs of one configuration.
#[derive(Clone, Debug)]
pub struct MergedReport {
    pub runs: Vec<PathBuf>,
    pub grid: GridResult,
    pub summary: GridSummary,
}

/// Fields that may differ between runs that are merged.
fn comparable(cfg: &ExperimentConfig) -> ExperimentConfig {
    ExperimentConfig {
        seeds: 0,
        master_seed: 0,
        checkpoint: None,
        out_dir: None,
        ..cfg.clone()
    }
}

/// Loads `grid.csv` from each run directory and concatenates the rows, giving
/// each run's seeds a fresh range so that `k` runs of `s` seeds give `k·s`
/// distinct seeds. Runs must share every setting except seeds, master seed
/// and paths.
pub fn merge_runs(dirs: &[PathBuf]) -> Result<MergedReport> {
    if dirs.is_empty() {
        return Err(Error::invalid("report needs at least one result directory"));
    }
    let mut reference: Option<(PathBuf, ExperimentConfig)> = None;
    let mut merged: Option<GridResult> = None;
    let mut offset = 0;
    for dir in dirs {
        let manifest = Manifest::load(dir)?;
        if !matches!(manifest.phase, Phase::Grid | Phase::Finetune) {
            return Err(Error::invalid(format!(
                "{} holds a {} run; only grid and finetune runs can be merged",
                dir.display(),
                manifest.phase
            )));
        }
        let cfg = manifest
            .config
            .ok_or_else(|| Error::format(dir, "manifest has no experiment config"))?;
        match &reference {
            None => reference = Some((dir.clone(), comparable(&cfg))),
            Some((first, want)) if *want != comparable(&cfg) => {
                return Err(Error::invalid(format!(
                    "incompatible manifests: {} and {} differ in more than seeds and paths",
                    first.display(),
                    dir.display()
                )));
            }
            Some(_) => {}
        }
        let path = dir.join(GRID_CSV);
        let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let mut grid = GridResult::from_csv(&text).map_err(|e| Error::format(&path, e.to_string()))?;
        let seeds = grid.rows.iter().map(|r| r.spec.seed + 1).max().unwrap_or(0);
        for row in &mut grid.rows {
            row.spec.seed += offset;
        }
        offset += seeds;
        match &mut merged {
            None => merged = Some(grid),
            Some(m) => m.rows.extend(grid.rows),
        }
    }
    let mut grid = merged.expect("at least one run");
    grid.sort();
    let summary = GridSummary::new(&grid);
    Ok(MergedReport {
        runs: dirs.to_vec(),
        grid,
        summary,
    })
}

/// The regime table followed by the grid summaries.
pub fn render_text(report: &MergedReport) -> Result<String> {
    let mut out = String::from("Adam regime table (stable / efficient / robust)\n");
    for row in classify_table(&standard_table_configs())? {
        let eta = row.optimal_eta.map_or_else(|| "-".to_string(), |e| e.to_string());
        out.push_str(&format!("{:<10} {}  efficient at eta exponent {eta}\n", row.name, row.marks()));
    }
    out.push_str(&format!(
        "\nMerged {} run(s), {} rows, {} seeds per cell\n\n",
        report.runs.len(),
        report.grid.rows.len(),
        report.summary.seeds_expected
    ));
    out.push_str(&report.summary.to_text());
    Ok(out)
}

pub fn run_dirs_from(paths: &[impl AsRef<Path>]) -> Vec<PathBuf> {
    paths.iter().map(|p| p.as_ref().to_path_buf()).collect()
}
