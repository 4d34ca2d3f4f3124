//! Toy-model experiments: pretraining, fine-tuning grids, width probes, and
//! the run directories (CSV outputs plus a manifest) they produce.

pub mod config;
pub mod grid;
pub mod manifest;
pub mod pretrain;
pub mod report;

use std::path::{Path, PathBuf};

use crate::checkpoint::{encode_checkpoint, load_checkpoint_expecting, ToyDims};
use crate::data::{synthetic_split, Dataset, MNIST_TEST, MNIST_TRAIN};
use crate::error::{Error, Result};
use crate::probe::{compare_to_theory, default_predictions, run_probe, ProbeConfig, Verdict, DEFAULT_TOLERANCE};
use crate::toy::ToyModel;

pub use config::{ExperimentConfig, InitAxis, Phase};
pub use grid::{CellResult, CellSpec, FinetuneData, GridResult, GridSummary};
pub use manifest::{Manifest, RunWriter};

pub const CHECKPOINT_FILE: &str = "pretrain.ckpt";
pub const PRETRAIN_LOG: &str = "pretrain_log.csv";
pub const GRID_CSV: &str = "grid.csv";
pub const SUMMARY_CSV: &str = "summary.csv";
pub const SUMMARY_TXT: &str = "summary.txt";
pub const VERDICT_TXT: &str = "verdict.txt";

/// Training-set size of the synthetic pretraining task.
pub const SYNTHETIC_PRETRAIN_SAMPLES: usize = 12_800;
/// Synthetic splits: pretraining train/test, then the fine-tuning task.
const SPLIT_PRETRAIN_TRAIN: u64 = 0;
const SPLIT_PRETRAIN_TEST: u64 = 1;
const SPLIT_FINETUNE_TRAIN: u64 = 2;
const SPLIT_FINETUNE_TEST: u64 = 3;

fn check_dim(cfg: &ExperimentConfig, data: &Dataset) -> Result<()> {
    if data.dim() != cfg.d {
        return Err(Error::invalid(format!(
            "{} {} has {} pixels per image but d = {}",
            data.name,
            data.split,
            data.dim(),
            cfg.d
        )));
    }
    if let Some(&l) = data.labels.iter().find(|&&l| l >= cfg.classes) {
        return Err(Error::invalid(format!("{} has label {l} but classes = {}", data.name, cfg.classes)));
    }
    Ok(())
}

/// Pretraining train and test sets: MNIST from `pretrain_data`, or the
/// synthetic task. The test set is truncated to `test_samples`.
pub fn pretrain_datasets(cfg: &ExperimentConfig) -> Result<(Dataset, Dataset)> {
    let (train, test) = if cfg.synthetic {
        (
            synthetic_split(cfg.data_seed, SPLIT_PRETRAIN_TRAIN, SYNTHETIC_PRETRAIN_SAMPLES, cfg.d, cfg.classes)?,
            synthetic_split(cfg.data_seed, SPLIT_PRETRAIN_TEST, cfg.test_samples, cfg.d, cfg.classes)?,
        )
    } else {
        let dir = cfg
            .pretrain_data
            .as_ref()
            .ok_or_else(|| Error::invalid("pretraining needs pretrain_data (an MNIST directory) or synthetic=true"))?;
        (
            Dataset::load_dir(dir, MNIST_TRAIN, "mnist", "train")?,
            Dataset::load_dir(dir, MNIST_TEST, "mnist", "test")?.head(cfg.test_samples),
        )
    };
    check_dim(cfg, &train)?;
    check_dim(cfg, &test)?;
    Ok((train, test))
}

/// Fine-tuning train pool and test set: the first `train_samples` and
/// `test_samples` of FashionMNIST from `finetune_data`, or a second synthetic
/// task on the same prototypes with every label shifted by one class.
pub fn finetune_datasets(cfg: &ExperimentConfig) -> Result<(Dataset, Dataset)> {
    let (train, test) = if cfg.synthetic {
        let shift: Vec<usize> = (0..cfg.classes).map(|c| (c + 1) % cfg.classes).collect();
        (
            synthetic_split(cfg.data_seed, SPLIT_FINETUNE_TRAIN, cfg.train_samples, cfg.d, cfg.classes)?
                .permute_labels(&shift)?,
            synthetic_split(cfg.data_seed, SPLIT_FINETUNE_TEST, cfg.test_samples, cfg.d, cfg.classes)?
                .permute_labels(&shift)?,
        )
    } else {
        let dir = cfg.finetune_data.as_ref().ok_or_else(|| {
            Error::invalid("fine-tuning needs finetune_data (a FashionMNIST directory) or synthetic=true")
        })?;
        (
            Dataset::load_dir(dir, MNIST_TRAIN, "fashion-mnist", "train")?.head(cfg.train_samples),
            Dataset::load_dir(dir, MNIST_TEST, "fashion-mnist", "test")?.head(cfg.test_samples),
        )
    };
    check_dim(cfg, &train)?;
    check_dim(cfg, &test)?;
    Ok((train, test))
}

fn dims(cfg: &ExperimentConfig) -> ToyDims {
    ToyDims {
        d: cfg.d,
        n: cfg.n,
        classes: cfg.classes,
        r: 0,
    }
}

/// The frozen base model: the configured checkpoint (recorded as a manifest
/// input) or, without one, a fresh pretraining run.
pub fn base_model(cfg: &ExperimentConfig, manifest: &mut Manifest) -> Result<ToyModel> {
    match &cfg.checkpoint {
        Some(path) => {
            let (model, _) = load_checkpoint_expecting(path, dims(cfg))?;
            if model.rank() != 0 {
                return Err(Error::invalid(format!("{} already carries an adapter", path.display())));
            }
            manifest.record_input(path)?;
            Ok(model)
        }
        None => {
            let (train, test) = pretrain_datasets(cfg)?;
            Ok(pretrain::pretrain(cfg, &train, &test)?.0)
        }
    }
}

fn record_data_inputs(cfg: &ExperimentConfig, manifest: &mut Manifest, pretraining: bool) -> Result<()> {
    if cfg.synthetic {
        return Ok(());
    }
    let dirs = if pretraining { [&cfg.pretrain_data, &None] } else { [&cfg.finetune_data, &cfg.pretrain_data] };
    for dir in dirs.into_iter().flatten() {
        for stem in [MNIST_TRAIN.0, MNIST_TRAIN.1, MNIST_TEST.0, MNIST_TEST.1] {
            for name in [stem.to_string(), format!("{stem}.gz")] {
                let p = dir.join(name);
                if p.exists() {
                    manifest.record_input(&p)?;
                }
            }
        }
        if !pretraining && cfg.checkpoint.is_some() {
            break;
        }
    }
    Ok(())
}

#[derive(Debug)]
pub struct PretrainOutcome {
    pub model: ToyModel,
    pub log: Vec<pretrain::PretrainRow>,
    pub dir: PathBuf,
}

/// Pretrains and writes the checkpoint, the log CSV and the manifest.
pub fn run_pretrain(cfg: &ExperimentConfig, out: &Path) -> Result<PretrainOutcome> {
    cfg.validate()?;
    let (train, test) = pretrain_datasets(cfg)?;
    let mut manifest = Manifest::new(Phase::Pretrain, cfg.master_seed);
    manifest.config = Some(cfg.clone());
    record_data_inputs(cfg, &mut manifest, true)?;
    let (model, log) = pretrain::pretrain(cfg, &train, &test)?;
    let mut w = RunWriter::create(out, manifest)?;
    w.write(CHECKPOINT_FILE, &encode_checkpoint(&model, None, cfg.master_seed, cfg.pretrain_steps as u64)?)?;
    w.write(PRETRAIN_LOG, pretrain::log_csv(&log).as_bytes())?;
    w.finish()?;
    Ok(PretrainOutcome {
        model,
        log,
        dir: out.to_path_buf(),
    })
}

#[derive(Debug)]
pub struct GridOutcome {
    pub grid: GridResult,
    pub summary: GridSummary,
    pub dir: PathBuf,
}

/// Runs the fine-tuning lattice (a single cell for [`Phase::Finetune`]) and
/// writes the grid CSV, summaries and manifest.
pub fn run_grid_phase(cfg: &ExperimentConfig, out: &Path, parallel: bool, phase: Phase) -> Result<GridOutcome> {
    cfg.validate()?;
    match phase {
        Phase::Grid => {}
        Phase::Finetune => {
            if cfg.schemes.len() != 1 || cfg.lrs.len() != 1 || cfg.init_sizes.len() != 1 {
                return Err(Error::invalid("finetune runs exactly one scheme, learning rate and init size"));
            }
        }
        other => return Err(Error::invalid(format!("{other} is not a fine-tuning phase"))),
    }
    let mut manifest = Manifest::new(phase, cfg.master_seed);
    manifest.config = Some(cfg.clone());
    manifest.parallel = parallel;
    let base = base_model(cfg, &mut manifest)?;
    record_data_inputs(cfg, &mut manifest, false)?;
    let (train, test) = finetune_datasets(cfg)?;
    let data = FinetuneData::prepare(&base, &train, &test)?;
    let grid = grid::run_grid(&base, &data, cfg, parallel)?;
    let summary = GridSummary::new(&grid);
    let mut w = RunWriter::create(out, manifest)?;
    w.write(GRID_CSV, grid.to_csv().as_bytes())?;
    w.write(SUMMARY_CSV, summary.to_csv().as_bytes())?;
    let text = format!(
        "Frozen pretrained model on the fine-tuning test set: loss {:.6}, accuracy {:.4}\n\n{}",
        grid.reference_loss,
        grid.reference_accuracy,
        summary.to_text()
    );
    w.write(SUMMARY_TXT, text.as_bytes())?;
    w.finish()?;
    Ok(GridOutcome {
        grid,
        summary,
        dir: out.to_path_buf(),
    })
}

#[derive(Debug)]
pub struct ProbeOutcome {
    pub verdicts: Vec<Verdict>,
    pub dir: PathBuf,
}

/// Short description of a probe used in headings.
pub fn probe_label(cfg: &ProbeConfig) -> String {
    let (a0, b0) = cfg.init_exponents();
    let (ea, eb) = cfg.lr.exponents();
    format!(
        "{} {} a0={a0} b0={b0} eta_a={ea} eta_b={eb} c={}",
        cfg.scheme, cfg.optimizer, cfg.lr.c
    )
}

/// Runs each probe, writing `probe_<i>.csv`, `verdict_<i>.csv`, a combined
/// verdict text and the manifest.
pub fn run_probe_phase(probes: &[ProbeConfig], tolerance: f64, out: &Path) -> Result<ProbeOutcome> {
    if probes.is_empty() {
        return Err(Error::invalid("no probe configured"));
    }
    let mut manifest = Manifest::new(Phase::Probe, probes[0].master_seed);
    manifest.probes = probes.to_vec();
    manifest.tolerance = Some(tolerance);
    let mut w = RunWriter::create(out, manifest)?;
    let mut text = String::new();
    let mut verdicts = Vec::new();
    for (i, cfg) in probes.iter().enumerate() {
        let run = run_probe(cfg)?;
        let verdict = compare_to_theory(&run.records, &default_predictions(cfg)?, tolerance);
        w.write(&format!("probe_{i}.csv"), run.to_csv().as_bytes())?;
        w.write(&format!("verdict_{i}.csv"), verdict.to_csv().as_bytes())?;
        text.push_str(&format!("[{i}] {}\n", probe_label(cfg)));
        for d in &run.divergences {
            text.push_str(&format!("diverged: n={} seed={} at step {}\n", d.n, d.seed, d.t));
        }
        text.push_str(&verdict.to_text());
        text.push('\n');
        verdicts.push(verdict);
    }
    w.write(VERDICT_TXT, text.as_bytes())?;
    w.finish()?;
    Ok(ProbeOutcome {
        verdicts,
        dir: out.to_path_buf(),
    })
}

/// Re-runs the run described by `manifest` into `out` and returns the output
/// files whose bytes differ from the recorded ones.
pub fn rerun(manifest: &Manifest, out: &Path) -> Result<Vec<String>> {
    manifest.verify_inputs()?;
    let config = || {
        manifest
            .config
            .clone()
            .ok_or_else(|| Error::invalid("manifest has no experiment config"))
    };
    match manifest.phase {
        Phase::Pretrain => {
            run_pretrain(&config()?, out)?;
        }
        Phase::Grid | Phase::Finetune => {
            run_grid_phase(&config()?, out, manifest.parallel, manifest.phase)?;
        }
        Phase::Probe => {
            run_probe_phase(&manifest.probes, manifest.tolerance.unwrap_or(DEFAULT_TOLERANCE), out)?;
        }
        other => return Err(Error::invalid(format!("{other} runs have no manifest to replay"))),
    }
    let fresh = Manifest::load(out)?;
    let mut differ: Vec<String> = manifest
        .outputs
        .iter()
        .filter(|(name, hash)| fresh.outputs.get(*name) != Some(hash))
        .map(|(name, _)| name.clone())
        .collect();
    differ.extend(fresh.outputs.keys().filter(|k| !manifest.outputs.contains_key(*k)).cloned());
    Ok(differ)
}
