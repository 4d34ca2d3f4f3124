use std::io::Write;

use flate2::write::GzEncoder;
use flate2::Compression;

use lorascale_core::checkpoint::{load_checkpoint, sha256_hex};
use lorascale_core::data::{encode_idx_images, encode_idx_labels, synthetic_split, Dataset, MNIST_TEST, MNIST_TRAIN};
use lorascale_core::experiment::{
    self, report, ExperimentConfig, Manifest, Phase, CHECKPOINT_FILE, GRID_CSV, SUMMARY_CSV,
};
use lorascale_core::SchemeKind;

fn tiny() -> ExperimentConfig {
    ExperimentConfig {
        d: 24,
        n: 32,
        r: 4,
        batch: 16,
        pretrain_steps: 60,
        log_every: 20,
        finetune_steps: 10,
        lrs: vec![1e-3, 1e-2],
        init_sizes: vec![1.0, 8.0],
        seeds: 2,
        synthetic: true,
        train_samples: 160,
        test_samples: 100,
        ..ExperimentConfig::desk()
    }
}

fn write_idx(dir: &std::path::Path, files: (&str, &str), ds: &Dataset, gzip: bool) {
    let images = encode_idx_images(&ds.images).unwrap();
    let labels = encode_idx_labels(&ds.labels).unwrap();
    for (name, bytes) in [(files.0, images), (files.1, labels)] {
        if gzip {
            let mut enc = GzEncoder::new(Vec::new(), Compression::default());
            enc.write_all(&bytes).unwrap();
            std::fs::write(dir.join(format!("{name}.gz")), enc.finish().unwrap()).unwrap();
        } else {
            std::fs::write(dir.join(name), bytes).unwrap();
        }
    }
}

#[test]
fn idx_directory_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let train = synthetic_split(4, 0, 30, 28 * 28, 10).unwrap();
    let test = synthetic_split(4, 1, 20, 28 * 28, 10).unwrap();
    write_idx(dir.path(), MNIST_TRAIN, &train, false);
    write_idx(dir.path(), MNIST_TEST, &test, true);
    let back = Dataset::load_dir(dir.path(), MNIST_TRAIN, "x", "train").unwrap();
    assert_eq!(back.labels, train.labels);
    // Pixels are quantised to bytes on disk.
    for (a, b) in back.images.as_slice().iter().zip(train.images.as_slice()) {
        assert!((a - b).abs() <= 0.5 / 255.0 + 1e-12);
    }
    let back = Dataset::load_dir(dir.path(), MNIST_TEST, "x", "test").unwrap();
    assert_eq!(back.len(), 20);
}

#[test]
fn missing_dataset_is_rejected() {
    let mut cfg = tiny();
    cfg.synthetic = false;
    assert!(cfg.validate().is_err());
    cfg.pretrain_data = Some("/nonexistent/mnist".into());
    let dir = tempfile::tempdir().unwrap();
    let err = experiment::run_pretrain(&cfg, dir.path()).unwrap_err().to_string();
    assert!(err.contains("/nonexistent/mnist"), "{err}");
}

#[test]
fn pretraining_from_idx_files() {
    let data = tempfile::tempdir().unwrap();
    let mut cfg = tiny();
    cfg.d = 28 * 28;
    cfg.synthetic = false;
    cfg.pretrain_steps = 20;
    write_idx(data.path(), MNIST_TRAIN, &synthetic_split(2, 0, 200, cfg.d, 10).unwrap(), true);
    write_idx(data.path(), MNIST_TEST, &synthetic_split(2, 1, 100, cfg.d, 10).unwrap(), true);
    cfg.pretrain_data = Some(data.path().to_path_buf());
    let out = tempfile::tempdir().unwrap();
    let res = experiment::run_pretrain(&cfg, out.path()).unwrap();
    assert_eq!(res.log.last().unwrap().step, 20);
    let manifest = Manifest::load(out.path()).unwrap();
    assert_eq!(manifest.inputs.len(), 4, "{:?}", manifest.inputs);
}

#[test]
fn same_seed_gives_identical_checkpoint() {
    let cfg = tiny();
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    experiment::run_pretrain(&cfg, a.path()).unwrap();
    experiment::run_pretrain(&cfg, b.path()).unwrap();
    let read = |d: &std::path::Path| std::fs::read(d.join(CHECKPOINT_FILE)).unwrap();
    assert_eq!(sha256_hex(&read(a.path())), sha256_hex(&read(b.path())));

    let mut other = cfg.clone();
    other.master_seed = 1;
    let c = tempfile::tempdir().unwrap();
    experiment::run_pretrain(&other, c.path()).unwrap();
    assert_ne!(read(a.path()), read(c.path()));
}

#[test]
fn synthetic_pretraining_reaches_accuracy() {
    let cfg = ExperimentConfig {
        n: 256,
        r: 8,
        pretrain_steps: 500,
        synthetic: true,
        ..ExperimentConfig::desk()
    };
    let dir = tempfile::tempdir().unwrap();
    let res = experiment::run_pretrain(&cfg, dir.path()).unwrap();
    let acc = res.log.last().unwrap().test_accuracy;
    assert!(acc >= 0.8, "test accuracy {acc}");
}

#[test]
fn grid_checkpoint_dims_are_checked() {
    let cfg = tiny();
    let pre = tempfile::tempdir().unwrap();
    experiment::run_pretrain(&cfg, pre.path()).unwrap();
    let mut grid_cfg = cfg.clone();
    grid_cfg.n = 64;
    grid_cfg.checkpoint = Some(pre.path().join(CHECKPOINT_FILE));
    let out = tempfile::tempdir().unwrap();
    let err = experiment::run_grid_phase(&grid_cfg, out.path(), false, Phase::Grid).unwrap_err().to_string();
    assert!(err.contains("n=32") && err.contains("n=64"), "{err}");
}

#[test]
fn grid_is_reproducible_and_order_independent() {
    let mut cfg = tiny();
    let pre = tempfile::tempdir().unwrap();
    experiment::run_pretrain(&cfg, pre.path()).unwrap();
    cfg.checkpoint = Some(pre.path().join(CHECKPOINT_FILE));

    let (par, ser) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let outcome = experiment::run_grid_phase(&cfg, par.path(), true, Phase::Grid).unwrap();
    experiment::run_grid_phase(&cfg, ser.path(), false, Phase::Grid).unwrap();
    assert_eq!(outcome.grid.rows.len(), 4 * 2 * 2 * 2);
    let read = |d: &std::path::Path, f: &str| std::fs::read(d.join(f)).unwrap();
    assert_eq!(read(par.path(), GRID_CSV), read(ser.path(), GRID_CSV));
    assert_eq!(read(par.path(), SUMMARY_CSV), read(ser.path(), SUMMARY_CSV));

    let manifest = Manifest::load(par.path()).unwrap();
    assert_eq!(manifest.inputs.len(), 1);
    let again = tempfile::tempdir().unwrap();
    assert!(experiment::rerun(&manifest, again.path()).unwrap().is_empty());

    // A changed checkpoint is refused.
    std::fs::write(pre.path().join(CHECKPOINT_FILE), b"tampered").unwrap();
    assert!(experiment::rerun(&manifest, again.path()).is_err());
}

#[test]
fn finetune_runs_one_cell() {
    let mut cfg = tiny();
    cfg.schemes = vec![SchemeKind::InitAB];
    cfg.lrs = vec![1e-3];
    cfg.init_sizes = vec![2.0];
    let out = tempfile::tempdir().unwrap();
    let outcome = experiment::run_grid_phase(&cfg, out.path(), true, Phase::Finetune).unwrap();
    assert_eq!(outcome.grid.rows.len(), cfg.seeds);
    for row in &outcome.grid.rows {
        assert!((row.step0_test_loss - outcome.grid.reference_loss).abs() <= 1e-10);
    }
    cfg.lrs.push(1e-2);
    assert!(experiment::run_grid_phase(&cfg, out.path(), true, Phase::Finetune).is_err());
}

#[test]
fn report_merges_seeds_and_rejects_mismatches() {
    let mut cfg = tiny();
    cfg.schemes = vec![SchemeKind::InitA, SchemeKind::InitAB];
    let pre = tempfile::tempdir().unwrap();
    experiment::run_pretrain(&cfg, pre.path()).unwrap();
    cfg.checkpoint = Some(pre.path().join(CHECKPOINT_FILE));
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    experiment::run_grid_phase(&cfg, a.path(), true, Phase::Grid).unwrap();
    let mut second = cfg.clone();
    second.master_seed = 7;
    experiment::run_grid_phase(&second, b.path(), true, Phase::Grid).unwrap();

    let dirs = report::run_dirs_from(&[a.path(), b.path()]);
    let merged = report::merge_runs(&dirs).unwrap();
    assert_eq!(merged.summary.seeds_expected, 4);
    assert!(merged.summary.stats.values().all(|s| s.ok == 4));
    let mut seeds: Vec<usize> = merged.grid.rows.iter().map(|r| r.spec.seed).collect();
    seeds.sort_unstable();
    seeds.dedup();
    assert_eq!(seeds, vec![0, 1, 2, 3]);
    let text = report::render_text(&merged).unwrap();
    assert!(text.contains("Init[AB]") && text.contains("±"));
    let header = merged.summary.to_csv().lines().next().unwrap().to_string();
    for mean in header.split(',').filter(|c| c.ends_with("_mean")) {
        let std = mean.replace("_mean", "_std");
        assert!(header.split(',').any(|c| c == std), "{header}");
    }

    // A failed cell shows as NA and is excluded from the means.
    let csv = std::fs::read_to_string(a.path().join(GRID_CSV)).unwrap();
    let mut lines: Vec<String> = csv.lines().map(String::from).collect();
    let cols: Vec<&str> = lines[1].split(',').collect();
    let mut broken: Vec<String> = cols.iter().map(|s| s.to_string()).collect();
    broken[9] = "failed: diverged".into();
    lines[1] = broken.join(",");
    std::fs::write(a.path().join(GRID_CSV), lines.join("\n") + "\n").unwrap();
    let single = report::merge_runs(&report::run_dirs_from(&[a.path()])).unwrap();
    assert!(single.summary.incomplete());
    assert!(report::render_text(&single).unwrap().contains("incomplete"));

    let mut other = cfg.clone();
    other.finetune_steps = 11;
    let c = tempfile::tempdir().unwrap();
    experiment::run_grid_phase(&other, c.path(), true, Phase::Grid).unwrap();
    let err = report::merge_runs(&report::run_dirs_from(&[a.path(), c.path()])).unwrap_err();
    assert!(err.to_string().contains("incompatible"), "{err}");

    // Pretraining runs cannot be merged.
    assert!(report::merge_runs(&report::run_dirs_from(&[pre.path()])).is_err());
}

#[test]
fn loaded_checkpoint_matches_pretrained_model() {
    let cfg = tiny();
    let dir = tempfile::tempdir().unwrap();
    let res = experiment::run_pretrain(&cfg, dir.path()).unwrap();
    let (model, header) = load_checkpoint(dir.path().join(CHECKPOINT_FILE)).unwrap();
    assert_eq!(model.frozen_hashes(), res.model.frozen_hashes());
    assert_eq!(header.step, cfg.pretrain_steps as u64);
}
