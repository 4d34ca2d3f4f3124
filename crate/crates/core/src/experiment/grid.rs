use std::collections::BTreeMap;
use std::sync::Arc;

use rayon::prelude::*;

use crate::data::{BatchSampler, Dataset};
use crate::error::{Error, Result};
use crate::lora::{init_lora, InitScheme, SchemeKind};
use crate::optim::{adam_step, AdamState};
use crate::tensor::Rng;
use crate::toy::{adapter_step_grads, evaluate_features, FrozenFeatures, ToyModel};

use super::config::{ExperimentConfig, InitAxis};

/// Stream offsets of the master seed for adapter initialisation and batch
/// order. Both depend only on the seed index, so every scheme, rate and size
/// with the same seed shares the same draws.
pub const ADAPTER_INIT_STREAM: u64 = 1 << 16;
pub const FINETUNE_BATCH_STREAM: u64 = 2 << 16;

/// Cached frozen features of the fine-tuning train and test sets.
#[derive(Clone, Debug)]
pub struct FinetuneData {
    pub train: FrozenFeatures,
    pub train_labels: Vec<usize>,
    pub test: FrozenFeatures,
    pub test_labels: Vec<usize>,
}

impl FinetuneData {
    pub fn prepare(model: &ToyModel, train: &Dataset, test: &Dataset) -> Result<Self> {
        Ok(Self {
            train: FrozenFeatures::compute(model, &train.images)?,
            train_labels: train.labels.clone(),
            test: FrozenFeatures::compute(model, &test.images)?,
            test_labels: test.labels.clone(),
        })
    }
}

/// One lattice point.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CellSpec {
    pub scheme: SchemeKind,
    pub lr: f64,
    pub init_size: f64,
    pub seed: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct CellResult {
    pub spec: CellSpec,
    pub step0_test_loss: f64,
    pub final_test_loss: f64,
    pub final_test_accuracy: f64,
    pub steps: usize,
    /// `None` on success, otherwise the failure message.
    pub failure: Option<String>,
}

impl CellResult {
    pub fn ok(&self) -> bool {
        self.failure.is_none()
    }
}

/// Scheme for one init size: `beta` multiplies the Kaiming deviation `1/√n`
/// directly; `sigma` is the deviation of every Gaussian factor.
pub fn scheme_for(kind: SchemeKind, axis: InitAxis, size: f64, n: usize, r: usize) -> InitScheme {
    match (axis, kind) {
        (InitAxis::Beta, _) => InitScheme::new(kind, size),
        // `B` of Init[B] has deviation beta/√r, so invert that instead.
        (InitAxis::Sigma, SchemeKind::InitB) => InitScheme::new(kind, size * (r as f64).sqrt()),
        (InitAxis::Sigma, _) => InitScheme::from_sigma(kind, size, n),
    }
}

/// Fine-tunes the adapter of one cell and evaluates it on the test set.
pub fn run_cell(base: &ToyModel, data: &FinetuneData, cfg: &ExperimentConfig, spec: CellSpec) -> CellResult {
    let mut result = CellResult {
        spec,
        step0_test_loss: f64::NAN,
        final_test_loss: f64::NAN,
        final_test_accuracy: f64::NAN,
        steps: 0,
        failure: None,
    };
    if let Err(e) = train_cell(base, data, cfg, &mut result) {
        result.failure = Some(e.to_string());
    }
    result
}

fn train_cell(base: &ToyModel, data: &FinetuneData, cfg: &ExperimentConfig, out: &mut CellResult) -> Result<()> {
    let spec = out.spec;
    let hashes = base.frozen_hashes();
    let scheme = scheme_for(spec.scheme, cfg.init_axis, spec.init_size, base.width(), cfg.r);
    let mut init_rng = Rng::child(cfg.master_seed, ADAPTER_INIT_STREAM + spec.seed as u64);
    let layer = init_lora(scheme, Arc::clone(base.w0()), cfg.r, cfg.s, &mut init_rng)?;
    let mut model = base.with_adapter(layer)?;
    out.step0_test_loss = evaluate_features(&model, &data.test, &data.test_labels)?.0;

    let n_train = data.train.len();
    let mut sampler = BatchSampler::new(
        n_train,
        cfg.batch.min(n_train),
        Rng::child(cfg.master_seed, FINETUNE_BATCH_STREAM + spec.seed as u64),
    )?;
    let mut st_a = AdamState::for_param(&model.hidden.a);
    let mut st_b = AdamState::for_param(&model.hidden.b);
    for _ in 0..cfg.finetune_steps {
        let idx = sampler.next_indices();
        let (h1, wz) = data.train.select(&idx);
        let labels: Vec<usize> = idx.iter().map(|&i| data.train_labels[i]).collect();
        let (_, ga, gb) = adapter_step_grads(&model, &h1, &wz, &labels)?;
        adam_step(&mut model.hidden.a, &ga, &mut st_a, spec.lr)?;
        adam_step(&mut model.hidden.b, &gb, &mut st_b, spec.lr)?;
        out.steps += 1;
    }
    let (loss, acc) = evaluate_features(&model, &data.test, &data.test_labels)?;
    if model.frozen_hashes() != hashes {
        return Err(Error::Precondition("pretrained weights changed during fine-tuning".into()));
    }
    out.final_test_loss = loss;
    out.final_test_accuracy = acc;
    Ok(())
}

/// Every `(scheme, lr, init size, seed)` cell in lattice order.
pub fn lattice(cfg: &ExperimentConfig) -> Vec<CellSpec> {
    let mut out = Vec::new();
    for &scheme in &cfg.schemes {
        for &lr in &cfg.lrs {
            for &init_size in &cfg.init_sizes {
                for seed in 0..cfg.seeds {
                    out.push(CellSpec {
                        scheme,
                        lr,
                        init_size,
                        seed,
                    });
                }
            }
        }
    }
    out
}

#[derive(Clone, Debug, PartialEq)]
pub struct GridResult {
    pub init_axis: InitAxis,
    /// Test loss and accuracy of the pretrained model without an adapter.
    pub reference_loss: f64,
    pub reference_accuracy: f64,
    pub rows: Vec<CellResult>,
}

pub const GRID_CSV_HEADER: &str =
    "scheme,lr,init_axis,init_size,seed,step0_test_loss,final_test_loss,final_test_accuracy,steps,status";

fn sort_key(c: &CellSpec) -> (SchemeKind, u64, u64, usize) {
    (c.scheme, c.lr.to_bits(), c.init_size.to_bits(), c.seed)
}

impl GridResult {
    pub fn sort(&mut self) {
        self.rows.sort_by_key(|r| sort_key(&r.spec));
    }

    pub fn to_csv(&self) -> String {
        let mut out = format!("{GRID_CSV_HEADER}\n");
        for r in &self.rows {
            let status = match &r.failure {
                None => "ok".to_string(),
                Some(msg) => format!("failed: {}", msg.replace([',', '\n'], ";")),
            };
            out.push_str(&format!(
                "{},{},{},{},{},{},{},{},{},{}\n",
                r.spec.scheme,
                r.spec.lr,
                self.init_axis,
                r.spec.init_size,
                r.spec.seed,
                r.step0_test_loss,
                r.final_test_loss,
                r.final_test_accuracy,
                r.steps,
                status
            ));
        }
        out
    }

    /// Parses [`to_csv`](Self::to_csv) output. Reference metrics are not part
    /// of the CSV and come back as `NaN`.
    pub fn from_csv(text: &str) -> Result<Self> {
        let mut lines = text.lines();
        if lines.next() != Some(GRID_CSV_HEADER) {
            return Err(Error::Parse("grid CSV header mismatch".into()));
        }
        let mut rows = Vec::new();
        let mut axis = None;
        for (i, line) in lines.enumerate().filter(|(_, l)| !l.trim().is_empty()) {
            let f: Vec<&str> = line.splitn(10, ',').collect();
            if f.len() != 10 {
                return Err(Error::Parse(format!("grid CSV line {}: expected 10 fields", i + 2)));
            }
            let num = |s: &str| s.parse::<f64>().map_err(|e| Error::Parse(format!("line {}: {s:?}: {e}", i + 2)));
            let int = |s: &str| s.parse::<usize>().map_err(|e| Error::Parse(format!("line {}: {s:?}: {e}", i + 2)));
            let this_axis: InitAxis = f[2].parse()?;
            if *axis.get_or_insert(this_axis) != this_axis {
                return Err(Error::Parse("grid CSV mixes init axes".into()));
            }
            rows.push(CellResult {
                spec: CellSpec {
                    scheme: f[0].parse()?,
                    lr: num(f[1])?,
                    init_size: num(f[3])?,
                    seed: int(f[4])?,
                },
                step0_test_loss: num(f[5])?,
                final_test_loss: num(f[6])?,
                final_test_accuracy: num(f[7])?,
                steps: int(f[8])?,
                failure: match f[9] {
                    "ok" => None,
                    s => Some(s.trim_start_matches("failed: ").to_string()),
                },
            });
        }
        Ok(Self {
            init_axis: axis.unwrap_or(InitAxis::Beta),
            reference_loss: f64::NAN,
            reference_accuracy: f64::NAN,
            rows,
        })
    }
}

/// Runs the whole lattice. The parallel and serial paths produce identical
/// results because each cell derives its own streams and rows are sorted.
pub fn run_grid(base: &ToyModel, data: &FinetuneData, cfg: &ExperimentConfig, parallel: bool) -> Result<GridResult> {
    if base.rank() != 0 {
        return Err(Error::invalid("grid expects a pretrained model without an adapter"));
    }
    let cells = lattice(cfg);
    let rows: Vec<CellResult> = if parallel {
        cells.into_par_iter().map(|c| run_cell(base, data, cfg, c)).collect()
    } else {
        cells.into_iter().map(|c| run_cell(base, data, cfg, c)).collect()
    };
    let (reference_loss, reference_accuracy) = evaluate_features(base, &data.test, &data.test_labels)?;
    let mut out = GridResult {
        init_axis: cfg.init_axis,
        reference_loss,
        reference_accuracy,
        rows,
    };
    out.sort();
    Ok(out)
}

/// Mean and sample standard deviation of the successful seeds of one cell.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CellStats {
    pub loss_mean: f64,
    pub loss_std: f64,
    pub acc_mean: f64,
    pub acc_std: f64,
    pub ok: usize,
    pub failed: usize,
}

fn mean_std(v: &[f64]) -> (f64, f64) {
    if v.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let m = v.iter().sum::<f64>() / v.len() as f64;
    if v.len() < 2 {
        return (m, 0.0);
    }
    let var = v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (v.len() - 1) as f64;
    (m, var.sqrt())
}

pub type StatKey = (SchemeKind, u64, u64);

fn stat_key(s: &CellSpec) -> StatKey {
    (s.scheme, s.lr.to_bits(), s.init_size.to_bits())
}

/// Aggregated view of a grid: per-cell statistics plus the comparisons.
#[derive(Clone, Debug)]
pub struct GridSummary {
    pub init_axis: InitAxis,
    pub schemes: Vec<SchemeKind>,
    pub lrs: Vec<f64>,
    pub init_sizes: Vec<f64>,
    pub stats: BTreeMap<StatKey, CellStats>,
    pub seeds_expected: usize,
}

impl GridSummary {
    pub fn new(grid: &GridResult) -> Self {
        let mut groups: BTreeMap<StatKey, Vec<&CellResult>> = BTreeMap::new();
        let mut schemes = Vec::new();
        let mut lrs: Vec<f64> = Vec::new();
        let mut sizes: Vec<f64> = Vec::new();
        for r in &grid.rows {
            groups.entry(stat_key(&r.spec)).or_default().push(r);
            if !schemes.contains(&r.spec.scheme) {
                schemes.push(r.spec.scheme);
            }
            if !lrs.contains(&r.spec.lr) {
                lrs.push(r.spec.lr);
            }
            if !sizes.contains(&r.spec.init_size) {
                sizes.push(r.spec.init_size);
            }
        }
        schemes.sort();
        lrs.sort_by(f64::total_cmp);
        sizes.sort_by(f64::total_cmp);
        let seeds_expected = groups.values().map(Vec::len).max().unwrap_or(0);
        let stats = groups
            .into_iter()
            .map(|(k, rows)| {
                let ok: Vec<&&CellResult> = rows.iter().filter(|r| r.ok()).collect();
                let (loss_mean, loss_std) = mean_std(&ok.iter().map(|r| r.final_test_loss).collect::<Vec<_>>());
                let (acc_mean, acc_std) = mean_std(&ok.iter().map(|r| r.final_test_accuracy).collect::<Vec<_>>());
                let stats = CellStats {
                    loss_mean,
                    loss_std,
                    acc_mean,
                    acc_std,
                    ok: ok.len(),
                    failed: rows.len() - ok.len(),
                };
                (k, stats)
            })
            .collect();
        Self {
            init_axis: grid.init_axis,
            schemes,
            lrs,
            init_sizes: sizes,
            stats,
            seeds_expected,
        }
    }

    pub fn get(&self, scheme: SchemeKind, lr: f64, size: f64) -> Option<&CellStats> {
        self.stats.get(&(scheme, lr.to_bits(), size.to_bits())).filter(|s| s.ok > 0)
    }

    /// Lowest mean test loss over init sizes at `(scheme, lr)`, with its size.
    pub fn best(&self, scheme: SchemeKind, lr: f64) -> Option<(f64, CellStats)> {
        self.init_sizes
            .iter()
            .filter_map(|&size| self.get(scheme, lr, size).map(|s| (size, *s)))
            .min_by(|a, b| a.1.loss_mean.total_cmp(&b.1.loss_mean))
    }

    /// Missing or partially failed lattice points.
    pub fn incomplete(&self) -> bool {
        let expected = self.schemes.len() * self.lrs.len() * self.init_sizes.len();
        self.stats.len() != expected || self.stats.values().any(|s| s.failed > 0 || s.ok != self.seeds_expected)
    }

    /// `loss(AB+) / loss(AB) − 1` at one lattice point.
    pub fn plus_gap(&self, lr: f64, size: f64) -> Option<f64> {
        let ab = self.get(SchemeKind::InitAB, lr, size)?;
        let plus = self.get(SchemeKind::InitABPlus, lr, size)?;
        Some(plus.loss_mean / ab.loss_mean - 1.0)
    }

    pub const CSV_HEADER: &'static str =
        "scheme,lr,init_axis,init_size,n_ok,n_failed,loss_mean,loss_std,acc_mean,acc_std";

    /// Per-cell statistics; cells with no successful seed read `NA`.
    pub fn to_csv(&self) -> String {
        let mut out = format!("{}\n", Self::CSV_HEADER);
        for (&(scheme, lr, size), s) in &self.stats {
            let f = |v: f64| if s.ok == 0 { "NA".to_string() } else { v.to_string() };
            out.push_str(&format!(
                "{scheme},{},{},{},{},{},{},{},{},{}\n",
                f64::from_bits(lr),
                self.init_axis,
                f64::from_bits(size),
                s.ok,
                s.failed,
                f(s.loss_mean),
                f(s.loss_std),
                f(s.acc_mean),
                f(s.acc_std)
            ));
        }
        out
    }

    /// Aligned plain-text tables: best-over-init loss per scheme and rate, the
    /// Init[AB] − Init[A] improvement matrix and the Init[AB+] / Init[AB] gap.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let lr_head: String = self.lrs.iter().map(|lr| format!("{:>16}", format!("lr={lr}"))).collect();
        out.push_str(&format!(
            "Best mean test loss over {} (mean ± std across seeds)\n{:<14}{lr_head}\n",
            self.init_axis, "scheme"
        ));
        for &scheme in &self.schemes {
            out.push_str(&format!("{:<14}", scheme.name()));
            for &lr in &self.lrs {
                let cell = match self.best(scheme, lr) {
                    Some((_, s)) => format!("{:.4}±{:.4}", s.loss_mean, s.loss_std),
                    None => "NA".into(),
                };
                out.push_str(&format!("{cell:>16}"));
            }
            out.push('\n');
        }
        let matrix = |title: &str, f: &dyn Fn(f64, f64) -> Option<f64>| {
            let mut s = format!("\n{title}\n{:<14}{lr_head}\n", self.init_axis.to_string());
            for &size in &self.init_sizes {
                s.push_str(&format!("{:<14}", size));
                for &lr in &self.lrs {
                    let cell = f(lr, size).map_or_else(|| "NA".to_string(), |v| format!("{v:+.4}"));
                    s.push_str(&format!("{cell:>16}"));
                }
                s.push('\n');
            }
            s
        };
        let diff = |a: SchemeKind, b: SchemeKind, acc: bool| {
            move |lr: f64, size: f64| {
                let (x, y) = (self.get(a, lr, size)?, self.get(b, lr, size)?);
                Some(if acc { x.acc_mean - y.acc_mean } else { x.loss_mean - y.loss_mean })
            }
        };
        if self.schemes.contains(&SchemeKind::InitA) && self.schemes.contains(&SchemeKind::InitAB) {
            out.push_str(&matrix(
                "Init[AB] - Init[A]: mean test loss difference (negative favours Init[AB])",
                &diff(SchemeKind::InitAB, SchemeKind::InitA, false),
            ));
            out.push_str(&matrix(
                "Init[AB] - Init[A]: mean test accuracy difference",
                &diff(SchemeKind::InitAB, SchemeKind::InitA, true),
            ));
        }
        if self.schemes.contains(&SchemeKind::InitAB) && self.schemes.contains(&SchemeKind::InitABPlus) {
            out.push_str(&matrix(
                "Init[AB+] vs Init[AB]: relative mean test loss gap",
                &|lr, size| self.plus_gap(lr, size),
            ));
        }
        if self.incomplete() {
            out.push_str("\nincomplete lattice: some cells are missing or failed (NA cells excluded from means)\n");
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::synthetic_split;

    fn tiny() -> (ToyModel, FinetuneData, ExperimentConfig) {
        let cfg = ExperimentConfig {
            d: 12,
            n: 16,
            r: 2,
            batch: 8,
            finetune_steps: 5,
            lrs: vec![1e-3, 1e-2],
            init_sizes: vec![1.0, 4.0],
            seeds: 2,
            synthetic: true,
            ..ExperimentConfig::desk()
        };
        let model = ToyModel::kaiming(12, 16, 10, &mut Rng::seed(3)).unwrap();
        let train = synthetic_split(1, 2, 40, 12, 10).unwrap();
        let test = synthetic_split(1, 3, 30, 12, 10).unwrap();
        let data = FinetuneData::prepare(&model, &train, &test).unwrap();
        (model, data, cfg)
    }

    #[test]
    fn lattice_size_and_order() {
        let (model, data, cfg) = tiny();
        let grid = run_grid(&model, &data, &cfg, true).unwrap();
        assert_eq!(grid.rows.len(), 4 * 2 * 2 * 2);
        assert!(grid.rows.iter().all(CellResult::ok));
        let serial = run_grid(&model, &data, &cfg, false).unwrap();
        assert_eq!(grid.to_csv(), serial.to_csv());
    }

    #[test]
    fn step0_exactness() {
        let (model, data, cfg) = tiny();
        let grid = run_grid(&model, &data, &cfg, false).unwrap();
        for r in &grid.rows {
            let d = (r.step0_test_loss - grid.reference_loss).abs();
            match r.spec.scheme {
                SchemeKind::InitABPlus => assert!(d > 0.0),
                _ => assert!(d <= 1e-10, "{:?}: {d}", r.spec),
            }
        }
    }

    #[test]
    fn csv_round_trip_and_summary() {
        let (model, data, cfg) = tiny();
        let mut grid = run_grid(&model, &data, &cfg, false).unwrap();
        grid.rows[0].failure = Some("diverged, badly".into());
        let back = GridResult::from_csv(&grid.to_csv()).unwrap();
        assert_eq!(back.to_csv(), grid.to_csv());
        let summary = GridSummary::new(&back);
        assert!(summary.incomplete());
        let text = summary.to_text();
        assert!(text.contains("init_ab_plus") && text.contains("incomplete"));
        let first = &grid.rows[0].spec;
        let s = summary.stats[&stat_key(first)];
        assert_eq!((s.ok, s.failed), (1, 1));
        assert!(summary.to_csv().lines().all(|l| l.split(',').count() == 10));
    }

    #[test]
    fn sigma_axis_sets_deviation() {
        let s = scheme_for(SchemeKind::InitAB, InitAxis::Sigma, 0.01, 400, 4);
        assert!((s.stds(400, 4).0 - 0.01).abs() < 1e-15);
        let b = scheme_for(SchemeKind::InitB, InitAxis::Sigma, 0.01, 400, 4);
        assert!((b.stds(400, 4).1 - 0.01).abs() < 1e-15);
    }
}
