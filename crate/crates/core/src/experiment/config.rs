use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lora::SchemeKind;

/// Environment variable naming the default output root.
pub const OUTPUT_ROOT_ENV: &str = "LORASCALE_OUT";

/// Fine-tuning learning rates of the full protocol.
pub const PAPER_LRS: [f64; 10] = [3e-4, 4e-4, 5e-4, 6e-4, 7e-4, 8e-4, 9e-4, 1e-3, 2e-3, 3e-3];
/// Initial standard deviations of the full protocol.
pub const PAPER_SIGMAS: [f64; 12] = [2e-5, 5e-5, 8e-5, 1e-4, 4e-4, 7e-4, 1e-3, 3e-3, 6e-3, 9e-3, 2e-2, 5e-2];
pub const DESK_LRS: [f64; 3] = [1e-4, 1e-3, 1e-2];
pub const DESK_BETAS: [f64; 6] = [0.5, 1.0, 2.0, 4.0, 8.0, 16.0];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Phase {
    Pretrain,
    Finetune,
    Grid,
    Probe,
    Gamma,
    Report,
}

impl fmt::Display for Phase {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Phase::Pretrain => "pretrain",
            Phase::Finetune => "finetune",
            Phase::Grid => "grid",
            Phase::Probe => "probe",
            Phase::Gamma => "gamma",
            Phase::Report => "report",
        })
    }
}

impl FromStr for Phase {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "pretrain" => Phase::Pretrain,
            "finetune" => Phase::Finetune,
            "grid" => Phase::Grid,
            "probe" => Phase::Probe,
            "gamma" => Phase::Gamma,
            "report" => Phase::Report,
            _ => return Err(Error::Parse(format!("unknown phase {s:?}"))),
        })
    }
}

/// How the LoRA initial size is specified.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum InitAxis {
    /// Multiplier on the Kaiming standard deviation `1/√n`.
    Beta,
    /// Absolute standard deviation.
    Sigma,
}

impl fmt::Display for InitAxis {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            InitAxis::Beta => "beta",
            InitAxis::Sigma => "sigma",
        })
    }
}

impl FromStr for InitAxis {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "beta" => Ok(InitAxis::Beta),
            "sigma" => Ok(InitAxis::Sigma),
            _ => Err(Error::Parse(format!("unknown init axis {s:?} (expected beta or sigma)"))),
        }
    }
}

/// Flat experiment configuration; every field has a `key=value` spelling.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub d: usize,
    pub n: usize,
    pub classes: usize,
    pub r: usize,
    pub s: f64,
    pub batch: usize,
    pub pretrain_steps: usize,
    pub pretrain_lr: f64,
    pub log_every: usize,
    pub finetune_steps: usize,
    pub schemes: Vec<SchemeKind>,
    pub lrs: Vec<f64>,
    pub init_axis: InitAxis,
    pub init_sizes: Vec<f64>,
    pub seeds: usize,
    pub master_seed: u64,
    /// Seed of the synthetic data generator, independent of `master_seed`.
    pub data_seed: u64,
    pub synthetic: bool,
    pub train_samples: usize,
    pub test_samples: usize,
    /// Directory holding the pretraining IDX files (canonical names).
    pub pretrain_data: Option<PathBuf>,
    /// Directory holding the fine-tuning IDX files (canonical names).
    pub finetune_data: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
    pub out_dir: Option<PathBuf>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self::desk()
    }
}

impl ExperimentConfig {
    /// Desk-scale defaults: `n = 1024`, 5 seeds, three learning rates.
    pub fn desk() -> Self {
        Self {
            d: 784,
            n: 1024,
            classes: 10,
            r: 32,
            s: 1.0,
            batch: 64,
            pretrain_steps: 2000,
            pretrain_lr: 1e-3,
            log_every: 100,
            finetune_steps: 100,
            schemes: SchemeKind::ALL.to_vec(),
            lrs: DESK_LRS.to_vec(),
            init_axis: InitAxis::Beta,
            init_sizes: DESK_BETAS.to_vec(),
            seeds: 5,
            master_seed: 0,
            data_seed: 0,
            synthetic: false,
            train_samples: 6400,
            test_samples: 2000,
            pretrain_data: None,
            finetune_data: None,
            checkpoint: None,
            out_dir: None,
        }
    }

    /// The full protocol: `n = 4096`, 10 seeds, the published grids.
    pub fn paper_scale() -> Self {
        Self {
            n: 4096,
            seeds: 10,
            lrs: PAPER_LRS.to_vec(),
            init_axis: InitAxis::Sigma,
            init_sizes: PAPER_SIGMAS.to_vec(),
            ..Self::desk()
        }
    }

    /// Applies one `key=value` assignment.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let bad = |e: String| Error::Parse(format!("{key}={value}: {e}"));
        fn num<T: FromStr>(v: &str) -> std::result::Result<T, String>
        where
            T::Err: fmt::Display,
        {
            v.trim().parse::<T>().map_err(|e| e.to_string())
        }
        fn list<T: FromStr>(v: &str) -> std::result::Result<Vec<T>, String>
        where
            T::Err: fmt::Display,
        {
            v.split(',').filter(|s| !s.trim().is_empty()).map(num::<T>).collect()
        }
        let path = |v: &str| (!v.trim().is_empty()).then(|| PathBuf::from(v.trim()));
        match key {
            "d" => self.d = num(value).map_err(bad)?,
            "n" => self.n = num(value).map_err(bad)?,
            "classes" => self.classes = num(value).map_err(bad)?,
            "r" => self.r = num(value).map_err(bad)?,
            "s" => self.s = num(value).map_err(bad)?,
            "batch" => self.batch = num(value).map_err(bad)?,
            "pretrain_steps" => self.pretrain_steps = num(value).map_err(bad)?,
            "pretrain_lr" => self.pretrain_lr = num(value).map_err(bad)?,
            "log_every" => self.log_every = num(value).map_err(bad)?,
            "finetune_steps" => self.finetune_steps = num(value).map_err(bad)?,
            "schemes" => self.schemes = list(value).map_err(bad)?,
            "lrs" => self.lrs = list(value).map_err(bad)?,
            "init_axis" => self.init_axis = num(value).map_err(bad)?,
            "betas" => {
                self.init_axis = InitAxis::Beta;
                self.init_sizes = list(value).map_err(bad)?;
            }
            "sigmas" => {
                self.init_axis = InitAxis::Sigma;
                self.init_sizes = list(value).map_err(bad)?;
            }
            "init_sizes" => self.init_sizes = list(value).map_err(bad)?,
            "seeds" => self.seeds = num(value).map_err(bad)?,
            "master_seed" => self.master_seed = num(value).map_err(bad)?,
            "data_seed" => self.data_seed = num(value).map_err(bad)?,
            "synthetic" => self.synthetic = num(value).map_err(bad)?,
            "train_samples" => self.train_samples = num(value).map_err(bad)?,
            "test_samples" => self.test_samples = num(value).map_err(bad)?,
            "pretrain_data" => self.pretrain_data = path(value),
            "finetune_data" => self.finetune_data = path(value),
            "checkpoint" => self.checkpoint = path(value),
            "out_dir" => self.out_dir = path(value),
            _ => return Err(Error::Parse(format!("unknown config key {key:?}"))),
        }
        Ok(())
    }

    /// Applies a `key=value` file: one assignment per line, `#` comments.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (i, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Parse(format!("line {}: expected key=value, got {line:?}", i + 1)))?;
            self.set(k.trim(), v.trim())?;
        }
        Ok(())
    }

    pub fn apply_file(&mut self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        self.apply_text(&text)
    }

    /// Renders the configuration in the file format accepted by [`apply_text`](Self::apply_text).
    pub fn to_text(&self) -> String {
        let join = |v: &[f64]| v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",");
        let opt = |p: &Option<PathBuf>| p.as_ref().map(|p| p.display().to_string()).unwrap_or_default();
        let mut kv = BTreeMap::new();
        kv.insert("d", self.d.to_string());
        kv.insert("n", self.n.to_string());
        kv.insert("classes", self.classes.to_string());
        kv.insert("r", self.r.to_string());
        kv.insert("s", self.s.to_string());
        kv.insert("batch", self.batch.to_string());
        kv.insert("pretrain_steps", self.pretrain_steps.to_string());
        kv.insert("pretrain_lr", self.pretrain_lr.to_string());
        kv.insert("log_every", self.log_every.to_string());
        kv.insert("finetune_steps", self.finetune_steps.to_string());
        kv.insert(
            "schemes",
            self.schemes.iter().map(|s| s.name()).collect::<Vec<_>>().join(","),
        );
        kv.insert("lrs", join(&self.lrs));
        kv.insert("init_axis", self.init_axis.to_string());
        kv.insert("init_sizes", join(&self.init_sizes));
        kv.insert("seeds", self.seeds.to_string());
        kv.insert("master_seed", self.master_seed.to_string());
        kv.insert("data_seed", self.data_seed.to_string());
        kv.insert("synthetic", self.synthetic.to_string());
        kv.insert("train_samples", self.train_samples.to_string());
        kv.insert("test_samples", self.test_samples.to_string());
        kv.insert("pretrain_data", opt(&self.pretrain_data));
        kv.insert("finetune_data", opt(&self.finetune_data));
        kv.insert("checkpoint", opt(&self.checkpoint));
        kv.insert("out_dir", opt(&self.out_dir));
        kv.into_iter().map(|(k, v)| format!("{k}={v}\n")).collect()
    }

    pub fn validate(&self) -> Result<()> {
        if self.d == 0 || self.n == 0 || self.classes == 0 || self.classes > 10 {
            return Err(Error::invalid("d and n must be positive and classes in 1..=10"));
        }
        if self.r == 0 || 4 * self.r > self.n {
            return Err(Error::invalid(format!("rank {} must satisfy 1 <= r <= n/4 = {}", self.r, self.n / 4)));
        }
        if self.batch == 0 || self.seeds == 0 {
            return Err(Error::invalid("batch and seeds must be positive"));
        }
        if self.schemes.is_empty() || self.lrs.is_empty() || self.init_sizes.is_empty() {
            return Err(Error::invalid("schemes, lrs and init sizes must be non-empty"));
        }
        if self.lrs.iter().chain(&self.init_sizes).any(|v| !(*v > 0.0) || !v.is_finite()) {
            return Err(Error::invalid("learning rates and init sizes must be positive"));
        }
        if !self.synthetic && (self.pretrain_data.is_none() && self.finetune_data.is_none()) {
            return Err(Error::invalid(
                "no dataset: pass data directories (MNIST for pretraining, FashionMNIST for fine-tuning) or enable synthetic data",
            ));
        }
        Ok(())
    }

    /// Output directory: explicit setting, else `$LORASCALE_OUT`, else `./runs`.
    pub fn resolve_out_dir(&self) -> PathBuf {
        self.out_dir
            .clone()
            .or_else(|| std::env::var_os(OUTPUT_ROOT_ENV).map(PathBuf::from))
            .unwrap_or_else(|| PathBuf::from("runs"))
    }
}
