//! Width-scaling probe: trains one LoRA layer on a single data point across a
//! geometric grid of widths and fits log-log slopes of the feature magnitudes.
//!
//! Initial factor sizes are given as exponents. `A` is contracted against the
//! width-`n` input, so its contribution to `Z_A` is what the exponent measures:
//! per-entry standard deviation `n^(γ[A₀] + 1/2)` (a Kaiming `A` has
//! `γ[A₀] = -1`). `B` is contracted over the fixed rank, so its entries have
//! standard deviation `n^γ[B₀] / √r`.

use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gamma::{contract_width, gadd, sgd_regime, GammaExp, RegimeReport};
use crate::lora::{backward_lora, delta_decompose, LoraLayer, SchemeKind};
use crate::optim::{adam_step, realize_lr, sgd_step, AdamState, LrSpec};
use crate::tensor::{gaussian, matmul, rms, Matrix, Rng};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Optimizer {
    Adam,
    Sgd,
}

impl fmt::Display for Optimizer {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Optimizer::Adam => "adam",
            Optimizer::Sgd => "sgd",
        })
    }
}

impl FromStr for Optimizer {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "adam" => Ok(Optimizer::Adam),
            "sgd" => Ok(Optimizer::Sgd),
            _ => Err(Error::Parse(format!("unknown optimizer {s:?} (expected adam or sgd)"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProbeConfig {
    pub widths: Vec<usize>,
    pub r: usize,
    /// Decides which factor starts at zero and whether `s·B₀A₀` is subtracted.
    pub scheme: SchemeKind,
    /// `(γ[A₀], γ[B₀])`. The zero factor of the scheme is forced to `-inf`.
    pub a0: GammaExp,
    pub b0: GammaExp,
    /// Width-independent multiplier on both initial standard deviations.
    pub init_scale: f64,
    pub lr: LrSpec,
    pub optimizer: Optimizer,
    pub steps: usize,
    pub seeds: usize,
    pub master_seed: u64,
    /// Width-independent output dimension `n1`, as in the SGD analysis where
    /// the output is a scalar. `None` gives a square `n×n` layer.
    pub out_dim: Option<usize>,
    pub s: f64,
    /// Draw `Z` and `y` once per seed at the largest width and truncate them
    /// for smaller widths, instead of resampling at every width.
    pub shared_inputs: bool,
}

impl ProbeConfig {
    /// Defaults for `scheme` at uniform rate exponent `gamma_eta`: widths
    /// 256..4096, rank 8, Adam, 10 steps, 5 seeds.
    pub fn new(scheme: SchemeKind, gamma_eta: GammaExp) -> Self {
        let (a0, b0) = default_exponents(scheme);
        Self {
            widths: vec![256, 512, 1024, 2048, 4096],
            r: 8,
            scheme,
            a0,
            b0,
            init_scale: 1.0,
            lr: LrSpec::uniform(1.0, gamma_eta),
            optimizer: Optimizer::Adam,
            steps: 10,
            seeds: 5,
            master_seed: 0,
            out_dim: None,
            s: 1.0,
            shared_inputs: true,
        }
    }

    /// SGD with a fixed output dimension at `(γ[a₀], γ[b₀])`.
    pub fn sgd_fixed_output(a0: GammaExp, b0: GammaExp, gamma_eta: GammaExp, c: f64, out_dim: usize) -> Self {
        Self {
            scheme: SchemeKind::InitABPlus,
            a0,
            b0,
            lr: LrSpec::uniform(c, gamma_eta),
            optimizer: Optimizer::Sgd,
            out_dim: Some(out_dim),
            ..Self::new(SchemeKind::InitABPlus, gamma_eta)
        }
    }

    /// Initial exponents after forcing the scheme's zero factor.
    pub fn init_exponents(&self) -> (GammaExp, GammaExp) {
        match self.scheme {
            SchemeKind::InitA => (self.a0, GammaExp::NEG_INF),
            SchemeKind::InitB => (GammaExp::NEG_INF, self.b0),
            SchemeKind::InitAB | SchemeKind::InitABPlus => (self.a0, self.b0),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let mut widths = self.widths.clone();
        widths.sort_unstable();
        widths.dedup();
        if widths.len() < 3 {
            return Err(Error::invalid("probe needs at least 3 distinct widths"));
        }
        if widths[0] == 0 || widths[widths.len() - 1] < 4 * widths[0] {
            return Err(Error::invalid("probe widths must span at least two octaves"));
        }
        if self.steps < 2 {
            return Err(Error::invalid("probe needs T >= 2 steps; t = 1 is excluded from the definitions"));
        }
        if self.seeds == 0 || self.r == 0 {
            return Err(Error::invalid("probe needs at least one seed and rank >= 1"));
        }
        if self.r > widths[0] {
            return Err(Error::invalid(format!("rank {} exceeds the smallest width {}", self.r, widths[0])));
        }
        if !(self.init_scale > 0.0) || !self.init_scale.is_finite() || !self.s.is_finite() {
            return Err(Error::invalid("init scale must be positive and s finite"));
        }
        let (a0, b0) = self.init_exponents();
        if a0.is_neg_inf() && b0.is_neg_inf() {
            return Err(Error::Precondition("A0 and B0 cannot both be zero".into()));
        }
        realize_lr(&self.lr, widths[0]).map(|_| ())
    }

    fn cells(&self) -> Vec<(usize, usize, u64)> {
        let mut out = Vec::new();
        for (wi, &n) in self.widths.iter().enumerate() {
            for seed in 0..self.seeds {
                out.push((n, seed, (wi * self.seeds + seed) as u64));
            }
        }
        out
    }
}

/// Default `(γ[A₀], γ[B₀])` of each scheme.
pub fn default_exponents(scheme: SchemeKind) -> (GammaExp, GammaExp) {
    let half = GammaExp::ratio(-1, 2);
    match scheme {
        SchemeKind::InitA => (GammaExp::int(-1), GammaExp::NEG_INF),
        SchemeKind::InitB => (GammaExp::NEG_INF, GammaExp::ZERO),
        SchemeKind::InitAB | SchemeKind::InitABPlus => (half, half),
    }
}

fn init_std(exp: GammaExp, offset: f64, n: usize, scale: f64) -> f64 {
    match exp {
        GammaExp::NegInf => 0.0,
        e => scale * (n as f64).powf(e.to_f64() + offset),
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ProbeRecord {
    pub n: usize,
    pub seed: usize,
    /// Step index; `t = 0` is the initial state and carries zero deltas.
    pub t: usize,
    pub rms_za: f64,
    pub rms_zb: f64,
    pub rms_d1: f64,
    pub rms_d2: f64,
    pub rms_d3: f64,
    /// `rms(δ¹+δ²+δ³ − ΔZ_B) / rms(ΔZ_B)`, zero when `ΔZ_B = 0`.
    pub decomposition_error: f64,
    /// Largest `|A_t − A₀|` and `|B_t − B₀|` entries.
    pub drift_a: f64,
    pub drift_b: f64,
    pub eta_a: f64,
    pub eta_b: f64,
}

impl ProbeRecord {
    pub const CSV_HEADER: &'static str = "n,seed,t,rms_za,rms_zb,rms_d1,rms_d2,rms_d3";

    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{}",
            self.n, self.seed, self.t, self.rms_za, self.rms_zb, self.rms_d1, self.rms_d2, self.rms_d3
        )
    }

    pub fn get(&self, q: Quantity) -> f64 {
        match q {
            Quantity::Za => self.rms_za,
            Quantity::Zb => self.rms_zb,
            Quantity::D1 => self.rms_d1,
            Quantity::D2 => self.rms_d2,
            Quantity::D3 => self.rms_d3,
        }
    }
}

/// A `(width, seed)` cell that produced non-finite values.
#[derive(Clone, Debug, PartialEq)]
pub struct Divergence {
    pub n: usize,
    pub seed: usize,
    pub t: usize,
    pub reason: String,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ProbeRun {
    /// Sorted by `(n, seed, t)`.
    pub records: Vec<ProbeRecord>,
    pub divergences: Vec<Divergence>,
}

impl ProbeRun {
    pub fn to_csv(&self) -> String {
        let mut out = String::from(ProbeRecord::CSV_HEADER);
        out.push('\n');
        for r in &self.records {
            out.push_str(&r.csv_row());
            out.push('\n');
        }
        out
    }
}

fn rms_or_zero(m: &Matrix) -> Result<f64> {
    if m.is_empty() {
        Ok(0.0)
    } else {
        rms(m)
    }
}

fn drift(now: &Matrix, start: &Matrix) -> Result<f64> {
    Ok(now.sub(start)?.max_abs())
}

fn zb_of(layer: &LoraLayer, z: &Matrix) -> Result<(Matrix, Matrix)> {
    let za = matmul(&layer.a, z)?;
    let zb = matmul(&layer.b, &za)?.scale(layer.s);
    Ok((za, zb))
}

/// Stream indices at and above this value carry the per-seed shared inputs.
const INPUT_STREAM_BASE: u64 = 1 << 32;

fn run_cell(cfg: &ProbeConfig, n: usize, seed: usize, stream: u64) -> (Vec<ProbeRecord>, Option<Divergence>) {
    let mut records = Vec::with_capacity(cfg.steps + 1);
    let result = probe_cell(cfg, n, seed, stream, &mut records);
    let divergence = result.err().map(|e| Divergence {
        n,
        seed,
        t: records.len(),
        reason: e.to_string(),
    });
    (records, divergence)
}

fn probe_cell(cfg: &ProbeConfig, n: usize, seed: usize, stream: u64, records: &mut Vec<ProbeRecord>) -> Result<()> {
    let mut rng = Rng::child(cfg.master_seed, stream);
    let n1 = cfg.out_dim.unwrap_or(n);
    let (a0, b0) = cfg.init_exponents();
    let (eta_a, eta_b) = realize_lr(&cfg.lr, n)?;

    let (z, y) = if cfg.shared_inputs {
        let max_n = cfg.widths.iter().copied().max().unwrap_or(n);
        let max_n1 = cfg.out_dim.unwrap_or(max_n);
        let mut input_rng = Rng::child(cfg.master_seed, INPUT_STREAM_BASE + seed as u64);
        let z = gaussian(max_n, 1, 1.0, &mut input_rng)?;
        let y = gaussian(max_n1, 1, 1.0, &mut input_rng)?;
        let head = |m: &Matrix, k: usize| Matrix::column(&m.as_slice()[..k]);
        (head(&z, n), head(&y, n1))
    } else {
        (gaussian(n, 1, 1.0, &mut rng)?, gaussian(n1, 1, 1.0, &mut rng)?)
    };
    let w = gaussian(n1, n, 1.0 / (n as f64).sqrt(), &mut rng)?;
    let a = gaussian(cfg.r, n, init_std(a0, 0.5, n, cfg.init_scale), &mut rng)?;
    let b = gaussian(n1, cfg.r, init_std(b0, 0.0, n, cfg.init_scale) / (cfg.r as f64).sqrt(), &mut rng)?;
    let wz = matmul(&w, &z)?;
    let (a_init, b_init) = (a.clone(), b.clone());
    let mut layer = LoraLayer::from_parts(Arc::new(w), a, b, cfg.s, cfg.scheme == SchemeKind::InitAB)?;
    let mut adam_a = AdamState::for_param(&layer.a);
    let mut adam_b = AdamState::for_param(&layer.b);

    let (za, zb) = zb_of(&layer, &z)?;
    let record = |t: usize, za: &Matrix, zb: &Matrix, d: [f64; 3], err: f64, layer: &LoraLayer| -> Result<ProbeRecord> {
        Ok(ProbeRecord {
            n,
            seed,
            t,
            rms_za: rms_or_zero(za)?,
            rms_zb: rms_or_zero(zb)?,
            rms_d1: d[0],
            rms_d2: d[1],
            rms_d3: d[2],
            decomposition_error: err,
            drift_a: drift(&layer.a, &a_init)?,
            drift_b: drift(&layer.b, &b_init)?,
            eta_a,
            eta_b,
        })
    };
    records.push(record(0, &za, &zb, [0.0; 3], 0.0, &layer)?);
    let mut zb_prev = zb;

    for t in 1..=cfg.steps {
        let fwd = layer.forward_with_base(&z, &wz)?;
        let dzbar = fwd.zbar.sub(&y)?;
        let (ga, gb) = backward_lora(&layer, &z, &fwd.za, &dzbar)?;
        let (a_prev, b_prev) = (layer.a.clone(), layer.b.clone());
        match cfg.optimizer {
            Optimizer::Adam => {
                adam_step(&mut layer.a, &ga, &mut adam_a, eta_a)?;
                adam_step(&mut layer.b, &gb, &mut adam_b, eta_b)?;
            }
            Optimizer::Sgd => {
                sgd_step(&mut layer.a, &ga, eta_a)?;
                sgd_step(&mut layer.b, &gb, eta_b)?;
            }
        }
        let d = delta_decompose(&a_prev, &b_prev, &layer.a, &layer.b, &z, layer.s)?;
        let (za, zb) = zb_of(&layer, &z)?;
        let dzb = zb.sub(&zb_prev)?;
        let sum = d.d1.add(&d.d2)?.add(&d.d3)?;
        let scale = rms_or_zero(&dzb)?;
        let resid = rms_or_zero(&sum.sub(&dzb)?)?;
        let err = if scale > 0.0 { resid / scale } else { resid };
        let rec = record(
            t,
            &za,
            &zb,
            [rms_or_zero(&d.d1)?, rms_or_zero(&d.d2)?, rms_or_zero(&d.d3)?],
            err,
            &layer,
        )?;
        let values = [rec.rms_za, rec.rms_zb, rec.rms_d1, rec.rms_d2, rec.rms_d3];
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite { op: "probe step" });
        }
        records.push(rec);
        zb_prev = zb;
    }
    Ok(())
}

/// Runs every `(width, seed)` cell, in parallel, with output identical to a
/// serial run.
pub fn run_probe(cfg: &ProbeConfig) -> Result<ProbeRun> {
    cfg.validate()?;
    let results: Vec<_> = cfg
        .cells()
        .into_par_iter()
        .map(|(n, seed, stream)| run_cell(cfg, n, seed, stream))
        .collect();
    let mut records = Vec::new();
    let mut divergences = Vec::new();
    for (recs, div) in results {
        records.extend(recs);
        divergences.extend(div);
    }
    records.sort_by_key(|r| (r.n, r.seed, r.t));
    divergences.sort_by_key(|d| (d.n, d.seed));
    Ok(ProbeRun { records, divergences })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Quantity {
    Za,
    Zb,
    D1,
    D2,
    D3,
}

impl Quantity {
    pub const ALL: [Quantity; 5] = [Quantity::Za, Quantity::Zb, Quantity::D1, Quantity::D2, Quantity::D3];

    pub fn name(self) -> &'static str {
        match self {
            Quantity::Za => "za",
            Quantity::Zb => "zb",
            Quantity::D1 => "d1",
            Quantity::D2 => "d2",
            Quantity::D3 => "d3",
        }
    }
}

impl fmt::Display for Quantity {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SlopeFit {
    pub slope: f64,
    pub intercept: f64,
    /// `None` when the data are flat (no variance to explain).
    pub r_squared: Option<f64>,
    pub n_points: usize,
    /// Widths dropped because some seed had a non-positive rms.
    pub excluded: Vec<usize>,
}

impl SlopeFit {
    pub fn is_flat(&self) -> bool {
        self.r_squared.is_none()
    }
}

/// Least-squares fit of `y = slope·x + intercept`.
pub fn ols(points: &[(f64, f64)]) -> Result<SlopeFit> {
    if points.len() < 2 {
        return Err(Error::invalid("need at least two points to fit a slope"));
    }
    let k = points.len() as f64;
    let mx = points.iter().map(|p| p.0).sum::<f64>() / k;
    let my = points.iter().map(|p| p.1).sum::<f64>() / k;
    let sxx: f64 = points.iter().map(|p| (p.0 - mx).powi(2)).sum();
    let sxy: f64 = points.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    let syy: f64 = points.iter().map(|p| (p.1 - my).powi(2)).sum();
    if sxx == 0.0 {
        return Err(Error::invalid("all x values coincide"));
    }
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let sse: f64 = points.iter().map(|p| (p.1 - slope * p.0 - intercept).powi(2)).sum();
    // Relative threshold so exactly-constant data read as flat despite rounding.
    let flat = syy <= 1e-24 * (1.0 + my * my) * k;
    Ok(SlopeFit {
        slope: if flat { 0.0 } else { slope },
        intercept: if flat { my } else { intercept },
        r_squared: (!flat).then(|| 1.0 - sse / syy),
        n_points: points.len(),
        excluded: Vec::new(),
    })
}

/// Slope of `ln rms` against `ln n` at step `t`, averaging `ln rms` over seeds
/// per width first.
pub fn fit_slope(records: &[ProbeRecord], quantity: Quantity, t: usize) -> Result<SlopeFit> {
    let mut widths: Vec<usize> = records.iter().filter(|r| r.t == t).map(|r| r.n).collect();
    widths.sort_unstable();
    widths.dedup();
    let mut points = Vec::new();
    let mut excluded = Vec::new();
    for &n in &widths {
        let vals: Vec<f64> = records
            .iter()
            .filter(|r| r.t == t && r.n == n)
            .map(|r| r.get(quantity))
            .collect();
        if vals.iter().any(|&v| !(v > 0.0) || !v.is_finite()) {
            excluded.push(n);
            continue;
        }
        let mean_log = vals.iter().map(|v| v.ln()).sum::<f64>() / vals.len() as f64;
        points.push(((n as f64).ln(), mean_log));
    }
    if points.len() < 3 {
        return Err(Error::Precondition(format!(
            "{quantity} at t={t}: need >= 3 widths with positive rms, have {} (excluded: {excluded:?})",
            points.len()
        )));
    }
    let mut fit = ols(&points)?;
    fit.excluded = excluded;
    Ok(fit)
}

/// Expected exponent of one quantity at one step.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Prediction {
    pub quantity: Quantity,
    pub t: usize,
    pub exponent: GammaExp,
}

/// Steady-state Adam predictions from a regime report, at each of `steps`.
pub fn regime_predictions(regime: &RegimeReport, quantities: &[Quantity], steps: &[usize]) -> Vec<Prediction> {
    let exp = |q: Quantity| match q {
        Quantity::Za => regime.gamma_za,
        Quantity::Zb => regime.gamma_zb,
        Quantity::D1 => regime.gamma_d1,
        Quantity::D2 => regime.gamma_d2,
        Quantity::D3 => regime.gamma_d3,
    };
    steps
        .iter()
        .flat_map(|&t| quantities.iter().map(move |&q| Prediction { quantity: q, t, exponent: exp(q) }))
        .collect()
}

/// Step-resolved Adam exponents: a factor only moves once its partner is
/// nonzero (its gradient is proportional to the partner), after which it
/// moves by `Θ(η)` per entry, coherently with the input.
pub fn adam_step_predictions(
    a0: GammaExp,
    b0: GammaExp,
    eta_a: GammaExp,
    eta_b: GammaExp,
    steps: usize,
) -> Vec<Prediction> {
    let mut out = Vec::new();
    let (mut a, mut b) = (a0, b0);
    let push = |out: &mut Vec<Prediction>, t: usize, vals: [GammaExp; 5]| {
        for (q, e) in Quantity::ALL.iter().zip(vals) {
            out.push(Prediction { quantity: *q, t, exponent: e });
        }
    };
    let zero_input = GammaExp::ZERO;
    push(
        &mut out,
        0,
        [contract_width(a, zero_input), contract_width(a, b), GammaExp::NEG_INF, GammaExp::NEG_INF, GammaExp::NEG_INF],
    );
    for t in 1..=steps {
        let da = if b.is_neg_inf() { GammaExp::NEG_INF } else { eta_a };
        let db = if a.is_neg_inf() { GammaExp::NEG_INF } else { eta_b };
        let d1 = contract_width(b, da);
        let d2 = contract_width(a, db);
        let d3 = contract_width(da, db);
        a = gadd(a, da);
        b = gadd(b, db);
        push(&mut out, t, [contract_width(a, zero_input), contract_width(a, b), d1, d2, d3]);
    }
    out
}

/// Predictions of the rank-1 SGD recurrence. `Z_A` and `δ³` are not tracked by
/// the recurrence and are omitted.
pub fn sgd_predictions(a0: GammaExp, b0: GammaExp, eta: GammaExp, steps: usize) -> Result<Vec<Prediction>> {
    let reports = sgd_regime(a0, b0, eta, eta, steps + 1)?;
    let mut out = Vec::new();
    for rep in &reports[1..] {
        // Report t describes the state before step t, i.e. after step t-1.
        let t = rep.t - 1;
        out.push(Prediction { quantity: Quantity::Zb, t, exponent: rep.gamma_f });
    }
    for rep in &reports[..steps] {
        if rep.t >= 1 {
            out.push(Prediction { quantity: Quantity::D1, t: rep.t, exponent: rep.gamma_d1 });
            out.push(Prediction { quantity: Quantity::D2, t: rep.t, exponent: rep.gamma_d2 });
        }
    }
    out.sort_by_key(|p| (p.t, p.quantity));
    Ok(out)
}

/// Predictions checked by a probe run: `δ¹`, `δ²` and `Z_B` at `t = 2` and
/// `t = T` from the steady-state regime (Adam) or the recurrence (SGD, `Z_B`
/// only), plus exact zeros wherever the step-resolved Adam exponents are `-inf`.
pub fn default_predictions(cfg: &ProbeConfig) -> Result<Vec<Prediction>> {
    let (a0, b0) = cfg.init_exponents();
    let (eta_a, eta_b) = cfg.lr.exponents();
    let steps = [2, cfg.steps];
    let steps = if cfg.steps == 2 { &steps[..1] } else { &steps[..] };
    match cfg.optimizer {
        Optimizer::Adam => {
            let regime = crate::gamma::adam_regime(a0, b0, eta_a, eta_b, false)?;
            let mut out: Vec<Prediction> = adam_step_predictions(a0, b0, eta_a, eta_b, 1)
                .into_iter()
                .filter(|p| p.t == 1 && p.exponent.is_neg_inf())
                .collect();
            out.extend(regime_predictions(&regime, &[Quantity::D1, Quantity::D2, Quantity::Zb], steps));
            Ok(out)
        }
        Optimizer::Sgd => {
            if eta_a != eta_b {
                return Err(Error::invalid("SGD predictions need a uniform learning-rate exponent"));
            }
            Ok(sgd_predictions(a0, b0, eta_a, cfg.steps)?
                .into_iter()
                .filter(|p| p.quantity == Quantity::Zb && steps.contains(&p.t))
                .collect())
        }
    }
}

pub const DEFAULT_TOLERANCE: f64 = 0.25;
/// Largest rms accepted as "exactly zero" for a `-inf` prediction.
pub const ZERO_RMS: f64 = 1e-10;

#[derive(Clone, Debug, PartialEq)]
pub struct VerdictRow {
    pub quantity: Quantity,
    pub t: usize,
    pub predicted: GammaExp,
    pub fitted: Option<f64>,
    pub r_squared: Option<f64>,
    /// Largest measured rms, used for `-inf` predictions.
    pub max_rms: f64,
    pub pass: bool,
    pub note: String,
}

impl VerdictRow {
    pub fn label(&self) -> String {
        format!("{}@t{}", self.quantity, self.t)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Verdict {
    pub rows: Vec<VerdictRow>,
    pub tolerance: f64,
    /// Some prediction had no usable fit.
    pub incomplete: bool,
}

impl Verdict {
    pub fn all_pass(&self) -> bool {
        !self.incomplete && self.rows.iter().all(|r| r.pass)
    }

    pub fn row(&self, q: Quantity, t: usize) -> Option<&VerdictRow> {
        self.rows.iter().find(|r| r.quantity == q && r.t == t)
    }

    pub const CSV_HEADER: &'static str = "quantity,predicted,fitted,r2,pass";

    pub fn to_csv(&self) -> String {
        let mut out = String::from(Self::CSV_HEADER);
        out.push('\n');
        for r in &self.rows {
            let opt = |v: Option<f64>| v.map_or_else(|| "NA".to_string(), |x| x.to_string());
            out.push_str(&format!("{},{},{},{},{}\n", r.label(), r.predicted, opt(r.fitted), opt(r.r_squared), r.pass));
        }
        out
    }

    pub fn to_text(&self) -> String {
        let mut out = format!("{:<10} {:>9} {:>9} {:>7}  verdict\n", "quantity", "predicted", "fitted", "r2");
        for r in &self.rows {
            let fitted = r.fitted.map_or_else(|| "-".to_string(), |v| format!("{v:.3}"));
            let r2 = r.r_squared.map_or_else(|| "-".to_string(), |v| format!("{v:.3}"));
            out.push_str(&format!(
                "{:<10} {:>9} {:>9} {:>7}  {}{}\n",
                r.label(),
                r.predicted.to_string(),
                fitted,
                r2,
                if r.pass { "PASS" } else { "FAIL" },
                if r.note.is_empty() { String::new() } else { format!(" ({})", r.note) }
            ));
        }
        if self.incomplete {
            out.push_str("incomplete: some predicted quantities could not be fitted\n");
        }
        out
    }
}

/// Compares fitted slopes with predicted exponents: a finite prediction
/// passes within `tolerance`; a `-inf` prediction needs every rms at that
/// step to be at most [`ZERO_RMS`].
pub fn compare_to_theory(records: &[ProbeRecord], predictions: &[Prediction], tolerance: f64) -> Verdict {
    let mut incomplete = false;
    let rows = predictions
        .iter()
        .map(|p| {
            let at: Vec<&ProbeRecord> = records.iter().filter(|r| r.t == p.t).collect();
            let max_rms = at.iter().map(|r| r.get(p.quantity)).fold(0.0, f64::max);
            if p.exponent.is_neg_inf() {
                let pass = !at.is_empty() && max_rms <= ZERO_RMS;
                incomplete |= at.is_empty();
                return VerdictRow {
                    quantity: p.quantity,
                    t: p.t,
                    predicted: p.exponent,
                    fitted: None,
                    r_squared: None,
                    max_rms,
                    pass,
                    note: format!("max rms {max_rms:e}"),
                };
            }
            match fit_slope(records, p.quantity, p.t) {
                Ok(fit) => {
                    let pass = (fit.slope - p.exponent.to_f64()).abs() <= tolerance;
                    let note = if fit.excluded.is_empty() {
                        String::new()
                    } else {
                        format!("excluded widths {:?}", fit.excluded)
                    };
                    VerdictRow {
                        quantity: p.quantity,
                        t: p.t,
                        predicted: p.exponent,
                        fitted: Some(fit.slope),
                        r_squared: fit.r_squared,
                        max_rms,
                        pass,
                        note,
                    }
                }
                Err(e) => {
                    incomplete = true;
                    VerdictRow {
                        quantity: p.quantity,
                        t: p.t,
                        predicted: p.exponent,
                        fitted: None,
                        r_squared: None,
                        max_rms,
                        pass: false,
                        note: e.to_string(),
                    }
                }
            }
        })
        .collect();
    Verdict {
        rows,
        tolerance,
        incomplete,
    }
}
