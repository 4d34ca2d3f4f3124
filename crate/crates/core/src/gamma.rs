//! Exact exponent calculus for width-asymptotic quantities.
//!
//! A quantity `v = Θ(n^p)` is represented by its exponent `p`, an exact rational,
//! with the zero quantity mapped to a distinguished `-∞`. Products add exponents
//! and sums take the maximum, which makes the whole calculus a max-plus algebra.
//!
//! On top of the algebra sit closed-form regime solvers: given the exponents of
//! the LoRA initialisation `(A₀, B₀)` and learning rates `(η_A, η_B)`, they
//! predict the exponents of the feature update terms and classify the run as
//! stable, efficient, internally stable and learning-rate robust.

use std::cmp::Ordering;
use std::fmt;
use std::str::FromStr;

use num_rational::Rational64;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Exponent of a width-dependent quantity: an exact rational or `-∞`.
///
/// The derived ordering puts `NegInf` below every finite value, so `max` is the
/// tropical sum.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum GammaExp {
    NegInf,
    Finite(Rational64),
}

impl GammaExp {
    pub const NEG_INF: GammaExp = GammaExp::NegInf;
    pub const ZERO: GammaExp = GammaExp::Finite(Rational64::new_raw(0, 1));
    pub const ONE: GammaExp = GammaExp::Finite(Rational64::new_raw(1, 1));

    pub fn int(v: i64) -> Self {
        GammaExp::Finite(Rational64::from_integer(v))
    }

    /// `num/den`, reduced. Panics on a zero denominator.
    pub fn ratio(num: i64, den: i64) -> Self {
        GammaExp::Finite(Rational64::new(num, den))
    }

    pub fn is_neg_inf(self) -> bool {
        matches!(self, GammaExp::NegInf)
    }

    pub fn is_finite(self) -> bool {
        !self.is_neg_inf()
    }

    pub fn is_zero(self) -> bool {
        self == GammaExp::ZERO
    }

    pub fn rational(self) -> Option<Rational64> {
        match self {
            GammaExp::Finite(r) => Some(r),
            GammaExp::NegInf => None,
        }
    }

    /// Floating-point view, `-∞` included. Only for reporting and comparison
    /// with measured slopes; never feed it back into the algebra.
    pub fn to_f64(self) -> f64 {
        match self {
            GammaExp::NegInf => f64::NEG_INFINITY,
            GammaExp::Finite(r) => *r.numer() as f64 / *r.denom() as f64,
        }
    }

    pub fn max(self, other: GammaExp) -> GammaExp {
        gadd(self, other)
    }
}

impl Default for GammaExp {
    fn default() -> Self {
        GammaExp::ZERO
    }
}

impl From<i64> for GammaExp {
    fn from(v: i64) -> Self {
        GammaExp::int(v)
    }
}

impl From<Rational64> for GammaExp {
    fn from(r: Rational64) -> Self {
        GammaExp::Finite(r)
    }
}

impl std::ops::Add for GammaExp {
    type Output = GammaExp;
    fn add(self, rhs: GammaExp) -> GammaExp {
        gmul(self, rhs)
    }
}

impl fmt::Display for GammaExp {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            GammaExp::NegInf => f.write_str("-inf"),
            GammaExp::Finite(r) if *r.denom() == 1 => write!(f, "{}", r.numer()),
            GammaExp::Finite(r) => write!(f, "{}/{}", r.numer(), r.denom()),
        }
    }
}

impl FromStr for GammaExp {
    type Err = Error;

    /// Accepts `-inf`, integers, `p/q` fractions and terminating decimals
    /// (`-0.25`), all converted exactly.
    fn from_str(s: &str) -> Result<Self> {
        let t = s.trim();
        let bad = || Error::Parse(format!("invalid exponent {s:?}: expected \"p/q\", a decimal or \"-inf\""));
        match t.to_ascii_lowercase().as_str() {
            "-inf" | "neg_inf" | "-infinity" => return Ok(GammaExp::NegInf),
            _ => {}
        }
        if let Some((p, q)) = t.split_once('/') {
            let p: i64 = p.trim().parse().map_err(|_| bad())?;
            let q: i64 = q.trim().parse().map_err(|_| bad())?;
            if q == 0 {
                return Err(bad());
            }
            return Ok(GammaExp::ratio(p, q));
        }
        if let Some((whole, frac)) = t.split_once('.') {
            if frac.is_empty() || frac.len() > 12 || !frac.bytes().all(|b| b.is_ascii_digit()) {
                return Err(bad());
            }
            let negative = whole.starts_with('-');
            let whole_abs: i64 = match whole.trim_start_matches(['-', '+']) {
                "" => 0,
                w => w.parse().map_err(|_| bad())?,
            };
            let den = 10i64.pow(frac.len() as u32);
            let num = whole_abs * den + frac.parse::<i64>().map_err(|_| bad())?;
            return Ok(GammaExp::ratio(if negative { -num } else { num }, den));
        }
        t.parse::<i64>().map(GammaExp::int).map_err(|_| bad())
    }
}

impl Serialize for GammaExp {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for GammaExp {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// `γ[u·v] = γ[u] + γ[v]`; `-∞` absorbs.
pub fn gmul(u: GammaExp, v: GammaExp) -> GammaExp {
    match (u, v) {
        (GammaExp::Finite(a), GammaExp::Finite(b)) => GammaExp::Finite(a + b),
        _ => GammaExp::NegInf,
    }
}

/// `γ[u+v] = max(γ[u], γ[v])`, valid when the sum does not cancel exactly.
pub fn gadd(u: GammaExp, v: GammaExp) -> GammaExp {
    match u.cmp(&v) {
        Ordering::Less => v,
        _ => u,
    }
}

/// Product contracted over a width-independent (rank) dimension.
pub fn contract_rank(u: GammaExp, v: GammaExp) -> GammaExp {
    gmul(u, v)
}

/// Product contracted over the width dimension: each of the `n` terms
/// contributes coherently, adding one to the exponent.
pub fn contract_width(u: GammaExp, v: GammaExp) -> GammaExp {
    gmul(gmul(u, v), GammaExp::ONE)
}

/// Predicted exponents and verdicts for one `(A₀, B₀, η_A, η_B)` configuration.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RegimeReport {
    pub a0: GammaExp,
    pub b0: GammaExp,
    pub eta_a: GammaExp,
    pub eta_b: GammaExp,
    pub gamma_d1: GammaExp,
    pub gamma_d2: GammaExp,
    pub gamma_d3: GammaExp,
    pub gamma_za: GammaExp,
    pub gamma_zb: GammaExp,
    /// `γ[Z_B] = 0`.
    pub stable: bool,
    /// `γ[Z_B] ≤ 0`: the output does not blow up, though it may vanish.
    pub bounded: bool,
    /// Stable with `γ[δ¹] = γ[δ²] = 0`.
    pub efficient: bool,
    /// `γ[Z_A] = 0`.
    pub internally_stable: bool,
    /// `γ[δ¹]` is decided by `B₀`, not by `η_B`.
    pub robust_in_eta_b: bool,
    /// `γ[δ²]` is decided by `A₀`, not by `η_A`.
    pub robust_in_eta_a: bool,
    pub require_internal: bool,
}

impl RegimeReport {
    /// Efficient, and internally stable when that was requested.
    pub fn solves_system(&self) -> bool {
        self.efficient && (!self.require_internal || self.internally_stable)
    }

    pub fn robust(&self) -> bool {
        self.robust_in_eta_a && self.robust_in_eta_b
    }

    pub const CSV_HEADER: &'static str = "a0,b0,eta_a,eta_b,gamma_d1,gamma_d2,gamma_d3,gamma_za,gamma_zb,\
stable,bounded,efficient,internally_stable,robust_eta_a,robust_eta_b";

    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{},{},{},{},{},{},{},{}",
            self.a0,
            self.b0,
            self.eta_a,
            self.eta_b,
            self.gamma_d1,
            self.gamma_d2,
            self.gamma_d3,
            self.gamma_za,
            self.gamma_zb,
            self.stable,
            self.bounded,
            self.efficient,
            self.internally_stable,
            self.robust_in_eta_a,
            self.robust_in_eta_b
        )
    }
}

fn check_trainable(a0: GammaExp, b0: GammaExp) -> Result<()> {
    if a0.is_neg_inf() && b0.is_neg_inf() {
        return Err(Error::Precondition(
            "A0 and B0 cannot both be zero (gamma = -inf): every gradient would vanish and \
             neither matrix could ever move"
                .into(),
        ));
    }
    Ok(())
}

/// Regime of LoRA trained with Adam, whose normalised gradients are `Θ(1)`.
///
/// After the first step `γ[A_t] = max(γ[A₀], γ[η_A])` and likewise for `B`, so
/// every quantity of interest is a max-plus expression in the four inputs.
pub fn adam_regime(
    a0: GammaExp,
    b0: GammaExp,
    eta_a: GammaExp,
    eta_b: GammaExp,
    require_internal: bool,
) -> Result<RegimeReport> {
    check_trainable(a0, b0)?;
    let a_t = gadd(a0, eta_a);
    let b_t = gadd(b0, eta_b);
    let gamma_d1 = contract_width(b_t, eta_a);
    let gamma_d2 = contract_width(a_t, eta_b);
    let gamma_zb = contract_width(a_t, b_t);
    let gamma_za = contract_width(a_t, GammaExp::ZERO);
    let gamma_d3 = contract_width(eta_a, eta_b);
    let stable = gamma_zb.is_zero();
    Ok(RegimeReport {
        a0,
        b0,
        eta_a,
        eta_b,
        gamma_d1,
        gamma_d2,
        gamma_d3,
        gamma_za,
        gamma_zb,
        stable,
        bounded: gamma_zb <= GammaExp::ZERO,
        efficient: stable && gamma_d1.is_zero() && gamma_d2.is_zero(),
        internally_stable: gamma_za.is_zero(),
        robust_in_eta_b: b0 >= eta_b,
        robust_in_eta_a: a0 >= eta_a,
        require_internal,
    })
}

/// One step of the rank-1 SGD recurrence `f(x) = b·aᵀx`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SgdStepReport {
    pub t: usize,
    /// `γ[a_{t-1}]`
    pub gamma_a: GammaExp,
    /// `γ[b_{t-1}]`
    pub gamma_b: GammaExp,
    pub gamma_d1: GammaExp,
    pub gamma_d2: GammaExp,
    pub gamma_f: GammaExp,
}

impl SgdStepReport {
    pub fn stable(&self) -> bool {
        self.gamma_f.is_zero()
    }

    pub fn efficient(&self) -> bool {
        self.stable() && self.gamma_d1.is_zero() && self.gamma_d2.is_zero()
    }
}

/// Iterates the SGD exponent recurrences for `steps` steps.
///
/// Plain SGD gradients carry the magnitude of the other factor
/// (`γ[g_a] = γ[b]`, `γ[g_b] = γ[a] + 1`), so unlike Adam the exponents evolve
/// step by step.
pub fn sgd_regime(
    a0: GammaExp,
    b0: GammaExp,
    eta_a: GammaExp,
    eta_b: GammaExp,
    steps: usize,
) -> Result<Vec<SgdStepReport>> {
    if steps == 0 {
        return Err(Error::Precondition("sgd_regime needs at least one step".into()));
    }
    check_trainable(a0, b0)?;
    let two = GammaExp::int(2);
    let mut a = a0;
    let mut b = b0;
    let mut out = Vec::with_capacity(steps);
    for t in 1..=steps {
        out.push(SgdStepReport {
            t,
            gamma_a: a,
            gamma_b: b,
            gamma_d1: eta_a + b + b + GammaExp::ONE,
            gamma_d2: eta_b + a + a + two,
            gamma_f: a + b + GammaExp::ONE,
        });
        let next_a = gadd(a, eta_a + b);
        let next_b = gadd(b, eta_b + a + GammaExp::ONE);
        a = next_a;
        b = next_b;
    }
    Ok(out)
}

/// An initialisation scheme to classify, with the uniform learning-rate
/// exponents to search over.
#[derive(Clone, Debug)]
pub struct TableConfig {
    pub name: String,
    pub a0: GammaExp,
    pub b0: GammaExp,
    pub etas: Vec<GammaExp>,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TableRow {
    pub name: String,
    /// Some uniform rate makes the run stable.
    pub stability: bool,
    /// Some uniform rate makes the run efficient.
    pub efficiency: bool,
    /// Some efficient rate is also robust in both learning rates.
    pub robustness: bool,
    /// Uniform rate exponent at which the run is efficient, if any.
    pub optimal_eta: Option<GammaExp>,
}

impl TableRow {
    pub fn marks(&self) -> String {
        let m = |b: bool| if b { '✓' } else { '×' };
        format!("{}{}{}", m(self.stability), m(self.efficiency), m(self.robustness))
    }
}

/// Stability / efficiency / robustness matrix over uniform Adam learning rates.
pub fn classify_table(configs: &[TableConfig]) -> Result<Vec<TableRow>> {
    configs
        .iter()
        .map(|cfg| {
            let mut row = TableRow {
                name: cfg.name.clone(),
                stability: false,
                efficiency: false,
                robustness: false,
                optimal_eta: None,
            };
            for &eta in &cfg.etas {
                let rep = adam_regime(cfg.a0, cfg.b0, eta, eta, false)?;
                row.stability |= rep.stable;
                if rep.efficient {
                    row.efficiency = true;
                    row.optimal_eta.get_or_insert(eta);
                    row.robustness |= rep.robust();
                }
            }
            Ok(row)
        })
        .collect()
}

/// Uniform-rate grid `{lo, lo+step, …, hi}`.
pub fn exponent_grid(lo: GammaExp, hi: GammaExp, step: GammaExp) -> Vec<GammaExp> {
    let (Some(lo), Some(hi), Some(step)) = (lo.rational(), hi.rational(), step.rational()) else {
        return Vec::new();
    };
    let mut out = Vec::new();
    let mut v = lo;
    while v <= hi {
        out.push(GammaExp::Finite(v));
        v += step;
    }
    out
}

/// The three canonical schemes of the comparison table, in the exponent
/// convention where a Kaiming-initialised `A` has `γ[A₀] = -1`.
pub fn standard_table_configs() -> Vec<TableConfig> {
    let etas = exponent_grid(GammaExp::int(-2), GammaExp::ZERO, GammaExp::ratio(1, 4));
    let half = GammaExp::ratio(-1, 2);
    vec![
        TableConfig {
            name: "Init[B]".into(),
            a0: GammaExp::NEG_INF,
            b0: GammaExp::ZERO,
            etas: etas.clone(),
        },
        TableConfig {
            name: "Init[A]".into(),
            a0: GammaExp::int(-1),
            b0: GammaExp::NEG_INF,
            etas: etas.clone(),
        },
        TableConfig {
            name: "Init[AB]".into(),
            a0: half,
            b0: half,
            etas,
        },
    ]
}
