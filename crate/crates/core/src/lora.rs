//! LoRA layers: initialisation schemes, forward/backward passes and the
//! three-way split of a feature update.

use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{gaussian, matmul, matmul_nt, matmul_tn, Matrix, Rng};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum SchemeKind {
    /// `A` Gaussian, `B = 0`.
    InitA,
    /// `B` Gaussian with variance `1/r`, `A = 0`.
    InitB,
    /// Both Gaussian with equal variance; `s·B₀A₀` is subtracted so the layer
    /// starts at the pretrained function.
    InitAB,
    /// As `InitAB` without the subtraction.
    InitABPlus,
}

impl SchemeKind {
    pub const ALL: [SchemeKind; 4] = [
        SchemeKind::InitA,
        SchemeKind::InitB,
        SchemeKind::InitAB,
        SchemeKind::InitABPlus,
    ];

    pub fn name(self) -> &'static str {
        match self {
            SchemeKind::InitA => "init_a",
            SchemeKind::InitB => "init_b",
            SchemeKind::InitAB => "init_ab",
            SchemeKind::InitABPlus => "init_ab_plus",
        }
    }
}

impl fmt::Display for SchemeKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for SchemeKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let norm: String = s
            .chars()
            .filter(|c| c.is_ascii_alphanumeric() || *c == '+')
            .collect::<String>()
            .to_ascii_lowercase();
        match norm.as_str() {
            "inita" | "a" => Ok(SchemeKind::InitA),
            "initb" | "b" => Ok(SchemeKind::InitB),
            "initab" | "ab" => Ok(SchemeKind::InitAB),
            "initabplus" | "initab+" | "abplus" | "ab+" => Ok(SchemeKind::InitABPlus),
            _ => Err(Error::Parse(format!(
                "unknown init scheme {s:?} (expected init_a, init_b, init_ab or init_ab_plus)"
            ))),
        }
    }
}

/// Initialisation scheme with its size `beta`, a multiplier on the Kaiming
/// standard deviation `σ_k = 1/√fan_in`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct InitScheme {
    pub kind: SchemeKind,
    pub beta: f64,
}

impl InitScheme {
    pub fn new(kind: SchemeKind, beta: f64) -> Self {
        Self { kind, beta }
    }

    /// Scheme whose Gaussian factors have standard deviation `sigma` at fan-in `n`.
    pub fn from_sigma(kind: SchemeKind, sigma: f64, n: usize) -> Self {
        Self {
            kind,
            beta: sigma * (n as f64).sqrt(),
        }
    }

    /// Standard deviations `(σ_A, σ_B)` for an `r×n2` / `n1×r` pair.
    pub fn stds(&self, n2: usize, r: usize) -> (f64, f64) {
        let kaiming = self.beta / (n2 as f64).sqrt();
        match self.kind {
            SchemeKind::InitA => (kaiming, 0.0),
            SchemeKind::InitB => (0.0, self.beta / (r as f64).sqrt()),
            SchemeKind::InitAB | SchemeKind::InitABPlus => (kaiming, kaiming),
        }
    }

    pub fn subtracts_init(&self) -> bool {
        self.kind == SchemeKind::InitAB
    }
}

/// Frozen weight `W` with trainable low-rank factors, `W̄ = W + s·B·A`.
///
/// When the initial product is subtracted, the factors `(B₀, A₀)` are kept and
/// the constant `-s·B₀·A₀` is applied in every forward pass, which leaves the
/// shared `W` untouched.
#[derive(Clone, Debug)]
pub struct LoraLayer {
    pub w: Arc<Matrix>,
    pub a: Matrix,
    pub b: Matrix,
    pub s: f64,
    correction: Option<(Matrix, Matrix)>,
}

/// Activations of one forward pass through a [`LoraLayer`].
#[derive(Clone, Debug)]
pub struct LoraForward {
    /// `A·Z`
    pub za: Matrix,
    /// `s·B·Z_A`
    pub zb: Matrix,
    /// `W·Z + Z_B` plus the correction, if any.
    pub zbar: Matrix,
}

impl LoraLayer {
    /// Assembles a layer from explicit factors, checking shapes only.
    pub fn from_parts(w: Arc<Matrix>, a: Matrix, b: Matrix, s: f64, subtract_init: bool) -> Result<Self> {
        let (n1, n2) = w.shape();
        if a.cols() != n2 {
            return Err(Error::Shape {
                op: "LoraLayer(A vs W)",
                left: a.shape(),
                right: w.shape(),
            });
        }
        if b.rows() != n1 || b.cols() != a.rows() {
            return Err(Error::Shape {
                op: "LoraLayer(B vs W, A)",
                left: b.shape(),
                right: (n1, a.rows()),
            });
        }
        if !s.is_finite() {
            return Err(Error::invalid("scaling factor must be finite"));
        }
        let correction = subtract_init.then(|| (b.clone(), a.clone()));
        Ok(Self { w, a, b, s, correction })
    }

    /// Layer with rank zero: behaves exactly like `W`.
    pub fn frozen(w: Arc<Matrix>) -> Self {
        let (n1, n2) = w.shape();
        Self {
            w,
            a: Matrix::zeros(0, n2),
            b: Matrix::zeros(n1, 0),
            s: 1.0,
            correction: None,
        }
    }

    pub fn rank(&self) -> usize {
        self.a.rows()
    }

    pub fn has_correction(&self) -> bool {
        self.correction.is_some()
    }

    /// `(B₀, A₀)` whose product is subtracted, if any.
    pub fn correction_factors(&self) -> Option<(&Matrix, &Matrix)> {
        self.correction.as_ref().map(|(b0, a0)| (b0, a0))
    }

    /// Replaces the subtracted product with `s·b0·a0`.
    pub fn with_correction(mut self, b0: Matrix, a0: Matrix) -> Result<Self> {
        if b0.shape() != self.b.shape() || a0.shape() != self.a.shape() {
            return Err(Error::Shape {
                op: "LoraLayer::with_correction",
                left: b0.shape(),
                right: self.b.shape(),
            });
        }
        self.correction = Some((b0, a0));
        Ok(self)
    }

    /// Dense `-s·B₀·A₀`, if the initial product is subtracted.
    pub fn correction_matrix(&self) -> Result<Option<Matrix>> {
        self.correction
            .as_ref()
            .map(|(b0, a0)| Ok(matmul(b0, a0)?.scale(-self.s)))
            .transpose()
    }

    /// Effective weight `W + s·B·A − s·B₀·A₀`.
    pub fn effective_weight(&self) -> Result<Matrix> {
        let mut w = self.w.as_ref().add(&matmul(&self.b, &self.a)?.scale(self.s))?;
        if let Some(c) = self.correction_matrix()? {
            w = w.add(&c)?;
        }
        Ok(w)
    }

    /// Adds the correction applied to `Z` into `out`.
    fn apply_correction(&self, z: &Matrix, out: &mut Matrix) -> Result<()> {
        if let Some((b0, a0)) = &self.correction {
            let c = matmul(b0, &matmul(a0, z)?)?;
            out.axpy(-self.s, &c)?;
        }
        Ok(())
    }

    /// `W·Z` term of the forward pass, correction included. Callers that cache
    /// `W·Z` use this with [`LoraLayer::forward_with_base`].
    pub fn base_output(&self, z: &Matrix) -> Result<Matrix> {
        let mut out = matmul(&self.w, z)?;
        self.apply_correction(z, &mut out)?;
        Ok(out)
    }

    /// Forward pass reusing a precomputed `W·Z` (without correction).
    pub fn forward_with_base(&self, z: &Matrix, wz: &Matrix) -> Result<LoraForward> {
        let za = matmul(&self.a, z)?;
        let zb = matmul(&self.b, &za)?.scale(self.s);
        let mut zbar = wz.add(&zb)?;
        self.apply_correction(z, &mut zbar)?;
        Ok(LoraForward { za, zb, zbar })
    }

    /// Gradient with respect to the layer input `Z`.
    pub fn input_grad(&self, dzbar: &Matrix) -> Result<Matrix> {
        let mut dz = matmul_tn(&self.w, dzbar)?;
        if self.rank() > 0 {
            let bt = matmul_tn(&self.b, dzbar)?;
            dz.axpy(self.s, &matmul_tn(&self.a, &bt)?)?;
        }
        if let Some((b0, a0)) = &self.correction {
            let bt = matmul_tn(b0, dzbar)?;
            dz.axpy(-self.s, &matmul_tn(a0, &bt)?)?;
        }
        Ok(dz)
    }
}

/// Samples `A` and `B` per `scheme` around the frozen `w` (`n1×n2`).
pub fn init_lora(scheme: InitScheme, w: Arc<Matrix>, r: usize, s: f64, rng: &mut Rng) -> Result<LoraLayer> {
    let (n1, n2) = w.shape();
    if n1 == 0 || n2 == 0 || r == 0 {
        return Err(Error::invalid(format!("LoRA dimensions must be positive, got n1={n1} n2={n2} r={r}")));
    }
    if 4 * r > n1.min(n2) {
        return Err(Error::invalid(format!(
            "rank {r} is not low-rank for a {n1}x{n2} weight (need r <= min(n1, n2)/4)"
        )));
    }
    if !(scheme.beta >= 0.0) || !scheme.beta.is_finite() {
        return Err(Error::invalid(format!("init size beta must be >= 0, got {}", scheme.beta)));
    }
    if scheme.beta == 0.0 && matches!(scheme.kind, SchemeKind::InitAB | SchemeKind::InitABPlus) {
        return Err(Error::invalid(
            "beta = 0 makes both A and B zero, so neither factor receives a gradient",
        ));
    }
    let (sa, sb) = scheme.stds(n2, r);
    let a = gaussian(r, n2, sa, rng)?;
    let b = gaussian(n1, r, sb, rng)?;
    LoraLayer::from_parts(w, a, b, s, scheme.subtracts_init())
}

pub fn forward_lora(layer: &LoraLayer, z: &Matrix) -> Result<LoraForward> {
    let wz = matmul(&layer.w, z)?;
    layer.forward_with_base(z, &wz)
}

/// Gradients `(g_A, g_B)` given the upstream gradient `dZ̄`.
pub fn backward_lora(layer: &LoraLayer, z: &Matrix, za: &Matrix, dzbar: &Matrix) -> Result<(Matrix, Matrix)> {
    if dzbar.shape() != (layer.w.rows(), z.cols()) {
        return Err(Error::Shape {
            op: "backward_lora(dZbar)",
            left: dzbar.shape(),
            right: (layer.w.rows(), z.cols()),
        });
    }
    if za.shape() != (layer.rank(), z.cols()) {
        return Err(Error::Shape {
            op: "backward_lora(Z_A)",
            left: za.shape(),
            right: (layer.rank(), z.cols()),
        });
    }
    // g_A = s·Bᵀ·dZ̄·Zᵀ, g_B = s·dZ̄·Z_Aᵀ
    let bt_dz = matmul_tn(&layer.b, dzbar)?;
    let ga = matmul_nt(&bt_dz, z)?.scale(layer.s);
    let gb = matmul_nt(dzbar, za)?.scale(layer.s);
    Ok((ga, gb))
}

/// The split `ΔZ_B = δ¹ + δ² + δ³` of one update.
#[derive(Clone, Debug)]
pub struct Deltas {
    /// `s·B_prev·ΔA·Z`
    pub d1: Matrix,
    /// `s·ΔB·A_prev·Z`
    pub d2: Matrix,
    /// `s·ΔB·ΔA·Z`
    pub d3: Matrix,
}

pub fn delta_decompose(
    a_prev: &Matrix,
    b_prev: &Matrix,
    a_new: &Matrix,
    b_new: &Matrix,
    z: &Matrix,
    s: f64,
) -> Result<Deltas> {
    let da = a_new.sub(a_prev)?;
    let db = b_new.sub(b_prev)?;
    let da_z = matmul(&da, z)?;
    let za_prev = matmul(a_prev, z)?;
    Ok(Deltas {
        d1: matmul(b_prev, &da_z)?.scale(s),
        d2: matmul(&db, &za_prev)?.scale(s),
        d3: matmul(&db, &da_z)?.scale(s),
    })
}
