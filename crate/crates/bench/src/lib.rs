//! Shared fixtures for the criterion benchmarks.

use std::sync::Arc;

use lorascale_core::lora::{init_lora, InitScheme, LoraLayer, SchemeKind};
use lorascale_core::tensor::{gaussian, Matrix, Rng};

/// Seeded `rows×cols` matrix with unit-variance entries.
pub fn random_matrix(rows: usize, cols: usize, seed: u64) -> Matrix {
    gaussian(rows, cols, 1.0, &mut Rng::seed(seed)).expect("positive sigma")
}

/// An `n×n` Kaiming layer with a rank-`r` Init[AB] adapter, plus a batch of inputs.
pub fn lora_fixture(n: usize, r: usize, batch: usize) -> (LoraLayer, Matrix) {
    let mut rng = Rng::seed(7);
    let w = Arc::new(gaussian(n, n, 1.0 / (n as f64).sqrt(), &mut rng).expect("valid sigma"));
    let layer = init_lora(InitScheme::new(SchemeKind::InitAB, 1.0), w, r, 1.0, &mut rng).expect("valid dims");
    let z = gaussian(n, batch, 1.0, &mut rng).expect("valid sigma");
    (layer, z)
}
