//! Width-scaling analysis of LoRA fine-tuning dynamics.
//!
//! The crate has two halves. [`gamma`] is an exact max-plus calculus that
//! predicts how LoRA features scale with width for a given initialisation and
//! learning-rate exponent. The numeric half ([`tensor`], [`lora`], [`toy`],
//! [`optim`], [`probe`]) trains real LoRA layers and measures those exponents,
//! and [`experiment`] drives the toy-model comparisons of initialisation
//! schemes.

pub mod checkpoint;
pub mod data;
pub mod error;
pub mod experiment;
pub mod gamma;
pub mod lora;
pub mod optim;
pub mod probe;
pub mod tensor;
pub mod toy;

pub use error::{Error, Result};
pub use gamma::{adam_regime, sgd_regime, GammaExp, RegimeReport};
pub use lora::{InitScheme, LoraLayer, SchemeKind};
pub use tensor::{Matrix, Rng};
pub use toy::ToyModel;
