//! Two-hidden-layer ReLU classifier with a LoRA adapter on the middle layer:
//! `f(X) = W_out · relu((W₀ + s·B·A) · relu(W_in · X))`.

use std::sync::Arc;

use crate::error::{Error, Result};
use crate::lora::{backward_lora, LoraForward, LoraLayer};
use crate::tensor::{
    argmax_columns, gaussian, matmul, matmul_nt, matmul_tn, relu, relu_backward, softmax_xent_batch, Matrix, Rng,
};

#[derive(Clone, Debug)]
pub struct ToyModel {
    /// `n×d`
    pub w_in: Arc<Matrix>,
    /// Middle layer: `W₀` (`n×n`) plus the adapter.
    pub hidden: LoraLayer,
    /// `classes×n`
    pub w_out: Arc<Matrix>,
}

/// Activations kept by [`forward_toy`] for the backward pass.
#[derive(Clone, Debug)]
pub struct ToyCache {
    pub x: Matrix,
    pub h1_pre: Matrix,
    pub h1: Matrix,
    pub lora: LoraForward,
    pub h2: Matrix,
}

/// Gradients produced by [`backward_toy`]. Pretraining fills the three dense
/// weights; fine-tuning fills only the adapter factors.
#[derive(Clone, Debug, Default)]
pub struct ToyGrads {
    pub w_in: Option<Matrix>,
    pub w0: Option<Matrix>,
    pub w_out: Option<Matrix>,
    pub a: Option<Matrix>,
    pub b: Option<Matrix>,
}

impl ToyModel {
    /// Fresh model with Kaiming-normal weights (variance `1/fan_in`) and no adapter.
    pub fn kaiming(d: usize, n: usize, classes: usize, rng: &mut Rng) -> Result<Self> {
        if d == 0 || n == 0 || classes == 0 {
            return Err(Error::invalid(format!("toy dims must be positive: d={d} n={n} classes={classes}")));
        }
        let w_in = gaussian(n, d, 1.0 / (d as f64).sqrt(), rng)?;
        let w0 = gaussian(n, n, 1.0 / (n as f64).sqrt(), rng)?;
        let w_out = gaussian(classes, n, 1.0 / (n as f64).sqrt(), rng)?;
        Ok(Self {
            w_in: Arc::new(w_in),
            hidden: LoraLayer::frozen(Arc::new(w0)),
            w_out: Arc::new(w_out),
        })
    }

    pub fn from_weights(w_in: Matrix, w0: Matrix, w_out: Matrix) -> Result<Self> {
        let n = w_in.rows();
        if w0.shape() != (n, n) {
            return Err(Error::Shape {
                op: "ToyModel(W0 vs W_in)",
                left: w0.shape(),
                right: (n, n),
            });
        }
        if w_out.cols() != n {
            return Err(Error::Shape {
                op: "ToyModel(W_out vs W_in)",
                left: w_out.shape(),
                right: (w_out.rows(), n),
            });
        }
        Ok(Self {
            w_in: Arc::new(w_in),
            hidden: LoraLayer::frozen(Arc::new(w0)),
            w_out: Arc::new(w_out),
        })
    }

    pub fn input_dim(&self) -> usize {
        self.w_in.cols()
    }

    pub fn width(&self) -> usize {
        self.w_in.rows()
    }

    pub fn classes(&self) -> usize {
        self.w_out.rows()
    }

    pub fn rank(&self) -> usize {
        self.hidden.rank()
    }

    pub fn w0(&self) -> &Arc<Matrix> {
        &self.hidden.w
    }

    /// Same pretrained weights with a different adapter.
    pub fn with_adapter(&self, hidden: LoraLayer) -> Result<Self> {
        if !Arc::ptr_eq(&hidden.w, &self.hidden.w) && hidden.w.as_ref() != self.hidden.w.as_ref() {
            return Err(Error::invalid("adapter is attached to a different pretrained W0"));
        }
        Ok(Self {
            w_in: self.w_in.clone(),
            hidden,
            w_out: self.w_out.clone(),
        })
    }

    /// Hashes of the three pretrained weights, for freeze checks.
    pub fn frozen_hashes(&self) -> [[u8; 32]; 3] {
        [
            self.w_in.content_hash(),
            self.hidden.w.content_hash(),
            self.w_out.content_hash(),
        ]
    }
}

pub fn forward_toy(model: &ToyModel, x: &Matrix) -> Result<(Matrix, ToyCache)> {
    let h1_pre = matmul(&model.w_in, x)?;
    let h1 = relu(&h1_pre);
    let wz = matmul(&model.hidden.w, &h1)?;
    let lora = model.hidden.forward_with_base(&h1, &wz)?;
    let h2 = relu(&lora.zbar);
    let logits = matmul(&model.w_out, &h2)?;
    Ok((
        logits,
        ToyCache {
            x: x.clone(),
            h1_pre,
            h1,
            lora,
            h2,
        },
    ))
}

/// Back-propagates `dlogits`. With `train_all` the gradients of the pretrained
/// weights are returned; otherwise only those of the adapter.
pub fn backward_toy(model: &ToyModel, cache: &ToyCache, dlogits: &Matrix, train_all: bool) -> Result<ToyGrads> {
    let dh2 = matmul_tn(&model.w_out, dlogits)?;
    let dzbar = relu_backward(&cache.lora.zbar, &dh2)?;
    if train_all {
        let w_out = matmul_nt(dlogits, &cache.h2)?;
        let w0 = matmul_nt(&dzbar, &cache.h1)?;
        let dh1 = model.hidden.input_grad(&dzbar)?;
        let dh1_pre = relu_backward(&cache.h1_pre, &dh1)?;
        let w_in = matmul_nt(&dh1_pre, &cache.x)?;
        Ok(ToyGrads {
            w_in: Some(w_in),
            w0: Some(w0),
            w_out: Some(w_out),
            ..Default::default()
        })
    } else {
        let (a, b) = backward_lora(&model.hidden, &cache.h1, &cache.lora.za, &dzbar)?;
        Ok(ToyGrads {
            a: Some(a),
            b: Some(b),
            ..Default::default()
        })
    }
}

/// First-layer activations and the frozen middle-layer product for a fixed set
/// of inputs, so adapter-only training never recomputes them.
#[derive(Clone, Debug)]
pub struct FrozenFeatures {
    /// `relu(W_in·X)`, `n×N`
    pub h1: Matrix,
    /// `W₀·h1`, `n×N`
    pub base: Matrix,
}

impl FrozenFeatures {
    /// `inputs` holds one sample per row (`N×d`).
    pub fn compute(model: &ToyModel, inputs: &Matrix) -> Result<Self> {
        if inputs.cols() != model.input_dim() {
            return Err(Error::Shape {
                op: "FrozenFeatures",
                left: inputs.shape(),
                right: (inputs.rows(), model.input_dim()),
            });
        }
        let h1 = relu(&matmul_nt(&model.w_in, inputs)?);
        let base = matmul(&model.hidden.w, &h1)?;
        Ok(Self { h1, base })
    }

    pub fn len(&self) -> usize {
        self.h1.cols()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn select(&self, idx: &[usize]) -> (Matrix, Matrix) {
        (self.h1.select_columns(idx), self.base.select_columns(idx))
    }
}

/// Logits from cached features; matches [`forward_toy`] exactly.
pub fn logits_from_features(model: &ToyModel, h1: &Matrix, base: &Matrix) -> Result<(Matrix, LoraForward, Matrix)> {
    let lora = model.hidden.forward_with_base(h1, base)?;
    let h2 = relu(&lora.zbar);
    let logits = matmul(&model.w_out, &h2)?;
    Ok((logits, lora, h2))
}

/// Adapter gradients from cached features. Returns `(loss, g_A, g_B)`.
pub fn adapter_step_grads(
    model: &ToyModel,
    h1: &Matrix,
    base: &Matrix,
    labels: &[usize],
) -> Result<(f64, Matrix, Matrix)> {
    let (logits, lora, _h2) = logits_from_features(model, h1, base)?;
    let (loss, dlogits) = softmax_xent_batch(&logits, labels)?;
    let dh2 = matmul_tn(&model.w_out, &dlogits)?;
    let dzbar = relu_backward(&lora.zbar, &dh2)?;
    let (ga, gb) = backward_lora(&model.hidden, h1, &lora.za, &dzbar)?;
    Ok((loss, ga, gb))
}

/// Mean cross-entropy and accuracy over cached features, evaluated in chunks.
pub fn evaluate_features(model: &ToyModel, feats: &FrozenFeatures, labels: &[usize]) -> Result<(f64, f64)> {
    if labels.len() != feats.len() {
        return Err(Error::invalid(format!("{} labels for {} samples", labels.len(), feats.len())));
    }
    if labels.is_empty() {
        return Err(Error::invalid("cannot evaluate on an empty set"));
    }
    const CHUNK: usize = 512;
    let mut total = 0.0;
    let mut correct = 0usize;
    let all: Vec<usize> = (0..labels.len()).collect();
    for idx in all.chunks(CHUNK) {
        let (h1, base) = feats.select(idx);
        let (logits, _, _) = logits_from_features(model, &h1, &base)?;
        let lab: Vec<usize> = idx.iter().map(|&i| labels[i]).collect();
        let (loss, _) = softmax_xent_batch(&logits, &lab)?;
        total += loss * idx.len() as f64;
        correct += argmax_columns(&logits).iter().zip(&lab).filter(|(p, l)| p == l).count();
    }
    let n = labels.len() as f64;
    Ok((total / n, correct as f64 / n))
}
