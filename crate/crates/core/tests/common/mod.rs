//! Central finite-difference checks of every analytic gradient on small
//! random shapes (d = 6, n = 8, r = 2).

use std::sync::Arc;

use lorascale_core::lora::{backward_lora, forward_lora, init_lora, InitScheme, LoraLayer, SchemeKind};
use lorascale_core::tensor::{gaussian, softmax_xent_batch, Matrix, Rng};
use lorascale_core::toy::{backward_toy, forward_toy, ToyModel};

const D: usize = 6;
const N: usize = 8;
const R: usize = 2;
const CLASSES: usize = 3;
const BATCH: usize = 4;
pub const TRIALS: u64 = 20;
const H: f64 = 1e-5;
pub const MAX_REL: f64 = 1e-6;
/// Denominator floor of the relative error. Central differences at step `H`
/// carry roundoff of about `ε·|L|/H ≈ 1e-10`, so relative errors of smaller
/// coordinates are not resolvable at 1e-6.
const ABS_FLOOR: f64 = 1e-4;

/// Worst coordinate of one gradient over all trials.
#[derive(Clone, Debug, Default)]
pub struct Check {
    pub what: &'static str,
    pub worst: f64,
    pub analytic: f64,
    pub numeric: f64,
    pub skipped: usize,
}

impl Check {
    fn new(what: &'static str) -> Self {
        Self { what, ..Default::default() }
    }

    pub fn pass(&self) -> bool {
        self.worst < MAX_REL
    }

    pub fn describe(&self) -> String {
        format!(
            "{}: max rel err {:.2e} (analytic {:e}, numeric {:e}), {} kink coords skipped",
            self.what, self.worst, self.analytic, self.numeric, self.skipped
        )
    }
}

fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(ABS_FLOOR)
}

/// Folds central differences of `loss` around `param` into `acc`.
/// Coordinates whose perturbed evaluations cross a ReLU kink are skipped.
fn check(acc: &mut Check, param: &Matrix, grad: &Matrix, mut loss: impl FnMut(&Matrix) -> (f64, bool)) {
    assert_eq!(param.shape(), grad.shape(), "{}", acc.what);
    for i in 0..param.len() {
        let mut plus = param.clone();
        plus.as_mut_slice()[i] += H;
        let mut minus = param.clone();
        minus.as_mut_slice()[i] -= H;
        let (lp, kink_p) = loss(&plus);
        let (lm, kink_m) = loss(&minus);
        if kink_p || kink_m {
            acc.skipped += 1;
            continue;
        }
        let numeric = (lp - lm) / (2.0 * H);
        let e = rel_err(grad.as_slice()[i], numeric);
        if e > acc.worst {
            acc.worst = e;
            acc.analytic = grad.as_slice()[i];
            acc.numeric = numeric;
        }
    }
}

fn signs(m: &Matrix) -> Vec<bool> {
    m.as_slice().iter().map(|&v| v > 0.0).collect()
}

/// dA, dB and dZ of a LoRA layer under the objective `Σ G ∘ Z̄`.
pub fn lora_layer() -> Vec<Check> {
    let mut out = [Check::new("lora dA"), Check::new("lora dB"), Check::new("lora dZ")];
    for trial in 0..TRIALS {
        let mut rng = Rng::child(11, trial);
        let w = Arc::new(gaussian(N, N, 0.4, &mut rng).unwrap());
        let kind = SchemeKind::ALL[trial as usize % 4];
        let mut layer = init_lora(InitScheme::new(kind, 1.0), w, R, 1.3, &mut rng).unwrap();
        // Both factors nonzero so every gradient is exercised.
        layer.a = gaussian(R, N, 0.5, &mut rng).unwrap();
        layer.b = gaussian(N, R, 0.5, &mut rng).unwrap();
        let z = gaussian(N, BATCH, 1.0, &mut rng).unwrap();
        let g = gaussian(N, BATCH, 1.0, &mut rng).unwrap();
        let objective = |l: &LoraLayer, z: &Matrix| {
            let f = forward_lora(l, z).unwrap();
            f.zbar.as_slice().iter().zip(g.as_slice()).map(|(x, y)| x * y).sum::<f64>()
        };
        let fwd = forward_lora(&layer, &z).unwrap();
        let (ga, gb) = backward_lora(&layer, &z, &fwd.za, &g).unwrap();
        let [da, db, dz] = &mut out;
        check(da, &layer.a, &ga, |a| {
            let mut l = layer.clone();
            l.a = a.clone();
            (objective(&l, &z), false)
        });
        check(db, &layer.b, &gb, |b| {
            let mut l = layer.clone();
            l.b = b.clone();
            (objective(&l, &z), false)
        });
        let grad_z = layer.input_grad(&g).unwrap();
        check(dz, &z, &grad_z, |z2| (objective(&layer, z2), false));
    }
    out.into()
}

pub fn softmax_cross_entropy() -> Check {
    let mut out = Check::new("softmax-xent");
    for trial in 0..TRIALS {
        let mut rng = Rng::child(12, trial);
        let logits = gaussian(CLASSES, BATCH, 3.0, &mut rng).unwrap();
        let labels: Vec<usize> = (0..BATCH).map(|_| rng.below(CLASSES)).collect();
        let (_, grad) = softmax_xent_batch(&logits, &labels).unwrap();
        check(&mut out, &logits, &grad, |l| (softmax_xent_batch(l, &labels).unwrap().0, false));
    }
    out
}

fn toy(trial: u64, kind: SchemeKind) -> (ToyModel, Matrix, Vec<usize>) {
    let mut rng = Rng::child(13, trial);
    let base = ToyModel::kaiming(D, N, CLASSES, &mut rng).unwrap();
    let mut layer = init_lora(InitScheme::new(kind, 1.0), Arc::clone(base.w0()), R, 1.0, &mut rng).unwrap();
    layer.a = gaussian(R, N, 0.5, &mut rng).unwrap();
    layer.b = gaussian(N, R, 0.5, &mut rng).unwrap();
    let model = base.with_adapter(layer).unwrap();
    let x = gaussian(D, BATCH, 1.0, &mut rng).unwrap();
    let labels = (0..BATCH).map(|_| rng.below(CLASSES)).collect();
    (model, x, labels)
}

type Pattern = (Vec<bool>, Vec<bool>);

/// Loss of `model`, and whether any ReLU pattern differs from `reference`.
fn toy_loss(model: &ToyModel, x: &Matrix, labels: &[usize], reference: &Pattern) -> (f64, bool) {
    let (logits, cache) = forward_toy(model, x).unwrap();
    let kink = signs(&cache.h1_pre) != reference.0 || signs(&cache.lora.zbar) != reference.1;
    (softmax_xent_batch(&logits, labels).unwrap().0, kink)
}

/// Adapter gradients of the toy model, frozen weights untouched.
pub fn toy_adapter() -> Vec<Check> {
    let mut out = [Check::new("toy dA"), Check::new("toy dB")];
    for trial in 0..TRIALS {
        let kind = SchemeKind::ALL[trial as usize % 4];
        let (model, x, labels) = toy(trial, kind);
        let (logits, cache) = forward_toy(&model, &x).unwrap();
        let reference = (signs(&cache.h1_pre), signs(&cache.lora.zbar));
        let (_, dlogits) = softmax_xent_batch(&logits, &labels).unwrap();
        let grads = backward_toy(&model, &cache, &dlogits, false).unwrap();
        assert!(grads.w0.is_none() && grads.w_in.is_none() && grads.w_out.is_none());
        let [da, db] = &mut out;
        check(da, &model.hidden.a, grads.a.as_ref().unwrap(), |a| {
            let mut m = model.clone();
            m.hidden.a = a.clone();
            toy_loss(&m, &x, &labels, &reference)
        });
        check(db, &model.hidden.b, grads.b.as_ref().unwrap(), |b| {
            let mut m = model.clone();
            m.hidden.b = b.clone();
            toy_loss(&m, &x, &labels, &reference)
        });
    }
    out.into()
}

/// Dense gradients used during pretraining.
pub fn toy_dense() -> Vec<Check> {
    let mut out = [Check::new("toy dW_in"), Check::new("toy dW0"), Check::new("toy dW_out")];
    for trial in 0..TRIALS {
        let (model, x, labels) = toy(100 + trial, SchemeKind::InitAB);
        let (logits, cache) = forward_toy(&model, &x).unwrap();
        let reference = (signs(&cache.h1_pre), signs(&cache.lora.zbar));
        let (_, dlogits) = softmax_xent_batch(&logits, &labels).unwrap();
        let grads = backward_toy(&model, &cache, &dlogits, true).unwrap();
        assert!(grads.a.is_none() && grads.b.is_none());
        let [w_in, w0, w_out] = &mut out;
        check(w_in, &model.w_in, grads.w_in.as_ref().unwrap(), |w| {
            let mut m = model.clone();
            m.w_in = Arc::new(w.clone());
            toy_loss(&m, &x, &labels, &reference)
        });
        check(w0, &model.hidden.w, grads.w0.as_ref().unwrap(), |w| {
            let mut m = model.clone();
            m.hidden.w = Arc::new(w.clone());
            toy_loss(&m, &x, &labels, &reference)
        });
        check(w_out, &model.w_out, grads.w_out.as_ref().unwrap(), |w| {
            let mut m = model.clone();
            m.w_out = Arc::new(w.clone());
            toy_loss(&m, &x, &labels, &reference)
        });
    }
    out.into()
}

/// Every gradient check, in a fixed order.
#[allow(dead_code)]
pub fn all() -> Vec<Check> {
    let mut out = lora_layer();
    out.push(softmax_cross_entropy());
    out.extend(toy_adapter());
    out.extend(toy_dense());
    out
}
