use std::sync::Arc;

use crate::data::{BatchSampler, Dataset};
use crate::error::{Error, Result};
use crate::optim::{adam_step, AdamState};
use crate::tensor::{argmax_columns, softmax_xent_batch, Rng};
use crate::toy::{backward_toy, forward_toy, ToyModel};

use super::config::ExperimentConfig;

/// Stream of the master seed used for weight initialisation.
pub const INIT_STREAM: u64 = 0;
/// Stream of the master seed used for batch order.
pub const BATCH_STREAM: u64 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct PretrainRow {
    pub step: usize,
    /// Mean training loss over the steps since the previous row.
    pub train_loss: f64,
    pub test_loss: f64,
    pub test_accuracy: f64,
}

impl PretrainRow {
    pub const CSV_HEADER: &'static str = "step,train_loss,test_loss,test_accuracy";

    pub fn csv_row(&self) -> String {
        format!("{},{},{},{}", self.step, self.train_loss, self.test_loss, self.test_accuracy)
    }
}

pub fn log_csv(rows: &[PretrainRow]) -> String {
    let mut out = format!("{}\n", PretrainRow::CSV_HEADER);
    for r in rows {
        out.push_str(&r.csv_row());
        out.push('\n');
    }
    out
}

/// Mean cross-entropy and accuracy of the full model, in chunks of 256.
pub fn evaluate(model: &ToyModel, data: &Dataset) -> Result<(f64, f64)> {
    if data.is_empty() {
        return Err(Error::invalid("cannot evaluate on an empty dataset"));
    }
    let mut total = 0.0;
    let mut correct = 0;
    let idx: Vec<usize> = (0..data.len()).collect();
    for chunk in idx.chunks(256) {
        let (x, labels) = data.batch(chunk);
        let (logits, _) = forward_toy(model, &x)?;
        let (loss, _) = softmax_xent_batch(&logits, &labels)?;
        total += loss * chunk.len() as f64;
        correct += argmax_columns(&logits).iter().zip(&labels).filter(|(p, l)| p == l).count();
    }
    Ok((total / data.len() as f64, correct as f64 / data.len() as f64))
}

/// Trains all three weights of a fresh Kaiming-initialised model with Adam.
/// A log row is written every `log_every` steps and after the final step.
pub fn pretrain(cfg: &ExperimentConfig, train: &Dataset, test: &Dataset) -> Result<(ToyModel, Vec<PretrainRow>)> {
    if train.dim() != cfg.d || test.dim() != cfg.d {
        return Err(Error::invalid(format!(
            "dataset dimension {} does not match configured d = {}",
            train.dim(),
            cfg.d
        )));
    }
    let mut model = ToyModel::kaiming(cfg.d, cfg.n, cfg.classes, &mut Rng::child(cfg.master_seed, INIT_STREAM))?;
    let mut sampler = BatchSampler::new(train.len(), cfg.batch.min(train.len()), Rng::child(cfg.master_seed, BATCH_STREAM))?;
    let mut st_in = AdamState::for_param(&model.w_in);
    let mut st_0 = AdamState::for_param(&model.hidden.w);
    let mut st_out = AdamState::for_param(&model.w_out);
    let mut log = Vec::new();
    let mut window = (0.0, 0usize);
    let every = cfg.log_every.max(1);
    for step in 1..=cfg.pretrain_steps {
        let (x, labels) = train.batch(&sampler.next_indices());
        let (logits, cache) = forward_toy(&model, &x)?;
        let (loss, dlogits) = softmax_xent_batch(&logits, &labels)?;
        let grads = backward_toy(&model, &cache, &dlogits, true)?;
        let missing = || Error::invalid("pretraining needs dense gradients");
        adam_step(Arc::make_mut(&mut model.w_in), &grads.w_in.ok_or_else(missing)?, &mut st_in, cfg.pretrain_lr)?;
        adam_step(Arc::make_mut(&mut model.hidden.w), &grads.w0.ok_or_else(missing)?, &mut st_0, cfg.pretrain_lr)?;
        adam_step(Arc::make_mut(&mut model.w_out), &grads.w_out.ok_or_else(missing)?, &mut st_out, cfg.pretrain_lr)?;
        window.0 += loss;
        window.1 += 1;
        if step % every == 0 || step == cfg.pretrain_steps {
            let (test_loss, test_accuracy) = evaluate(&model, test)?;
            log.push(PretrainRow {
                step,
                train_loss: window.0 / window.1 as f64,
                test_loss,
                test_accuracy,
            });
            window = (0.0, 0);
        }
    }
    Ok((model, log))
}
