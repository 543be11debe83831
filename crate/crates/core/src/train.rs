//! Cross-entropy training with Adam, a stepped learning-rate schedule,
//! early stopping and best-weights restoration.

use std::path::PathBuf;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::data::PreparedSet;
use crate::error::{Result, VimError};
use crate::model::{checkpoint, NamedParam, Strategy, VimModel};
use crate::tensor::{Float, Tape, Tensor};

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub strategy: Strategy,
    pub base_lr: f64,
    pub lr_decay_factor: f64,
    /// Epochs (0-based) at which the rate is multiplied by `lr_decay_factor`.
    pub lr_decay_epochs: Vec<usize>,
    pub max_epochs: usize,
    pub patience: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub init_checkpoint: Option<PathBuf>,
    /// Global gradient-norm cap; `None` disables clipping.
    pub clip_grad_norm: Option<f64>,
    /// When set, `best.vimc` is written on each new best epoch and `last.vimc` at the end.
    pub checkpoint_dir: Option<PathBuf>,
}

impl TrainConfig {
    pub fn new(max_epochs: usize) -> Self {
        TrainConfig {
            strategy: Strategy::Scratch,
            base_lr: 1e-3,
            lr_decay_factor: 0.1,
            lr_decay_epochs: default_decay_epochs(max_epochs),
            max_epochs,
            patience: 5,
            batch_size: 32,
            seed: 0,
            init_checkpoint: None,
            clip_grad_norm: None,
            checkpoint_dir: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.patience < 1 {
            return Err(VimError::invalid("patience must be at least 1"));
        }
        if !(self.lr_decay_factor > 0.0 && self.lr_decay_factor < 1.0) {
            return Err(VimError::invalid("lr_decay_factor must be in (0, 1)"));
        }
        if !(self.base_lr > 0.0 && self.base_lr.is_finite()) {
            return Err(VimError::invalid("base_lr must be positive"));
        }
        if self.batch_size == 0 || self.max_epochs == 0 {
            return Err(VimError::invalid(
                "batch_size and max_epochs must be positive",
            ));
        }
        if self.strategy.needs_checkpoint() && self.init_checkpoint.is_none() {
            return Err(VimError::invalid(format!(
                "strategy {} requires an initial checkpoint",
                self.strategy
            )));
        }
        Ok(())
    }
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig::new(20)
    }
}

/// Decays at 50% and 75% of the run.
pub fn default_decay_epochs(max_epochs: usize) -> Vec<usize> {
    vec![max_epochs / 2, max_epochs * 3 / 4]
}

pub fn lr_at(epoch: usize, cfg: &TrainConfig) -> f64 {
    let decays = cfg.lr_decay_epochs.iter().filter(|&&e| e <= epoch).count();
    cfg.base_lr * cfg.lr_decay_factor.powi(decays as i32)
}

/// Mean negative log-likelihood of `labels` under `softmax(logits)`.
pub fn cross_entropy<T: Float>(logits: &Tensor<T>, labels: &[usize]) -> Result<T> {
    let mut tape = Tape::new();
    let z = tape.leaf(logits);
    let loss = tape.cross_entropy(z, labels)?;
    Ok(tape.value(loss)[0])
}

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

#[derive(Clone, Debug)]
pub struct AdamState<T> {
    pub m: Vec<Vec<T>>,
    pub v: Vec<Vec<T>>,
    pub t: u64,
}

impl<T: Float> AdamState<T> {
    pub fn new(params: &[NamedParam<T>]) -> Self {
        AdamState {
            m: params
                .iter()
                .map(|p| vec![T::zero(); p.tensor.numel()])
                .collect(),
            v: params
                .iter()
                .map(|p| vec![T::zero(); p.tensor.numel()])
                .collect(),
            t: 0,
        }
    }
}

/// One bias-corrected Adam update over every trainable parameter that has a gradient.
pub fn adam_step<T: Float>(
    params: &mut [NamedParam<T>],
    state: &mut AdamState<T>,
    lr: f64,
) -> Result<()> {
    if state.m.len() != params.len() {
        return Err(VimError::invalid(format!(
            "optimizer tracks {} tensors, model has {}",
            state.m.len(),
            params.len()
        )));
    }
    state.t += 1;
    let t = state.t as i32;
    let (b1, b2) = (T::of(ADAM_BETA1), T::of(ADAM_BETA2));
    let c1 = T::one() - T::of(ADAM_BETA1.powi(t));
    let c2 = T::one() - T::of(ADAM_BETA2.powi(t));
    let (lr, eps) = (T::of(lr), T::of(ADAM_EPS));
    for (i, p) in params.iter_mut().enumerate() {
        if !p.tensor.requires_grad {
            continue;
        }
        let shape = p.tensor.shape().to_vec();
        let (theta, grad) = p.tensor.split_grad_mut();
        let Some(grad) = grad else { continue };
        let (m, v) = (&mut state.m[i], &mut state.v[i]);
        if grad.len() != theta.len() || m.len() != theta.len() {
            return Err(VimError::Shape {
                op: "adam_step",
                lhs: shape,
                rhs: vec![grad.len()],
            });
        }
        for j in 0..theta.len() {
            let g = grad[j];
            m[j] = b1 * m[j] + (T::one() - b1) * g;
            v[j] = b2 * v[j] + (T::one() - b2) * g * g;
            let m_hat = m[j] / c1;
            let v_hat = v[j] / c2;
            theta[j] -= lr * m_hat / (v_hat.sqrt() + eps);
        }
    }
    Ok(())
}

/// Rescales all trainable gradients so their joint L2 norm is at most `max_norm`.
pub fn clip_grad_norm<T: Float>(params: &mut [NamedParam<T>], max_norm: f64) -> f64 {
    let norm = params
        .iter()
        .filter_map(|p| p.tensor.grad())
        .flat_map(|g| g.iter())
        .map(|&g| g.f64() * g.f64())
        .sum::<f64>()
        .sqrt();
    if norm > max_norm && norm > 0.0 {
        let s = T::of(max_norm / norm);
        for p in params.iter_mut() {
            if let (_, Some(g)) = p.tensor.split_grad_mut() {
                g.iter_mut().for_each(|x| *x *= s);
            }
        }
    }
    norm
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum EarlyStop {
    Continue,
    /// Index into the history of the best epoch.
    Stop {
        best: usize,
    },
}

/// Index of the best epoch: highest accuracy, ties going to the lower loss,
/// then to the earlier epoch.
pub fn best_epoch(history: &[(f64, f64)]) -> Option<usize> {
    let mut best: Option<usize> = None;
    for (i, &(acc, loss)) in history.iter().enumerate() {
        let better = match best {
            None => true,
            Some(b) => {
                let (ba, bl) = history[b];
                acc > ba || (acc == ba && loss < bl)
            }
        };
        if better {
            best = Some(i);
        }
    }
    best
}

/// `history` holds `(val_accuracy, val_loss)` per completed epoch.
pub fn early_stop_check(history: &[(f64, f64)], patience: usize) -> EarlyStop {
    match best_epoch(history) {
        Some(best) if history.len() - 1 - best >= patience => EarlyStop::Stop { best },
        _ => EarlyStop::Continue,
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    /// 1-based.
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub val_acc: f64,
    pub lr: f64,
    pub seconds: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    EarlyStop,
    MaxEpochs,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub epochs: Vec<EpochRecord>,
    /// 1-based epoch whose weights the returned model carries.
    pub best_epoch: usize,
    pub stop_reason: StopReason,
}

#[derive(Serialize)]
struct Summary {
    best_epoch: usize,
    stop_reason: StopReason,
}

impl TrainLog {
    pub fn train_losses(&self) -> Vec<f64> {
        self.epochs.iter().map(|e| e.train_loss).collect()
    }

    /// First 1-based epoch whose validation accuracy reaches `threshold`.
    pub fn epochs_to_reach(&self, threshold: f64) -> Option<usize> {
        self.epochs
            .iter()
            .find(|e| e.val_acc >= threshold)
            .map(|e| e.epoch)
    }

    /// One JSON object per epoch followed by a summary line.
    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for e in &self.epochs {
            out.push_str(&serde_json::to_string(e).expect("epoch record serializes"));
            out.push('\n');
        }
        let summary = Summary {
            best_epoch: self.best_epoch,
            stop_reason: self.stop_reason,
        };
        out.push_str(&serde_json::to_string(&summary).expect("summary serializes"));
        out.push('\n');
        out
    }
}

/// Logits `[M, K]` for a whole set, in set order.
pub fn predict_logits<T: Float>(
    model: &VimModel<T>,
    set: &PreparedSet<T>,
    batch_size: usize,
) -> Result<Tensor<T>> {
    let k = model.config().num_classes;
    let mut data = Vec::with_capacity(set.len() * k);
    for (images, _) in set.chunks(batch_size) {
        data.extend_from_slice(model.logits(&images)?.data());
    }
    Tensor::new(vec![set.len(), k], data)
}

/// `(mean cross-entropy, accuracy)` over a set.
pub fn evaluate_set<T: Float>(
    model: &VimModel<T>,
    set: &PreparedSet<T>,
    batch_size: usize,
) -> Result<(f64, f64)> {
    if set.is_empty() {
        return Err(VimError::invalid("cannot evaluate an empty set"));
    }
    let logits = predict_logits(model, set, batch_size)?;
    let k = model.config().num_classes;
    let mut loss = 0.0;
    let mut correct = 0usize;
    for (row, &label) in logits.data().chunks(k).zip(&set.labels) {
        let row: Vec<f64> = row.iter().map(|v| v.f64()).collect();
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
        loss += lse - row[label];
        if argmax(&row) == label {
            correct += 1;
        }
    }
    Ok((loss / set.len() as f64, correct as f64 / set.len() as f64))
}

/// First index of the maximum.
pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Forward, backward and one Adam update on a single batch. Returns the batch loss.
pub fn train_step<T: Float>(
    model: &mut VimModel<T>,
    adam: &mut AdamState<T>,
    images: &Tensor<T>,
    labels: &[usize],
    lr: f64,
    clip: Option<f64>,
) -> Result<f64> {
    let mut tape = Tape::new();
    let vars = model.bind(&mut tape);
    let logits = model.forward_batch(&mut tape, &vars, images)?;
    let loss = tape.cross_entropy(logits, labels)?;
    let value = tape.value(loss)[0].f64();
    if !value.is_finite() {
        return Err(VimError::NonFiniteLoss { epoch: 0, batch: 0 });
    }
    let grads = tape.backward(loss)?;
    model.zero_grads();
    model.accumulate_grads(&grads, &vars)?;
    if let Some(max) = clip {
        clip_grad_norm(model.params_mut(), max);
    }
    adam_step(model.params_mut(), adam, lr)?;
    Ok(value)
}

/// Trains `model` on `train`, selecting and restoring the best epoch by validation accuracy.
pub fn fit<T: Float>(
    mut model: VimModel<T>,
    train: &PreparedSet<T>,
    val: &PreparedSet<T>,
    cfg: &TrainConfig,
) -> Result<(VimModel<T>, TrainLog)> {
    cfg.validate()?;
    if train.is_empty() || val.is_empty() {
        return Err(VimError::invalid(
            "training and validation sets must be non-empty",
        ));
    }
    if let Some(path) = &cfg.init_checkpoint {
        checkpoint::load_into(&mut model, path, true)?;
    }
    let trainable = model.set_trainable(cfg.strategy);
    log::info!(
        "training {} of {} tensors ({} strategy)",
        trainable,
        model.params().len(),
        cfg.strategy
    );
    if let Some(dir) = &cfg.checkpoint_dir {
        std::fs::create_dir_all(dir).map_err(|e| VimError::io(dir, e))?;
    }

    let mut adam = AdamState::new(model.params());
    let mut epochs = Vec::new();
    let mut history = Vec::new();
    let mut best_weights: Option<Vec<Vec<T>>> = None;
    let mut stop_reason = StopReason::MaxEpochs;

    for epoch in 0..cfg.max_epochs {
        let start = Instant::now();
        let lr = lr_at(epoch, cfg);
        let mut loss_sum = 0.0;
        for (b, (images, labels)) in train.batches(cfg.batch_size, cfg.seed, epoch).enumerate() {
            let value = train_step(
                &mut model,
                &mut adam,
                &images,
                &labels,
                lr,
                cfg.clip_grad_norm,
            )
            .map_err(|e| match e {
                VimError::NonFiniteLoss { .. } => VimError::NonFiniteLoss {
                    epoch: epoch + 1,
                    batch: b,
                },
                other => other,
            })?;
            loss_sum += value * labels.len() as f64;
        }
        model.zero_grads();

        let (val_loss, val_acc) = evaluate_set(&model, val, cfg.batch_size)?;
        let record = EpochRecord {
            epoch: epoch + 1,
            train_loss: loss_sum / train.len() as f64,
            val_loss,
            val_acc,
            lr,
            seconds: start.elapsed().as_secs_f64(),
        };
        log::info!(
            "epoch {} train_loss {:.4} val_loss {:.4} val_acc {:.4} lr {:.2e}",
            record.epoch,
            record.train_loss,
            val_loss,
            val_acc,
            lr
        );
        epochs.push(record);
        history.push((val_acc, val_loss));

        if best_epoch(&history) == Some(epoch) {
            best_weights = Some(snapshot(&model));
            if let Some(dir) = &cfg.checkpoint_dir {
                checkpoint::save_checkpoint(&model, dir.join("best.vimc"))?;
            }
        }
        if let EarlyStop::Stop { best } = early_stop_check(&history, cfg.patience) {
            log::info!(
                "no improvement for {} epochs; best epoch {}",
                cfg.patience,
                best + 1
            );
            stop_reason = StopReason::EarlyStop;
            break;
        }
    }

    if let Some(dir) = &cfg.checkpoint_dir {
        checkpoint::save_checkpoint(&model, dir.join("last.vimc"))?;
    }
    let best = best_epoch(&history).expect("at least one epoch ran");
    if let Some(w) = best_weights {
        restore(&mut model, w);
    }
    Ok((
        model,
        TrainLog {
            epochs,
            best_epoch: best + 1,
            stop_reason,
        },
    ))
}

fn snapshot<T: Float>(model: &VimModel<T>) -> Vec<Vec<T>> {
    model
        .params()
        .iter()
        .map(|p| p.tensor.data().to_vec())
        .collect()
}

fn restore<T: Float>(model: &mut VimModel<T>, weights: Vec<Vec<T>>) {
    for (p, w) in model.params_mut().iter_mut().zip(weights) {
        p.tensor.data_mut().copy_from_slice(&w);
    }
}
