use serde::{Deserialize, Serialize};

use super::{Arch, Form, ModelBundle, ParamGroup};
use crate::data::LabeledSet;
use crate::error::{Error, Result};
use crate::rng::SplitMix64;
use crate::tensor::{Real, Tape, Tensor};

/// Supervised source training schedule.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub label_smoothing: f64,
    pub head_lr_mult: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 20,
            lr: 0.2,
            batch_size: 32,
            label_smoothing: 0.1,
            head_lr_mult: 1.0,
            seed: 0,
        }
    }
}

/// `param -= lr * grad`, consuming the gradient.
pub fn sgd_update<T: Real>(param: &mut Tensor<T>, lr: T) -> Result<()> {
    let grad = param
        .grad
        .take()
        .ok_or_else(|| Error::MissingGradient(format!("tensor {:?}", param.shape())))?;
    for (p, g) in param.data_mut().iter_mut().zip(grad) {
        *p = *p - lr * g;
    }
    Ok(())
}

/// One SGD step over every trainable tensor; heads use `lr * head_lr_mult`.
/// BN running statistics are not parameters and are left alone.
pub fn sgd_step<T: Real>(model: &mut ModelBundle<T>, lr: f64, head_lr_mult: f64) -> Result<()> {
    if !(lr >= 0.0) || !(head_lr_mult > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "learning rate {lr} / head multiplier {head_lr_mult}"
        )));
    }
    let params = model.params_mut();
    if let Some(i) = params.iter().position(|(_, t)| t.grad.is_none()) {
        return Err(Error::MissingGradient(format!("parameter #{i}")));
    }
    for (group, t) in params {
        let rate = match group {
            ParamGroup::Extractor => lr,
            ParamGroup::Head => lr * head_lr_mult,
        };
        sgd_update(t, T::from_f64(rate))?;
    }
    Ok(())
}

/// `(1 - eps) * onehot + eps / C` targets.
pub fn smoothed_targets<T: Real>(labels: &[usize], classes: usize, smoothing: f64) -> Result<Tensor<T>> {
    let mut data = vec![T::from_f64(smoothing / classes as f64); labels.len() * classes];
    for (i, &y) in labels.iter().enumerate() {
        if y >= classes {
            return Err(Error::InvalidArgument(format!("label {y} outside [0, {classes})")));
        }
        data[i * classes + y] = data[i * classes + y] + T::from_f64(1.0 - smoothing);
    }
    Tensor::new(&[labels.len(), classes], data)
}

/// Cosine-decayed learning rate at `step` of `total`.
pub(crate) fn cosine_lr(base: f64, step: usize, total: usize) -> f64 {
    if total == 0 {
        return base;
    }
    0.5 * base * (1.0 + (std::f64::consts::PI * step as f64 / total as f64).cos())
}

/// Minibatch order for one epoch.
pub(crate) fn epoch_batches(n: usize, batch: usize, rng: &mut SplitMix64) -> Vec<Vec<usize>> {
    let perm = rng.permutation(n);
    perm.chunks(batch.max(1))
        // A single-sample batch has zero BN variance; fold it into the previous one.
        .fold(Vec::<Vec<usize>>::new(), |mut acc, c| {
            match acc.last_mut() {
                Some(last) if c.len() < 2 => last.extend_from_slice(c),
                _ => acc.push(c.to_vec()),
            }
            acc
        })
}

/// Trains a freshly initialized single-pathway model with label-smoothed
/// cross-entropy.
pub fn train_source<T: Real>(domain: &LabeledSet, arch: &Arch, cfg: &TrainConfig) -> Result<ModelBundle<T>> {
    let init = ModelBundle::init(arch, SplitMix64::new(cfg.seed).next_u64())?;
    fine_tune(&init, domain, cfg)
}

/// Continues supervised training of an existing single-pathway model.
pub fn fine_tune<T: Real>(model: &ModelBundle<T>, domain: &LabeledSet, cfg: &TrainConfig) -> Result<ModelBundle<T>> {
    if domain.is_empty() {
        return Err(Error::Empty("source dataset"));
    }
    let arch = &model.arch;
    if domain.classes != arch.classes {
        return Err(Error::shape(
            "train_source",
            format!("dataset has {} classes, architecture {}", domain.classes, arch.classes),
        ));
    }
    if model.form() != Form::Single || model.num_heads() != 1 {
        return Err(Error::Precondition("supervised training expects a single-pathway, single-head model".into()));
    }
    let mut rng = SplitMix64::new(cfg.seed);
    rng.next_u64();
    let mut model = model.clone();
    let n = domain.len();
    let steps_per_epoch = epoch_batches(n, cfg.batch_size, &mut rng.clone()).len();
    let total = cfg.epochs * steps_per_epoch;
    let mut step = 0;
    for _ in 0..cfg.epochs {
        for batch in epoch_batches(n, cfg.batch_size, &mut rng) {
            let x = domain.images.gather_rows(&batch)?.cast::<T>();
            let labels: Vec<usize> = batch.iter().map(|&i| domain.labels[i]).collect();
            let targets = smoothed_targets::<T>(&labels, arch.classes, cfg.label_smoothing)?;
            let tape = Tape::new();
            let pass = model.forward_train(&tape, &x)?;
            let loss = tape.soft_cross_entropy(pass.logits[0], &targets)?;
            if !tape.value(loss).item().as_f64().is_finite() {
                return Err(Error::NonFinite { op: "training loss" });
            }
            let grads = tape.backward(loss)?;
            model.store_grads(&pass, &grads)?;
            sgd_step(&mut model, cosine_lr(cfg.lr, step, total), cfg.head_lr_mult)?;
            step += 1;
        }
    }
    Ok(model)
}
