//! Source-free adaptation of an assembled network on unlabeled target images,
//! plus the ensemble and distillation baselines it is compared against.
//!
//! Each head `k` gets its own loss `L_k`: information maximization on its
//! logits plus cross-entropy against centroid pseudo-labels. The head losses
//! are combined with `softmax(-M_k)` weights, where `M_k` is source model
//! `k`'s uncertainty on the target set.

mod baselines;

pub use baselines::{ensemble_baseline, kd_distill, Ensemble, KdConfig, Teacher};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{sgd_step, Form, ModelBundle};
use crate::nn::train::{cosine_lr, epoch_batches};
use crate::rng::SplitMix64;
use crate::seprep::{extract_pathway, model_uncertainty, softmax_weights, uncertainty_of_logits, Criterion, UncertaintyReport};
use crate::tensor::{ops, Real, Tape, Tensor};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdaptConfig {
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    /// Weight of the pseudo-label cross-entropy term.
    pub beta_pl: f64,
    /// Weight of the diversity (mean-prediction entropy) term of the IM loss.
    pub im_diversity_weight: f64,
    /// Pseudo-labels are recomputed every this many epochs.
    pub refresh_interval: usize,
    /// If set, the head-loss weights are re-estimated from the current model
    /// every this many epochs; otherwise they are fixed from the source models.
    pub weight_refresh: Option<usize>,
    pub criterion: Criterion,
    pub head_lr_mult: f64,
    pub seed: u64,
}

impl Default for AdaptConfig {
    fn default() -> Self {
        AdaptConfig {
            epochs: 15,
            lr: 0.02,
            batch_size: 64,
            beta_pl: 0.3,
            im_diversity_weight: 1.0,
            refresh_interval: 1,
            weight_refresh: None,
            criterion: Criterion::Entropy,
            head_lr_mult: 10.0,
            seed: 0,
        }
    }
}

impl AdaptConfig {
    pub fn validate(&self) -> Result<()> {
        let weights = [self.lr, self.beta_pl, self.im_diversity_weight];
        if weights.iter().any(|w| !(*w >= 0.0)) || !(self.head_lr_mult > 0.0) {
            return Err(Error::InvalidArgument(format!("negative weight in {self:?}")));
        }
        if self.refresh_interval == 0 || self.batch_size < 2 || self.weight_refresh == Some(0) {
            return Err(Error::InvalidArgument(format!("degenerate schedule in {self:?}")));
        }
        Ok(())
    }
}

/// An adapted model together with the head-loss weights used for it.
#[derive(Debug, Clone)]
pub struct Adapted<T: Real = f32> {
    pub model: ModelBundle<T>,
    /// Uncertainty scores and the softmax weights of the head losses.
    pub loss_weights: UncertaintyReport,
    /// Mean total loss of each epoch.
    pub epoch_losses: Vec<f64>,
}

/// Information-maximization objective of one batch of logits `[N, C]`:
/// mean per-sample entropy minus the entropy of the mean prediction.
pub fn im_loss<T: Real>(logits: &Tensor<T>) -> Result<f64> {
    Ok(ops::im_loss(logits, T::one())?.0.as_f64())
}

const TIE_TOLERANCE: f64 = 1e-9;

fn normalized(row: &[f64]) -> Option<Vec<f64>> {
    let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
    (norm > 0.0).then(|| row.iter().map(|v| v / norm).collect())
}

/// Nearest-centroid assignment by cosine distance. Near-ties go to the
/// centroid with more mass, then to the lowest class index.
fn assign(feats: &[Option<Vec<f64>>], centroids: &[Option<(Vec<f64>, f64)>], fallback: &[usize]) -> Vec<usize> {
    feats
        .iter()
        .zip(fallback)
        .map(|(f, &fb)| {
            let Some(f) = f else { return fb };
            let mut best: Option<(f64, f64, usize)> = None;
            for (c, cent) in centroids.iter().enumerate() {
                let Some((dir, mass)) = cent else { continue };
                let dist = 1.0 - f.iter().zip(dir).map(|(a, b)| a * b).sum::<f64>();
                best = match best {
                    None => Some((dist, *mass, c)),
                    Some((bd, bm, bc)) => {
                        if dist < bd - TIE_TOLERANCE || ((dist - bd).abs() <= TIE_TOLERANCE && *mass > bm) {
                            Some((dist, *mass, c))
                        } else {
                            Some((bd, bm, bc))
                        }
                    }
                };
            }
            best.map_or(fb, |b| b.2)
        })
        .collect()
}

fn centroids(feats: &[Option<Vec<f64>>], weights: &[Vec<f64>], classes: usize, dim: usize) -> Vec<Option<(Vec<f64>, f64)>> {
    (0..classes)
        .map(|c| {
            let mut acc = vec![0.0; dim];
            let mut mass = 0.0;
            for (f, w) in feats.iter().zip(weights) {
                if let Some(f) = f {
                    mass += w[c];
                    for (a, v) in acc.iter_mut().zip(f) {
                        *a += w[c] * v;
                    }
                }
            }
            if mass <= 1e-12 {
                return None;
            }
            acc.iter_mut().for_each(|a| *a /= mass);
            normalized(&acc).map(|dir| (dir, mass))
        })
        .collect()
}

/// Two-round centroid pseudo-labels from pooled features `[N, D]` and logits
/// `[N, C]`: prediction-weighted centroids, cosine assignment, hard-label
/// centroids, reassignment. All-zero features fall back to the logits'
/// argmax.
pub fn pseudo_labels<T: Real>(features: &Tensor<T>, logits: &Tensor<T>) -> Result<Vec<usize>> {
    let (n, dim) = match features.shape() {
        &[n, d] if n > 0 => (n, d),
        s => return Err(Error::shape("pseudo_labels", format!("features {s:?}"))),
    };
    let classes = match logits.shape() {
        &[m, c] if m == n => c,
        s => return Err(Error::shape("pseudo_labels", format!("logits {s:?} for {n} samples"))),
    };
    let probs = ops::softmax(logits)?;
    let probs: Vec<Vec<f64>> = probs.data().chunks(classes).map(|r| r.iter().map(|v| v.as_f64()).collect()).collect();
    let fallback: Vec<usize> = probs.iter().map(|p| ops::argmax(p)).collect();
    let feats: Vec<Option<Vec<f64>>> = features
        .data()
        .chunks(dim)
        .map(|r| normalized(&r.iter().map(|v| v.as_f64()).collect::<Vec<_>>()))
        .collect();

    let first = assign(&feats, &centroids(&feats, &probs, classes, dim), &fallback);
    let hard: Vec<Vec<f64>> = first
        .iter()
        .map(|&y| (0..classes).map(|c| if c == y { 1.0 } else { 0.0 }).collect())
        .collect();
    Ok(assign(&feats, &centroids(&feats, &hard, classes, dim), &fallback))
}

fn one_hot<T: Real>(labels: &[usize], classes: usize) -> Result<Tensor<T>> {
    crate::nn::smoothed_targets(labels, classes, 0.0)
}

/// Uncertainty of each embedded source model on the target set.
fn source_uncertainty<T: Real>(model: &ModelBundle<T>, target: &Tensor<T>, criterion: Criterion) -> Result<Vec<f64>> {
    (0..model.num_heads())
        .map(|k| model_uncertainty(&extract_pathway(model, k)?, 0, target, criterion))
        .collect()
}

fn current_uncertainty<T: Real>(model: &ModelBundle<T>, target: &Tensor<T>, criterion: Criterion) -> Result<Vec<f64>> {
    let (_, logits) = model.eval_chunked(target, 256)?;
    let (k, n, c) = (logits.shape()[0], logits.shape()[1], logits.shape()[2]);
    (0..k)
        .map(|h| uncertainty_of_logits(&logits.slice_rows(h, h + 1)?.reshape(&[n, c])?, criterion))
        .collect()
}

/// Adapts an assembled network to unlabeled target images.
///
/// Only the model and the target images are visible here; no source data or
/// target labels can reach the loss.
pub fn adapt<T: Real>(model: &ModelBundle<T>, target: &Tensor<T>, cfg: &AdaptConfig) -> Result<Adapted<T>> {
    match model.form() {
        Form::Fused => return Err(Error::AlreadyFused),
        Form::Single => {
            return Err(Error::Precondition(
                "adapt expects an assembled model; assemble single models first".into(),
            ))
        }
        Form::SepRep => {}
    }
    cfg.validate()?;
    model.validate()?;
    if target.rank() != 4 || target.shape()[0] == 0 {
        return Err(Error::Empty("target set"));
    }
    let n = target.shape()[0];
    let classes = model.arch.classes;
    let mut model = model.clone();
    let mut rng = SplitMix64::new(cfg.seed);

    let mut scores = source_uncertainty(&model, target, cfg.criterion)?;
    let mut weights = softmax_weights(&scores)?;
    let initial = UncertaintyReport {
        per_model: scores.clone(),
        weights: weights.clone(),
        criterion: cfg.criterion,
    };

    let steps_per_epoch = epoch_batches(n, cfg.batch_size, &mut rng.clone()).len();
    let total = cfg.epochs * steps_per_epoch;
    let mut step = 0;
    let mut labels: Vec<Vec<usize>> = Vec::new();
    let mut epoch_losses = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        if epoch % cfg.refresh_interval == 0 {
            let (features, logits) = model.eval_chunked(target, 256)?;
            labels = (0..model.num_heads())
                .map(|h| pseudo_labels(&features, &logits.slice_rows(h, h + 1)?.reshape(&[n, classes])?))
                .collect::<Result<_>>()?;
        }
        if let Some(every) = cfg.weight_refresh {
            if epoch > 0 && epoch % every == 0 {
                scores = current_uncertainty(&model, target, cfg.criterion)?;
                weights = softmax_weights(&scores)?;
            }
        }
        let loss_weights: Vec<T> = weights.iter().map(|&w| T::from_f64(w)).collect();
        let mut epoch_loss = 0.0;
        let batches = epoch_batches(n, cfg.batch_size, &mut rng);
        for batch in &batches {
            let x = target.gather_rows(batch)?;
            let tape = Tape::new();
            let pass = model.forward_train(&tape, &x)?;
            let mut head_losses = Vec::with_capacity(pass.logits.len());
            for (h, &logits) in pass.logits.iter().enumerate() {
                let im = tape.im_loss(logits, T::from_f64(cfg.im_diversity_weight))?;
                let pl: Vec<usize> = batch.iter().map(|&i| labels[h][i]).collect();
                let ce = tape.soft_cross_entropy(logits, &one_hot(&pl, classes)?)?;
                let ce = tape.scale(ce, T::from_f64(cfg.beta_pl))?;
                head_losses.push(tape.add(im, ce)?);
            }
            let loss = tape.weighted_sum(&head_losses, &loss_weights)?;
            let value = tape.value(loss).item().as_f64();
            if !value.is_finite() {
                return Err(Error::NonFinite { op: "adaptation loss" });
            }
            epoch_loss += value;
            let grads = tape.backward(loss)?;
            model.store_grads(&pass, &grads)?;
            sgd_step(&mut model, cosine_lr(cfg.lr, step, total), cfg.head_lr_mult)?;
            step += 1;
        }
        epoch_losses.push(epoch_loss / batches.len() as f64);
    }
    Ok(Adapted {
        model,
        loss_weights: initial,
        epoch_losses,
    })
}
