use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::train::{cosine_lr, epoch_batches};
use crate::nn::{sgd_step, Form, ModelBundle};
use crate::rng::SplitMix64;
use crate::tensor::{ops, Real, Tape, Tensor};

/// Uniform average of independently adapted models.
#[derive(Debug, Clone, PartialEq)]
pub struct Ensemble<T: Real = f32> {
    pub members: Vec<ModelBundle<T>>,
}

impl<T: Real> Ensemble<T> {
    pub fn new(members: Vec<ModelBundle<T>>) -> Result<Self> {
        let first = members
            .first()
            .ok_or_else(|| Error::InvalidArgument("an ensemble needs at least one member".into()))?;
        for (k, m) in members.iter().enumerate() {
            if m.arch.classes != first.arch.classes {
                return Err(Error::Heterogeneous(format!(
                    "member {k} predicts {} classes, member 0 {}",
                    m.arch.classes, first.arch.classes
                )));
            }
        }
        Ok(Ensemble { members })
    }

    pub fn classes(&self) -> usize {
        self.members[0].arch.classes
    }

    /// Averaged class probabilities of `softmax(logits / temperature)`.
    pub fn probabilities(&self, batch: &Tensor<T>, temperature: f64) -> Result<Tensor<T>> {
        let mut acc: Option<Vec<T>> = None;
        let w = T::one() / T::from_usize(self.members.len());
        for m in &self.members {
            let p = mean_head_probs(m, batch, temperature)?;
            match &mut acc {
                None => acc = Some(p.data().iter().map(|&v| w * v).collect()),
                Some(a) => a.iter_mut().zip(p.data()).for_each(|(s, &v)| *s = *s + w * v),
            }
        }
        let n = batch.shape()[0];
        Tensor::new(&[n, self.classes()], acc.expect("nonempty ensemble"))
    }
}

/// Mean over a model's heads of the tempered softmax.
fn mean_head_probs<T: Real>(model: &ModelBundle<T>, batch: &Tensor<T>, temperature: f64) -> Result<Tensor<T>> {
    let (_, logits) = model.eval_chunked(batch, 256)?;
    let (k, n, c) = (logits.shape()[0], logits.shape()[1], logits.shape()[2]);
    let inv = T::from_f64(1.0 / temperature);
    let w = T::one() / T::from_usize(k);
    let mut out = vec![T::zero(); n * c];
    for h in 0..k {
        let l = logits.slice_rows(h, h + 1)?.reshape(&[n, c])?.map(|v| v * inv);
        let p = ops::softmax(&l)?;
        out.iter_mut().zip(p.data()).for_each(|(s, &v)| *s = *s + w * v);
    }
    Tensor::new(&[n, c], out)
}

/// Class probabilities of the uniform ensemble `(1/K) Σ_k softmax(h_k(g_k(x)))`.
pub fn ensemble_baseline<T: Real>(members: &[ModelBundle<T>], batch: &Tensor<T>) -> Result<Tensor<T>> {
    if batch.rank() != 4 || batch.shape()[0] == 0 {
        return Err(Error::Empty("batch"));
    }
    Ensemble::new(members.to_vec())?.probabilities(batch, 1.0)
}

/// Source of soft targets for distillation.
pub trait Teacher<T: Real> {
    fn classes(&self) -> usize;
    /// Softened class probabilities `[N, C]`.
    fn soft_targets(&self, batch: &Tensor<T>, temperature: f64) -> Result<Tensor<T>>;
}

impl<T: Real> Teacher<T> for Ensemble<T> {
    fn classes(&self) -> usize {
        Ensemble::classes(self)
    }

    fn soft_targets(&self, batch: &Tensor<T>, temperature: f64) -> Result<Tensor<T>> {
        self.probabilities(batch, temperature)
    }
}

/// A multi-head model teaches with the uniform average of its heads.
impl<T: Real> Teacher<T> for ModelBundle<T> {
    fn classes(&self) -> usize {
        self.arch.classes
    }

    fn soft_targets(&self, batch: &Tensor<T>, temperature: f64) -> Result<Tensor<T>> {
        mean_head_probs(self, batch, temperature)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct KdConfig {
    pub temperature: f64,
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub head_lr_mult: f64,
    pub seed: u64,
}

impl Default for KdConfig {
    fn default() -> Self {
        KdConfig {
            temperature: 2.0,
            epochs: 10,
            lr: 0.01,
            batch_size: 64,
            head_lr_mult: 10.0,
            seed: 0,
        }
    }
}

/// Trains `student` to match the teacher's softened predictions on the
/// target images by minimizing `T² · KL(p_teacher^T ‖ p_student^T)`.
pub fn kd_distill<T: Real, D: Teacher<T> + ?Sized>(
    teacher: &D,
    student: &ModelBundle<T>,
    target: &Tensor<T>,
    cfg: &KdConfig,
) -> Result<ModelBundle<T>> {
    if !(cfg.temperature > 0.0) {
        return Err(Error::InvalidArgument(format!("temperature {} must be positive", cfg.temperature)));
    }
    if cfg.batch_size < 2 || !(cfg.lr >= 0.0) {
        return Err(Error::InvalidArgument(format!("degenerate schedule in {cfg:?}")));
    }
    if student.form() != Form::Single || student.num_heads() != 1 {
        return Err(Error::Precondition("the student must be a single-pathway, single-head model".into()));
    }
    if teacher.classes() != student.arch.classes {
        return Err(Error::Heterogeneous(format!(
            "teacher predicts {} classes, student {}",
            teacher.classes(),
            student.arch.classes
        )));
    }
    if target.rank() != 4 || target.shape()[0] == 0 {
        return Err(Error::Empty("target set"));
    }
    let n = target.shape()[0];
    let soft = teacher.soft_targets(target, cfg.temperature)?;
    let mut model = student.clone();
    let mut rng = SplitMix64::new(cfg.seed);
    let total = cfg.epochs * epoch_batches(n, cfg.batch_size, &mut rng.clone()).len();
    let inv_t = T::from_f64(1.0 / cfg.temperature);
    let t2 = T::from_f64(cfg.temperature * cfg.temperature);
    let mut step = 0;
    for _ in 0..cfg.epochs {
        for batch in epoch_batches(n, cfg.batch_size, &mut rng) {
            let x = target.gather_rows(&batch)?;
            let q = soft.gather_rows(&batch)?;
            let tape = Tape::new();
            let pass = model.forward_train(&tape, &x)?;
            let tempered = tape.scale(pass.logits[0], inv_t)?;
            // Cross-entropy differs from the KL divergence by the teacher's
            // entropy, a constant.
            let ce = tape.soft_cross_entropy(tempered, &q)?;
            let loss = tape.scale(ce, t2)?;
            if !tape.value(loss).item().as_f64().is_finite() {
                return Err(Error::NonFinite { op: "distillation loss" });
            }
            let grads = tape.backward(loss)?;
            model.store_grads(&pass, &grads)?;
            sgd_step(&mut model, cosine_lr(cfg.lr, step, total), cfg.head_lr_mult)?;
            step += 1;
        }
    }
    Ok(model)
}
