//! Accuracy, H-score, FLOPs accounting and evaluation reports.
//!
//! FLOPs count two operations per multiply-add. Per sample:
//!
//! | layer | count |
//! |---|---|
//! | convolution | `2·C2·H2·W2·C1·U·V` |
//! | batch norm (eval) | `2·C·H·W` |
//! | merge of K pathways | `(2K-1)·C·H·W` |
//! | fused bias, ReLU, global pool | `1` per element |
//! | linear head | `2·M·D` |

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::adapt::Ensemble;
use crate::data::LabeledSet;
use crate::error::{Error, Result};
use crate::nn::{ModelBundle, Unit};
use crate::seprep::{combine_heads, Criterion, WeightMode};
use crate::tensor::{ops, Real, Tensor};

/// Harmonic mean `2ST/(S+T)` of two percentages; 0 when both are 0.
pub fn h_score(s: f64, t: f64) -> Result<f64> {
    for v in [s, t] {
        if !(0.0..=100.0).contains(&v) {
            return Err(Error::InvalidArgument(format!("accuracy {v} outside [0, 100]")));
        }
    }
    if s + t == 0.0 {
        return Ok(0.0);
    }
    if s == t {
        return Ok(s);
    }
    Ok(2.0 * s * t / (s + t))
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Flops {
    pub extractor: u64,
    pub heads: u64,
    pub total: u64,
}

impl Flops {
    fn new(extractor: u64, heads: u64) -> Self {
        Flops {
            extractor,
            heads,
            total: extractor + heads,
        }
    }

    /// Cost of running several models side by side.
    pub fn sum(parts: impl IntoIterator<Item = Flops>) -> Flops {
        parts
            .into_iter()
            .fold(Flops::default(), |a, b| Flops::new(a.extractor + b.extractor, a.heads + b.heads))
    }
}

/// Per-sample FLOPs of a model on inputs of shape `[C, H, W]`.
pub fn flops_count<T: Real>(model: &ModelBundle<T>, input_shape: &[usize]) -> Result<Flops> {
    if input_shape != model.arch.input_shape() {
        return Err(Error::shape(
            "flops_count",
            format!("input {input_shape:?} vs architecture {:?}", model.arch.input_shape()),
        ));
    }
    let a = &model.arch;
    let mut extractor = 0u64;
    for (unit, s) in model.units.iter().zip(a.unit_shapes()) {
        let out = (s.out_channels * s.out_size * s.out_size) as u64;
        let conv = 2 * out * (s.in_channels * a.kernel * a.kernel) as u64;
        extractor += match unit {
            Unit::ConvBn(_) => conv + 2 * out,
            Unit::Sep(sep) => {
                let k = sep.k() as u64;
                k * (conv + 2 * out) + (2 * k - 1) * out
            }
            Unit::Fused(_) => conv + out,
        };
        extractor += out; // ReLU
    }
    let last = a.unit_shapes().last().map_or(0, |s| s.out_channels * s.out_size * s.out_size);
    extractor += last as u64;
    let heads = (model.num_heads() * 2 * a.classes * a.feature_dim()) as u64;
    Ok(Flops::new(extractor, heads))
}

/// Something that maps a batch of images to class probabilities `[N, C]`.
pub enum Predictor<'a, T: Real = f32> {
    /// Heads combined with uncertainty weights over the whole evaluated set.
    Model {
        model: &'a ModelBundle<T>,
        mode: WeightMode,
        criterion: Criterion,
    },
    /// Uniform average of member models.
    Ensemble(&'a Ensemble<T>),
}

impl<T: Real> Predictor<'_, T> {
    pub fn classes(&self) -> usize {
        match self {
            Predictor::Model { model, .. } => model.arch.classes,
            Predictor::Ensemble(e) => e.classes(),
        }
    }

    pub fn probabilities(&self, images: &Tensor<T>) -> Result<Tensor<T>> {
        match self {
            Predictor::Model { model, mode, criterion } => {
                let (_, logits) = model.eval_chunked(images, 256)?;
                Ok(combine_heads(&logits, mode, *criterion)?.0)
            }
            Predictor::Ensemble(e) => e.probabilities(images, 1.0),
        }
    }

    pub fn flops(&self) -> Result<Flops> {
        match self {
            Predictor::Model { model, .. } => flops_count(*model, &model.arch.input_shape()),
            Predictor::Ensemble(e) => Ok(Flops::sum(
                e.members
                    .iter()
                    .map(|m| flops_count(m, &m.arch.input_shape()))
                    .collect::<Result<Vec<_>>>()?,
            )),
        }
    }
}

/// Top-1 accuracy in percent; ties go to the lowest class index.
pub fn accuracy<T: Real>(probs: &Tensor<T>, labels: &[usize]) -> Result<f64> {
    let c = match probs.shape() {
        &[n, c] if n == labels.len() && n > 0 => c,
        s => return Err(Error::shape("accuracy", format!("{s:?} for {} labels", labels.len()))),
    };
    let hits = probs
        .data()
        .chunks(c)
        .zip(labels)
        .filter(|(row, &y)| ops::argmax(row) == y)
        .count();
    Ok(100.0 * hits as f64 / labels.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DomainAccuracy {
    pub domain: String,
    pub accuracy: f64,
}

/// One method's row: source accuracies, target accuracy, H-score and cost.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub method: String,
    pub source_accuracies: Vec<DomainAccuracy>,
    /// Unweighted mean of the source accuracies, `S`.
    pub source_mean: f64,
    pub target_domain: String,
    /// `T`.
    pub target_accuracy: f64,
    /// `H`.
    pub h_score: f64,
    pub flops: Flops,
    /// Seconds spent evaluating; only recorded on request so reports stay
    /// reproducible.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub wall_clock_secs: Option<f64>,
    pub fingerprint: String,
}

pub const CSV_HEADER: &str =
    "method,target_domain,source_domains,source_accuracies,S,T,H,flops_extractor,flops_heads,flops_total,wall_clock_secs,fingerprint";

impl EvalReport {
    pub fn csv_row(&self) -> String {
        let names: Vec<&str> = self.source_accuracies.iter().map(|d| d.domain.as_str()).collect();
        let accs: Vec<String> = self.source_accuracies.iter().map(|d| format!("{:.4}", d.accuracy)).collect();
        format!(
            "{},{},{},{},{:.4},{:.4},{:.4},{},{},{},{},{}",
            self.method,
            self.target_domain,
            names.join(";"),
            accs.join(";"),
            self.source_mean,
            self.target_accuracy,
            self.h_score,
            self.flops.extractor,
            self.flops.heads,
            self.flops.total,
            self.wall_clock_secs.map(|s| format!("{s:.3}")).unwrap_or_default(),
            self.fingerprint
        )
    }

    pub fn to_csv(reports: &[EvalReport]) -> String {
        let mut out = String::from(CSV_HEADER);
        out.push('\n');
        for r in reports {
            out.push_str(&r.csv_row());
            out.push('\n');
        }
        out
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

/// Hex SHA-256 of a value's JSON serialization.
pub fn fingerprint<S: Serialize + ?Sized>(value: &S) -> Result<String> {
    let digest = Sha256::digest(serde_json::to_vec(value)?);
    Ok(digest.iter().map(|b| format!("{b:02x}")).collect())
}

/// Evaluates a predictor on labeled source test sets and a target test set.
pub fn evaluate<T: Real>(
    method: &str,
    predictor: &Predictor<T>,
    sources: &[(&str, &LabeledSet)],
    target: (&str, &LabeledSet),
    fingerprint: &str,
    timing: bool,
) -> Result<EvalReport> {
    let started = std::time::Instant::now();
    let classes = predictor.classes();
    let score = |set: &LabeledSet| -> Result<f64> {
        if set.is_empty() {
            return Err(Error::Empty("test set"));
        }
        if set.classes != classes {
            return Err(Error::shape(
                "evaluate",
                format!("test set has {} classes, model {classes}", set.classes),
            ));
        }
        accuracy(&predictor.probabilities(&set.images.cast::<T>())?, &set.labels)
    };
    if sources.is_empty() {
        return Err(Error::Empty("source test sets"));
    }
    let source_accuracies = sources
        .iter()
        .map(|(name, set)| {
            Ok(DomainAccuracy {
                domain: name.to_string(),
                accuracy: score(set)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let source_mean = source_accuracies.iter().map(|d| d.accuracy).sum::<f64>() / sources.len() as f64;
    let target_accuracy = score(target.1)?;
    Ok(EvalReport {
        method: method.to_string(),
        source_accuracies,
        source_mean,
        target_domain: target.0.to_string(),
        target_accuracy,
        h_score: h_score(source_mean, target_accuracy)?,
        flops: predictor.flops()?,
        wall_clock_secs: timing.then(|| started.elapsed().as_secs_f64()),
        fingerprint: fingerprint.to_string(),
    })
}
