use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::ModelBundle;
use crate::tensor::{ops, Real, Tensor};

/// Per-sample uncertainty score; lower means more certain for every variant.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Criterion {
    /// `-Σ_c p_c ln p_c`
    #[default]
    Entropy,
    /// `-max_c p_c`
    Confidence,
    /// `-(p_(1) - p_(2))`, the negated top-2 gap.
    Margin,
}

impl Criterion {
    pub const ALL: [Criterion; 3] = [Criterion::Entropy, Criterion::Confidence, Criterion::Margin];

    fn score<T: Real>(self, log_probs: &[T]) -> f64 {
        match self {
            Criterion::Entropy => -log_probs
                .iter()
                .map(|&l| {
                    let l = l.as_f64();
                    l.exp() * l
                })
                .sum::<f64>(),
            Criterion::Confidence => -log_probs
                .iter()
                .map(|&l| l.as_f64().exp())
                .fold(0.0, f64::max),
            Criterion::Margin => {
                let (mut first, mut second) = (0.0f64, 0.0f64);
                for &l in log_probs {
                    let p = l.as_f64().exp();
                    if p > first {
                        second = first;
                        first = p;
                    } else if p > second {
                        second = p;
                    }
                }
                -(first - second)
            }
        }
    }
}

impl fmt::Display for Criterion {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Criterion::Entropy => "entropy",
            Criterion::Confidence => "confidence",
            Criterion::Margin => "margin",
        })
    }
}

impl FromStr for Criterion {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "entropy" => Ok(Criterion::Entropy),
            "confidence" => Ok(Criterion::Confidence),
            "margin" => Ok(Criterion::Margin),
            other => Err(Error::InvalidArgument(format!("unknown uncertainty criterion {other:?}"))),
        }
    }
}

/// How the head-combination weights of [`predict`] are obtained.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum WeightMode {
    /// One weight vector from the mean uncertainty over the whole batch.
    #[default]
    PerBatch,
    /// A weight vector per sample from that sample's uncertainty alone.
    PerSample,
    /// Caller-supplied weights.
    Fixed(Vec<f64>),
}

impl FromStr for WeightMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "per-batch" | "per_batch" => Ok(WeightMode::PerBatch),
            "per-sample" | "per_sample" => Ok(WeightMode::PerSample),
            other => {
                let w = other
                    .strip_prefix("fixed:")
                    .ok_or_else(|| Error::InvalidArgument(format!("unknown weight mode {other:?}")))?
                    .split(',')
                    .map(|v| {
                        v.trim()
                            .parse::<f64>()
                            .map_err(|_| Error::InvalidArgument(format!("bad weight {v:?}")))
                    })
                    .collect::<Result<Vec<_>>>()?;
                Ok(WeightMode::Fixed(w))
            }
        }
    }
}

/// Per-head uncertainty and the combination weights derived from it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UncertaintyReport {
    pub per_model: Vec<f64>,
    pub weights: Vec<f64>,
    pub criterion: Criterion,
}

/// `exp(-M_k) / Σ_i exp(-M_i)`, evaluated after subtracting the minimum score.
pub fn softmax_weights(scores: &[f64]) -> Result<Vec<f64>> {
    if scores.is_empty() {
        return Err(Error::InvalidArgument("softmax_weights needs at least one score".into()));
    }
    if let Some(s) = scores.iter().find(|s| !s.is_finite()) {
        return Err(Error::InvalidArgument(format!("non-finite uncertainty score {s}")));
    }
    let min = scores.iter().copied().fold(f64::INFINITY, f64::min);
    let e: Vec<f64> = scores.iter().map(|&m| (-(m - min)).exp()).collect();
    let total: f64 = e.iter().sum();
    Ok(e.into_iter().map(|v| v / total).collect())
}

fn per_sample_scores<T: Real>(logits: &Tensor<T>, criterion: Criterion) -> Result<Vec<f64>> {
    let lp = ops::log_softmax(logits)?;
    let c = logits.shape()[1];
    Ok(lp.data().chunks(c).map(|row| criterion.score(row)).collect())
}

/// Mean uncertainty of a batch of logits `[N, C]`.
pub fn uncertainty_of_logits<T: Real>(logits: &Tensor<T>, criterion: Criterion) -> Result<f64> {
    if logits.rank() != 2 || logits.shape()[0] == 0 {
        return Err(Error::Empty("data"));
    }
    let s = per_sample_scores(logits, criterion)?;
    Ok(s.iter().sum::<f64>() / s.len() as f64)
}

/// Expected uncertainty of head `head` of `model` over `data`.
pub fn model_uncertainty<T: Real>(
    model: &ModelBundle<T>,
    head: usize,
    data: &Tensor<T>,
    criterion: Criterion,
) -> Result<f64> {
    if data.rank() == 0 || data.shape()[0] == 0 {
        return Err(Error::Empty("data"));
    }
    if head >= model.num_heads() {
        return Err(Error::InvalidArgument(format!("head {head} of {}", model.num_heads())));
    }
    let (_, logits) = model.eval_chunked(data, 256)?;
    uncertainty_of_logits(&logits.slice_rows(head, head + 1)?.reshape(&logits.shape()[1..])?, criterion)
}

/// Uncertainty-weighted combination of the heads' class probabilities.
pub fn predict<T: Real>(
    model: &ModelBundle<T>,
    batch: &Tensor<T>,
    mode: &WeightMode,
    criterion: Criterion,
) -> Result<(Tensor<T>, UncertaintyReport)> {
    if batch.rank() != 4 || batch.shape()[0] == 0 {
        return Err(Error::Empty("batch"));
    }
    let logits = model.forward_eval(batch)?;
    combine_heads(&logits, mode, criterion)
}

/// [`predict`] on precomputed head logits `[K, N, C]`.
pub fn combine_heads<T: Real>(
    logits: &Tensor<T>,
    mode: &WeightMode,
    criterion: Criterion,
) -> Result<(Tensor<T>, UncertaintyReport)> {
    let (k, n, c) = match logits.shape() {
        &[k, n, c] if n > 0 => (k, n, c),
        s => return Err(Error::shape("predict", format!("head logits {s:?}"))),
    };
    let mut probs = Vec::with_capacity(k);
    let mut scores = Vec::with_capacity(k);
    for h in 0..k {
        let l = logits.slice_rows(h, h + 1)?.reshape(&[n, c])?;
        scores.push(per_sample_scores(&l, criterion)?);
        probs.push(ops::softmax(&l)?);
    }
    let per_model: Vec<f64> = scores.iter().map(|s| s.iter().sum::<f64>() / n as f64).collect();

    // alpha[i][k]: weight of head k for sample i.
    let alpha: Vec<Vec<f64>> = match mode {
        WeightMode::PerBatch => vec![softmax_weights(&per_model)?; n],
        WeightMode::PerSample => (0..n)
            .map(|i| softmax_weights(&scores.iter().map(|s| s[i]).collect::<Vec<_>>()))
            .collect::<Result<_>>()?,
        WeightMode::Fixed(w) => {
            let total: f64 = w.iter().sum();
            if w.len() != k || w.iter().any(|&v| !(v >= 0.0)) || (total - 1.0).abs() > 1e-6 {
                return Err(Error::InvalidArgument(format!(
                    "fixed weights {w:?} must be {k} nonnegative values summing to 1"
                )));
            }
            vec![w.clone(); n]
        }
    };

    let mut out = vec![T::zero(); n * c];
    for (i, a) in alpha.iter().enumerate() {
        for (h, p) in probs.iter().enumerate() {
            let w = T::from_f64(a[h]);
            for (o, &v) in out[i * c..(i + 1) * c].iter_mut().zip(&p.data()[i * c..(i + 1) * c]) {
                *o = *o + w * v;
            }
        }
    }
    let weights = (0..k)
        .map(|h| alpha.iter().map(|a| a[h]).sum::<f64>() / n as f64)
        .collect();
    Ok((
        Tensor::new(&[n, c], out)?,
        UncertaintyReport {
            per_model,
            weights,
            criterion,
        },
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn logits(k: usize, n: usize, c: usize, data: &[f64]) -> Tensor<f64> {
        Tensor::from_f64(&[k, n, c], data).unwrap()
    }

    #[test]
    fn entropy_examples() {
        let uniform = Tensor::<f64>::zeros(&[4, 10]);
        let m = uncertainty_of_logits(&uniform, Criterion::Entropy).unwrap();
        assert!((m - 10f64.ln()).abs() < 1e-12);

        let peaked = Tensor::<f64>::from_f64(&[1, 3], &[0.0, 800.0, 0.0]).unwrap();
        assert_eq!(uncertainty_of_logits(&peaked, Criterion::Entropy).unwrap(), 0.0);

        // p = (0.8, 0.2) from logits (ln 4, 0).
        let two = Tensor::<f64>::from_f64(&[1, 2], &[4f64.ln(), 0.0]).unwrap();
        let m = uncertainty_of_logits(&two, Criterion::Entropy).unwrap();
        let oracle = -(0.8 * 0.8f64.ln() + 0.2 * 0.2f64.ln());
        assert!((m - oracle).abs() < 1e-12);
        assert!((m - 0.500402).abs() < 1e-6);
    }

    #[test]
    fn confidence_and_margin() {
        let two = Tensor::<f64>::from_f64(&[1, 2], &[4f64.ln(), 0.0]).unwrap();
        assert!((uncertainty_of_logits(&two, Criterion::Confidence).unwrap() + 0.8).abs() < 1e-12);
        assert!((uncertainty_of_logits(&two, Criterion::Margin).unwrap() + 0.6).abs() < 1e-12);
        let empty = Tensor::<f64>::new_unchecked(vec![0, 2], vec![]);
        assert!(matches!(uncertainty_of_logits(&empty, Criterion::Entropy), Err(Error::Empty(_))));
    }

    #[test]
    fn softmax_weight_examples() {
        let w = softmax_weights(&[0.0, 0.0, 0.0]).unwrap();
        assert!(w.iter().all(|&v| (v - 1.0 / 3.0).abs() < 1e-15));
        let w = softmax_weights(&[0.0, 2f64.ln()]).unwrap();
        assert!((w[0] - 2.0 / 3.0).abs() < 1e-15 && (w[1] - 1.0 / 3.0).abs() < 1e-15);
        assert!(softmax_weights(&[0.0, f64::NAN]).is_err());
        assert!(softmax_weights(&[]).is_err());
    }

    #[test]
    fn identical_heads_ignore_weights() {
        let row = [0.3, -1.0, 2.0, 0.5, 0.1, 0.1];
        let l = logits(3, 2, 3, &[row, row, row].concat());
        let (p, _) = combine_heads(&l, &WeightMode::Fixed(vec![0.7, 0.2, 0.1]), Criterion::Entropy).unwrap();
        let single = ops::softmax(&Tensor::from_f64(&[2, 3], &row).unwrap()).unwrap();
        assert!(p.max_abs_diff(&single).unwrap() < 1e-15);
    }

    #[test]
    fn confident_head_dominates() {
        // Head 0 uniform, head 1 one-hot-ish.
        let l = logits(2, 2, 2, &[0.0, 0.0, 0.0, 0.0, 30.0, 0.0, 0.0, 30.0]);
        let (_, rep) = combine_heads(&l, &WeightMode::PerBatch, Criterion::Entropy).unwrap();
        assert!(rep.weights[1] > 0.5);
    }

    /// K = 2, N = 2, C = 2 worked by hand.
    #[test]
    fn hand_evaluated_two_heads() {
        let l = logits(2, 2, 2, &[0.0, 0.0, 0.0, 0.0, 4f64.ln(), 0.0, 0.0, 4f64.ln()]);
        let (p, rep) = combine_heads(&l, &WeightMode::PerBatch, Criterion::Entropy).unwrap();
        let h0 = 2f64.ln();
        let h1 = -(0.8 * 0.8f64.ln() + 0.2 * 0.2f64.ln());
        let a1 = (-h1).exp() / ((-h0).exp() + (-h1).exp());
        let a0 = 1.0 - a1;
        assert!((rep.per_model[0] - h0).abs() < 1e-12 && (rep.per_model[1] - h1).abs() < 1e-12);
        let expect = [a0 * 0.5 + a1 * 0.8, a0 * 0.5 + a1 * 0.2, a0 * 0.5 + a1 * 0.2, a0 * 0.5 + a1 * 0.8];
        for (got, want) in p.data().iter().zip(expect) {
            assert!((got - want).abs() < 1e-12);
        }
    }

    #[test]
    fn per_sample_with_one_sample_equals_per_batch() {
        let l = logits(3, 1, 4, &[0.1, 0.5, -0.2, 0.0, 2.0, 0.0, 0.0, 0.0, -1.0, 1.0, 3.0, 0.5]);
        let (a, ra) = combine_heads(&l, &WeightMode::PerBatch, Criterion::Margin).unwrap();
        let (b, rb) = combine_heads(&l, &WeightMode::PerSample, Criterion::Margin).unwrap();
        assert_eq!(a.data(), b.data());
        assert_eq!(ra, rb);
    }

    #[test]
    fn parse_modes() {
        assert_eq!("per-batch".parse::<WeightMode>().unwrap(), WeightMode::PerBatch);
        assert_eq!("per-sample".parse::<WeightMode>().unwrap(), WeightMode::PerSample);
        assert_eq!("fixed:0.5,0.5".parse::<WeightMode>().unwrap(), WeightMode::Fixed(vec![0.5, 0.5]));
        assert!("sometimes".parse::<WeightMode>().is_err());
        assert_eq!("margin".parse::<Criterion>().unwrap(), Criterion::Margin);
    }
}
