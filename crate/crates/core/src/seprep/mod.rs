//! Separation and reparameterization.
//!
//! [`assemble`] stacks K homogeneous source models into one network whose
//! units run the K Conv-BN pathways side by side and merge them with a
//! weighted sum. Because each pathway is linear in its input once BN uses
//! fixed statistics, [`fuse_unit`] folds all K pathways of a unit into a single
//! convolution with bias:
//!
//! ```text
//! F'_j = Σ_k (w_k γ_kj / σ_kj) F_kj
//! b_j  = Σ_k w_k (β_kj - μ_kj γ_kj / σ_kj)
//! ```
//!
//! The heads are kept as they are; [`predict`] combines them with weights
//! derived from each head's uncertainty on the batch.

mod weighting;

pub use weighting::{
    combine_heads, model_uncertainty, predict, softmax_weights, uncertainty_of_logits, Criterion, UncertaintyReport,
    WeightMode,
};

use crate::error::{Error, Result};
use crate::nn::{ConvBnPathway, Form, ModelBundle, Unit};
use crate::tensor::{ops, BatchStats, Real, Tape, Tensor, Var};

/// K Conv-BN pathways sharing one input, merged by a weighted sum.
#[derive(Debug, Clone, PartialEq)]
pub struct SepUnit<T: Real = f32> {
    pub pathways: Vec<ConvBnPathway<T>>,
    pub merge_weights: Vec<T>,
}

impl<T: Real> SepUnit<T> {
    /// Unit with uniform merge weights `1/K`.
    pub fn new(pathways: Vec<ConvBnPathway<T>>) -> Result<Self> {
        let k = pathways.len();
        let w = T::one() / T::from_usize(k.max(1));
        Self::with_weights(pathways, vec![w; k])
    }

    pub fn with_weights(pathways: Vec<ConvBnPathway<T>>, merge_weights: Vec<T>) -> Result<Self> {
        let unit = SepUnit {
            pathways,
            merge_weights,
        };
        unit.validate()?;
        Ok(unit)
    }

    pub fn k(&self) -> usize {
        self.pathways.len()
    }

    pub fn validate(&self) -> Result<()> {
        let first = self
            .pathways
            .first()
            .ok_or_else(|| Error::InvalidArgument("a unit needs at least one pathway".into()))?;
        if self.merge_weights.len() != self.pathways.len() {
            return Err(Error::shape(
                "sep_unit",
                format!("{} merge weights for {} pathways", self.merge_weights.len(), self.pathways.len()),
            ));
        }
        if self.merge_weights.iter().any(|w| !w.is_finite()) {
            return Err(Error::InvalidArgument("merge weights must be finite".into()));
        }
        for (k, p) in self.pathways.iter().enumerate() {
            p.validate()?;
            if p.kernels.shape() != first.kernels.shape()
                || p.stride != first.stride
                || p.padding != first.padding
            {
                return Err(Error::Heterogeneous(format!(
                    "pathway {k} has kernels {:?}, pathway 0 {:?}",
                    p.kernels.shape(),
                    first.kernels.shape()
                )));
            }
        }
        Ok(())
    }

    /// Eval-mode merged output `Σ_k w_k · BN_k(Conv_k(x))` with running statistics.
    pub fn forward_eval(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let mut acc: Option<Vec<T>> = None;
        let mut shape = Vec::new();
        for (p, &w) in self.pathways.iter().zip(&self.merge_weights) {
            let out = p.forward_eval(x)?;
            shape = out.shape().to_vec();
            match &mut acc {
                None => acc = Some(out.data().iter().map(|&v| w * v).collect()),
                Some(a) => {
                    for (s, &v) in a.iter_mut().zip(out.data()) {
                        *s = *s + w * v;
                    }
                }
            }
        }
        let data = acc.ok_or_else(|| Error::InvalidArgument("unit has no pathways".into()))?;
        Tensor::new_unchecked(shape, data).check_finite("merge_forward")
    }

    /// Training-mode merged output; each pathway's BN uses the statistics of
    /// its own convolution output. `params` holds `[kernels, gamma, beta]` per
    /// pathway.
    pub(crate) fn forward_train(
        &self,
        tape: &Tape<T>,
        x: Var,
        params: &[Var],
    ) -> Result<(Var, Vec<BatchStats<T>>)> {
        let mut outs = Vec::with_capacity(self.k());
        let mut stats = Vec::with_capacity(self.k());
        for (p, leaves) in self.pathways.iter().zip(params.chunks(3)) {
            let (o, s) = p.forward_train(tape, x, leaves)?;
            outs.push(o);
            stats.push(s);
        }
        Ok((tape.weighted_sum(&outs, &self.merge_weights)?, stats))
    }

    pub fn cast<U: Real>(&self) -> SepUnit<U> {
        SepUnit {
            pathways: self.pathways.iter().map(ConvBnPathway::cast).collect(),
            merge_weights: self.merge_weights.iter().map(|w| U::from_f64(w.as_f64())).collect(),
        }
    }
}

/// Convolution with per-channel bias produced by [`fuse_unit`].
#[derive(Debug, Clone, PartialEq)]
pub struct FusedConv<T: Real = f32> {
    pub kernels: Tensor<T>,
    pub bias: Tensor<T>,
    pub stride: usize,
    pub padding: usize,
}

impl<T: Real> FusedConv<T> {
    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let conv = ops::conv2d(x, &self.kernels, self.stride, self.padding)?;
        ops::add_channel_bias(&conv, &self.bias)
    }

    pub fn cast<U: Real>(&self) -> FusedConv<U> {
        FusedConv {
            kernels: self.kernels.cast(),
            bias: self.bias.cast(),
            stride: self.stride,
            padding: self.padding,
        }
    }
}

/// Weighted merge of the unit's pathways; eval mode uses running statistics.
pub fn merge_forward<T: Real>(unit: &SepUnit<T>, input: &Tensor<T>) -> Result<Tensor<T>> {
    unit.forward_eval(input)
}

/// Folds the K Conv-BN pathways of a unit into one convolution with bias.
pub fn fuse_unit<T: Real>(unit: &SepUnit<T>) -> Result<FusedConv<T>> {
    unit.validate()?;
    let first = &unit.pathways[0];
    let kshape = first.kernels.shape().to_vec();
    let c2 = kshape[0];
    let per_filter = kshape[1..].iter().product::<usize>();
    let mut kernels = vec![T::zero(); c2 * per_filter];
    let mut bias = vec![T::zero(); c2];
    for (p, &w) in unit.pathways.iter().zip(&unit.merge_weights) {
        for j in 0..c2 {
            let sigma = p.run_sigma.data()[j];
            if !(sigma > T::zero()) {
                return Err(Error::Precondition(format!("sigma of channel {j} is not positive")));
            }
            let factor = w * p.gamma.data()[j] / sigma;
            let src = &p.kernels.data()[j * per_filter..(j + 1) * per_filter];
            let dst = &mut kernels[j * per_filter..(j + 1) * per_filter];
            for (d, &s) in dst.iter_mut().zip(src) {
                *d = *d + factor * s;
            }
            bias[j] = bias[j] + w * (p.beta.data()[j] - p.run_mu.data()[j] * p.gamma.data()[j] / sigma);
        }
    }
    Ok(FusedConv {
        kernels: Tensor::new(&kshape, kernels)?.check_finite("fuse_unit")?,
        bias: Tensor::new(&[c2], bias)?.check_finite("fuse_unit")?,
        stride: first.stride,
        padding: first.padding,
    })
}

/// Replaces every unit by its fused convolution. Heads are kept unchanged.
/// Single-pathway models fold each BN into its convolution.
pub fn fuse_model<T: Real>(model: &ModelBundle<T>) -> Result<ModelBundle<T>> {
    if model.form() == Form::Fused {
        return Err(Error::AlreadyFused);
    }
    model.validate()?;
    let units = model
        .units
        .iter()
        .map(|u| match u {
            Unit::Sep(s) => fuse_unit(s).map(Unit::Fused),
            Unit::ConvBn(p) => fuse_unit(&SepUnit::with_weights(vec![p.clone()], vec![T::one()])?).map(Unit::Fused),
            Unit::Fused(_) => Err(Error::AlreadyFused),
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(ModelBundle {
        arch: model.arch.clone(),
        units,
        heads: model.heads.clone(),
    })
}

/// Stacks K single-pathway source models into one multi-pathway network.
///
/// Unit `i` of the result holds source `k`'s unit `i` as pathway `k`, the
/// heads are the K source heads, and merge weights are `1/K`.
pub fn assemble<T: Real>(sources: &[ModelBundle<T>]) -> Result<ModelBundle<T>> {
    let first = sources
        .first()
        .ok_or_else(|| Error::InvalidArgument("assemble needs at least one source model".into()))?;
    for (k, s) in sources.iter().enumerate() {
        if s.form() != Form::Single || s.num_heads() != 1 {
            return Err(Error::Precondition(format!(
                "source {k} is a {} model with {} heads; sources must be single-pathway, single-head",
                s.form(),
                s.num_heads()
            )));
        }
        if s.arch != first.arch {
            return Err(Error::Heterogeneous(format!(
                "source {k} architecture {:?} differs from source 0 {:?}",
                s.arch, first.arch
            )));
        }
        s.validate()?;
    }
    let units = (0..first.units.len())
        .map(|i| {
            let pathways = sources
                .iter()
                .map(|s| match &s.units[i] {
                    Unit::ConvBn(p) => p.clone(),
                    _ => unreachable!("single-form models hold Conv-BN units"),
                })
                .collect();
            SepUnit::new(pathways).map(Unit::Sep)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(ModelBundle {
        arch: first.arch.clone(),
        units,
        heads: sources.iter().map(|s| s.heads[0].clone()).collect(),
    })
}

/// The k-th source model embedded in an assembled network: pathway `k` of
/// every unit with head `k`.
pub fn extract_pathway<T: Real>(model: &ModelBundle<T>, k: usize) -> Result<ModelBundle<T>> {
    if model.form() != Form::SepRep {
        return Err(Error::Precondition(format!("expected a seprep model, got {}", model.form())));
    }
    if k >= model.num_heads() || k >= model.pathways() {
        return Err(Error::InvalidArgument(format!("pathway {k} of {}", model.pathways())));
    }
    let units = model
        .units
        .iter()
        .map(|u| match u {
            Unit::Sep(s) => Unit::ConvBn(s.pathways[k].clone()),
            _ => unreachable!("seprep models hold separated units"),
        })
        .collect();
    Ok(ModelBundle {
        arch: model.arch.clone(),
        units,
        heads: vec![model.heads[k].clone()],
    })
}

/// Overrides the merge weights of every unit.
pub fn set_merge_weights<T: Real>(model: &mut ModelBundle<T>, weights: &[f64]) -> Result<()> {
    for u in &mut model.units {
        match u {
            Unit::Sep(s) if s.k() == weights.len() => {
                s.merge_weights = weights.iter().map(|&w| T::from_f64(w)).collect();
                s.validate()?;
            }
            Unit::Sep(s) => {
                return Err(Error::shape(
                    "set_merge_weights",
                    format!("{} weights for {} pathways", weights.len(), s.k()),
                ))
            }
            _ => return Err(Error::Precondition("merge weights need a seprep model".into())),
        }
    }
    Ok(())
}
