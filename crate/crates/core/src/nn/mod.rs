//! Network building blocks: Conv-BN pathways, classifier heads, and the
//! [`ModelBundle`] that holds a feature extractor plus one or more heads.

pub(crate) mod train;

pub use train::{fine_tune, sgd_step, sgd_update, smoothed_targets, train_source, TrainConfig};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::SplitMix64;
use crate::seprep::{FusedConv, SepUnit};
use crate::tensor::ops::{self, conv_out_extent, BN_EPS};
use crate::tensor::{BatchStats, Gradients, Real, Tape, Tensor, Var};

/// Momentum of the running BN statistics update.
pub const BN_MOMENTUM: f64 = 0.1;

/// Shape of a homogeneous Conv-BN-ReLU stack followed by global average
/// pooling and linear heads.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Arch {
    pub in_channels: usize,
    pub image_size: usize,
    pub widths: Vec<usize>,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    pub classes: usize,
}

impl Default for Arch {
    fn default() -> Self {
        Self::toy()
    }
}

/// Per-unit geometry derived from an [`Arch`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct UnitShape {
    pub in_channels: usize,
    pub out_channels: usize,
    pub in_size: usize,
    pub out_size: usize,
}

impl Arch {
    /// Three units 3→16→32→64, 3×3 kernels, stride 2, pad 1, on 3×16×16
    /// inputs with 10 classes.
    pub fn toy() -> Self {
        Arch {
            in_channels: 3,
            image_size: 16,
            widths: vec![16, 32, 64],
            kernel: 3,
            stride: 2,
            padding: 1,
            classes: 10,
        }
    }

    /// Parses `toy` or a comma-separated `key=value` list overriding toy
    /// defaults, e.g. `widths=8-16,classes=4`.
    pub fn parse(desc: &str) -> Result<Self> {
        let mut arch = Arch::toy();
        let desc = desc.trim();
        if desc.is_empty() || desc == "toy" {
            return Ok(arch);
        }
        for part in desc.split(',') {
            let (key, value) = part
                .split_once('=')
                .ok_or_else(|| Error::InvalidArgument(format!("bad arch field {part:?}")))?;
            let num = |v: &str| {
                v.parse::<usize>()
                    .map_err(|_| Error::InvalidArgument(format!("bad arch value {v:?} for {key}")))
            };
            match key.trim() {
                "in" => arch.in_channels = num(value)?,
                "size" => arch.image_size = num(value)?,
                "widths" => {
                    arch.widths = value.split('-').map(num).collect::<Result<_>>()?;
                }
                "k" | "kernel" => arch.kernel = num(value)?,
                "s" | "stride" => arch.stride = num(value)?,
                "p" | "padding" => arch.padding = num(value)?,
                "classes" => arch.classes = num(value)?,
                other => {
                    return Err(Error::InvalidArgument(format!("unknown arch field {other:?}")))
                }
            }
        }
        arch.validate()?;
        Ok(arch)
    }

    pub fn validate(&self) -> Result<()> {
        if self.widths.is_empty()
            || self.widths.contains(&0)
            || self.in_channels == 0
            || self.classes == 0
            || self.kernel == 0
            || self.stride == 0
        {
            return Err(Error::InvalidArgument(format!("degenerate architecture {self:?}")));
        }
        let mut size = self.image_size;
        for _ in &self.widths {
            size = conv_out_extent(size, self.kernel, self.stride, self.padding).ok_or_else(|| {
                Error::InvalidArgument(format!("architecture {self:?} shrinks to nothing"))
            })?;
        }
        Ok(())
    }

    pub fn feature_dim(&self) -> usize {
        *self.widths.last().expect("validated architecture has units")
    }

    pub fn input_shape(&self) -> [usize; 3] {
        [self.in_channels, self.image_size, self.image_size]
    }

    pub fn unit_shapes(&self) -> Vec<UnitShape> {
        let mut c = self.in_channels;
        let mut size = self.image_size;
        self.widths
            .iter()
            .map(|&w| {
                let out = conv_out_extent(size, self.kernel, self.stride, self.padding).unwrap_or(0);
                let s = UnitShape {
                    in_channels: c,
                    out_channels: w,
                    in_size: size,
                    out_size: out,
                };
                c = w;
                size = out;
                s
            })
            .collect()
    }
}

/// One convolution followed by batch norm. `run_sigma` stores
/// `sqrt(running_var + eps)`.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvBnPathway<T: Real = f32> {
    pub kernels: Tensor<T>,
    pub run_mu: Tensor<T>,
    pub run_sigma: Tensor<T>,
    pub gamma: Tensor<T>,
    pub beta: Tensor<T>,
    pub stride: usize,
    pub padding: usize,
}

impl<T: Real> ConvBnPathway<T> {
    /// Kaiming-uniform kernels, identity BN.
    pub fn init(shape: UnitShape, kernel: usize, stride: usize, padding: usize, rng: &mut SplitMix64) -> Self {
        let fan_in = shape.in_channels * kernel * kernel;
        let bound = (6.0 / fan_in as f64).sqrt();
        let n = shape.out_channels * fan_in;
        let data = (0..n).map(|_| T::from_f64(rng.uniform(-bound, bound))).collect();
        let c = shape.out_channels;
        ConvBnPathway {
            kernels: Tensor::new_unchecked(vec![c, shape.in_channels, kernel, kernel], data),
            run_mu: Tensor::zeros(&[c]),
            run_sigma: Tensor::full(&[c], T::one()),
            gamma: Tensor::full(&[c], T::one()),
            beta: Tensor::zeros(&[c]),
            stride,
            padding,
        }
    }

    pub fn out_channels(&self) -> usize {
        self.kernels.shape()[0]
    }

    pub fn validate(&self) -> Result<()> {
        let c = self.out_channels();
        for (t, name) in [
            (&self.run_mu, "run_mu"),
            (&self.run_sigma, "run_sigma"),
            (&self.gamma, "gamma"),
            (&self.beta, "beta"),
        ] {
            if t.shape() != [c] {
                return Err(Error::shape(
                    "conv_bn",
                    format!("{name} has shape {:?}, expected [{c}]", t.shape()),
                ));
            }
        }
        if self.run_sigma.data().iter().any(|&s| !(s > T::zero())) {
            return Err(Error::Precondition("running sigma must be positive".into()));
        }
        Ok(())
    }

    pub fn forward_eval(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let conv = ops::conv2d(x, &self.kernels, self.stride, self.padding)?;
        ops::batchnorm2d(&conv, &self.run_mu, &self.run_sigma, &self.gamma, &self.beta)
    }

    /// Conv then batch-statistics BN; `params` are the leaves for
    /// `[kernels, gamma, beta]`.
    pub(crate) fn forward_train(
        &self,
        tape: &Tape<T>,
        x: Var,
        params: &[Var],
    ) -> Result<(Var, BatchStats<T>)> {
        let conv = tape.conv2d(x, params[0], self.stride, self.padding)?;
        tape.batchnorm_train(conv, params[1], params[2])
    }

    pub(crate) fn update_running(&mut self, stats: &BatchStats<T>) {
        let m = T::from_f64(BN_MOMENTUM);
        let eps = T::from_f64(BN_EPS);
        let unbiased = stats.unbiased_var();
        for j in 0..self.out_channels() {
            let mu = &mut self.run_mu.data_mut()[j];
            *mu = (T::one() - m) * *mu + m * stats.mean[j];
            let sd = &mut self.run_sigma.data_mut()[j];
            let run_var = (*sd * *sd - eps).max(T::zero());
            let run_var = (T::one() - m) * run_var + m * unbiased[j];
            *sd = (run_var + eps).sqrt();
        }
    }

    fn params(&self) -> [&Tensor<T>; 3] {
        [&self.kernels, &self.gamma, &self.beta]
    }

    fn params_mut(&mut self) -> [&mut Tensor<T>; 3] {
        [&mut self.kernels, &mut self.gamma, &mut self.beta]
    }

    pub fn cast<U: Real>(&self) -> ConvBnPathway<U> {
        ConvBnPathway {
            kernels: self.kernels.cast(),
            run_mu: self.run_mu.cast(),
            run_sigma: self.run_sigma.cast(),
            gamma: self.gamma.cast(),
            beta: self.beta.cast(),
            stride: self.stride,
            padding: self.padding,
        }
    }
}

/// Linear classifier `h^k` on pooled features.
#[derive(Debug, Clone, PartialEq)]
pub struct Head<T: Real = f32> {
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
}

impl<T: Real> Head<T> {
    pub fn init(dim: usize, classes: usize, rng: &mut SplitMix64) -> Self {
        let bound = 1.0 / (dim as f64).sqrt();
        let data = (0..dim * classes)
            .map(|_| T::from_f64(rng.uniform(-bound, bound)))
            .collect();
        Head {
            weight: Tensor::new_unchecked(vec![classes, dim], data),
            bias: Tensor::zeros(&[classes]),
        }
    }

    pub fn forward(&self, features: &Tensor<T>) -> Result<Tensor<T>> {
        ops::linear(features, &self.weight, &self.bias)
    }

    pub fn cast<U: Real>(&self) -> Head<U> {
        Head {
            weight: self.weight.cast(),
            bias: self.bias.cast(),
        }
    }
}

/// One stage of the feature extractor; ReLU follows every unit.
#[derive(Debug, Clone, PartialEq)]
pub enum Unit<T: Real = f32> {
    ConvBn(ConvBnPathway<T>),
    Sep(SepUnit<T>),
    Fused(FusedConv<T>),
}

impl<T: Real> Unit<T> {
    /// Pre-activation output in eval mode.
    pub fn forward_eval(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        match self {
            Unit::ConvBn(p) => p.forward_eval(x),
            Unit::Sep(s) => s.forward_eval(x),
            Unit::Fused(f) => f.forward(x),
        }
    }

    fn param_count(&self) -> usize {
        match self {
            Unit::ConvBn(_) => 3,
            Unit::Sep(s) => 3 * s.pathways.len(),
            Unit::Fused(_) => 2,
        }
    }

    fn params(&self) -> Vec<&Tensor<T>> {
        match self {
            Unit::ConvBn(p) => p.params().to_vec(),
            Unit::Sep(s) => s.pathways.iter().flat_map(|p| p.params()).collect(),
            Unit::Fused(f) => vec![&f.kernels, &f.bias],
        }
    }

    fn params_mut(&mut self) -> Vec<&mut Tensor<T>> {
        match self {
            Unit::ConvBn(p) => p.params_mut().into_iter().collect(),
            Unit::Sep(s) => s.pathways.iter_mut().flat_map(|p| p.params_mut()).collect(),
            Unit::Fused(f) => vec![&mut f.kernels, &mut f.bias],
        }
    }

    fn kind(&self) -> Form {
        match self {
            Unit::ConvBn(_) => Form::Single,
            Unit::Sep(_) => Form::SepRep,
            Unit::Fused(_) => Form::Fused,
        }
    }

    pub fn cast<U: Real>(&self) -> Unit<U> {
        match self {
            Unit::ConvBn(p) => Unit::ConvBn(p.cast()),
            Unit::Sep(s) => Unit::Sep(s.cast()),
            Unit::Fused(f) => Unit::Fused(f.cast()),
        }
    }
}

/// Which stage of the assemble/adapt/fuse workflow a model is in.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Form {
    /// A plain source or student model, one pathway per unit.
    Single,
    /// Assembled multi-pathway network.
    SepRep,
    /// Reparameterized, one convolution with bias per unit.
    Fused,
}

impl std::fmt::Display for Form {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Form::Single => "single",
            Form::SepRep => "seprep",
            Form::Fused => "fused",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamGroup {
    Extractor,
    Head,
}

/// Feature extractor, global average pool and classifier heads.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelBundle<T: Real = f32> {
    pub arch: Arch,
    pub units: Vec<Unit<T>>,
    pub heads: Vec<Head<T>>,
}

/// Output of a training-mode forward pass recorded on a tape.
pub struct TrainPass {
    /// Logits of each head, `[N, C]`.
    pub logits: Vec<Var>,
    /// Pooled features, `[N, D]`.
    pub features: Var,
    params: Vec<Var>,
}

impl<T: Real> ModelBundle<T> {
    /// Freshly initialized single-pathway model.
    pub fn init(arch: &Arch, seed: u64) -> Result<Self> {
        arch.validate()?;
        let mut rng = SplitMix64::new(seed);
        let units = arch
            .unit_shapes()
            .into_iter()
            .map(|s| Unit::ConvBn(ConvBnPathway::init(s, arch.kernel, arch.stride, arch.padding, &mut rng)))
            .collect();
        let heads = vec![Head::init(arch.feature_dim(), arch.classes, &mut rng)];
        Ok(ModelBundle {
            arch: arch.clone(),
            units,
            heads,
        })
    }

    /// Replaces every head by a freshly initialized one.
    pub fn reset_heads(&mut self, seed: u64) {
        let mut rng = SplitMix64::new(seed);
        let (d, c) = (self.arch.feature_dim(), self.arch.classes);
        for h in &mut self.heads {
            *h = Head::init(d, c, &mut rng);
        }
    }

    pub fn form(&self) -> Form {
        self.units.first().map(Unit::kind).unwrap_or(Form::Single)
    }

    pub fn num_heads(&self) -> usize {
        self.heads.len()
    }

    /// Number of pathways per unit (1 for single and fused models).
    pub fn pathways(&self) -> usize {
        match self.units.first() {
            Some(Unit::Sep(s)) => s.pathways.len(),
            _ => 1,
        }
    }

    /// Checks that every unit and head agrees with the architecture.
    pub fn validate(&self) -> Result<()> {
        self.arch.validate()?;
        let shapes = self.arch.unit_shapes();
        if shapes.len() != self.units.len() {
            return Err(Error::shape(
                "model",
                format!("{} units for {} widths", self.units.len(), shapes.len()),
            ));
        }
        if self.heads.is_empty() {
            return Err(Error::shape("model", "no classifier heads"));
        }
        let form = self.form();
        let k = self.pathways();
        let kshape = |s: &UnitShape| vec![s.out_channels, s.in_channels, self.arch.kernel, self.arch.kernel];
        for (i, (unit, s)) in self.units.iter().zip(&shapes).enumerate() {
            if unit.kind() != form {
                return Err(Error::shape("model", format!("unit {i} is {} in a {form} model", unit.kind())));
            }
            let convs: Vec<(&Tensor<T>, usize, usize)> = match unit {
                Unit::ConvBn(p) => {
                    p.validate()?;
                    vec![(&p.kernels, p.stride, p.padding)]
                }
                Unit::Sep(sep) => {
                    sep.validate()?;
                    if sep.pathways.len() != k {
                        return Err(Error::shape(
                            "model",
                            format!("unit {i} has {} pathways, unit 0 has {k}", sep.pathways.len()),
                        ));
                    }
                    sep.pathways.iter().map(|p| (&p.kernels, p.stride, p.padding)).collect()
                }
                Unit::Fused(f) => {
                    if f.bias.shape() != [s.out_channels] {
                        return Err(Error::shape("model", format!("unit {i} bias {:?}", f.bias.shape())));
                    }
                    vec![(&f.kernels, f.stride, f.padding)]
                }
            };
            for (kern, stride, pad) in convs {
                if kern.shape() != kshape(s).as_slice() || stride != self.arch.stride || pad != self.arch.padding {
                    return Err(Error::shape(
                        "model",
                        format!("unit {i} kernels {:?} disagree with architecture", kern.shape()),
                    ));
                }
            }
        }
        for (k, h) in self.heads.iter().enumerate() {
            if h.weight.shape() != [self.arch.classes, self.arch.feature_dim()]
                || h.bias.shape() != [self.arch.classes]
            {
                return Err(Error::shape(
                    "model",
                    format!("head {k} weight {:?} bias {:?}", h.weight.shape(), h.bias.shape()),
                ));
            }
        }
        Ok(())
    }

    fn check_batch(&self, x: &Tensor<T>) -> Result<()> {
        let [c, h, w] = self.arch.input_shape();
        match x.shape() {
            &[_, xc, xh, xw] if xc == c && xh == h && xw == w => Ok(()),
            s => Err(Error::shape(
                "forward",
                format!("batch {s:?} does not match input [N, {c}, {h}, {w}]"),
            )),
        }
    }

    /// Pooled features `[N, D]` in eval mode.
    pub fn features_eval(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        self.check_batch(x)?;
        let mut h = x.clone();
        for unit in &self.units {
            h = ops::relu(&unit.forward_eval(&h)?);
        }
        ops::global_avg_pool(&h)
    }

    /// Logits of every head applied to pooled features, `[heads, N, C]`.
    pub fn heads_eval(&self, features: &Tensor<T>) -> Result<Tensor<T>> {
        let n = features.shape()[0];
        let mut data = Vec::with_capacity(self.heads.len() * n * self.arch.classes);
        for head in &self.heads {
            data.extend_from_slice(head.forward(features)?.data());
        }
        Ok(Tensor::new_unchecked(vec![self.heads.len(), n, self.arch.classes], data))
    }

    /// Eval-mode logits per head, `[heads, N, C]`. Pure.
    pub fn forward_eval(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        self.heads_eval(&self.features_eval(x)?)
    }

    /// Eval-mode features and logits over a large set, `chunk` rows at a time.
    pub fn eval_chunked(&self, x: &Tensor<T>, chunk: usize) -> Result<(Tensor<T>, Tensor<T>)> {
        let n = x.shape()[0];
        if n == 0 {
            return Err(Error::Empty("batch"));
        }
        let chunk = chunk.max(1);
        let mut feats = Vec::new();
        let mut start = 0;
        while start < n {
            let end = (start + chunk).min(n);
            feats.push(self.features_eval(&x.slice_rows(start, end)?)?);
            start = end;
        }
        let features = Tensor::concat_rows(&feats)?;
        let logits = self.heads_eval(&features)?;
        Ok((features, logits))
    }

    /// Training-mode forward: BN uses batch statistics and the running
    /// statistics of every pathway are updated.
    pub fn forward_train(&mut self, tape: &Tape<T>, x: &Tensor<T>) -> Result<TrainPass> {
        if self.form() == Form::Fused {
            return Err(Error::AlreadyFused);
        }
        self.check_batch(x)?;
        let params: Vec<Var> = self.params().into_iter().map(|(_, t)| tape.leaf(t.clone())).collect();
        let mut cursor = 0;
        let mut h = tape.leaf(x.clone());
        let mut stats = Vec::new();
        for unit in &self.units {
            let p = &params[cursor..cursor + unit.param_count()];
            cursor += unit.param_count();
            let pre = match unit {
                Unit::ConvBn(path) => {
                    let (out, s) = path.forward_train(tape, h, p)?;
                    stats.push(s);
                    out
                }
                Unit::Sep(sep) => {
                    let (out, s) = sep.forward_train(tape, h, p)?;
                    stats.extend(s);
                    out
                }
                Unit::Fused(_) => unreachable!("fused models rejected above"),
            };
            h = tape.relu(pre)?;
        }
        let features = tape.global_avg_pool(h)?;
        let mut logits = Vec::with_capacity(self.heads.len());
        for _ in &self.heads {
            logits.push(tape.linear(features, params[cursor], params[cursor + 1])?);
            cursor += 2;
        }

        let mut s = stats.iter();
        for unit in &mut self.units {
            match unit {
                Unit::ConvBn(p) => p.update_running(s.next().expect("stats per pathway")),
                Unit::Sep(sep) => {
                    for p in &mut sep.pathways {
                        p.update_running(s.next().expect("stats per pathway"));
                    }
                }
                Unit::Fused(_) => {}
            }
        }
        Ok(TrainPass {
            logits,
            features,
            params,
        })
    }

    /// Copies the gradients of a training pass into the parameters' `grad`.
    pub fn store_grads(&mut self, pass: &TrainPass, grads: &Gradients<T>) -> Result<()> {
        let params = self.params_mut();
        if params.len() != pass.params.len() {
            return Err(Error::shape("store_grads", "pass does not belong to this model"));
        }
        for ((_, t), &v) in params.into_iter().zip(&pass.params) {
            t.grad = grads.get(v).map(|g| g.data().to_vec());
        }
        Ok(())
    }

    /// Trainable tensors in a fixed order: units (pathway by pathway), then heads.
    pub fn params(&self) -> Vec<(ParamGroup, &Tensor<T>)> {
        let mut out: Vec<(ParamGroup, &Tensor<T>)> = self
            .units
            .iter()
            .flat_map(|u| u.params())
            .map(|t| (ParamGroup::Extractor, t))
            .collect();
        for h in &self.heads {
            out.push((ParamGroup::Head, &h.weight));
            out.push((ParamGroup::Head, &h.bias));
        }
        out
    }

    pub fn params_mut(&mut self) -> Vec<(ParamGroup, &mut Tensor<T>)> {
        let mut out: Vec<(ParamGroup, &mut Tensor<T>)> = self
            .units
            .iter_mut()
            .flat_map(|u| u.params_mut())
            .map(|t| (ParamGroup::Extractor, t))
            .collect();
        for h in &mut self.heads {
            out.push((ParamGroup::Head, &mut h.weight));
            out.push((ParamGroup::Head, &mut h.bias));
        }
        out
    }

    pub fn zero_grad(&mut self) {
        for (_, t) in self.params_mut() {
            t.zero_grad();
        }
    }

    pub fn cast<U: Real>(&self) -> ModelBundle<U> {
        ModelBundle {
            arch: self.arch.clone(),
            units: self.units.iter().map(Unit::cast).collect(),
            heads: self.heads.iter().map(Head::cast).collect(),
        }
    }
}
